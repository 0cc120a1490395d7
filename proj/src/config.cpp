#include "flowsurrogate/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "flowsurrogate/error.hpp"

namespace flowsurrogate {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object into existing values and rejects any key
// that was not asked for.
class Section {
 public:
  Section(const json& parent, const std::string& name) : name_(name) {
    if (!parent.contains(name)) return;
    obj_ = &parent.at(name);
    if (!obj_->is_object()) throw ConfigError("config section '" + name + "' must be an object");
  }
  explicit Section(const json& root) : name_("<root>"), obj_(&root) {}

  template <typename T>
  Section& get(const std::string& key, T& value) {
    known_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return *this;
    try {
      value = obj_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config " + name_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  Section& skip(const std::string& key) {
    known_.insert(key);
    return *this;
  }

  void finish() const {
    if (obj_ == nullptr) return;
    for (const auto& item : obj_->items()) {
      if (!known_.contains(item.key())) throw ConfigError("unknown config key " + name_ + "." + item.key());
    }
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::set<std::string> known_;
};

std::vector<double> to_seconds(const std::vector<double>& days) {
  std::vector<double> s;
  for (double d : days) s.push_back(d * kSecondsPerDay);
  return s;
}

void require_increasing(const std::vector<double>& v, const std::string& what) {
  if (v.empty()) throw ConfigError(what + " must not be empty");
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (!(v[i] > v[i - 1])) throw ConfigError(what + " must be strictly increasing");
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream, std::uint64_t index) {
  // FNV-1a over the stream name, then splitmix64 finalization.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : stream) h = (h ^ c) * 1099511628211ull;
  std::uint64_t z = seed ^ h ^ (index * 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.preset = "desk";
  c.finalize();
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.preset = "paper";
  c.grid = GridSpec{50, 50, 10.0};
  c.simulator.injection_rate = 1.5e-5;
  c.network = NetworkConfig::paper();
  c.data.train_samples = 400;
  c.data.test_samples = 500;
  c.training.epochs = 200;
  c.training.batch_size = 100;
  c.uq.realizations = 20000;
  c.uq.probes = {{5, 12}, {15, 12}, {25, 12}, {35, 12}};
  c.finalize();
  return c;
}

RunConfig RunConfig::preset_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

SimConfig RunConfig::simulator_for(const std::vector<double>& days) const {
  SimConfig s = simulator;
  s.grid = grid;
  s.snapshot_times = to_seconds(days);
  return s;
}

void RunConfig::finalize() {
  simulator.grid = grid;
  network.height = grid.height;
  network.width = grid.width;
  require_increasing(data.train_times_days, "data.train_times_days");
  require_increasing(data.test_times_days, "data.test_times_days");
  require_increasing(uq.times_days, "uq.times_days");
  const double last = std::max({data.train_times_days.back(), data.test_times_days.back(), uq.times_days.back()});
  if (last * kSecondsPerDay > simulator.total_time) {
    throw ConfigError("requested times run past simulator.total_days");
  }
  if (!(data.time_scale_days > 0.0)) throw ConfigError("data.time_scale_days must be positive");
  if (data.train_samples == 0) throw ConfigError("data.train_samples must be positive");
  if (data.samples_per_shard == 0) throw ConfigError("data.samples_per_shard must be positive");
  if (!(grf.variance >= 0.0) || !(grf.correlation_length > 0.0)) {
    throw ConfigError("grf variance must be non-negative and correlation length positive");
  }
  for (const auto& p : uq.probes) {
    if (p.row >= grid.height || p.col >= grid.width) throw ConfigError("uq probe outside the grid");
  }
  simulator_for(data.test_times_days).validate();
  training.validate();
  architecture_stages(network);
}

std::string RunConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["threads"] = threads;
  j["deterministic"] = deterministic;
  j["out"] = out.string();
  j["grid"] = {{"height", grid.height}, {"width", grid.width}, {"cell_size", grid.cell_size}};
  j["grf"] = {{"mean", grf.mean}, {"variance", grf.variance}, {"correlation_length", grf.correlation_length}};
  const auto& s = simulator;
  j["simulator"] = {{"porosity", s.porosity},
                    {"thickness", s.thickness},
                    {"injection_rate", s.injection_rate},
                    {"right_boundary_pressure", s.right_boundary_pressure},
                    {"total_days", s.total_time / kSecondsPerDay},
                    {"corey_exponent", s.corey_exponent},
                    {"mobility_ratio", s.mobility_ratio},
                    {"resident_viscosity", s.resident_viscosity},
                    {"residual_resident", s.residual_resident},
                    {"residual_injected", s.residual_injected},
                    {"cfl_safety", s.cfl_safety},
                    {"cg_tolerance", s.cg_tolerance},
                    {"cg_max_iterations", s.cg_max_iterations},
                    {"pressure_scale", s.pressure_scaling.scale},
                    {"pressure_offset", s.pressure_scaling.offset}};
  j["data"] = {{"train_samples", data.train_samples},
               {"test_samples", data.test_samples},
               {"train_times_days", data.train_times_days},
               {"test_times_days", data.test_times_days},
               {"time_scale_days", data.time_scale_days},
               {"samples_per_shard", data.samples_per_shard}};
  j["network"] = {{"in_channels", network.in_channels},
                  {"out_channels", network.out_channels},
                  {"initial_features", network.initial_features},
                  {"growth_rate", network.growth_rate},
                  {"block_layers", network.block_layers}};
  const auto& t = training;
  j["training"] = {{"mode", to_string(t.mode)},
                   {"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"learning_rate", t.learning_rate},
                   {"weight_decay", t.weight_decay},
                   {"bce_weight", t.bce_weight},
                   {"beta1", t.beta1},
                   {"beta2", t.beta2},
                   {"plateau_factor", t.plateau_factor},
                   {"plateau_patience", t.plateau_patience},
                   {"plateau_min_delta", t.plateau_min_delta},
                   {"min_learning_rate_ratio", t.min_learning_rate_ratio},
                   {"test_interval", t.test_interval}};
  json probes = json::array();
  for (const auto& p : uq.probes) probes.push_back({p.row, p.col});
  j["uq"] = {{"realizations", uq.realizations}, {"times_days", uq.times_days}, {"probes", probes}};
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text, RunConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::string out = c.out.string();
  Section(j)
      .get("preset", c.preset)
      .get("seed", c.seed)
      .get("threads", c.threads)
      .get("deterministic", c.deterministic)
      .get("out", out)
      .skip("grid")
      .skip("grf")
      .skip("simulator")
      .skip("data")
      .skip("network")
      .skip("training")
      .skip("uq")
      .finish();
  c.out = out;
  Section(j, "grid").get("height", c.grid.height).get("width", c.grid.width).get("cell_size", c.grid.cell_size).finish();
  Section(j, "grf")
      .get("mean", c.grf.mean)
      .get("variance", c.grf.variance)
      .get("correlation_length", c.grf.correlation_length)
      .finish();
  auto& s = c.simulator;
  double total_days = s.total_time / kSecondsPerDay;
  Section(j, "simulator")
      .get("porosity", s.porosity)
      .get("thickness", s.thickness)
      .get("injection_rate", s.injection_rate)
      .get("right_boundary_pressure", s.right_boundary_pressure)
      .get("total_days", total_days)
      .get("corey_exponent", s.corey_exponent)
      .get("mobility_ratio", s.mobility_ratio)
      .get("resident_viscosity", s.resident_viscosity)
      .get("residual_resident", s.residual_resident)
      .get("residual_injected", s.residual_injected)
      .get("cfl_safety", s.cfl_safety)
      .get("cg_tolerance", s.cg_tolerance)
      .get("cg_max_iterations", s.cg_max_iterations)
      .get("pressure_scale", s.pressure_scaling.scale)
      .get("pressure_offset", s.pressure_scaling.offset)
      .finish();
  s.total_time = total_days * kSecondsPerDay;
  Section(j, "data")
      .get("train_samples", c.data.train_samples)
      .get("test_samples", c.data.test_samples)
      .get("train_times_days", c.data.train_times_days)
      .get("test_times_days", c.data.test_times_days)
      .get("time_scale_days", c.data.time_scale_days)
      .get("samples_per_shard", c.data.samples_per_shard)
      .finish();
  Section(j, "network")
      .get("in_channels", c.network.in_channels)
      .get("out_channels", c.network.out_channels)
      .get("initial_features", c.network.initial_features)
      .get("growth_rate", c.network.growth_rate)
      .get("block_layers", c.network.block_layers)
      .finish();
  auto& t = c.training;
  std::string mode = to_string(t.mode);
  Section(j, "training")
      .get("mode", mode)
      .get("epochs", t.epochs)
      .get("batch_size", t.batch_size)
      .get("learning_rate", t.learning_rate)
      .get("weight_decay", t.weight_decay)
      .get("bce_weight", t.bce_weight)
      .get("beta1", t.beta1)
      .get("beta2", t.beta2)
      .get("plateau_factor", t.plateau_factor)
      .get("plateau_patience", t.plateau_patience)
      .get("plateau_min_delta", t.plateau_min_delta)
      .get("min_learning_rate_ratio", t.min_learning_rate_ratio)
      .get("test_interval", t.test_interval)
      .finish();
  t.mode = parse_train_mode(mode);
  std::vector<std::vector<std::size_t>> probes;
  for (const auto& p : c.uq.probes) probes.push_back({p.row, p.col});
  Section(j, "uq").get("realizations", c.uq.realizations).get("times_days", c.uq.times_days).get("probes", probes).finish();
  c.uq.probes.clear();
  for (const auto& p : probes) {
    if (p.size() != 2) throw ConfigError("uq.probes entries must be [row, col]");
    c.uq.probes.push_back({p[0], p[1]});
  }
  c.finalize();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), std::move(base));
}

}  // namespace flowsurrogate
