#include "flowsurrogate/dataset.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

#include "flowsurrogate/error.hpp"
#include "flowsurrogate/parallel.hpp"

namespace flowsurrogate {

using nlohmann::json;

namespace {

std::uint32_t swap_bytes(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json channels_json(const std::vector<ChannelInfo>& channels) {
  json a = json::array();
  for (const auto& c : channels) a.push_back({{"name", c.name}, {"units", c.units}});
  return a;
}

std::vector<ChannelInfo> channels_from(const json& a) {
  std::vector<ChannelInfo> out;
  for (const auto& c : a) out.push_back({c.at("name").get<std::string>(), c.at("units").get<std::string>()});
  return out;
}

struct SampleResult {
  std::vector<float> input;
  std::vector<float> output;
};

}  // namespace

std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t file_crc32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return crc32_of(bytes);
}

std::string config_hash(const RunConfig& config) {
  // where the run writes and how many threads it uses do not change the data
  RunConfig canonical = config;
  canonical.out.clear();
  canonical.threads = 1;
  const std::string text = canonical.to_json();
  return hex32(crc32_of({reinterpret_cast<const unsigned char*>(text.data()), text.size()}));
}

void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<std::uint32_t> words(values.size());
  std::memcpy(words.data(), values.data(), values.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = swap_bytes(w);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw DataError("cannot write " + path.string());
}

std::vector<float> read_f32(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot read " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % 4 != 0) throw DataError(path.string() + " is not a whole number of float32 values");
  std::vector<std::uint32_t> words(size / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(size));
  if (!in) throw DataError("short read on " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = swap_bytes(w);
  }
  std::vector<float> values(words.size());
  std::memcpy(values.data(), words.data(), size);
  return values;
}

float network_time(double days, double time_scale_days) { return static_cast<float>(days / time_scale_days); }

// ---------------------------------------------------------------- manifest

std::string DatasetManifest::to_json() const {
  json j;
  j["format"] = kDatasetFormat;
  j["version"] = version;
  j["split"] = split;
  j["grid"] = {{"height", grid.height}, {"width", grid.width}, {"cell_size", grid.cell_size}};
  j["input_channels"] = channels_json(input_channels);
  j["output_channels"] = channels_json(output_channels);
  j["samples"] = samples;
  j["times_days"] = times_days;
  j["network_times"] = network_times;
  j["normalization"] = {{"pressure_scale", pressure_scaling.scale},
                        {"pressure_offset", pressure_scaling.offset},
                        {"saturation_min", saturation_min},
                        {"saturation_max", saturation_max},
                        {"k_ref", k_ref}};
  j["sample_seeds"] = sample_seeds;
  j["failures"] = failures;
  j["config_hash"] = config_hash;
  json shards_json = json::array();
  for (const auto& s : shards) {
    shards_json.push_back({{"file", s.file},
                           {"kind", s.kind},
                           {"first_sample", s.first_sample},
                           {"samples", s.samples},
                           {"byte_offset", s.byte_offset},
                           {"bytes", s.bytes},
                           {"crc32", hex32(s.crc32)}});
  }
  j["shards"] = shards_json;
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format").get<std::string>() != kDatasetFormat) throw DataError("not a dataset manifest");
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetVersion) throw DataError("unsupported dataset version " + std::to_string(m.version));
    m.split = j.at("split").get<std::string>();
    const auto& g = j.at("grid");
    m.grid = {g.at("height").get<std::size_t>(), g.at("width").get<std::size_t>(), g.at("cell_size").get<double>()};
    m.input_channels = channels_from(j.at("input_channels"));
    m.output_channels = channels_from(j.at("output_channels"));
    m.samples = j.at("samples").get<std::size_t>();
    m.times_days = j.at("times_days").get<std::vector<double>>();
    m.network_times = j.at("network_times").get<std::vector<double>>();
    const auto& n = j.at("normalization");
    m.pressure_scaling = {n.at("pressure_scale").get<double>(), n.at("pressure_offset").get<double>()};
    m.saturation_min = n.at("saturation_min").get<double>();
    m.saturation_max = n.at("saturation_max").get<double>();
    m.k_ref = n.at("k_ref").get<double>();
    m.sample_seeds = j.at("sample_seeds").get<std::vector<std::uint64_t>>();
    m.failures = j.at("failures").get<std::vector<std::string>>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& s : j.at("shards")) {
      ShardInfo info;
      info.file = s.at("file").get<std::string>();
      info.kind = s.at("kind").get<std::string>();
      info.first_sample = s.at("first_sample").get<std::size_t>();
      info.samples = s.at("samples").get<std::size_t>();
      info.byte_offset = s.at("byte_offset").get<std::uint64_t>();
      info.bytes = s.at("bytes").get<std::uint64_t>();
      info.crc32 = static_cast<std::uint32_t>(std::stoul(s.at("crc32").get<std::string>(), nullptr, 16));
      m.shards.push_back(info);
    }
    if (m.network_times.size() != m.times_days.size()) throw DataError("manifest time lists differ in length");
    if (m.sample_seeds.size() != m.samples) throw DataError("manifest seed list does not match sample count");
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------- generation

DatasetManifest generate_dataset(const RunConfig& config, const std::string& split, const std::filesystem::path& dir) {
  if (split != "train" && split != "test") throw ConfigError("split must be train or test");
  const auto& days = split == "train" ? config.data.train_times_days : config.data.test_times_days;
  const std::size_t n = split == "train" ? config.data.train_samples : config.data.test_samples;
  const SimConfig sim = config.simulator_for(days);
  const GrfSampler sampler(config.grid, config.grf);
  const std::size_t h = config.grid.height, w = config.grid.width, plane = h * w;

  std::vector<std::optional<SampleResult>> results(n);
  std::vector<std::string> errors(n);
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(config.seed, "field-" + split, i);
  parallel_for(n, config.threads, [&](std::size_t i) {
    try {
      const PermeabilityField field = sampler.sample(seeds[i]);
      const auto snapshots = simulate(field, sim);
      SampleResult r;
      r.input.assign(field.log_values.values().begin(), field.log_values.values().end());
      r.output.reserve(days.size() * kOutputChannels * plane);
      for (const auto& s : snapshots) {
        for (const Tensor<double>* f : {&s.rescaled_pressure, &s.saturation, &s.mask}) {
          for (double v : f->values()) r.output.push_back(static_cast<float>(v));
        }
      }
      results[i] = std::move(r);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });

  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.split = split;
  m.grid = config.grid;
  m.input_channels = {{"log_permeability", "ln(k / k_ref)"}};
  m.output_channels = {{"pressure_rescaled", "P / scale - offset"}, {"saturation", "-"}, {"front_mask", "0/1"}};
  m.times_days = days;
  for (double d : days) m.network_times.push_back(network_time(d, config.data.time_scale_days));
  m.pressure_scaling = config.simulator.pressure_scaling;
  m.saturation_max = 1.0 - config.simulator.residual_resident;
  m.k_ref = kReferencePermeability;
  m.config_hash = config_hash(config);

  std::vector<std::size_t> done;
  for (std::size_t i = 0; i < n; ++i) {
    if (results[i]) {
      done.push_back(i);
      m.sample_seeds.push_back(seeds[i]);
    } else {
      m.failures.push_back("sample " + std::to_string(i) + " (seed " + std::to_string(seeds[i]) + "): " + errors[i]);
    }
  }
  m.samples = done.size();

  const std::size_t per_shard = config.data.samples_per_shard;
  std::uint64_t in_offset = 0, out_offset = 0;
  for (std::size_t first = 0, k = 0; first < done.size(); first += per_shard, ++k) {
    const std::size_t count = std::min(per_shard, done.size() - first);
    std::vector<float> inputs, outputs;
    for (std::size_t s = first; s < first + count; ++s) {
      const auto& r = *results[done[s]];
      inputs.insert(inputs.end(), r.input.begin(), r.input.end());
      outputs.insert(outputs.end(), r.output.begin(), r.output.end());
    }
    char name[32];
    for (const char* kind : {"inputs", "outputs"}) {
      const auto& values = std::string(kind) == "inputs" ? inputs : outputs;
      auto& offset = std::string(kind) == "inputs" ? in_offset : out_offset;
      std::snprintf(name, sizeof name, "%s-%03zu.f32", kind, k);
      write_f32(dir / name, values);
      ShardInfo info{name, kind, first, count, offset, values.size() * 4, file_crc32(dir / name)};
      offset += info.bytes;
      m.shards.push_back(info);
    }
  }
  std::ofstream(dir / "manifest.json") << m.to_json();
  return m;
}

void verify_dataset(const std::filesystem::path& dir) {
  const auto m = DatasetManifest::from_json(read_text(dir / "manifest.json"));
  for (const auto& s : m.shards) {
    const auto path = dir / s.file;
    if (!std::filesystem::exists(path)) throw DataError("missing shard " + s.file);
    if (std::filesystem::file_size(path) != s.bytes) throw DataError("shard " + s.file + " has the wrong size");
    if (file_crc32(path) != s.crc32) throw DataError("checksum mismatch in shard " + s.file);
  }
}

Dataset load_dataset(const std::filesystem::path& dir, bool verify) {
  if (verify) verify_dataset(dir);
  Dataset ds;
  ds.manifest = DatasetManifest::from_json(read_text(dir / "manifest.json"));
  const auto& m = ds.manifest;
  const std::size_t h = m.grid.height, w = m.grid.width, dx = m.input_channels.size();
  const std::size_t nt = m.times_days.size(), co = m.output_channels.size();
  if (co != kOutputChannels) throw DataError("dataset must have three output channels");
  ds.data.inputs = Tensor<float>({m.samples, dx, h, w});
  ds.data.outputs = Tensor<float>({m.samples, nt, co, h, w});
  for (double t : m.network_times) ds.data.times.push_back(static_cast<float>(t));
  std::size_t in_filled = 0, out_filled = 0;
  for (const auto& s : m.shards) {
    const auto values = read_f32(dir / s.file);
    const bool is_input = s.kind == "inputs";
    const std::size_t record = is_input ? dx * h * w : nt * co * h * w;
    if (values.size() != s.samples * record) throw DataError("shard " + s.file + " has the wrong record count");
    if (s.first_sample + s.samples > m.samples) throw DataError("shard " + s.file + " runs past the sample count");
    float* dst = (is_input ? ds.data.inputs.data() : ds.data.outputs.data()) + s.first_sample * record;
    std::copy(values.begin(), values.end(), dst);
    (is_input ? in_filled : out_filled) += s.samples;
  }
  if (in_filled != m.samples || out_filled != m.samples) throw DataError("shards do not cover every sample");
  ds.data.validate();
  return ds;
}

}  // namespace flowsurrogate
