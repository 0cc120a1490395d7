// flowsurrogate: generate -> train -> eval -> uq
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowsurrogate/commands.hpp"
#include "flowsurrogate/error.hpp"

using namespace flowsurrogate;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct GlobalOptions {
  std::optional<std::string> config;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  bool deterministic = false;
};

std::string preset_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    const auto j = nlohmann::json::parse(ss.str());
    if (j.contains("preset")) return j.at("preset").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return "desk";
}

RunConfig resolve(const GlobalOptions& g) {
  std::string preset = g.preset.value_or(g.config ? preset_from_file(*g.config) : "desk");
  RunConfig c = RunConfig::preset_named(preset);
  if (g.config) c = RunConfig::load(*g.config, c);
  c.preset = preset;
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.out = *g.out;
  if (g.threads) c.threads = *g.threads;
  if (g.deterministic) c.deterministic = true;
  c.finalize();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense encoder-decoder surrogate for two-phase flow with Monte Carlo UQ"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Run configuration (JSON)")->envname("SURROGATE_CONFIG");
  app.add_option("--preset", g.preset, "Base preset")
      ->check(CLI::IsMember({"paper", "desk"}))
      ->envname("SURROGATE_PRESET");
  app.add_option("--seed", g.seed, "Global seed")->envname("SURROGATE_SEED");
  app.add_option("--out", g.out, "Output directory")->envname("SURROGATE_OUT");
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->envname("SURROGATE_THREADS");
  app.add_flag("--deterministic", g.deterministic, "Fixed reduction order")->envname("SURROGATE_DETERMINISTIC");

  auto* generate = app.add_subcommand("generate", "Sample permeability fields, simulate, write train/test datasets");

  auto* train = app.add_subcommand("train", "Train the surrogate on the train split");
  std::string mode = "mse-bce";
  std::optional<std::size_t> epochs, batch;
  std::optional<std::string> resume;
  std::size_t checkpoint_every = 0;
  train->add_option("--mode", mode, "Training mode")
      ->check(CLI::IsMember({"mse", "mse-bce"}))
      ->envname("SURROGATE_MODE");
  train->add_option("--epochs", epochs, "Epochs")->envname("SURROGATE_EPOCHS");
  train->add_option("--batch", batch, "Minibatch size")->envname("SURROGATE_BATCH");
  train->add_option("--resume", resume, "Continue from a training checkpoint");
  train->add_option("--checkpoint-every", checkpoint_every, "Write a checkpoint every N epochs");

  auto* eval = app.add_subcommand("eval", "R2 / RMSE / front IoU of a checkpoint on a dataset");
  std::optional<std::string> checkpoint, dataset;
  std::size_t dump = 0;
  eval->add_option("--mode", mode, "Model to evaluate when --checkpoint is not given")
      ->check(CLI::IsMember({"mse", "mse-bce"}))
      ->envname("SURROGATE_MODE");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint");
  eval->add_option("--dataset", dataset, "Dataset directory (default: the test split)");
  eval->add_option("--dump", dump, "Write predictions for the first N records");

  auto* uq = app.add_subcommand("uq", "Monte Carlo moments and PDFs: surrogate vs simulator");
  std::optional<std::size_t> realizations;
  std::optional<std::string> uq_out;
  uq->add_option("--mode", mode, "Model to use when --checkpoint is not given")
      ->check(CLI::IsMember({"mse", "mse-bce"}))
      ->envname("SURROGATE_MODE");
  uq->add_option("--checkpoint", checkpoint, "Model checkpoint");
  uq->add_option("--realizations", realizations, "Number of realizations");
  uq->add_option("--bundle", uq_out, "Bundle directory (default: <out>/uq/<mode>)");

  auto* arch = app.add_subcommand("arch", "Print the stage-by-stage architecture");
  auto* verify = app.add_subcommand("verify", "Check dataset shard checksums");
  std::string verify_dir;
  verify->add_option("dir", verify_dir, "Dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    RunConfig config = resolve(g);
    const TrainMode train_mode = parse_train_mode(mode);
    if (*generate) {
      cmd_generate(config, std::cout);
    } else if (*train) {
      if (epochs) config.training.epochs = *epochs;
      if (batch) config.training.batch_size = *batch;
      config.training.mode = train_mode;
      config.finalize();
      TrainCommandOptions options;
      options.mode = train_mode;
      options.checkpoint_every = checkpoint_every;
      if (resume) options.resume = *resume;
      cmd_train(config, options, std::cout);
    } else if (*eval) {
      const auto ckpt = checkpoint ? std::filesystem::path(*checkpoint) : model_dir(config, train_mode) / "model.ckpt";
      const auto dir = dataset ? std::filesystem::path(*dataset) : data_dir(config, "test");
      cmd_eval(config, ckpt, dir, dump, std::cout);
    } else if (*uq) {
      if (realizations) config.uq.realizations = *realizations;
      config.finalize();
      const auto ckpt = checkpoint ? std::filesystem::path(*checkpoint) : model_dir(config, train_mode) / "model.ckpt";
      const auto dir = uq_out ? std::filesystem::path(*uq_out) : config.out / "uq" / to_string(train_mode);
      cmd_uq(config, ckpt, dir, std::cout);
    } else if (*arch) {
      const auto stages = architecture_stages(config.network);
      std::printf("%-14s %8s  %s\n", "stage", "channels", "size");
      for (const auto& s : stages) std::printf("%-14s %8zu  %zux%zu\n", s.name.c_str(), s.channels, s.height, s.width);
      DenseEncoderDecoder<float> net(config.network, 0);
      std::printf("parameters: %zu\n", net.state().parameter_count());
    } else if (*verify) {
      verify_dataset(verify_dir);
      std::printf("ok: %s\n", verify_dir.c_str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const GeometryError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
