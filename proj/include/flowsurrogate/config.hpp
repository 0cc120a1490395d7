#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowsurrogate/flow.hpp"
#include "flowsurrogate/grf.hpp"
#include "flowsurrogate/network.hpp"
#include "flowsurrogate/training.hpp"

namespace flowsurrogate {

struct DataConfig {
  std::size_t train_samples = 128;
  std::size_t test_samples = 64;
  std::vector<double> train_times_days = {100, 120, 140, 160, 180, 200};
  std::vector<double> test_times_days = {100, 120, 140, 150, 160, 180, 200};
  double time_scale_days = 200.0;  // network time input = days / time_scale_days
  std::size_t samples_per_shard = 64;
};

struct PixelIndex {
  std::size_t row = 0;
  std::size_t col = 0;
};

struct UqConfig {
  std::size_t realizations = 512;
  std::vector<double> times_days = {100, 120, 140, 150, 160, 180, 200};
  // three rows across the plume, columns spanning the front positions over the window
  std::vector<PixelIndex> probes = {{4, 8},  {4, 10},  {4, 12},  {4, 14},  {4, 16},  {4, 18},  {4, 20},
                                    {16, 8}, {16, 10}, {16, 12}, {16, 14}, {16, 16}, {16, 18}, {16, 20},
                                    {28, 8}, {28, 10}, {28, 12}, {28, 14}, {28, 16}, {28, 18}, {28, 20}};
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  GridSpec grid;
  GrfParams grf;
  SimConfig simulator;  // grid and snapshot times are filled from the other sections
  DataConfig data;
  NetworkConfig network;
  TrainConfig training;
  UqConfig uq;
  std::filesystem::path out = "run";
  std::size_t threads = 1;
  bool deterministic = true;

  static RunConfig desk();
  static RunConfig paper();
  static RunConfig preset_named(const std::string& name);

  /// Copies shared values (grid, times) into the sections that need them and
  /// checks cross-field constraints. Throws ConfigError.
  void finalize();

  /// Simulator config whose snapshots are the given days.
  SimConfig simulator_for(const std::vector<double>& days) const;

  std::string to_json() const;
  /// Values present in `text` override `base`; unknown keys are rejected.
  static RunConfig from_json(const std::string& text, RunConfig base);
  static RunConfig load(const std::filesystem::path& path, RunConfig base);
};

/// Independent seed for the index-th draw of a named stream.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stream, std::uint64_t index = 0);

}  // namespace flowsurrogate
