#pragma once

// On-disk dataset: a manifest.json plus float32 shards.
//
// inputs-<k>.f32   one record per sample: [d_x, H, W] log-permeability
// outputs-<k>.f32  one record per (sample, time): [3, H, W] = P', Sg, zeta,
//                  samples outer, times inner
//
// Values are IEEE-754 binary32, little-endian, row-major, no headers or
// padding. Shard k holds samples [first_sample, first_sample + samples). The
// manifest records every shard's byte length and CRC-32 (zlib polynomial).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowsurrogate/config.hpp"
#include "flowsurrogate/training.hpp"

namespace flowsurrogate {

inline constexpr const char* kDatasetFormat = "flowsurrogate-dataset";
inline constexpr int kDatasetVersion = 1;

struct ChannelInfo {
  std::string name;
  std::string units;
};

struct ShardInfo {
  std::string file;
  std::string kind;  // "inputs" or "outputs"
  std::size_t first_sample = 0;
  std::size_t samples = 0;
  std::uint64_t byte_offset = 0;  // offset of the shard's first record in the concatenated stream
  std::uint64_t bytes = 0;
  std::uint32_t crc32 = 0;
};

struct DatasetManifest {
  int version = kDatasetVersion;
  std::string split;  // "train" or "test"
  GridSpec grid;
  std::vector<ChannelInfo> input_channels;
  std::vector<ChannelInfo> output_channels;
  std::size_t samples = 0;
  std::vector<double> times_days;
  std::vector<double> network_times;
  PressureScaling pressure_scaling;
  double saturation_min = 0.0;
  double saturation_max = 1.0;
  double k_ref = kReferencePermeability;
  std::vector<std::uint64_t> sample_seeds;
  std::vector<std::string> failures;
  std::string config_hash;
  std::vector<ShardInfo> shards;

  std::size_t records() const { return samples * times_days.size(); }
  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

std::uint32_t crc32_of(std::span<const unsigned char> bytes);
std::uint32_t file_crc32(const std::filesystem::path& path);
/// CRC-32 of the config JSON without the output directory and thread count,
/// as 8 hex digits.
std::string config_hash(const RunConfig& config);

/// Little-endian float32 file I/O.
void write_f32(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_f32(const std::filesystem::path& path);

struct Dataset {
  DatasetManifest manifest;
  SurrogateData data;
};

/// Samples, simulates and writes one split into `dir`. Failed realizations
/// are listed in the manifest and left out of the shards.
DatasetManifest generate_dataset(const RunConfig& config, const std::string& split, const std::filesystem::path& dir);

/// Throws DataError naming the first shard that is missing or whose size or
/// checksum disagrees with the manifest.
void verify_dataset(const std::filesystem::path& dir);

Dataset load_dataset(const std::filesystem::path& dir, bool verify = true);

/// Network time input for a time in days.
float network_time(double days, double time_scale_days);

}  // namespace flowsurrogate
