#pragma once

// Parameter checkpoint file.
//
// Layout (all header lines are ASCII terminated by a single '\n'):
//
//   FLOWSURROGATE-CHECKPOINT 1
//   meta <key> <value>               zero or more; value runs to end of line
//   tensor <name> <rank> <d0> ... <dr-1>
//   ...                              one line per tensor, in payload order
//   end
//   <payload>
//
// The payload starts at the byte after "end\n" and holds, for each tensor in
// header order, product(dims) IEEE-754 binary32 values in little-endian byte
// order, row-major, with no padding or alignment between tensors. Names and
// keys contain no whitespace.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowsurrogate/tensor.hpp"

namespace flowsurrogate {

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  void set_meta(const std::string& key, std::string value);
  std::optional<std::string> meta_value(const std::string& key) const;
  /// Throws DataError when absent.
  const Tensor<float>& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace flowsurrogate
