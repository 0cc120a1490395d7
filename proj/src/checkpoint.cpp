#include "flowsurrogate/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace flowsurrogate {

namespace {

constexpr const char* kMagic = "FLOWSURROGATE-CHECKPOINT 1";

bool has_space(const std::string& s) { return s.find_first_of(" \t\r\n") != std::string::npos || s.empty(); }

void write_le_floats(std::ostream& os, const Tensor<float>& t) {
  static_assert(sizeof(float) == 4);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 4));
  } else {
    for (float v : t.values()) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char bytes[4];
      for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
      os.write(bytes, 4);
    }
  }
}

void read_le_floats(std::istream& is, Tensor<float>& t) {
  std::vector<unsigned char> buf(t.size() * 4);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw DataError("checkpoint payload truncated");
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
    t[i] = std::bit_cast<float>(bits);
  }
}

}  // namespace

void Checkpoint::set_meta(const std::string& key, std::string value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  meta.emplace_back(key, std::move(value));
}

std::optional<std::string> Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  return std::nullopt;
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw DataError("checkpoint has no tensor named '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os << kMagic << '\n';
  for (const auto& [k, v] : checkpoint.meta) {
    if (has_space(k) || v.find('\n') != std::string::npos) throw DataError("invalid checkpoint meta entry: " + k);
    os << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& t : checkpoint.tensors) {
    if (has_space(t.name)) throw DataError("invalid checkpoint tensor name: '" + t.name + "'");
    os << "tensor " << t.name << ' ' << t.value.rank();
    for (auto d : t.value.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "end\n";
  for (const auto& t : checkpoint.tensors) write_le_floats(os, t.value);
  if (!os) throw DataError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMagic) throw DataError("not a checkpoint file: " + path.string());
  Checkpoint ckpt;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      std::string name;
      std::size_t rank = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls) throw DataError("malformed checkpoint tensor line: " + line);
      ckpt.tensors.push_back({name, Tensor<float>(shape)});
    } else {
      throw DataError("unexpected checkpoint header line: " + line);
    }
  }
  if (!ended) throw DataError("checkpoint header not terminated: " + path.string());
  for (auto& t : ckpt.tensors) read_le_floats(is, t.value);
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after checkpoint payload");
  return ckpt;
}

}  // namespace flowsurrogate
