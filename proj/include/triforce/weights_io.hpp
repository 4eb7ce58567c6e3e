// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Binary weight file, little-endian:
//   "TFWT" | u32 version=1 | 7 x u32 config ints | 2 x f32 config reals |
//   u8 tied_head | per tensor: u16 name_len, name bytes, u8 rank,
//   rank x u32 dims, raw f32 payload.
// Tensors appear in ModelWeights::named_tensors() order.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "triforce/weights.hpp"

namespace triforce {

static_assert(std::endian::native == std::endian::little, "weight IO assumes a little-endian host");

class WeightFormatError : public Error {
 public:
  enum class Kind { Io, BadMagic, VersionMismatch, Truncated, ShapeMismatch };

  WeightFormatError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kWeightMagic[4] = {'T', 'F', 'W', 'T'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    get_bytes(&v, sizeof(T), what);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    if (pos_ + n > buf_.size()) {
      throw WeightFormatError(WeightFormatError::Kind::Truncated,
                              std::string("weight file truncated while reading ") + what);
    }
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_weights(const ModelWeights& w) {
  detail::ByteWriter out;
  out.put_bytes(kWeightMagic, 4);
  out.put(kWeightVersion);
  const auto& c = w.config;
  for (std::uint32_t v : {c.n_layers, c.n_heads, c.n_kv_heads, c.head_dim, c.d_ff, c.vocab_size, c.max_seq}) {
    out.put(v);
  }
  out.put(c.rope_theta);
  out.put(c.norm_eps);
  out.put(static_cast<std::uint8_t>(w.tied_head ? 1 : 0));
  for (const auto& [name, t] : w.named_tensors()) {
    out.put(static_cast<std::uint16_t>(name.size()));
    out.put_bytes(name.data(), name.size());
    out.put(static_cast<std::uint8_t>(t->rank()));
    for (std::size_t d : t->shape()) out.put(static_cast<std::uint32_t>(d));
    out.put_bytes(t->data().data(), t->size() * sizeof(float));
  }
  return out.bytes();
}

inline ModelWeights deserialize_weights(std::vector<char> bytes) {
  using Kind = WeightFormatError::Kind;
  detail::ByteReader in(std::move(bytes));
  char magic[4];
  in.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kWeightMagic, 4) != 0) throw WeightFormatError(Kind::BadMagic, "bad magic: not a TFWT weight file");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kWeightVersion) {
    throw WeightFormatError(Kind::VersionMismatch, "unsupported weight format version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = in.get<std::uint32_t>("config");
  c.n_heads = in.get<std::uint32_t>("config");
  c.n_kv_heads = in.get<std::uint32_t>("config");
  c.head_dim = in.get<std::uint32_t>("config");
  c.d_ff = in.get<std::uint32_t>("config");
  c.vocab_size = in.get<std::uint32_t>("config");
  c.max_seq = in.get<std::uint32_t>("config");
  c.rope_theta = in.get<float>("config");
  c.norm_eps = in.get<float>("config");
  const bool tied = in.get<std::uint8_t>("tied flag") != 0;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw WeightFormatError(Kind::ShapeMismatch, e.what());
  }

  ModelWeights w = allocate_weights(c, tied);
  const auto expected = expected_shapes(c, tied);
  auto targets = w.named_tensors_mut();
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto name_len = in.get<std::uint16_t>("tensor name length");
    std::string name(name_len, '\0');
    in.get_bytes(name.data(), name_len, "tensor name");
    const auto rank = in.get<std::uint8_t>("tensor rank");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = in.get<std::uint32_t>("tensor dims");
    if (name != expected[i].first || dims != expected[i].second) {
      throw WeightFormatError(Kind::ShapeMismatch, "tensor '" + name + "' does not match config (expected '" +
                                                       expected[i].first + "')");
    }
    Tensor& t = *targets[i].second;
    in.get_bytes(t.data().data(), t.size() * sizeof(float), "tensor payload");
  }
  if (!in.at_end()) throw WeightFormatError(Kind::ShapeMismatch, "trailing bytes after last tensor");
  return w;
}

inline void save_weights(const ModelWeights& w, const std::string& path) {
  const auto bytes = serialize_weights(w);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw WeightFormatError(WeightFormatError::Kind::Io, "cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw WeightFormatError(WeightFormatError::Kind::Io, "write failed for '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw WeightFormatError(WeightFormatError::Kind::Io, "cannot move weights into '" + path + "'");
  }
}

inline ModelWeights load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WeightFormatError(WeightFormatError::Kind::Io, "cannot open weight file '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(std::move(bytes));
}

}  // namespace triforce
