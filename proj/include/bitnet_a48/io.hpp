#pragma once

// Binary interchange formats.
//
//   tensor:     "BA48" | u8 rank | u64 dims[rank] | f32 data[...]
//   quantized:  "BA4Q" | u8 scheme | u8 granularity | f32 multiplier |
//               u8 exp_bits | u8 man_bits | u8 bits | u8 rank | u64 dims[rank] |
//               u64 n_scales | f32 scales[n] | codes (i8, or u8 for unsigned)
//   checkpoint: "BA48CKPT1" | u64 header_len | JSON header | u32 n_tensors |
//               { u16 name_len | name | u8 site | tensor }*
//
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>

#include "bitnet_a48/model.hpp"
#include "bitnet_a48/quant.hpp"

namespace ba48::io {

inline constexpr char kTensorMagic[4] = {'B', 'A', '4', '8'};
inline constexpr char kQuantMagic[4] = {'B', 'A', '4', 'Q'};
inline constexpr char kCheckpointMagic[9] = {'B', 'A', '4', '8', 'C', 'K', 'P', 'T', '1'};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b;
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> b;
  is.read(reinterpret_cast<char*>(b.data()), b.size());
  if (!is) throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void put_f32(std::ostream& os, float f) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }

inline void expect_magic(std::istream& is, const char* magic, std::size_t n) {
  std::string got(n, '\0');
  is.read(got.data(), static_cast<std::streamsize>(n));
  if (!is || got != std::string(magic, n)) throw FormatError("bad magic, expected " + std::string(magic, n));
}

inline void put_shape(std::ostream& os, const Shape& s) {
  if (s.size() > 255) throw FormatError("rank exceeds 255");
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) put_le<std::uint64_t>(os, d);
}

inline Shape get_shape(std::istream& is) {
  const auto rank = get_le<std::uint8_t>(is);
  Shape s(rank);
  for (auto& d : s) {
    d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    if (d == 0) throw FormatError("zero-sized dimension");
  }
  return s;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  detail::put_shape(os, t.shape());
  for (T v : t.data()) detail::put_f32(os, static_cast<float>(v));
}

template <typename T = float>
Tensor<T> read_tensor(std::istream& is) {
  detail::expect_magic(is, kTensorMagic, 4);
  Shape s = detail::get_shape(is);
  std::vector<T> data(shape_numel(s));
  for (T& v : data) v = static_cast<T>(detail::get_f32(is));
  return Tensor<T>(std::move(s), std::move(data));
}

inline std::uint8_t scheme_tag(const QuantScheme& s) { return static_cast<std::uint8_t>(s.variant); }

template <typename T>
void write_quantized(std::ostream& os, const QuantizedTensor<T>& q) {
  os.write(kQuantMagic, 4);
  detail::put_le<std::uint8_t>(os, scheme_tag(q.scheme));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(q.scheme.granularity));
  detail::put_f32(os, static_cast<float>(q.scheme.multiplier));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(q.scheme.exp_bits));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(q.scheme.man_bits));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(q.scheme.bits));
  detail::put_shape(os, q.shape);
  detail::put_le<std::uint64_t>(os, q.scales.size());
  for (T s : q.scales) detail::put_f32(os, static_cast<float>(s));
  const bool unsigned_codes = q.scheme.variant == QuantScheme::Variant::UnsignedAbsmax;
  for (std::int32_t c : q.codes) {
    if (unsigned_codes)
      detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(c));
    else
      detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(static_cast<std::int8_t>(c)));
  }
}

template <typename T = float>
QuantizedTensor<T> read_quantized(std::istream& is) {
  detail::expect_magic(is, kQuantMagic, 4);
  QuantizedTensor<T> q;
  const auto tag = detail::get_le<std::uint8_t>(is);
  if (tag > static_cast<std::uint8_t>(QuantScheme::Variant::UnsignedAbsmax) || tag == 0)
    throw FormatError("unknown scheme tag " + std::to_string(tag));
  q.scheme.variant = static_cast<QuantScheme::Variant>(tag);
  q.scheme.granularity = static_cast<Granularity>(detail::get_le<std::uint8_t>(is));
  q.scheme.multiplier = detail::get_f32(is);
  q.scheme.exp_bits = detail::get_le<std::uint8_t>(is);
  q.scheme.man_bits = detail::get_le<std::uint8_t>(is);
  q.scheme.bits = detail::get_le<std::uint8_t>(is);
  q.scheme.validate();
  q.shape = detail::get_shape(is);
  const auto n_scales = detail::get_le<std::uint64_t>(is);
  const std::size_t n = shape_numel(q.shape);
  if (n_scales == 0 || n % n_scales != 0) throw FormatError("scale count does not divide code count");
  q.scales.resize(n_scales);
  for (T& s : q.scales) s = static_cast<T>(detail::get_f32(is));
  q.codes.resize(n);
  const bool unsigned_codes = q.scheme.variant == QuantScheme::Variant::UnsignedAbsmax;
  for (std::int32_t& c : q.codes) {
    const auto b = detail::get_le<std::uint8_t>(is);
    c = unsigned_codes ? static_cast<std::int32_t>(b)
                       : static_cast<std::int32_t>(static_cast<std::int8_t>(b));
  }
  return q;
}

template <typename T>
void save_tensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

template <typename T = float>
Tensor<T> load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor<T>(is);
}

/// Checkpoint header: model config, activation plan and caller metadata.
template <typename T>
void write_checkpoint(std::ostream& os, TransformerModel<T>& model,
                      const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header = {{"config", config_to_json(model.config)},
                           {"plan", plan_to_json(model.plan)},
                           {"meta", extra}};
  const std::string text = header.dump();
  os.write(kCheckpointMagic, 9);
  detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  auto params = model.parameters();
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef<T>& p : params) {
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.site));
    write_tensor(os, *p.tensor);
  }
}

template <typename T>
struct LoadedCheckpoint {
  TransformerModel<T> model;
  nlohmann::json meta;
};

template <typename T = float>
LoadedCheckpoint<T> read_checkpoint(std::istream& is) {
  detail::expect_magic(is, kCheckpointMagic, 9);
  const auto len = detail::get_le<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError("truncated checkpoint header");
  const nlohmann::json header = nlohmann::json::parse(text);
  LoadedCheckpoint<T> ck{TransformerModel<T>::init(config_from_json(header.at("config")), 0),
                         header.value("meta", nlohmann::json::object())};
  ck.model.apply_plan(plan_from_json(header.at("plan")));
  auto params = ck.model.parameters();
  const auto n = detail::get_le<std::uint32_t>(is);
  if (n != params.size()) throw FormatError("checkpoint tensor count does not match config");
  for (ParamRef<T>& p : params) {
    const auto name_len = detail::get_le<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' expected");
    const auto site = detail::get_le<std::uint8_t>(is);
    if (site != static_cast<std::uint8_t>(p.site)) throw FormatError("site tag mismatch for " + name);
    Tensor<T> t = read_tensor<T>(is);
    if (t.shape() != p.tensor->shape()) throw FormatError("shape mismatch for " + name);
    *p.tensor = std::move(t);
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, TransformerModel<T>& model,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, model, extra);
}

template <typename T = float>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_checkpoint<T>(is);
}

/// 64-bit FNV-1a over a byte string; used for manifest checksums.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ba48::io
