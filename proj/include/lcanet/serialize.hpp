#pragma once

// Binary formats, all little-endian:
//   .ten   "LCAT" | u32 rank | rank x u32 extent | f32 values (row-major)
//   LCAM   "LCAM" | u32 count | count x (u16 name_len | name bytes | .ten payload)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lcanet/parameter.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(std::string("truncated ") + what);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline std::uint16_t read_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  read_exact(is, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | b[1] << 8);
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  read_exact(is, got, 4, "magic");
  if (std::memcmp(got, magic, 4) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  os.write("LCAT", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
  for (T v : t.data()) detail::write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <typename T = float>
BasicTensor<T> read_tensor(std::istream& is) {
  detail::expect_magic(is, "LCAT");
  const std::uint32_t rank = detail::read_u32(is, "tensor rank");
  if (rank > 4) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds 4");
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint32_t extent = detail::read_u32(is, "tensor extent");
    if (extent > (1u << 28)) throw FormatError("tensor extent " + std::to_string(extent) + " is implausible");
    d = static_cast<int>(extent);
  }
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(detail::read_u32(is, "tensor payload")));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_tensor(os, t);
}

template <typename T = float>
BasicTensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_tensor<T>(is);
}

template <typename T>
void write_checkpoint(std::ostream& os, const ParameterSet<T>& params) {
  os.write("LCAM", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.all()) {
    if (p.name.size() > 0xffff) throw FormatError("parameter name too long: " + p.name);
    detail::write_u16(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(os, p.tensor);
  }
}

template <typename T = float>
std::vector<std::pair<std::string, BasicTensor<T>>> read_checkpoint(std::istream& is) {
  detail::expect_magic(is, "LCAM");
  const std::uint32_t count = detail::read_u32(is, "parameter count");
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(detail::read_u16(is, "name length"), '\0');
    detail::read_exact(is, name.data(), name.size(), "parameter name");
    out.emplace_back(std::move(name), read_tensor<T>(is));
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    write_checkpoint(os, params);
  }
  std::filesystem::rename(tmp, path);
}

/// Copies checkpoint values into `params`; names and shapes must match exactly.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParameterSet<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  auto entries = read_checkpoint<T>(is);
  if (entries.size() != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(entries.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : entries) {
    if (!params.contains(name)) throw FormatError("checkpoint parameter not in model: " + name);
    auto& dst = params[name];
    if (dst.shape() != t.shape()) {
      throw FormatError("shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " + shape_str(dst.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
  }
}

}  // namespace lcanet
