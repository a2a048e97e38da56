#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "core/errors.hpp"

namespace punet {

// Dense n-dimensional array, row-major. Feature maps use H x W x C layout so
// that flattening to (H*W) x C token matrices is a pure reinterpretation of
// the same buffer. Zero extents are allowed so that empty row blocks (e.g.
// split at 0) are representable.
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  Tensor(std::vector<int> shp, std::vector<S> buf) : shape(std::move(shp)), data(std::move(buf)) {
    if (numel_of(shape) != data.size()) {
      throw DimError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    }
  }

  static std::size_t numel_of(const std::vector<int>& shp) {
    std::size_t n = 1;
    for (int e : shp) {
      if (e < 0) throw DimError("negative extent in shape " + shape_str(shp));
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> shp) {
    std::size_t n = numel_of(shp);
    return Tensor(std::move(shp), std::vector<S>(n, S(0)));
  }

  static Tensor full(std::vector<int> shp, S v) {
    std::size_t n = numel_of(shp);
    return Tensor(std::move(shp), std::vector<S>(n, v));
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  S& at(int i) { return data[static_cast<std::size_t>(i)]; }
  S at(int i) const { return data[static_cast<std::size_t>(i)]; }
  S& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  S at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  S& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  S at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static std::string shape_str(const std::vector<int>& shp) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shp.size(); ++i) {
      if (i) os << "x";
      os << shp[i];
    }
    os << "]";
    return os.str();
  }
  std::string shape_str() const { return shape_str(shape); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b,
                               const char* what) {
  if (a != b) {
    throw DimError(std::string(what) + ": shape mismatch " + Tensor<float>::shape_str(a) +
                   " vs " + Tensor<float>::shape_str(b));
  }
}

// ---------------------------------------------------------------------------
// PTNSR file format: magic "PTNSR1\n", u32 little-endian rank, rank u32 LE
// extents, then the payload as f32 LE, row-major. Used for weights, datasets
// and prompt checkpoints.
// ---------------------------------------------------------------------------

inline constexpr char kPtnsrMagic[7] = {'P', 'T', 'N', 'S', 'R', '1', '\n'};

template <typename S>
void write_ptnsr(const std::filesystem::path& path, const Tensor<S>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write(kPtnsrMagic, sizeof(kPtnsrMagic));
  auto put_u32 = [&f](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(static_cast<std::uint32_t>(t.shape.size()));
  for (int e : t.shape) put_u32(static_cast<std::uint32_t>(e));
  for (S v : t.data) {
    float fv = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &fv, 4);
    put_u32(bits);
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline Tensor<float> read_ptnsr(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path.string());
  char magic[7];
  f.read(magic, 7);
  if (!f || std::memcmp(magic, kPtnsrMagic, 7) != 0) {
    throw IoError("not a PTNSR file: " + path.string());
  }
  auto get_u32 = [&f, &path]() -> std::uint32_t {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw IoError("truncated PTNSR file: " + path.string());
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  std::uint32_t rank = get_u32();
  if (rank > 8) throw IoError("implausible PTNSR rank: " + path.string());
  std::vector<int> shape(rank);
  for (auto& e : shape) e = static_cast<int>(get_u32());
  std::size_t n = Tensor<float>::numel_of(shape);
  std::vector<float> buf(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = get_u32();
    std::memcpy(&buf[i], &bits, 4);
  }
  return Tensor<float>(std::move(shape), std::move(buf));
}

template <typename S>
Tensor<S> read_ptnsr_as(const std::filesystem::path& path) {
  return read_ptnsr(path).template cast<S>();
}

}  // namespace punet
