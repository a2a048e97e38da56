#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace testutil {

// Unique scratch directory under the build tree, removed on destruction.
struct TmpDir {
  std::filesystem::path path;

  explicit TmpDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("punet_test_" + tag + "_" + std::to_string(++counter) + "_" +
            std::to_string(static_cast<unsigned long>(::getpid())));
    std::filesystem::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

template <typename S>
double max_abs_diff(const punet::Tensor<S>& a, const punet::Tensor<S>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  }
  return m;
}

template <typename S>
bool bit_equal(const punet::Tensor<S>& a, const punet::Tensor<S>& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.data[i] != b.data[i]) return false;
  }
  return true;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace testutil
