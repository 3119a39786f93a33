#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "accpp/core/linalg.hpp"
#include "accpp/model/transformer.hpp"

namespace testutil {

inline accpp::Matrix gaussian(int r, int c, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  accpp::Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline accpp::Vector gaussian_vec(int n, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> d(0.0, std);
  accpp::Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("accpp_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

// Toy model with sharp enough attention that tracing has something to find.
inline accpp::SynthConfig sharp_config(accpp::AttnVariant v, accpp::NormMode norm, std::uint64_t seed, int L = 2,
                                       int H = 2, int D = 8) {
  accpp::SynthConfig c;
  c.n_layers = L;
  c.n_heads = H;
  c.d_model = D;
  c.variant = v;
  c.norm_mode = norm;
  c.seed = seed;
  c.init_std = 1.0 / std::sqrt(static_cast<double>(D));
  c.embed_std = 1.0;
  c.qk_gain = 2.0;
  return c;
}

}  // namespace testutil

