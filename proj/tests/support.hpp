#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "shev/nets.hpp"

namespace testing {

using shev::nets::Matrix;

inline Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Plain-data window, turned into tape constants on demand.
struct Window {
  std::vector<Matrix> states, actions, rtg;
  std::vector<std::vector<int>> timesteps;

  static Window random(int batch, int k, int sdim, int adim, std::mt19937_64& rng) {
    Window w;
    for (int j = 0; j < k; ++j) {
      w.states.push_back(randn(batch, sdim, rng));
      w.actions.push_back(randn(batch, adim, rng, 0.5));
      w.rtg.push_back(randn(batch, 1, rng));
      w.timesteps.push_back(std::vector<int>(static_cast<std::size_t>(batch), j + 3));
    }
    return w;
  }

  shev::nets::WindowVars on(shev::ad::Tape& t) const {
    shev::nets::WindowVars v;
    for (std::size_t j = 0; j < states.size(); ++j) {
      v.states.push_back(t.constant(states[j]));
      v.actions.push_back(t.constant(actions[j]));
      v.rtg.push_back(t.constant(rtg[j]));
    }
    v.timesteps = timesteps;
    return v;
  }
};

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("shev_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
