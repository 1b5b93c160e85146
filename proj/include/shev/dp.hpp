#pragma once

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "shev/cycles.hpp"
#include "shev/env.hpp"
#include "shev/powertrain.hpp"

namespace shev::dp {

std::vector<double> linspace(double lo, double hi, int n);

struct DpConfig {
  std::vector<double> soc_grid = linspace(0.0, 1.0, 401);
  std::vector<double> omega_grid = linspace(0.0, 2300.0, 13);
  std::vector<double> torque_grid = linspace(0.0, 1500.0, 13);
  // Explicit action list; replaces the omega x torque product when non-empty.
  std::vector<powertrain::EngineCommand> actions;
  std::pair<double, double> terminal_soc{0.15, 0.18};
  double sentinel_factor = 100.0;  // sentinel = factor * largest possible fuel total
  // Nearest-node SOC projection instead of interpolation (brute-force comparisons only).
  bool snap = false;
  int threads = 0;  // 0: OpenMP default

  void validate() const;
  std::vector<powertrain::EngineCommand> action_list() const;
};

struct DpSolution {
  std::vector<double> soc_grid;
  std::vector<powertrain::EngineCommand> actions;
  Eigen::MatrixXd value;   // (T+1) x N cost-to-go, grams
  Eigen::MatrixXi policy;  // T x N action index, -1 where infeasible
  double sentinel = 0.0;
  // SOC interval per step that can still reach the terminal window (empty when snapped)
  std::vector<std::pair<double, double>> hull;
  std::vector<env::StepInfo> trace;
  double dt = 1.0;
  double total_fuel = 0.0;  // g, summed from the last step backwards
  double mpg = 0.0;
  bool mpg_infinite = false;
  double soc_final = 0.0;
};

// Raises InfeasibleError when the EM cannot follow the cycle or no action
// sequence ends inside the terminal window.
DpSolution dp_solve(const cycles::DriveCycle& cycle, const powertrain::PowertrainModel& model, const DpConfig& cfg,
                    double initial_soc);

// Exhaustive search over all action sequences with snapped dynamics.
// Refuses (ConfigError) when actions^steps exceeds max_sequences.
DpSolution brute_force(const cycles::DriveCycle& cycle, const powertrain::PowertrainModel& model,
                       const DpConfig& cfg, double initial_soc, double max_sequences = 1e7);

struct Mpg {
  double value = 0.0;
  bool infinite = false;
};
Mpg mpg_of(const std::vector<env::StepInfo>& trace, double dt, const powertrain::PowertrainModel& model);

// value.csv, policy.csv, actions.csv and trace.csv under dir.
void export_solution(const DpSolution& s, const std::string& dir, const env::Meta& meta);

}  // namespace shev::dp
