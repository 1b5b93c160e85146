#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "shev/cycles.hpp"
#include "shev/powertrain.hpp"

namespace shev::env {

struct EnvObservation {
  double soc = 0.0;
  double distance = 0.0;  // m
  double p_em = 0.0;      // W, electrical side, after demand scaling
};

struct EnvAction {
  double omega_eng = 0.0;   // rpm
  double torque_eng = 0.0;  // Nm
};

/// Fuel and SOC shaping weights; SOC thresholds are in percent.
struct RewardWeights {
  double w_fuel = 5.0;
  double w_soc_low = 15.0;
  double w_soc_good = 2.5;
  double w_soc_high = 10.0;
  double soc_low = 15.0;
  double soc_good_hi = 18.0;
  double soc_high = 85.0;
  void validate() const;
};

struct EpisodeConfig {
  cycles::DriveCycle cycle;
  std::vector<double> initial_soc_choices{0.85, 0.75, 0.65, 0.55, 0.45};
  int repetitions = 1;                                  // used when randomize_cycles is unset
  std::optional<std::pair<int, int>> randomize_cycles;  // inclusive repetition range
  std::optional<std::pair<double, double>> demand_scale_range;
  void validate() const;
};

// SOC shaping term alone (soc as a fraction).
double soc_shaping(double soc, const RewardWeights& w);
double reward_fn(double fuel_g, double soc, double soc_init, const RewardWeights& w);

struct NormBounds {
  double distance_hi = 1.0;
  double p_em_lo = -600e3, p_em_hi = 600e3;
  double omega_hi = 2300.0;
  double torque_hi = 1500.0;
};

double normalize(double x, double lo, double hi);
double denormalize(double u, double lo, double hi);
std::array<double, 3> normalize_obs(const EnvObservation& obs, const NormBounds& b);
EnvAction denormalize_action(const std::array<double, 2>& u, const NormBounds& b);
std::array<double, 2> normalize_action(const EnvAction& a, const NormBounds& b);

/// Everything recorded about one simulated step.
struct StepInfo {
  int step = 0;
  double v = 0.0;
  double soc = 0.0;       // at the start of the step
  double soc_next = 0.0;
  double p_em = 0.0;
  double omega = 0.0;     // clipped command
  double torque = 0.0;
  double fuel_g = 0.0;
  double p_genset = 0.0;
  double p_batt = 0.0;
  double i_batt = 0.0;
  double reward = 0.0;
  double bus_residual = 0.0;
  bool done = false;
  bool em_feasible = true;
  bool power_limited = false;
  bool soc_failure = false;
};

struct StepResult {
  EnvObservation obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// Series-HEV episode: exogenous drive-cycle demand, engine operating point as
/// the action, battery closing the electrical bus.
class ShevEnv {
 public:
  ShevEnv(std::shared_ptr<const powertrain::PowertrainModel> model, EpisodeConfig cfg, RewardWeights w = {});

  EnvObservation reset(std::mt19937_64& rng);
  EnvObservation reset_fixed(double initial_soc, int repetitions = 1, double demand_scale = 1.0);
  StepResult step(const EnvAction& action);

  bool active() const { return active_; }
  int step_index() const { return step_; }
  int episode_length() const { return static_cast<int>(demand_.size()); }
  double initial_soc() const { return soc_init_; }
  double demand_scale() const { return scale_; }
  int repetitions() const { return reps_; }
  double total_distance() const { return total_distance_; }
  const NormBounds& bounds() const { return bounds_; }
  const EnvObservation& observation() const { return obs_; }
  const powertrain::PowertrainModel& model() const { return *model_; }
  const EpisodeConfig& config() const { return cfg_; }
  const RewardWeights& weights() const { return weights_; }
  const cycles::DriveCycle& episode_cycle() const { return episode_cycle_; }
  // Per-step EM demand of the current episode (scaled).
  const std::vector<double>& demand() const { return demand_; }

 private:
  EnvObservation begin(double soc0, int reps, double scale);

  std::shared_ptr<const powertrain::PowertrainModel> model_;
  EpisodeConfig cfg_;
  RewardWeights weights_;
  cycles::DriveCycle episode_cycle_;
  std::vector<double> demand_;
  std::vector<char> em_feasible_;
  NormBounds bounds_;
  EnvObservation obs_;
  double soc_init_ = 0.0;
  double scale_ = 1.0;
  int reps_ = 1;
  double total_distance_ = 0.0;
  int step_ = 0;
  bool active_ = false;
};

// Per-step EM electrical demand for a cycle (no scaling); `feasible` flags each step.
std::vector<double> cycle_demand(const cycles::DriveCycle& cycle, const powertrain::PowertrainModel& model,
                                 std::vector<char>* feasible = nullptr);

struct EpisodeSummary {
  double total_fuel_g = 0.0;
  double distance_m = 0.0;
  double mpg = 0.0;
  double soc_initial = 0.0;
  double soc_final = 0.0;
  double mean_reward = 0.0;
  int steps = 0;
  bool failed = false;
};

EpisodeSummary summarize(const std::vector<StepInfo>& trace, double dt, double fuel_density = 0.85);

using Meta = std::map<std::string, std::string>;

// Trace CSV: a "# key=value,..." header, the column row, one row per step with
// the SOC at the start of the step, then a terminal row holding the final SOC.
void write_trace(const std::string& path, const std::vector<StepInfo>& trace, const Meta& meta);
std::vector<StepInfo> read_trace(const std::string& path, Meta* meta = nullptr);
void write_summary(const std::string& path, const EpisodeSummary& s, const Meta& meta);
Meta read_kv_file(const std::string& path);

}  // namespace shev::env
