#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "shev/autodiff.hpp"

namespace shev::nets {

using ad::Matrix;
using ad::Tape;
using ad::Var;

enum class Family { FFN, GRU, DT };
enum class Role { actor, critic };

std::string to_string(Family f);
Family parse_family(std::string_view s);

struct NetConfig {
  Family family = Family::FFN;
  Role role = Role::actor;
  int hidden = 128;
  int depth = 2;  // FFN hidden layers, GRU layers, DT blocks
  int heads = 4;  // DT only
  int context_k = 1;
  int state_dim = 3;
  int action_dim = 2;
  int ff_mult = 4;          // DT feedforward expansion
  int max_timestep = 10000; // DT timestep-embedding rows

  // Width of the per-step input vector for FFN/GRU (state, plus action for critics).
  int input_dim() const { return state_dim + (role == Role::critic ? action_dim : 0); }
  // Actors emit [mean | log_std]; critics emit Q.
  int output_dim() const { return role == Role::actor ? 2 * action_dim : 1; }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

// Default structures: FFN [128,128], GRU(128, 2 layers), DT 128 wide, 1 block, 4 heads.
NetConfig make_config(Family f, Role role, int context_k, int hidden = 128);

/// Named parameter arrays in a fixed order, with a flat-vector view.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Matrix value;
  };

  void add(std::string name, Matrix value);
  std::size_t size() const { return entries_.size(); }
  std::size_t count() const;
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  Matrix& value(std::size_t i) { return entries_[i].value; }
  const Matrix& value(std::size_t i) const { return entries_[i].value; }
  std::optional<std::size_t> find(std::string_view name) const;
  const Matrix& operator[](std::string_view name) const;
  Matrix& operator[](std::string_view name);

  Eigen::VectorXd flat() const;
  void set_flat(const Eigen::VectorXd& x);
  ParamSet zeros_like() const;
  bool same_shape(const ParamSet& o) const;
  bool all_finite() const;
  bool operator==(const ParamSet& o) const;

 private:
  std::vector<Entry> entries_;
};

ParamSet init_params(const NetConfig& cfg, std::uint64_t seed);

/// Parameters placed on a tape; gradients flow into `grads` when provided.
class Bound {
 public:
  Bound(Tape& tape, const ParamSet& p, ParamSet* grads);
  Var operator()(std::string_view name) const;
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  const ParamSet* set_;
  std::vector<Var> vars_;
};

Var linear(const Bound& p, const std::string& prefix, Var x);
Var ffn_forward(const Bound& p, Var x, int depth);

struct GruResult {
  std::vector<Var> outputs;  // top-layer hidden state per step
  std::vector<Var> h_final;  // per layer
};
GruResult gru_forward(const Bound& p, std::span<const Var> xs, std::span<const Var> h0, int layers);

/// A batch of length-k windows laid out per position (each B x dim).
struct WindowVars {
  std::vector<Var> states;
  std::vector<Var> actions;
  std::vector<Var> rtg;
  std::vector<std::vector<int>> timesteps;  // [position][batch]
  int batch() const { return static_cast<int>(states.front().rows()); }
  int length() const { return static_cast<int>(states.size()); }
};

enum class DtReadout { state_token, action_token };
// Final-normalized transformer outputs at the chosen token of every step.
std::vector<Var> dt_forward(const Bound& p, const NetConfig& cfg, const WindowVars& w, DtReadout readout);

// Head output (B x output_dim) at every position of the window.
std::vector<Var> net_forward(const NetConfig& cfg, const Bound& p, const WindowVars& w,
                             std::span<const Var> h0 = {}, std::vector<Var>* h_final = nullptr);

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kSquashEps = 1e-6;
// tanh rounds to exactly 1 beyond |u| ~ 19; keep actions strictly inside.
inline constexpr double kActionLimit = 1.0 - 0x1p-52;

/// Squashed-Gaussian policy sample for a batch (B x A), log_prob B x 1.
struct PolicyVars {
  Var action;
  Var log_prob;
  Var mean_action;  // tanh(mean)
};
PolicyVars sample_policy(Var head_out, int action_dim, const Matrix& noise);

struct PolicyOutput {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_std;
  Eigen::VectorXd action;
  double log_prob = 0.0;
};
PolicyOutput gaussian_head(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_std, const Eigen::VectorXd& noise);

using LossFn = std::function<double(const ParamSet& p, ParamSet* grad)>;
// Max relative error between the analytic gradient and central differences on
// a random subsample of coordinates.
double grad_check(const LossFn& f, const ParamSet& p, double eps, std::uint64_t seed, int samples = 200);

/// Self-describing container of named arrays plus string metadata.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Matrix>> arrays;

  const Matrix& array(std::string_view name) const;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

void put_net(Checkpoint& c, const std::string& prefix, const NetConfig& cfg, const ParamSet& p);
std::pair<NetConfig, ParamSet> get_net(const Checkpoint& c, const std::string& prefix);

}  // namespace shev::nets
