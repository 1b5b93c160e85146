#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include "shev/env.hpp"
#include "shev/nets.hpp"

namespace shev::sac {

using nets::Family;
using nets::Matrix;
using nets::ParamSet;

using State = std::array<double, 3>;   // normalized observation
using Action = std::array<double, 2>;  // normalized engine command

struct SacConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int batch = 64;
  double gamma = 0.99;
  double tau = 0.005;
  bool auto_alpha = true;
  double initial_alpha = 1.0;
  double target_entropy = -2.0;
  std::size_t buffer_capacity = 1'000'000;
  double grad_clip = 0.0;  // global norm per network, 0 disables
  int train_freq = 5;      // environment steps per update round
  int updates_per_round = 1;
  int warmup_steps = 1000;
  double reward_scale = 1.0;   // applied before storage
  double rtg_scale = 1e-3;     // DT return tokens are fed as R * rtg_scale
  bool persistent_hidden = false;
  std::optional<double> dt_target_return;  // conditioning R_0; running max when unset
  bool sequential_sampling = false;        // FFN: one contiguous run per batch

  void validate() const;
};

// Per-family defaults: train_freq 5/25/50 and 0.25 clipping for GRU.
SacConfig default_config(Family actor);

enum class Pairing { FFN_FFN, GRU_GRU, DT_GRU, DT_DT };
std::string to_string(Pairing p);
Pairing parse_pairing(const std::string& s);
Pairing pairing_of(Family actor, Family critic);

struct AgentVariant {
  nets::NetConfig actor_cfg, critic_cfg;
  ParamSet actor;
  std::array<ParamSet, 2> critic, target;
  double log_alpha = 0.0;
  int context_k = 1;

  Pairing pairing() const { return pairing_of(actor_cfg.family, critic_cfg.family); }
  double alpha() const;
  void validate() const;
};

AgentVariant make_agent(Family actor, Family critic, int context_k, std::uint64_t seed, int hidden = 128,
                        double initial_alpha = 1.0);

// --- replay -------------------------------------------------------------------

struct Episode {
  std::uint64_t id = 0;
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<double> rewards;  // scaled
  std::vector<double> rtg;      // hindsight return-to-go
  std::vector<State> next_states;
  std::vector<char> dones;
  std::size_t size() const { return rewards.size(); }
};

// R_0 = sum of rewards, R_{t+1} = R_t - r_t.
void relabel_returns(Episode& ep);

struct WindowIndex {
  std::size_t slot = 0;     // position in the buffer at sampling time
  std::uint64_t episode_id = 0;
  std::vector<int> steps;   // per window position; padded positions repeat step 0
  int pad = 0;
};

/// A sampled minibatch laid out per window position (each B x dim).
struct Batch {
  int size = 0;
  int k = 0;
  std::vector<Matrix> states, actions, rewards, next_states, dones, rtg, next_rtg, next_actions;
  std::vector<std::vector<int>> timesteps, next_timesteps;
  std::vector<WindowIndex> index;
};

/// Episode-structured replay with whole-episode eviction.
class TrajectoryBuffer {
 public:
  explicit TrajectoryBuffer(std::size_t capacity);

  // Relabels returns, stores, evicts oldest episodes past capacity.
  void add_episode(Episode ep);
  std::size_t total_steps() const;
  std::size_t episodes() const;
  std::size_t capacity() const { return capacity_; }
  Episode episode(std::size_t slot) const;

  // Window of length k from a length-weighted episode; short episodes are
  // left-padded with their first record.
  WindowIndex sample_index(int k, std::mt19937_64& rng) const;
  Batch sample(int batch, int k, std::mt19937_64& rng) const;
  // k = 1 batch of consecutive transitions (global order).
  Batch sample_sequential(int batch, std::mt19937_64& rng) const;

 private:
  Batch assemble(const std::vector<WindowIndex>& idx, int k) const;
  WindowIndex index_locked(int k, std::mt19937_64& rng) const;

  std::size_t capacity_;
  std::size_t total_ = 0;
  std::deque<Episode> eps_;
  std::vector<std::size_t> cum_;  // cumulative lengths
  mutable std::shared_mutex mu_;
};

// --- acting -----------------------------------------------------------------------

/// Episode so far, as seen by the actor.
struct History {
  std::vector<State> states;    // s_0 .. s_t
  std::vector<Action> actions;  // a_0 .. a_{t-1}
  std::vector<double> rewards;  // scaled r_0 .. r_{t-1}
  std::vector<double> rtg;      // conditioning R_0 .. R_t
  std::vector<Matrix> hidden;   // persistent GRU state

  void start(const State& s0, double r0);
  void advance(const Action& a, double reward, const State& next);
  int t() const { return static_cast<int>(states.size()) - 1; }
};

Action select_action(const AgentVariant& agent, History& history, bool deterministic, std::mt19937_64& rng,
                     const SacConfig& cfg);

// --- losses -----------------------------------------------------------------------

// Squared-error reductions: FFN/DT mean over the batch at the last position,
// GRU sums positions then averages over the batch.
double critic_reduce(Family critic_family, const std::vector<Matrix>& q, const std::vector<Matrix>& y);

// Targets per window position (DT critic: final position only).
std::vector<Matrix> critic_targets(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                   const std::vector<Matrix>& noise);
std::vector<Matrix> critic_targets(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                   std::mt19937_64& rng);

struct CriticLoss {
  double loss = 0.0;
  std::vector<Matrix> q;  // online predictions per position
};
// Loss of critic i against fixed targets; gradients go to *grad when set.
CriticLoss critic_loss(const Batch& b, const AgentVariant& agent, int i, const std::vector<Matrix>& y,
                       const SacConfig& cfg, ParamSet* grad);

struct ActorLoss {
  double j_pi = 0.0;
  double l_alpha = 0.0;
  double mean_log_pi = 0.0;
  double d_log_alpha = 0.0;  // dL_alpha/dlog_alpha
};
ActorLoss actor_and_alpha_losses(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                 const Matrix& noise, ParamSet* actor_grad);

void soft_update(ParamSet& target, const ParamSet& online, double tau);
// Scales g in place to the given global norm; returns the pre-clip norm.
double clip_global_norm(ParamSet& g, double max_norm);

class Adam {
 public:
  Adam() = default;
  explicit Adam(const ParamSet& like) : m_(like.zeros_like()), v_(like.zeros_like()) {}
  void step(ParamSet& p, const ParamSet& g, const SacConfig& c);
  long steps() const { return t_; }

 private:
  ParamSet m_, v_;
  long t_ = 0;
};

struct UpdateStats {
  double critic1 = 0.0, critic2 = 0.0, actor = 0.0, alpha = 0.0;
};

/// Optimizer state for one agent.
class Learner {
 public:
  Learner(AgentVariant& agent, const SacConfig& cfg);
  Learner(const Learner&) = delete;
  Learner& operator=(const Learner&) = delete;
  UpdateStats update(const Batch& b, std::mt19937_64& rng);

 private:
  AgentVariant* agent_;
  SacConfig cfg_;
  Adam actor_opt_;
  std::array<Adam, 2> critic_opt_;
  double a_m_ = 0.0, a_v_ = 0.0;
  long a_t_ = 0;
};

// --- training loop ----------------------------------------------------------------

struct EpisodeLog {
  int episode = 0;
  int steps = 0;
  double mean_reward = 0.0;  // raw reward per step
  double critic1_loss = 0.0, critic2_loss = 0.0, actor_loss = 0.0;
  double alpha = 0.0;
  double wall_s = 0.0;
  double soc_final = 0.0;
};

std::string log_header();
std::string format_log_row(const EpisodeLog& e);

// 10-episode trailing mean (shorter at the start).
std::vector<double> moving_average(const std::vector<double>& x, int window = 10);

struct TrainOptions {
  int first_episode = 1;
  bool learn = true;
  std::string log_path;         // appended CSV, header written when new
  std::string best_checkpoint;  // saved when the moving average improves
  std::string dump_dir;         // NaN diagnostics
  std::function<void(const EpisodeLog&, const std::vector<env::StepInfo>&)> on_episode;
  env::Meta checkpoint_meta;
};

struct TrainResult {
  std::vector<EpisodeLog> log;
  std::optional<AgentVariant> best;
  double best_ma = 0.0;
  int best_episode = 0;
};

/// Interleaved rollout and learning.
class Trainer {
 public:
  Trainer(env::ShevEnv& env, AgentVariant agent, SacConfig cfg, std::uint64_t seed);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  TrainResult run(int episodes, const TrainOptions& opt = {});
  const AgentVariant& agent() const { return agent_; }
  const TrajectoryBuffer& buffer() const { return buffer_; }
  std::uint64_t total_steps() const { return steps_; }
  double running_best_return() const { return best_return_; }

 private:
  env::ShevEnv* env_;
  AgentVariant agent_;
  SacConfig cfg_;
  std::mt19937_64 rng_;
  TrajectoryBuffer buffer_;
  Learner learner_;
  std::uint64_t steps_ = 0;
  std::uint64_t next_id_ = 0;
  double best_return_ = 0.0;
  bool have_return_ = false;
  std::vector<double> rewards_;  // per-episode mean reward across run() calls
};

TrainResult train(env::ShevEnv& env, AgentVariant& agent, const SacConfig& cfg, int episodes, std::uint64_t seed,
                  const TrainOptions& opt = {});

// Greedy (deterministic) rollout from a fixed initial SOC.
std::vector<env::StepInfo> evaluate(env::ShevEnv& env, const AgentVariant& agent, const SacConfig& cfg,
                                    double initial_soc, std::uint64_t seed = 1);

nets::Checkpoint agent_checkpoint(const AgentVariant& a, const env::Meta& meta = {});
AgentVariant agent_from_checkpoint(const nets::Checkpoint& c);

}  // namespace shev::sac
