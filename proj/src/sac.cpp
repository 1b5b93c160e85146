#include "shev/sac.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include "shev/error.hpp"
#include "shev/text.hpp"

using shev::text::fmt_double;

namespace shev::sac {

using nets::Bound;
using nets::Role;
using nets::Tape;
using nets::Var;
using nets::WindowVars;

void SacConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("sac.lr must be positive");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("sac.gamma must lie in (0, 1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("sac.tau must lie in (0, 1]");
  if (batch < 1) throw ConfigError("sac.batch must be >= 1");
  if (train_freq < 1 || updates_per_round < 1) throw ConfigError("sac.train_freq and sac.updates_per_round must be >= 1");
  if (warmup_steps < 0) throw ConfigError("sac.warmup_steps must be >= 0");
  if (buffer_capacity < 1) throw ConfigError("sac.buffer_capacity must be >= 1");
  if (grad_clip < 0.0) throw ConfigError("sac.grad_clip must be >= 0");
  if (!(initial_alpha > 0.0)) throw ConfigError("sac.initial_alpha must be positive");
  if (!(reward_scale > 0.0) || !(rtg_scale > 0.0)) throw ConfigError("reward and return scales must be positive");
}

SacConfig default_config(Family actor) {
  SacConfig c;
  switch (actor) {
    case Family::FFN: c.train_freq = 5; break;
    case Family::GRU:
      c.train_freq = 25;
      c.grad_clip = 0.25;
      break;
    case Family::DT: c.train_freq = 50; break;
  }
  return c;
}

std::string to_string(Pairing p) {
  switch (p) {
    case Pairing::FFN_FFN: return "ffn-ffn";
    case Pairing::GRU_GRU: return "gru-gru";
    case Pairing::DT_GRU: return "dt-gru";
    case Pairing::DT_DT: return "dt-dt";
  }
  return "?";
}

Pairing parse_pairing(const std::string& s) {
  for (auto p : {Pairing::FFN_FFN, Pairing::GRU_GRU, Pairing::DT_GRU, Pairing::DT_DT})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown actor-critic pairing '" + s + "' (ffn-ffn, gru-gru, dt-gru, dt-dt)");
}

Pairing pairing_of(Family actor, Family critic) {
  if (actor == Family::FFN && critic == Family::FFN) return Pairing::FFN_FFN;
  if (actor == Family::GRU && critic == Family::GRU) return Pairing::GRU_GRU;
  if (actor == Family::DT && critic == Family::GRU) return Pairing::DT_GRU;
  if (actor == Family::DT && critic == Family::DT) return Pairing::DT_DT;
  throw ConfigError("unsupported pairing " + nets::to_string(actor) + "-" + nets::to_string(critic));
}

double AgentVariant::alpha() const { return std::exp(log_alpha); }

void AgentVariant::validate() const {
  pairing_of(actor_cfg.family, critic_cfg.family);
  for (int i = 0; i < 2; ++i)
    if (!critic[static_cast<std::size_t>(i)].same_shape(target[static_cast<std::size_t>(i)]))
      throw ShapeError("target critic does not match its online critic");
  if (context_k < 1) throw ConfigError("context_k must be >= 1");
}

AgentVariant make_agent(Family actor, Family critic, int context_k, std::uint64_t seed, int hidden,
                        double initial_alpha) {
  pairing_of(actor, critic);
  const int k = actor == Family::FFN ? 1 : context_k;
  AgentVariant a;
  a.context_k = k;
  a.actor_cfg = nets::make_config(actor, Role::actor, k, hidden);
  a.critic_cfg = nets::make_config(critic, Role::critic, k, hidden);
  a.actor = nets::init_params(a.actor_cfg, seed);
  a.critic[0] = nets::init_params(a.critic_cfg, seed + 1);
  a.critic[1] = nets::init_params(a.critic_cfg, seed + 2);
  a.target = a.critic;
  a.log_alpha = std::log(initial_alpha);
  return a;
}

// --- replay -------------------------------------------------------------------

void relabel_returns(Episode& ep) {
  const std::size_t n = ep.size();
  ep.rtg.assign(n, 0.0);
  if (n == 0) return;
  double total = 0.0;
  for (double r : ep.rewards) total += r;
  ep.rtg[0] = total;
  for (std::size_t t = 0; t + 1 < n; ++t) ep.rtg[t + 1] = ep.rtg[t] - ep.rewards[t];
}

TrajectoryBuffer::TrajectoryBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("buffer capacity must be positive");
}

void TrajectoryBuffer::add_episode(Episode ep) {
  const std::size_t n = ep.size();
  if (n == 0) return;
  if (ep.states.size() != n || ep.actions.size() != n || ep.next_states.size() != n || ep.dones.size() != n)
    throw ShapeError("episode arrays have inconsistent lengths");
  relabel_returns(ep);
  std::unique_lock lock(mu_);
  total_ += n;
  eps_.push_back(std::move(ep));
  while (total_ > capacity_ && eps_.size() > 1) {
    total_ -= eps_.front().size();
    eps_.pop_front();
  }
  cum_.clear();
  std::size_t acc = 0;
  for (const auto& e : eps_) cum_.push_back(acc += e.size());
}

std::size_t TrajectoryBuffer::total_steps() const {
  std::shared_lock lock(mu_);
  return total_;
}

std::size_t TrajectoryBuffer::episodes() const {
  std::shared_lock lock(mu_);
  return eps_.size();
}

Episode TrajectoryBuffer::episode(std::size_t slot) const {
  std::shared_lock lock(mu_);
  return eps_.at(slot);
}

WindowIndex TrajectoryBuffer::index_locked(int k, std::mt19937_64& rng) const {
  if (total_ == 0) throw UsageError("cannot sample from an empty buffer");
  std::uniform_int_distribution<std::size_t> pick(0, total_ - 1);
  const std::size_t g = pick(rng);
  const auto slot = static_cast<std::size_t>(std::upper_bound(cum_.begin(), cum_.end(), g) - cum_.begin());
  const Episode& ep = eps_[slot];
  const int len = static_cast<int>(ep.size());
  WindowIndex w;
  w.slot = slot;
  w.episode_id = ep.id;
  if (len >= k) {
    std::uniform_int_distribution<int> start(0, len - k);
    const int s = start(rng);
    for (int j = 0; j < k; ++j) w.steps.push_back(s + j);
  } else {
    w.pad = k - len;
    w.steps.assign(static_cast<std::size_t>(w.pad), 0);
    for (int j = 0; j < len; ++j) w.steps.push_back(j);
  }
  return w;
}

WindowIndex TrajectoryBuffer::sample_index(int k, std::mt19937_64& rng) const {
  if (k < 1) throw ConfigError("window length must be >= 1");
  std::shared_lock lock(mu_);
  return index_locked(k, rng);
}

Batch TrajectoryBuffer::sample(int batch, int k, std::mt19937_64& rng) const {
  if (k < 1 || batch < 1) throw ConfigError("batch and window length must be >= 1");
  std::shared_lock lock(mu_);
  std::vector<WindowIndex> idx;
  idx.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) idx.push_back(index_locked(k, rng));
  return assemble(idx, k);
}

Batch TrajectoryBuffer::sample_sequential(int batch, std::mt19937_64& rng) const {
  std::shared_lock lock(mu_);
  if (total_ < static_cast<std::size_t>(batch)) throw UsageError("buffer holds fewer transitions than the batch");
  std::uniform_int_distribution<std::size_t> pick(0, total_ - static_cast<std::size_t>(batch));
  std::size_t g = pick(rng);
  std::vector<WindowIndex> idx;
  for (int b = 0; b < batch; ++b, ++g) {
    const auto slot = static_cast<std::size_t>(std::upper_bound(cum_.begin(), cum_.end(), g) - cum_.begin());
    const std::size_t before = slot == 0 ? 0 : cum_[slot - 1];
    WindowIndex w;
    w.slot = slot;
    w.episode_id = eps_[slot].id;
    w.steps = {static_cast<int>(g - before)};
    idx.push_back(std::move(w));
  }
  return assemble(idx, 1);
}

Batch TrajectoryBuffer::assemble(const std::vector<WindowIndex>& idx, int k) const {
  Batch b;
  b.size = static_cast<int>(idx.size());
  b.k = k;
  b.index = idx;
  const auto B = static_cast<Eigen::Index>(idx.size());
  auto alloc = [&](std::vector<Matrix>& v, Eigen::Index cols) { v.assign(static_cast<std::size_t>(k), Matrix(B, cols)); };
  alloc(b.states, 3);
  alloc(b.actions, 2);
  alloc(b.rewards, 1);
  alloc(b.next_states, 3);
  alloc(b.dones, 1);
  alloc(b.rtg, 1);
  alloc(b.next_rtg, 1);
  alloc(b.next_actions, 2);
  b.timesteps.assign(static_cast<std::size_t>(k), std::vector<int>(idx.size()));
  b.next_timesteps = b.timesteps;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Episode& ep = eps_[idx[i].slot];
    const auto row = static_cast<Eigen::Index>(i);
    for (int j = 0; j < k; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      const auto r = static_cast<std::size_t>(idx[i].steps[ju]);
      for (int c = 0; c < 3; ++c) {
        b.states[ju](row, c) = ep.states[r][static_cast<std::size_t>(c)];
        b.next_states[ju](row, c) = ep.next_states[r][static_cast<std::size_t>(c)];
      }
      for (int c = 0; c < 2; ++c) {
        b.actions[ju](row, c) = ep.actions[r][static_cast<std::size_t>(c)];
        b.next_actions[ju](row, c) = r + 1 < ep.size() ? ep.actions[r + 1][static_cast<std::size_t>(c)] : 0.0;
      }
      b.rewards[ju](row, 0) = ep.rewards[r];
      b.dones[ju](row, 0) = ep.dones[r] ? 1.0 : 0.0;
      b.rtg[ju](row, 0) = ep.rtg[r];
      b.next_rtg[ju](row, 0) = ep.rtg[r] - ep.rewards[r];
      b.timesteps[ju][i] = static_cast<int>(r);
      b.next_timesteps[ju][i] = static_cast<int>(r) + 1;
    }
  }
  return b;
}

// --- network plumbing -----------------------------------------------------------------

namespace {

std::vector<Var> constants(Tape& t, const std::vector<Matrix>& m) {
  std::vector<Var> v;
  v.reserve(m.size());
  for (const auto& x : m) v.push_back(t.constant(x));
  return v;
}

WindowVars make_window(Tape& t, const std::vector<Matrix>& states, std::vector<Var> actions,
                       const std::vector<Matrix>& rtg, const std::vector<std::vector<int>>& ts, double rtg_scale) {
  WindowVars w;
  w.states = constants(t, states);
  w.actions = std::move(actions);
  for (const auto& r : rtg) w.rtg.push_back(t.constant(r * rtg_scale));
  w.timesteps = ts;
  return w;
}

Matrix randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

bool literal_dt_critic(const AgentVariant& a) { return a.pairing() == Pairing::DT_DT; }

std::string describe_batch(const Batch& b, int rows = 4) {
  std::ostringstream os;
  os << "batch size " << b.size << ", window " << b.k << "\n";
  for (int i = 0; i < std::min(rows, b.size); ++i) {
    const auto& w = b.index[static_cast<std::size_t>(i)];
    os << "  row " << i << ": episode " << w.episode_id << " steps " << w.steps.front() << ".." << w.steps.back()
       << " pad " << w.pad << " | last s=[" << b.states.back().row(i) << "] a=[" << b.actions.back().row(i)
       << "] r=" << b.rewards.back()(i, 0) << " R=" << b.rtg.back()(i, 0) << " done=" << b.dones.back()(i, 0)
       << "\n";
  }
  return os.str();
}

}  // namespace

// --- acting -----------------------------------------------------------------------------

void History::start(const State& s0, double r0) {
  states = {s0};
  actions.clear();
  rewards.clear();
  rtg = {r0};
  hidden.clear();
}

void History::advance(const Action& a, double reward, const State& next) {
  actions.push_back(a);
  rewards.push_back(reward);
  rtg.push_back(rtg.back() - reward);
  states.push_back(next);
}

Action select_action(const AgentVariant& agent, History& h, bool deterministic, std::mt19937_64& rng,
                     const SacConfig& cfg) {
  if (h.states.empty()) throw UsageError("select_action needs at least the current state");
  const int t = h.t();
  const auto& acfg = agent.actor_cfg;
  Tape tape;
  Bound p(tape, agent.actor, nullptr);
  auto state_row = [&](int i) {
    Matrix m(1, 3);
    for (int c = 0; c < 3; ++c) m(0, c) = h.states[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    return m;
  };
  Matrix head;
  if (acfg.family == Family::GRU && cfg.persistent_hidden) {
    std::vector<Var> h0;
    if (!h.hidden.empty())
      for (const auto& m : h.hidden) h0.push_back(tape.constant(m));
    WindowVars w;
    w.states = {tape.constant(state_row(t))};
    std::vector<Var> hf;
    head = nets::net_forward(acfg, p, w, h0, &hf).back().value();
    h.hidden.clear();
    for (const auto& v : hf) h.hidden.push_back(v.value());
  } else {
    const int k = acfg.family == Family::FFN ? 1 : agent.context_k;
    WindowVars w;
    for (int j = 0; j < k; ++j) {
      const int i = std::max(0, t - k + 1 + j);  // left pad with the initial record
      w.states.push_back(tape.constant(state_row(i)));
      Matrix a = Matrix::Zero(1, 2);
      if (i < t)
        for (int c = 0; c < 2; ++c) a(0, c) = h.actions[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
      w.actions.push_back(tape.constant(a));
      w.rtg.push_back(tape.constant(Matrix::Constant(1, 1, h.rtg[static_cast<std::size_t>(i)] * cfg.rtg_scale)));
      w.timesteps.push_back({i});
    }
    head = nets::net_forward(acfg, p, w).back().value();
  }
  const int A = acfg.action_dim;
  Eigen::VectorXd mean = head.row(0).head(A).transpose();
  Eigen::VectorXd log_std = head.row(0).segment(A, A).transpose();
  Action out{};
  if (deterministic) {
    for (int c = 0; c < A; ++c)
      out[static_cast<std::size_t>(c)] = std::clamp(std::tanh(mean(c)), -nets::kActionLimit, nets::kActionLimit);
    return out;
  }
  Eigen::VectorXd noise(A);
  std::normal_distribution<double> nd;
  for (int c = 0; c < A; ++c) noise(c) = nd(rng);
  const auto po = nets::gaussian_head(mean, log_std, noise);
  for (int c = 0; c < A; ++c) out[static_cast<std::size_t>(c)] = po.action(c);
  return out;
}

// --- losses -----------------------------------------------------------------------------

double critic_reduce(Family critic_family, const std::vector<Matrix>& q, const std::vector<Matrix>& y) {
  if (q.empty() || y.empty()) throw ShapeError("empty critic loss inputs");
  if (critic_family == Family::GRU) {
    if (q.size() != y.size()) throw ShapeError("sequence critic needs one target per position");
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += (q[j] - y[j]).squaredNorm();
    return s / static_cast<double>(q.front().rows());
  }
  return (q.back() - y.back()).squaredNorm() / static_cast<double>(q.back().rows());
}

std::vector<Matrix> critic_targets(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                   const std::vector<Matrix>& noise) {
  Tape t;
  const auto& ccfg = agent.critic_cfg;
  if (literal_dt_critic(agent)) {
    // Target network's predicted next return on the shifted trajectory.
    auto w = make_window(t, b.next_states, constants(t, b.next_actions), b.next_rtg, b.next_timesteps, cfg.rtg_scale);
    const Matrix q1 = nets::net_forward(ccfg, Bound(t, agent.target[0], nullptr), w).back().value();
    const Matrix q2 = nets::net_forward(ccfg, Bound(t, agent.target[1], nullptr), w).back().value();
    return {q1.cwiseMin(q2)};
  }
  if (static_cast<int>(noise.size()) != b.k) throw ShapeError("critic_targets needs one noise draw per position");
  Bound actor(t, agent.actor, nullptr);
  auto aw = make_window(t, b.next_states, constants(t, b.next_actions), b.next_rtg, b.next_timesteps, cfg.rtg_scale);
  auto heads = nets::net_forward(agent.actor_cfg, actor, aw);
  std::vector<Var> next_actions;
  std::vector<Matrix> logp;
  for (int j = 0; j < b.k; ++j) {
    auto pv = nets::sample_policy(heads[static_cast<std::size_t>(j)], agent.actor_cfg.action_dim,
                                  noise[static_cast<std::size_t>(j)]);
    next_actions.push_back(t.constant(pv.action.value()));
    logp.push_back(pv.log_prob.value());
  }
  auto cw = make_window(t, b.next_states, next_actions, b.next_rtg, b.next_timesteps, cfg.rtg_scale);
  auto q1 = nets::net_forward(ccfg, Bound(t, agent.target[0], nullptr), cw);
  auto q2 = nets::net_forward(ccfg, Bound(t, agent.target[1], nullptr), cw);
  const double alpha = agent.alpha();
  std::vector<Matrix> y;
  for (int j = 0; j < b.k; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const Matrix soft = q1[ju].value().cwiseMin(q2[ju].value()) - alpha * logp[ju];
    const Matrix mask = (1.0 - b.dones[ju].array()).matrix();
    y.push_back(b.rewards[ju] + cfg.gamma * mask.cwiseProduct(soft));
  }
  return y;
}

std::vector<Matrix> critic_targets(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                   std::mt19937_64& rng) {
  std::vector<Matrix> noise;
  for (int j = 0; j < b.k; ++j) noise.push_back(randn(b.size, agent.actor_cfg.action_dim, rng));
  return critic_targets(b, agent, cfg, noise);
}

CriticLoss critic_loss(const Batch& b, const AgentVariant& agent, int i, const std::vector<Matrix>& y,
                       const SacConfig& cfg, ParamSet* grad) {
  Tape t;
  Bound c(t, agent.critic[static_cast<std::size_t>(i)], grad);
  auto w = make_window(t, b.states, constants(t, b.actions), b.rtg, b.timesteps, cfg.rtg_scale);
  auto q = nets::net_forward(agent.critic_cfg, c, w);
  const double batch = static_cast<double>(b.size);
  Var loss;
  if (agent.critic_cfg.family == Family::GRU) {
    if (y.size() != q.size()) throw ShapeError("sequence critic needs one target per position");
    loss = t.constant(Matrix::Zero(1, 1));
    for (std::size_t j = 0; j < q.size(); ++j) loss = ad::add(loss, ad::sum(ad::square(ad::sub(q[j], t.constant(y[j])))));
    loss = ad::scale(loss, 1.0 / batch);
  } else {
    loss = ad::mean(ad::square(ad::sub(q.back(), t.constant(y.back()))));
  }
  if (grad) t.backward(loss);
  CriticLoss out;
  out.loss = loss.scalar();
  for (const auto& v : q) out.q.push_back(v.value());
  return out;
}

ActorLoss actor_and_alpha_losses(const Batch& b, const AgentVariant& agent, const SacConfig& cfg,
                                 const Matrix& noise, ParamSet* actor_grad) {
  Tape t;
  Bound actor(t, agent.actor, actor_grad);
  auto aw = make_window(t, b.states, constants(t, b.actions), b.rtg, b.timesteps, cfg.rtg_scale);
  auto heads = nets::net_forward(agent.actor_cfg, actor, aw);
  auto pv = nets::sample_policy(heads.back(), agent.actor_cfg.action_dim, noise);

  // Critic sees the stored actions, with the fresh sample at the final position.
  std::vector<Var> acts = constants(t, b.actions);
  acts.back() = pv.action;
  auto cw = make_window(t, b.states, acts, b.rtg, b.timesteps, cfg.rtg_scale);
  const Var q1 = nets::net_forward(agent.critic_cfg, Bound(t, agent.critic[0], nullptr), cw).back();
  const Var q2 = nets::net_forward(agent.critic_cfg, Bound(t, agent.critic[1], nullptr), cw).back();
  const double alpha = agent.alpha();
  const Var mean_logp = ad::mean(pv.log_prob);
  const Var j = ad::sub(ad::scale(mean_logp, alpha), ad::mean(ad::minimum(q1, q2)));
  if (actor_grad) t.backward(j);
  ActorLoss out;
  out.j_pi = j.scalar();
  out.mean_log_pi = mean_logp.scalar();
  out.l_alpha = -alpha * (out.mean_log_pi + cfg.target_entropy);
  out.d_log_alpha = out.l_alpha;  // d/dlog_alpha of -exp(log_alpha) * c
  return out;
}

void soft_update(ParamSet& target, const ParamSet& online, double tau) {
  if (!target.same_shape(online)) throw ShapeError("soft_update: target and online shapes differ");
  for (std::size_t i = 0; i < target.size(); ++i)
    target.value(i) = tau * online.value(i) + (1.0 - tau) * target.value(i);
}

double clip_global_norm(ParamSet& g, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) sq += g.value(i).squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < g.size(); ++i) g.value(i) *= s;
  }
  return norm;
}

void Adam::step(ParamSet& p, const ParamSet& g, const SacConfig& c) {
  if (!m_.same_shape(p)) {
    m_ = p.zeros_like();
    v_ = p.zeros_like();
    t_ = 0;
  }
  ++t_;
  const double b1t = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
  const double b2t = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < p.size(); ++i) {
    m_.value(i) = c.beta1 * m_.value(i) + (1.0 - c.beta1) * g.value(i);
    v_.value(i) = c.beta2 * v_.value(i) + (1.0 - c.beta2) * g.value(i).cwiseAbs2();
    p.value(i).array() -= c.lr * (m_.value(i).array() / b1t) / ((v_.value(i).array() / b2t).sqrt() + c.adam_eps);
  }
}

Learner::Learner(AgentVariant& agent, const SacConfig& cfg)
    : agent_(&agent),
      cfg_(cfg),
      actor_opt_(agent.actor),
      critic_opt_{Adam(agent.critic[0]), Adam(agent.critic[1])} {}

UpdateStats Learner::update(const Batch& b, std::mt19937_64& rng) {
  AgentVariant& a = *agent_;
  UpdateStats s;
  const auto y = critic_targets(b, a, cfg_, rng);
  for (int i = 0; i < 2; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    ParamSet g = a.critic[iu].zeros_like();
    const double l = critic_loss(b, a, i, y, cfg_, &g).loss;
    if (!std::isfinite(l) || !g.all_finite())
      throw NumericError("critic " + std::to_string(i + 1) + " loss is not finite\n" + describe_batch(b));
    clip_global_norm(g, cfg_.grad_clip);
    critic_opt_[iu].step(a.critic[iu], g, cfg_);
    (i == 0 ? s.critic1 : s.critic2) = l;
  }
  ParamSet g = a.actor.zeros_like();
  const auto al = actor_and_alpha_losses(b, a, cfg_, randn(b.size, a.actor_cfg.action_dim, rng), &g);
  if (!std::isfinite(al.j_pi) || !g.all_finite())
    throw NumericError("actor loss is not finite\n" + describe_batch(b));
  clip_global_norm(g, cfg_.grad_clip);
  actor_opt_.step(a.actor, g, cfg_);
  s.actor = al.j_pi;
  if (cfg_.auto_alpha) {
    ++a_t_;
    a_m_ = cfg_.beta1 * a_m_ + (1.0 - cfg_.beta1) * al.d_log_alpha;
    a_v_ = cfg_.beta2 * a_v_ + (1.0 - cfg_.beta2) * al.d_log_alpha * al.d_log_alpha;
    const double mh = a_m_ / (1.0 - std::pow(cfg_.beta1, static_cast<double>(a_t_)));
    const double vh = a_v_ / (1.0 - std::pow(cfg_.beta2, static_cast<double>(a_t_)));
    a.log_alpha -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.adam_eps);
  }
  s.alpha = a.alpha();
  for (int i = 0; i < 2; ++i)
    soft_update(a.target[static_cast<std::size_t>(i)], a.critic[static_cast<std::size_t>(i)], cfg_.tau);
  return s;
}

// --- training ----------------------------------------------------------------------------

std::string log_header() { return "episode,steps,mean_reward,critic1_loss,critic2_loss,actor_loss,alpha,wall_s"; }

std::string format_log_row(const EpisodeLog& e) {
  std::ostringstream os;
  os << e.episode << ',' << e.steps << ',' << fmt_double(e.mean_reward) << ',' << fmt_double(e.critic1_loss) << ','
     << fmt_double(e.critic2_loss) << ',' << fmt_double(e.actor_loss) << ',' << fmt_double(e.alpha) << ','
     << fmt_double(e.wall_s);
  return os.str();
}

std::vector<double> moving_average(const std::vector<double>& x, int window) {
  std::vector<double> out;
  out.reserve(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= static_cast<std::size_t>(window)) acc -= x[i - static_cast<std::size_t>(window)];
    out.push_back(acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window))));
  }
  return out;
}

Trainer::Trainer(env::ShevEnv& env, AgentVariant agent, SacConfig cfg, std::uint64_t seed)
    : env_(&env), agent_(std::move(agent)), cfg_(cfg), rng_(seed), buffer_(cfg.buffer_capacity), learner_(agent_, cfg_) {
  cfg_.validate();
  agent_.validate();
}

TrainResult Trainer::run(int episodes, const TrainOptions& opt) {
  if (episodes < 0) throw ConfigError("episode count must be >= 0");
  TrainResult res;
  std::ofstream log;
  if (!opt.log_path.empty()) {
    const bool fresh = !std::filesystem::exists(opt.log_path) || std::filesystem::file_size(opt.log_path) == 0;
    log.open(opt.log_path, std::ios::app);
    if (!log) throw ValidationError("cannot open training log '" + opt.log_path + "'");
    if (fresh) log << log_header() << '\n';
  }
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  double best_ma = -std::numeric_limits<double>::infinity();

  for (int e = 0; e < episodes; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto obs = env_->reset(rng_);
    const auto& bounds = env_->bounds();
    History h;
    h.start(env::normalize_obs(obs, bounds), cfg_.dt_target_return.value_or(have_return_ ? best_return_ : 0.0));
    Episode ep;
    ep.id = next_id_++;
    std::vector<env::StepInfo> trace;
    UpdateStats acc;
    int updates = 0;
    double raw = 0.0;
    while (env_->active()) {
      Action a;
      if (steps_ < static_cast<std::uint64_t>(cfg_.warmup_steps))
        a = {uni(rng_), uni(rng_)};
      else
        a = select_action(agent_, h, false, rng_, cfg_);
      const State s = h.states.back();
      auto r = env_->step(env::denormalize_action(a, bounds));
      const State next = env::normalize_obs(r.obs, bounds);
      const double scaled = r.reward * cfg_.reward_scale;
      ep.states.push_back(s);
      ep.actions.push_back(a);
      ep.rewards.push_back(scaled);
      ep.next_states.push_back(next);
      ep.dones.push_back(r.done ? 1 : 0);
      h.advance(a, scaled, next);
      trace.push_back(r.info);
      raw += r.reward;
      ++steps_;
      const bool due = steps_ % static_cast<std::uint64_t>(cfg_.train_freq) == 0;
      if (opt.learn && due && steps_ >= static_cast<std::uint64_t>(cfg_.warmup_steps) &&
          buffer_.total_steps() >= static_cast<std::size_t>(cfg_.batch)) {
        for (int u = 0; u < cfg_.updates_per_round; ++u) {
          Batch b = cfg_.sequential_sampling && agent_.context_k == 1 ? buffer_.sample_sequential(cfg_.batch, rng_)
                                                                      : buffer_.sample(cfg_.batch, agent_.context_k, rng_);
          UpdateStats s;
          try {
            s = learner_.update(b, rng_);
          } catch (const NumericError& err) {
            if (!opt.dump_dir.empty()) {
              std::filesystem::create_directories(opt.dump_dir);
              std::ofstream(std::filesystem::path(opt.dump_dir) / "nan_batch.txt") << err.what() << '\n';
            }
            throw;
          }
          acc.critic1 += s.critic1;
          acc.critic2 += s.critic2;
          acc.actor += s.actor;
          ++updates;
        }
      }
    }
    double ret = 0.0;
    for (double r : ep.rewards) ret += r;
    if (!have_return_ || ret > best_return_) best_return_ = ret;
    have_return_ = true;
    buffer_.add_episode(std::move(ep));

    EpisodeLog row;
    row.episode = opt.first_episode + e;
    row.steps = static_cast<int>(trace.size());
    row.mean_reward = trace.empty() ? 0.0 : raw / static_cast<double>(trace.size());
    if (updates > 0) {
      row.critic1_loss = acc.critic1 / updates;
      row.critic2_loss = acc.critic2 / updates;
      row.actor_loss = acc.actor / updates;
    }
    row.alpha = agent_.alpha();
    row.soc_final = trace.empty() ? env_->initial_soc() : trace.back().soc_next;
    row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(row);
    rewards_.push_back(row.mean_reward);
    if (log) log << format_log_row(row) << '\n' << std::flush;

    const double ma = moving_average(rewards_).back();
    if (ma > best_ma) {
      best_ma = ma;
      res.best = agent_;
      res.best_ma = ma;
      res.best_episode = row.episode;
      if (!opt.best_checkpoint.empty()) {
        auto meta = opt.checkpoint_meta;
        meta["episode"] = std::to_string(row.episode);
        meta["moving_average"] = fmt_double(ma);
        meta["dt_return"] = fmt_double(best_return_);
        nets::save_checkpoint(opt.best_checkpoint, agent_checkpoint(agent_, meta));
      }
    }
    if (opt.on_episode) opt.on_episode(row, trace);
  }
  return res;
}

TrainResult train(env::ShevEnv& env, AgentVariant& agent, const SacConfig& cfg, int episodes, std::uint64_t seed,
                  const TrainOptions& opt) {
  Trainer t(env, agent, cfg, seed);
  auto res = t.run(episodes, opt);
  agent = t.agent();
  return res;
}

std::vector<env::StepInfo> evaluate(env::ShevEnv& env, const AgentVariant& agent, const SacConfig& cfg,
                                    double initial_soc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto obs = env.reset_fixed(initial_soc);
  History h;
  h.start(env::normalize_obs(obs, env.bounds()), cfg.dt_target_return.value_or(0.0));
  std::vector<env::StepInfo> trace;
  while (env.active()) {
    const Action a = select_action(agent, h, true, rng, cfg);
    auto r = env.step(env::denormalize_action(a, env.bounds()));
    h.advance(a, r.reward * cfg.reward_scale, env::normalize_obs(r.obs, env.bounds()));
    trace.push_back(r.info);
  }
  return trace;
}

nets::Checkpoint agent_checkpoint(const AgentVariant& a, const env::Meta& meta) {
  nets::Checkpoint c;
  c.meta = meta;
  c.meta["pairing"] = to_string(a.pairing());
  c.meta["context_k"] = std::to_string(a.context_k);
  c.meta["log_alpha"] = fmt_double(a.log_alpha);
  nets::put_net(c, "actor", a.actor_cfg, a.actor);
  nets::put_net(c, "critic1", a.critic_cfg, a.critic[0]);
  nets::put_net(c, "critic2", a.critic_cfg, a.critic[1]);
  nets::put_net(c, "target1", a.critic_cfg, a.target[0]);
  nets::put_net(c, "target2", a.critic_cfg, a.target[1]);
  return c;
}

AgentVariant agent_from_checkpoint(const nets::Checkpoint& c) {
  AgentVariant a;
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = c.meta.find(k);
    if (it == c.meta.end()) throw FormatError("checkpoint missing '" + k + "'");
    return it->second;
  };
  a.context_k = std::stoi(get("context_k"));
  if (!text::parse_double(get("log_alpha"), a.log_alpha)) throw FormatError("checkpoint log_alpha is not a number");
  std::tie(a.actor_cfg, a.actor) = nets::get_net(c, "actor");
  std::tie(a.critic_cfg, a.critic[0]) = nets::get_net(c, "critic1");
  a.critic[1] = nets::get_net(c, "critic2").second;
  a.target[0] = nets::get_net(c, "target1").second;
  a.target[1] = nets::get_net(c, "target2").second;
  a.validate();
  return a;
}

}  // namespace shev::sac
