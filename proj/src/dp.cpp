#include "shev/dp.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "shev/error.hpp"
#include "shev/text.hpp"

#ifdef SHEV_HAVE_OPENMP
#include <omp.h>
#endif

namespace shev::dp {

namespace pt = shev::powertrain;
using text::fmt_double;

std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 2) throw ConfigError("linspace needs at least two points");
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  v.back() = hi;
  return v;
}

namespace {

void check_ascending(const std::vector<double>& g, const char* what, std::size_t min_size) {
  if (g.size() < min_size) throw ConfigError(std::string(what) + " grid is too small");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) throw ConfigError(std::string(what) + " grid has a non-finite entry");
    if (i > 0 && !(g[i] > g[i - 1])) throw ConfigError(std::string(what) + " grid must be strictly ascending");
  }
}

}  // namespace

void DpConfig::validate() const {
  check_ascending(soc_grid, "soc", 2);
  if (soc_grid.front() < 0.0 || soc_grid.back() > 1.0) throw ConfigError("soc grid must lie inside [0, 1]");
  if (actions.empty()) {
    check_ascending(omega_grid, "omega", 1);
    check_ascending(torque_grid, "torque", 1);
  }
  const auto [lo, hi] = terminal_soc;
  if (!(lo > 0.0 && hi < 1.0 && lo <= hi)) throw ConfigError("terminal SOC window must be a sub-interval of (0, 1)");
  if (!(sentinel_factor > 1.0)) throw ConfigError("sentinel factor must exceed 1");
  if (threads < 0) throw ConfigError("thread count must be non-negative");
}

std::vector<pt::EngineCommand> DpConfig::action_list() const {
  if (!actions.empty()) return actions;
  std::vector<pt::EngineCommand> out;
  for (double w : omega_grid)
    for (double t : torque_grid) out.push_back({w, t});
  return out;
}

namespace {

struct Transition {
  double soc_next = 0.0;
  double p_batt = 0.0;
  double current = 0.0;
  bool ok = false;
};

struct ActionData {
  pt::EngineCommand cmd;
  double p_gen = 0.0;
  double fuel_g = 0.0;
  bool valid = false;  // inside the clip envelope
};

/// Everything the backward sweep, forward pass and enumerator share.
class Problem {
 public:
  Problem(const cycles::DriveCycle& cycle, const pt::PowertrainModel& model, const DpConfig& cfg)
      : cycle_(cycle), model_(model), cfg_(cfg) {
    cfg_.validate();
    if (cycle.size() == 0) throw ConfigError("cycle has no steps");
    std::vector<char> feasible;
    demand_ = env::cycle_demand(cycle, model, &feasible);
    for (std::size_t t = 0; t < feasible.size(); ++t)
      if (!feasible[t])
        throw InfeasibleError("electric machine cannot follow the cycle at step " + std::to_string(t),
                              static_cast<long>(t));
    double max_fuel = 0.0;
    for (const auto& c : cfg_.action_list()) {
      ActionData a;
      a.cmd = c;
      a.valid = pt::clip_action(c.omega_rpm, c.torque_nm, model) == c;
      if (a.valid) {
        const auto g = pt::genset_output(c.omega_rpm, c.torque_nm, model);
        a.p_gen = g.p_elec;
        a.fuel_g = g.fuel_rate * cycle.dt;
        max_fuel = std::max(max_fuel, a.fuel_g);
      }
      actions_.push_back(a);
    }
    sentinel_ = cfg_.sentinel_factor * std::max(1.0, max_fuel * static_cast<double>(steps()));
    if (!cfg_.snap) compute_hull();
  }

  int steps() const { return static_cast<int>(demand_.size()); }
  int nodes() const { return static_cast<int>(cfg_.soc_grid.size()); }
  int action_count() const { return static_cast<int>(actions_.size()); }
  double sentinel() const { return sentinel_; }
  const ActionData& action(int a) const { return actions_[static_cast<std::size_t>(a)]; }
  const DpConfig& cfg() const { return cfg_; }

  double raw_next(double soc, int t, int a) const {
    const double p = pt::power_balance(demand_[static_cast<std::size_t>(t)], model_.vehicle.aux_power, action(a).p_gen);
    return pt::battery_step(soc, p, cycle_.dt, model_.battery).soc_next;
  }

  template <typename F>
  static double bisect(F f, double lo, double hi, double target) {
    for (int i = 0; i < 80 && hi - lo > 1e-15; ++i) {
      const double mid = 0.5 * (lo + hi);
      (f(mid) <= target ? lo : hi) = mid;
    }
    return f(lo) >= target ? lo : hi;
  }

  Transition step(double soc, int t, int a) const {
    Transition tr;
    const auto& ad = action(a);
    if (!ad.valid) return tr;
    const double p = pt::power_balance(demand_[static_cast<std::size_t>(t)], model_.vehicle.aux_power, ad.p_gen);
    const auto bs = pt::battery_step(soc, p, cycle_.dt, model_.battery);
    tr.soc_next = bs.soc_next;
    tr.p_batt = p;
    tr.current = bs.current;
    tr.ok = !bs.power_limited && bs.soc_next > model_.battery.soc_min && bs.soc_next < model_.battery.soc_max;
    if (tr.ok && cfg_.snap) tr.soc_next = cfg_.soc_grid[static_cast<std::size_t>(nearest(tr.soc_next))];
    return tr;
  }

  bool terminal_ok(double soc) const {
    return soc >= cfg_.terminal_soc.first - 1e-12 && soc <= cfg_.terminal_soc.second + 1e-12;
  }

  int nearest(double soc) const {
    const auto& g = cfg_.soc_grid;
    auto it = std::lower_bound(g.begin(), g.end(), soc);
    if (it == g.begin()) return 0;
    if (it == g.end()) return nodes() - 1;
    const auto i = static_cast<int>(it - g.begin());
    return (g[static_cast<std::size_t>(i)] - soc) < (soc - g[static_cast<std::size_t>(i - 1)]) ? i : i - 1;
  }

  // Backward sweep of the reachable-window hull [lo_t, hi_t]: SOC outside it
  // cannot end in the terminal window whatever the actions.
  void compute_hull() {
    const int T = steps();
    hull_.assign(static_cast<std::size_t>(T + 1), cfg_.terminal_soc);
    const double g0 = cfg_.soc_grid.front(), g1 = cfg_.soc_grid.back();
    for (int t = T - 1; t >= 0; --t) {
      const auto [lo_next, hi_next] = hull_[static_cast<std::size_t>(t + 1)];
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (int a = 0; a < action_count(); ++a) {
        if (!action(a).valid) continue;
        auto f = [&](double soc) { return raw_next(soc, t, a); };
        // f is increasing in SOC
        if (f(g0) <= hi_next) hi = std::max(hi, f(g1) <= hi_next ? g1 : bisect(f, g0, g1, hi_next));
        if (f(g1) >= lo_next) lo = std::min(lo, f(g0) >= lo_next ? g0 : bisect(f, g0, g1, lo_next));
      }
      hull_[static_cast<std::size_t>(t)] = {lo, hi};
    }
  }
  const std::vector<std::pair<double, double>>& hull() const { return hull_; }

  // Cost-to-go at an off-grid SOC. Inside the hull a single infeasible
  // bracketing node defers to its feasible neighbour; the sentinel never
  // blends into finite costs.
  double lookup(const Eigen::MatrixXd& value, int t, double soc) const {
    const auto& g = cfg_.soc_grid;
    if (cfg_.snap) return value(t, nearest(soc));
    const auto [lo_h, hi_h] = hull_[static_cast<std::size_t>(t)];
    if (soc < g.front() || soc > g.back() || soc < lo_h || soc > hi_h) return sentinel_;
    auto it = std::upper_bound(g.begin(), g.end(), soc);
    if (it == g.end()) return value(t, nodes() - 1);
    const auto hi = static_cast<int>(it - g.begin());
    const int lo = hi - 1;
    const double w = (soc - g[static_cast<std::size_t>(lo)]) / (g[static_cast<std::size_t>(hi)] - g[static_cast<std::size_t>(lo)]);
    const double vl = value(t, lo), vh = value(t, hi);
    if (w == 0.0) return vl;
    const bool fl = vl < sentinel_, fh = vh < sentinel_;
    if (fl && fh) return vl + w * (vh - vl);
    if (fl) return vl;
    if (fh) return vh;
    return sentinel_;
  }

  // Best action from soc at step t given the cost-to-go table; -1 if none.
  std::pair<int, double> best(const Eigen::MatrixXd& value, int t, double soc) const {
    int arg = -1;
    double cost = sentinel_;
    const bool last = t + 1 == steps();
    for (int a = 0; a < action_count(); ++a) {
      const auto tr = step(soc, t, a);
      if (!tr.ok) continue;
      double next;
      if (last && !cfg_.snap) next = terminal_ok(tr.soc_next) ? 0.0 : sentinel_;
      else next = lookup(value, t + 1, tr.soc_next);
      if (next >= sentinel_) continue;
      const double c = action(a).fuel_g + next;
      if (c < cost) {
        cost = c;
        arg = a;
      }
    }
    return {arg, cost};
  }

  env::StepInfo record(int t, double soc, double soc_init, int a) const {
    const auto tr = step(soc, t, a);
    const auto& ad = action(a);
    env::StepInfo s;
    s.step = t;
    s.v = cycle_.velocity[static_cast<std::size_t>(t)];
    s.soc = soc;
    s.soc_next = tr.soc_next;
    s.p_em = demand_[static_cast<std::size_t>(t)];
    s.omega = ad.cmd.omega_rpm;
    s.torque = ad.cmd.torque_nm;
    s.fuel_g = ad.fuel_g;
    s.p_genset = ad.p_gen;
    s.p_batt = tr.p_batt;
    s.i_batt = tr.current;
    s.bus_residual = s.p_em + model_.vehicle.aux_power - s.p_genset - s.p_batt;
    s.reward = env::reward_fn(s.fuel_g, tr.soc_next, soc_init, env::RewardWeights{});
    s.done = t + 1 == steps();
    return s;
  }

  void finish(DpSolution& s, const pt::PowertrainModel& model) const {
    s.dt = cycle_.dt;
    s.sentinel = sentinel_;
    s.soc_grid = cfg_.soc_grid;
    s.hull = hull_;
    for (const auto& a : actions_) s.actions.push_back(a.cmd);
    double total = 0.0;
    for (auto it = s.trace.rbegin(); it != s.trace.rend(); ++it) total = it->fuel_g + total;
    s.total_fuel = total;
    s.soc_final = s.trace.back().soc_next;
    double distance = 0.0;
    for (const auto& r : s.trace) distance += r.v * cycle_.dt;
    if (distance > 0.0) {  // stationary cycles have no fuel economy
      const auto m = mpg_of(s.trace, cycle_.dt, model);
      s.mpg = m.value;
      s.mpg_infinite = m.infinite;
    }
  }

  std::string stranded_message(double soc0) const {
    return "no action sequence from SOC " + fmt_double(soc0) + " ends inside [" +
           fmt_double(cfg_.terminal_soc.first) + ", " + fmt_double(cfg_.terminal_soc.second) + "]";
  }

 private:
  const cycles::DriveCycle& cycle_;
  const pt::PowertrainModel& model_;
  DpConfig cfg_;
  std::vector<double> demand_;
  std::vector<ActionData> actions_;
  double sentinel_ = 0.0;
  std::vector<std::pair<double, double>> hull_;
};

}  // namespace

DpSolution dp_solve(const cycles::DriveCycle& cycle, const pt::PowertrainModel& model, const DpConfig& cfg,
                    double initial_soc) {
  if (!(initial_soc > 0.0 && initial_soc < 1.0)) throw ConfigError("initial SOC must lie in (0, 1)");
  Problem pb(cycle, model, cfg);
  const int T = pb.steps(), N = pb.nodes();
  DpSolution s;
  s.value = Eigen::MatrixXd::Constant(T + 1, N, pb.sentinel());
  s.policy = Eigen::MatrixXi::Constant(T, N, -1);
  for (int i = 0; i < N; ++i)
    if (pb.terminal_ok(cfg.soc_grid[static_cast<std::size_t>(i)])) s.value(T, i) = 0.0;

  for (int t = T - 1; t >= 0; --t) {
#ifdef SHEV_HAVE_OPENMP
    const int nt = cfg.threads > 0 ? cfg.threads : omp_get_max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
#endif
    for (int i = 0; i < N; ++i) {
      const auto [arg, cost] = pb.best(s.value, t, cfg.soc_grid[static_cast<std::size_t>(i)]);
      s.value(t, i) = cost;
      s.policy(t, i) = arg;
    }
  }

  double soc = cfg.snap ? cfg.soc_grid[static_cast<std::size_t>(pb.nearest(initial_soc))] : initial_soc;
  for (int t = 0; t < T; ++t) {
    const auto [arg, cost] = pb.best(s.value, t, soc);
    if (arg < 0) throw InfeasibleError(pb.stranded_message(initial_soc) + "; stranded at step " + std::to_string(t), t);
    s.trace.push_back(pb.record(t, soc, initial_soc, arg));
    soc = s.trace.back().soc_next;
  }
  pb.finish(s, model);
  return s;
}

DpSolution brute_force(const cycles::DriveCycle& cycle, const pt::PowertrainModel& model, const DpConfig& cfg,
                       double initial_soc, double max_sequences) {
  DpConfig c = cfg;
  c.snap = true;
  Problem pb(cycle, model, c);
  const int T = pb.steps(), A = pb.action_count();
  const double count = std::pow(static_cast<double>(A), T);
  if (count > max_sequences)
    throw ConfigError("brute force would enumerate " + fmt_double(count) + " sequences (limit " +
                      fmt_double(max_sequences) + ")");

  const double soc0 = c.soc_grid[static_cast<std::size_t>(pb.nearest(initial_soc))];
  std::vector<int> seq(static_cast<std::size_t>(T), 0), best_seq;
  std::vector<double> fuel(static_cast<std::size_t>(T));
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    double soc = soc0;
    bool ok = true;
    for (int t = 0; t < T && ok; ++t) {
      const auto tr = pb.step(soc, t, seq[static_cast<std::size_t>(t)]);
      ok = tr.ok;
      soc = tr.soc_next;
      fuel[static_cast<std::size_t>(t)] = pb.action(seq[static_cast<std::size_t>(t)]).fuel_g;
    }
    if (ok && pb.terminal_ok(soc)) {
      double total = 0.0;
      for (int t = T - 1; t >= 0; --t) total = fuel[static_cast<std::size_t>(t)] + total;
      if (total < best) {
        best = total;
        best_seq = seq;
      }
    }
    int pos = T - 1;
    while (pos >= 0 && ++seq[static_cast<std::size_t>(pos)] == A) seq[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
  }
  if (best_seq.empty()) throw InfeasibleError(pb.stranded_message(initial_soc), 0);

  DpSolution s;
  double soc = soc0;
  for (int t = 0; t < T; ++t) {
    s.trace.push_back(pb.record(t, soc, initial_soc, best_seq[static_cast<std::size_t>(t)]));
    soc = s.trace.back().soc_next;
  }
  pb.finish(s, model);
  return s;
}

Mpg mpg_of(const std::vector<env::StepInfo>& trace, double dt, const pt::PowertrainModel& model) {
  double distance = 0.0, fuel = 0.0;
  for (const auto& r : trace) {
    distance += r.v * dt;
    fuel += r.fuel_g;
  }
  if (!(distance > 0.0)) throw ContractError("fuel economy needs a positive distance");
  if (fuel <= 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {pt::mpg(distance, fuel, model.fuel_density), false};
}

namespace {

template <typename M>
void write_grid(const std::string& path, const std::vector<double>& soc, const M& m) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path);
  f << "t";
  for (double x : soc) f << ',' << fmt_double(x);
  f << '\n';
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    f << t;
    for (Eigen::Index i = 0; i < m.cols(); ++i) {
      if constexpr (std::is_same_v<typename M::Scalar, double>) f << ',' << fmt_double(m(t, i));
      else f << ',' << m(t, i);
    }
    f << '\n';
  }
}

}  // namespace

void export_solution(const DpSolution& s, const std::string& dir, const env::Meta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_grid((fs::path(dir) / "value.csv").string(), s.soc_grid, s.value);
  write_grid((fs::path(dir) / "policy.csv").string(), s.soc_grid, s.policy);
  std::ofstream a(fs::path(dir) / "actions.csv");
  a << "index,omega_rpm,torque_nm\n";
  for (std::size_t i = 0; i < s.actions.size(); ++i)
    a << i << ',' << fmt_double(s.actions[i].omega_rpm) << ',' << fmt_double(s.actions[i].torque_nm) << '\n';
  env::Meta m = meta;
  m["solver"] = "dp";
  m["total_fuel_g"] = fmt_double(s.total_fuel);
  m["sentinel"] = fmt_double(s.sentinel);
  env::write_trace((fs::path(dir) / "trace.csv").string(), s.trace, m);
}

}  // namespace shev::dp
