#include "shev/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "shev/error.hpp"
#include "shev/text.hpp"

namespace shev::env {

namespace pt = shev::powertrain;

void RewardWeights::validate() const {
  if (!(w_fuel > 0 && w_soc_low > 0 && w_soc_good > 0 && w_soc_high > 0))
    throw ConfigError("reward weights must be positive");
  if (!(soc_low < soc_good_hi && soc_good_hi < soc_high))
    throw ConfigError("reward SOC thresholds must be ordered low < good_hi < high");
}

void EpisodeConfig::validate() const {
  cycle.validate();
  if (initial_soc_choices.empty()) throw ConfigError("initial SOC choice list is empty");
  for (double s : initial_soc_choices)
    if (!(s > 0.0 && s < 1.0)) throw ConfigError("initial SOC choices must lie in (0, 1)");
  if (repetitions < 1) throw ConfigError("episode repetitions must be >= 1");
  if (randomize_cycles && (randomize_cycles->first < 1 || randomize_cycles->second < randomize_cycles->first))
    throw ConfigError("cycle-count range must satisfy 1 <= min <= max");
  if (demand_scale_range &&
      !(demand_scale_range->first > 0.0 && demand_scale_range->second >= demand_scale_range->first))
    throw ConfigError("demand scale range must be positive and ordered");
}

double soc_shaping(double soc, const RewardWeights& w) {
  const double pct = 100.0 * soc;
  if (pct < w.soc_low) return -w.w_soc_low * (w.soc_low - pct);
  if (pct <= w.soc_good_hi) return w.w_soc_good * (pct - w.soc_low);
  if (pct <= w.soc_high) return 0.0;
  return -w.w_soc_high * (pct - w.soc_high);
}

double reward_fn(double fuel_g, double soc, double soc_init, const RewardWeights& w) {
  return -w.w_fuel * fuel_g * soc_init * soc_init + soc_shaping(soc, w);
}

double normalize(double x, double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("normalization bounds must satisfy hi > lo");
  return std::clamp(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0);
}

double denormalize(double u, double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("normalization bounds must satisfy hi > lo");
  return lo + (std::clamp(u, -1.0, 1.0) + 1.0) * 0.5 * (hi - lo);
}

std::array<double, 3> normalize_obs(const EnvObservation& obs, const NormBounds& b) {
  return {normalize(obs.soc, 0.0, 1.0), normalize(obs.distance, 0.0, b.distance_hi),
          normalize(obs.p_em, b.p_em_lo, b.p_em_hi)};
}

EnvAction denormalize_action(const std::array<double, 2>& u, const NormBounds& b) {
  return {denormalize(u[0], 0.0, b.omega_hi), denormalize(u[1], 0.0, b.torque_hi)};
}

std::array<double, 2> normalize_action(const EnvAction& a, const NormBounds& b) {
  return {normalize(a.omega_eng, 0.0, b.omega_hi), normalize(a.torque_eng, 0.0, b.torque_hi)};
}

std::vector<double> cycle_demand(const cycles::DriveCycle& cycle, const pt::PowertrainModel& model,
                                 std::vector<char>* feasible) {
  const auto accel = cycle.acceleration();
  std::vector<double> p(cycle.size());
  if (feasible) feasible->assign(cycle.size(), 1);
  for (std::size_t t = 0; t < cycle.size(); ++t) {
    const auto d = pt::em_power_demand(cycle.velocity[t], accel[t], cycle.grade[t], model);
    p[t] = d.p_em_elec;
    if (feasible) (*feasible)[t] = d.feasible ? 1 : 0;
  }
  return p;
}

ShevEnv::ShevEnv(std::shared_ptr<const pt::PowertrainModel> model, EpisodeConfig cfg, RewardWeights w)
    : model_(std::move(model)), cfg_(std::move(cfg)), weights_(w) {
  if (!model_) throw ConfigError("environment requires a powertrain model");
  cfg_.validate();
  weights_.validate();
}

EnvObservation ShevEnv::reset(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, cfg_.initial_soc_choices.size() - 1);
  const double soc0 = cfg_.initial_soc_choices[pick(rng)];
  int reps = cfg_.repetitions;
  if (cfg_.randomize_cycles) {
    std::uniform_int_distribution<int> r(cfg_.randomize_cycles->first, cfg_.randomize_cycles->second);
    reps = r(rng);
  }
  double scale = 1.0;
  if (cfg_.demand_scale_range) {
    std::uniform_real_distribution<double> s(cfg_.demand_scale_range->first, cfg_.demand_scale_range->second);
    scale = s(rng);
  }
  return begin(soc0, reps, scale);
}

EnvObservation ShevEnv::reset_fixed(double initial_soc, int repetitions, double demand_scale) {
  if (!(initial_soc > 0.0 && initial_soc < 1.0)) throw ConfigError("initial SOC must lie in (0, 1)");
  if (!(demand_scale > 0.0)) throw ConfigError("demand scale must be positive");
  return begin(initial_soc, repetitions, demand_scale);
}

EnvObservation ShevEnv::begin(double soc0, int reps, double scale) {
  if (reps != reps_ || episode_cycle_.size() == 0) {
    episode_cycle_ = cycles::repeat_cycle(cfg_.cycle, reps);
    demand_ = cycle_demand(episode_cycle_, *model_, &em_feasible_);
    total_distance_ = cycles::cycle_distance(episode_cycle_);
    reps_ = reps;
    scale_ = 1.0;
  }
  if (scale != scale_) {
    const auto base = cycle_demand(episode_cycle_, *model_);
    for (std::size_t t = 0; t < demand_.size(); ++t) demand_[t] = base[t] * scale;
    scale_ = scale;
  }
  soc_init_ = soc0;
  bounds_ = NormBounds{};
  bounds_.distance_hi = std::max(total_distance_, 1.0);
  bounds_.omega_hi = std::min(model_->engine_speed_max, model_->generator_eff.speed_max);
  bounds_.torque_hi = model_->engine_fuel.torque_axis.back();
  step_ = 0;
  active_ = true;
  obs_ = {soc0, 0.0, demand_[0]};
  return obs_;
}

StepResult ShevEnv::step(const EnvAction& action) {
  if (!active_) throw UsageError("step() called on an inactive episode; call reset() first");
  const auto& m = *model_;
  const auto t = static_cast<std::size_t>(step_);
  const double dt = episode_cycle_.dt;

  StepInfo info;
  info.step = step_;
  info.v = episode_cycle_.velocity[t];
  info.soc = obs_.soc;
  info.p_em = demand_[t];
  info.em_feasible = em_feasible_[t] != 0;

  const auto cmd = pt::clip_action(action.omega_eng, action.torque_eng, m);
  info.omega = cmd.omega_rpm;
  info.torque = cmd.torque_nm;
  const auto gen = pt::genset_output(cmd.omega_rpm, cmd.torque_nm, m);
  info.p_genset = gen.p_elec;
  info.fuel_g = gen.fuel_rate * dt;

  const double p_aux = m.vehicle.aux_power;
  const double p_batt_req = pt::power_balance(info.p_em, p_aux, gen.p_elec);
  const auto bs = pt::battery_step(obs_.soc, p_batt_req, dt, m.battery);
  info.power_limited = bs.power_limited;
  // Power actually delivered by the pack at the solved current.
  const double r = m.battery.pack_resistance();
  const double voc = m.battery.pack_ocv(obs_.soc);
  info.p_batt = bs.power_limited ? bs.current * (voc - r * bs.current) : p_batt_req;
  info.i_batt = bs.current;
  info.bus_residual = info.p_em + p_aux - gen.p_elec - info.p_batt;

  double soc_next = bs.soc_next;
  if (soc_next <= m.battery.soc_min || soc_next >= m.battery.soc_max) {
    info.soc_failure = true;
    soc_next = std::clamp(soc_next, m.battery.soc_min, m.battery.soc_max);
  }
  info.soc_next = soc_next;
  info.reward = reward_fn(info.fuel_g, soc_next, soc_init_, weights_);

  ++step_;
  const bool done = step_ >= episode_length() || info.soc_failure;
  info.done = done;
  active_ = !done;
  obs_.soc = soc_next;
  obs_.distance += info.v * dt;
  obs_.p_em = done ? 0.0 : demand_[static_cast<std::size_t>(step_)];
  return {obs_, info.reward, done, info};
}

EpisodeSummary summarize(const std::vector<StepInfo>& trace, double dt, double fuel_density) {
  EpisodeSummary s;
  if (trace.empty()) return s;
  double reward = 0.0;
  for (const auto& r : trace) {
    s.total_fuel_g += r.fuel_g;
    s.distance_m += r.v * dt;
    reward += r.reward;
    s.failed = s.failed || r.soc_failure;
  }
  s.steps = static_cast<int>(trace.size());
  s.soc_initial = trace.front().soc;
  s.soc_final = trace.back().soc_next;
  s.mean_reward = reward / s.steps;
  s.mpg = s.total_fuel_g > 0.0 ? pt::mpg(s.distance_m, s.total_fuel_g, fuel_density)
                               : std::numeric_limits<double>::infinity();
  return s;
}

namespace {

std::string meta_line(const Meta& meta) {
  std::string out = "#";
  bool first = true;
  for (const auto& [k, v] : meta) {
    out += first ? " " : ",";
    out += k + "=" + v;
    first = false;
  }
  return out;
}

}  // namespace

void write_trace(const std::string& path, const std::vector<StepInfo>& trace, const Meta& meta) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write trace '" + path + "'");
  using text::fmt_double;
  f << meta_line(meta) << "\n";
  f << "step,v,soc,p_em,omega,torque,fuel_g,p_batt,reward,done_flag\n";
  for (const auto& r : trace) {
    f << r.step << ',' << fmt_double(r.v) << ',' << fmt_double(r.soc) << ',' << fmt_double(r.p_em) << ','
      << fmt_double(r.omega) << ',' << fmt_double(r.torque) << ',' << fmt_double(r.fuel_g) << ','
      << fmt_double(r.p_batt) << ',' << fmt_double(r.reward) << ',' << (r.done ? 1 : 0) << '\n';
  }
  if (!trace.empty())
    f << trace.back().step + 1 << ",0," << fmt_double(trace.back().soc_next) << ",0,0,0,0,0,0,1\n";
}

std::vector<StepInfo> read_trace(const std::string& path, Meta* meta) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open trace '" + path + "'");
  std::string line;
  std::vector<StepInfo> rows;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto s = text::trim(line);
    if (s.empty()) continue;
    if (s.front() == '#') {
      if (meta) {
        for (auto kv : text::split(s.substr(1), ',')) {
          const auto eq = kv.find('=');
          if (eq != std::string_view::npos)
            (*meta)[std::string(text::trim(kv.substr(0, eq)))] = std::string(text::trim(kv.substr(eq + 1)));
        }
      }
      continue;
    }
    if (s.rfind("step,", 0) == 0) continue;
    auto fields = text::split(s, ',');
    if (fields.size() != 10) throw ParseError("trace row needs 10 columns", lineno);
    double x[10];
    for (int k = 0; k < 10; ++k)
      if (!text::parse_double(fields[static_cast<std::size_t>(k)], x[k])) throw ParseError("malformed trace value", lineno);
    StepInfo r;
    r.step = static_cast<int>(x[0]);
    r.v = x[1];
    r.soc = x[2];
    r.p_em = x[3];
    r.omega = x[4];
    r.torque = x[5];
    r.fuel_g = x[6];
    r.p_batt = x[7];
    r.reward = x[8];
    r.done = x[9] != 0.0;
    rows.push_back(r);
  }
  if (rows.size() < 2) throw FormatError("trace '" + path + "' has no steps");
  // Fold the terminal row into the last step.
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) rows[i].soc_next = rows[i + 1].soc;
  rows.pop_back();
  return rows;
}

void write_summary(const std::string& path, const EpisodeSummary& s, const Meta& meta) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write summary '" + path + "'");
  for (const auto& [k, v] : meta) f << k << "=" << v << "\n";
  using text::fmt_double;
  f << "total_fuel_g=" << fmt_double(s.total_fuel_g) << "\n"
    << "distance_m=" << fmt_double(s.distance_m) << "\n"
    << "mpg=" << fmt_double(s.mpg) << "\n"
    << "soc_initial=" << fmt_double(s.soc_initial) << "\n"
    << "soc_final=" << fmt_double(s.soc_final) << "\n"
    << "mean_reward=" << fmt_double(s.mean_reward) << "\n"
    << "steps=" << s.steps << "\n"
    << "failed=" << (s.failed ? 1 : 0) << "\n";
}

Meta read_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open '" + path + "'");
  Meta out;
  std::string line;
  while (std::getline(f, line)) {
    auto s = text::trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) continue;
    out[std::string(text::trim(s.substr(0, eq)))] = std::string(text::trim(s.substr(eq + 1)));
  }
  return out;
}

}  // namespace shev::env
