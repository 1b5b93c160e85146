#include "shev/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "shev/error.hpp"
#include "shev/text.hpp"

namespace shev::harness {

namespace fs = std::filesystem;
namespace pt = powertrain;
using text::fmt_double;

const std::vector<KeyDoc>& config_keys() {
  static const std::vector<KeyDoc> keys = {
      {"seed", "1", "random seed for networks, sampling and environment resets"},
      {"out", "runs/default", "output directory (the --out flag wins)"},
      {"cycle.source", "synth:trapezoid:60:8:1", "drive cycle file or synth:KIND:DURATION:VPEAK[:SEED]"},
      {"cycle.unit", "mps", "speed unit of cycle files: mps, mph or kph"},
      {"cycle.repetitions", "1", "cycle repetitions per episode"},
      {"cycle.randomize", "", "repetition range LO-HI drawn per episode; empty disables"},
      {"episode.initial_soc", "0.85,0.75,0.65,0.55,0.45", "initial SOC choices, one drawn per episode"},
      {"episode.demand_scale", "", "EM demand scale range LO-HI drawn per episode; empty disables"},
      {"agent.actor", "ffn", "actor family: ffn, gru or dt"},
      {"agent.critic", "", "critic family; empty pairs ffn-ffn, gru-gru, dt-gru"},
      {"agent.context_k", "1", "context length k (ffn requires 1)"},
      {"agent.hidden", "128", "hidden width"},
      {"train.episodes", "500", "episode budget"},
      {"train.resume", "", "checkpoint to resume; episode numbering continues"},
      {"train.init", "", "checkpoint whose weights start a new run (numbering restarts)"},
      {"sac.lr", "0.0001", "Adam learning rate"},
      {"sac.batch", "64", "minibatch size"},
      {"sac.gamma", "0.99", "discount"},
      {"sac.tau", "0.005", "target smoothing coefficient"},
      {"sac.auto_alpha", "true", "tune the temperature"},
      {"sac.initial_alpha", "1", "initial temperature"},
      {"sac.target_entropy", "-2", "target entropy"},
      {"sac.buffer_capacity", "1000000", "replay capacity in steps"},
      {"sac.grad_clip", "", "global gradient norm clip; empty uses the actor family default"},
      {"sac.train_freq", "", "environment steps per update round; empty uses the family default"},
      {"sac.updates_per_round", "1", "gradient steps per update round"},
      {"sac.warmup_steps", "1000", "uniform random steps before learning"},
      {"sac.reward_scale", "1", "reward multiplier before storage"},
      {"sac.rtg_scale", "0.001", "return-to-go token scale"},
      {"sac.persistent_hidden", "false", "carry GRU hidden state across steps when acting"},
      {"sac.dt_target_return", "", "DT conditioning return; empty uses the running best"},
      {"sac.sequential_sampling", "false", "ffn only: contiguous minibatches"},
      {"reward.w_fuel", "5", "fuel penalty weight"},
      {"reward.w_soc_low", "15", "penalty weight below the window"},
      {"reward.w_soc_good", "2.5", "bonus inside the window"},
      {"reward.w_soc_high", "10", "penalty weight above the high threshold"},
      {"model.maps_dir", "", "directory written by `maps --emit`; empty uses the built-in maps"},
      {"model.cell_capacity_ah", "4.85", "cell capacity, Ah"},
      {"model.aux_power", "5000", "auxiliary load, W"},
      {"model.mass", "36287", "vehicle mass, kg"},
      {"eval.initial_soc", "0.85", "initial SOC for eval and dp"},
      {"eval.cycle", "", "cycle for eval and dp; empty uses cycle.source"},
      {"dp.soc_points", "401", "SOC grid nodes over [0, 1]"},
      {"dp.omega_points", "13", "engine speed grid nodes"},
      {"dp.torque_points", "13", "engine torque grid nodes"},
      {"dp.terminal_lo", "0.15", "terminal SOC window, low end"},
      {"dp.terminal_hi", "0.18", "terminal SOC window, high end"},
      {"ablate.continue_from", "", "directory of a previous study; arms start from <dir>/<arm>/best.ckpt"},
      {"ablate.workers", "1", "arms trained concurrently"},
  };
  return keys;
}

std::string help_config() {
  std::ostringstream o;
  o << "Configuration: one `key = value` per line, `#` starts a comment line.\n\n";
  std::size_t w = 0;
  for (const auto& k : config_keys()) w = std::max(w, k.key.size());
  for (const auto& k : config_keys()) {
    o << "  " << std::left << std::setw(static_cast<int>(w)) << k.key << "  " << k.doc;
    o << " [" << (k.fallback.empty() ? "unset" : k.fallback) << "]\n";
  }
  return o.str();
}

// --- Config -----------------------------------------------------------------------

Config::Config() {
  for (const auto& k : config_keys()) entries_[k.key] = {k.fallback, 0};
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++n;
    const auto s = text::trim(line);
    if (s.empty() || s.front() == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ParseError(origin + ": expected `key = value`", n);
    const std::string key(text::trim(s.substr(0, eq)));
    const std::string value(text::trim(s.substr(eq + 1)));
    if (key.empty()) throw ParseError(origin + ": empty key", n);
    if (!c.entries_.count(key))
      throw ConfigError(origin + ": line " + std::to_string(n) + ": unknown key '" + key + "'");
    if (auto it = seen.find(key); it != seen.end())
      throw ConfigError(origin + ": line " + std::to_string(n) + ": '" + key + "' already set on line " +
                        std::to_string(it->second));
    seen[key] = n;
    c.entries_[key] = {value, n};
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return parse(s.str(), path);
}

void Config::set(const std::string& key, const std::string& value, int line) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown key '" + key + "'");
  it->second = {value, line};
}

const std::string& Config::get(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second.value;
}

bool Config::explicitly_set(const std::string& key) const { return line_of(key) != 0; }

int Config::line_of(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second.line;
}

std::string Config::snapshot() const {
  std::ostringstream o;
  for (const auto& k : config_keys()) o << k.key << " = " << get(k.key) << '\n';
  return o.str();
}

// --- resolve ----------------------------------------------------------------------

namespace {

class Reader {
 public:
  explicit Reader(const Config& c) : c_(c) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    std::string where = c_.origin() + ": ";
    const int line = c_.line_of(key);
    if (line > 0) where += "line " + std::to_string(line) + ": ";
    throw ConfigError(where + key + ": " + msg);
  }

  const std::string& str(const std::string& key) const { return c_.get(key); }

  double num(const std::string& key) const {
    double v = 0.0;
    if (!text::parse_double(str(key), v) || !std::isfinite(v)) fail(key, "expected a number, got '" + str(key) + "'");
    return v;
  }

  std::optional<double> opt_num(const std::string& key) const {
    if (str(key).empty()) return std::nullopt;
    return num(key);
  }

  long integer(const std::string& key, long lo = std::numeric_limits<long>::min()) const {
    const double v = num(key);
    if (v != std::floor(v) || std::abs(v) > 9e15) fail(key, "expected an integer, got '" + str(key) + "'");
    if (v < static_cast<double>(lo)) fail(key, "must be >= " + std::to_string(lo));
    return static_cast<long>(v);
  }

  bool boolean(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    fail(key, "expected true or false, got '" + s + "'");
  }

  std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    for (auto p : text::split(str(key), ',')) {
      double v = 0.0;
      if (!text::parse_double(p, v)) fail(key, "bad list entry '" + std::string(p) + "'");
      out.push_back(v);
    }
    return out;
  }

  std::optional<std::pair<double, double>> range(const std::string& key) const {
    const auto& s = str(key);
    if (s.empty()) return std::nullopt;
    // the separator is the first '-' that is not a leading sign
    const auto dash = s.find('-', 1);
    double lo = 0.0, hi = 0.0;
    if (dash == std::string::npos || !text::parse_double(std::string_view(s).substr(0, dash), lo) ||
        !text::parse_double(std::string_view(s).substr(dash + 1), hi))
      fail(key, "expected LO-HI, got '" + s + "'");
    if (hi < lo) fail(key, "range upper end below lower end");
    return std::make_pair(lo, hi);
  }

  template <class F>
  auto wrap(const std::string& key, F&& f) const -> decltype(f()) {
    try {
      return f();
    } catch (const Error& e) {
      if (std::string_view(e.what()).rfind(c_.origin() + ":", 0) == 0) throw;
      fail(key, e.what());
    }
  }

 private:
  const Config& c_;
};

nets::Family critic_default(nets::Family actor) {
  return actor == nets::Family::FFN ? nets::Family::FFN : nets::Family::GRU;
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace

std::shared_ptr<pt::PowertrainModel> build_model(const Config& c) {
  Reader r(c);
  auto m = std::make_shared<pt::PowertrainModel>();
  const auto& dir = r.str("model.maps_dir");
  if (dir.empty()) {
    *m = pt::build_default_maps();
  } else {
    r.wrap("model.maps_dir", [&] {
      *m = pt::build_default_maps();
      const fs::path d(dir);
      m->engine_fuel = pt::read_component_map((d / "engine_fuel.csv").string(), (d / "engine_fuel.meta").string());
      m->generator_eff =
          pt::read_component_map((d / "generator_eff.csv").string(), (d / "generator_eff.meta").string());
      m->em_eff = pt::read_component_map((d / "em_eff.csv").string(), (d / "em_eff.meta").string());
      return 0;
    });
  }
  m->battery.cell_capacity_ah = r.num("model.cell_capacity_ah");
  m->vehicle.aux_power = r.num("model.aux_power");
  m->vehicle.mass = r.num("model.mass");
  r.wrap("model.cell_capacity_ah", [&] {
    m->validate();
    return 0;
  });
  return m;
}

Experiment resolve(const Config& c) {
  Reader r(c);
  Experiment x;
  x.seed = static_cast<std::uint64_t>(r.integer("seed", 0));
  x.out = r.str("out");

  x.cycle_source = r.str("cycle.source");
  const auto unit = r.wrap("cycle.unit", [&] { return cycles::parse_speed_unit(r.str("cycle.unit")); });
  x.cycle = r.wrap("cycle.source", [&] { return cycles::resolve_cycle(x.cycle_source, unit); });
  x.episode.cycle = x.cycle;
  x.episode.repetitions = static_cast<int>(r.integer("cycle.repetitions", 1));
  if (auto rr = r.range("cycle.randomize")) {
    if (rr->first < 1 || rr->first != std::floor(rr->first) || rr->second != std::floor(rr->second))
      r.fail("cycle.randomize", "repetition range must be whole numbers >= 1");
    x.episode.randomize_cycles = std::make_pair(static_cast<int>(rr->first), static_cast<int>(rr->second));
  }
  x.episode.initial_soc_choices = r.list("episode.initial_soc");
  for (double s : x.episode.initial_soc_choices)
    if (!(s > 0.0 && s < 1.0)) r.fail("episode.initial_soc", "SOC choices must lie in (0, 1)");
  x.episode.demand_scale_range = r.range("episode.demand_scale");
  r.wrap("episode.demand_scale", [&] {
    x.episode.validate();
    return 0;
  });

  x.reward.w_fuel = r.num("reward.w_fuel");
  x.reward.w_soc_low = r.num("reward.w_soc_low");
  x.reward.w_soc_good = r.num("reward.w_soc_good");
  x.reward.w_soc_high = r.num("reward.w_soc_high");
  r.wrap("reward.w_fuel", [&] {
    x.reward.validate();
    return 0;
  });

  x.model = build_model(c);

  x.actor = r.wrap("agent.actor", [&] { return nets::parse_family(r.str("agent.actor")); });
  x.critic = r.str("agent.critic").empty()
                 ? critic_default(x.actor)
                 : r.wrap("agent.critic", [&] { return nets::parse_family(r.str("agent.critic")); });
  r.wrap("agent.critic", [&] { return sac::pairing_of(x.actor, x.critic); });
  x.context_k = static_cast<int>(r.integer("agent.context_k", 1));
  if (x.actor == nets::Family::FFN && x.context_k != 1) r.fail("agent.context_k", "ffn actors take k = 1");
  x.hidden = static_cast<int>(r.integer("agent.hidden", 1));
  x.episodes = static_cast<int>(r.integer("train.episodes", 0));
  x.resume = r.str("train.resume");
  for (const char* k : {"train.resume", "train.init"})
    if (!r.str(k).empty() && !fs::exists(r.str(k))) r.fail(k, "no such file '" + r.str(k) + "'");

  auto& s = x.sac;
  s = sac::default_config(x.actor);
  s.lr = r.num("sac.lr");
  s.batch = static_cast<int>(r.integer("sac.batch", 1));
  s.gamma = r.num("sac.gamma");
  s.tau = r.num("sac.tau");
  s.auto_alpha = r.boolean("sac.auto_alpha");
  s.initial_alpha = r.num("sac.initial_alpha");
  s.target_entropy = r.num("sac.target_entropy");
  s.buffer_capacity = static_cast<std::size_t>(r.integer("sac.buffer_capacity", 1));
  if (auto v = r.opt_num("sac.grad_clip")) s.grad_clip = *v;
  if (!r.str("sac.train_freq").empty()) s.train_freq = static_cast<int>(r.integer("sac.train_freq", 1));
  s.updates_per_round = static_cast<int>(r.integer("sac.updates_per_round", 1));
  s.warmup_steps = static_cast<int>(r.integer("sac.warmup_steps", 0));
  s.reward_scale = r.num("sac.reward_scale");
  s.rtg_scale = r.num("sac.rtg_scale");
  s.persistent_hidden = r.boolean("sac.persistent_hidden");
  s.dt_target_return = r.opt_num("sac.dt_target_return");
  s.sequential_sampling = r.boolean("sac.sequential_sampling");
  if (s.sequential_sampling && x.actor != nets::Family::FFN)
    r.fail("sac.sequential_sampling", "only meaningful for ffn actors");
  r.wrap("sac.lr", [&] {
    s.validate();
    return 0;
  });

  x.eval_soc = r.num("eval.initial_soc");
  if (!(x.eval_soc > 0.0 && x.eval_soc < 1.0)) r.fail("eval.initial_soc", "must lie in (0, 1)");
  x.eval_cycle = r.str("eval.cycle");

  const auto n_soc = static_cast<int>(r.integer("dp.soc_points", 2));
  const auto n_w = static_cast<int>(r.integer("dp.omega_points", 1));
  const auto n_t = static_cast<int>(r.integer("dp.torque_points", 1));
  x.dp.soc_grid = dp::linspace(0.0, 1.0, n_soc);
  x.dp.omega_grid = dp::linspace(0.0, std::min(x.model->engine_speed_max, x.model->generator_eff.speed_max), n_w);
  x.dp.torque_grid = dp::linspace(0.0, x.model->engine_fuel.torque_axis.back(), n_t);
  x.dp.terminal_soc = {r.num("dp.terminal_lo"), r.num("dp.terminal_hi")};
  r.wrap("dp.terminal_lo", [&] {
    x.dp.validate();
    return 0;
  });

  x.continue_from = r.str("ablate.continue_from");
  x.workers = static_cast<int>(r.integer("ablate.workers", 1));
  return x;
}

// --- train ------------------------------------------------------------------------

namespace {

env::Meta config_meta(const Config& c) {
  env::Meta m;
  for (const auto& k : config_keys()) m["config." + k.key] = c.get(k.key);
  return m;
}

Config config_from_meta(const env::Meta& meta) {
  Config c;
  for (const auto& [k, v] : meta)
    if (k.rfind("config.", 0) == 0) c.set(k.substr(7), v, 0);
  // the starting checkpoint is history, not something eval needs to find again
  c.set("train.resume", "", 0);
  c.set("train.init", "", 0);
  return c;
}

std::string get_meta(const env::Meta& m, const std::string& k) {
  auto it = m.find(k);
  if (it == m.end()) throw FormatError("checkpoint missing '" + k + "'");
  return it->second;
}

struct CurveRow {
  int episode = 0;
  double mean_reward = 0.0;
};

std::vector<CurveRow> read_log(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open log '" + path + "'");
  std::vector<CurveRow> out;
  std::string line;
  bool header = false;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    const auto s = text::trim(line);
    if (s.empty() || s.front() == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    const auto cols = text::split(s, ',');
    double ep = 0.0, r = 0.0;
    if (cols.size() < 3 || !text::parse_double(cols[0], ep) || !text::parse_double(cols[2], r))
      throw ParseError("malformed log row in '" + path + "'", n);
    out.push_back({static_cast<int>(ep), r});
  }
  return out;
}

double normalized(double v, double worst, double best) {
  if (!(best > worst)) return 100.0;
  return 100.0 * (v - worst) / (best - worst);
}

void write_curve(const std::string& path, const std::vector<CurveRow>& rows, double worst, double best,
                 std::uint64_t seed) {
  std::vector<double> r;
  for (const auto& c : rows) r.push_back(c.mean_reward);
  const auto ma = sac::moving_average(r);
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write '" + path + "'");
  f << "# seed=" << seed << ",anchor_worst=" << fmt_double(worst) << ",anchor_best=" << fmt_double(best) << '\n';
  f << "episode,mean_reward,ma10,normalized\n";
  for (std::size_t i = 0; i < rows.size(); ++i)
    f << rows[i].episode << ',' << fmt_double(rows[i].mean_reward) << ',' << fmt_double(ma[i]) << ','
      << fmt_double(normalized(ma[i], worst, best)) << '\n';
}

std::pair<double, double> ma_range(const std::vector<CurveRow>& rows) {
  std::vector<double> r;
  for (const auto& c : rows) r.push_back(c.mean_reward);
  const auto ma = sac::moving_average(r);
  if (ma.empty()) return {0.0, 0.0};
  return {*std::min_element(ma.begin(), ma.end()), *std::max_element(ma.begin(), ma.end())};
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw ValidationError("cannot write '" + p.string() + "'");
  f << s;
}

}  // namespace

TrainOutcome cmd_train(const Config& c, const std::string& out) {
  const Experiment x = resolve(c);
  const fs::path dir(out.empty() ? x.out : out);
  fs::create_directories(dir);
  TrainOutcome o;
  o.log_path = (dir / "log.csv").string();
  o.best_checkpoint = (dir / "best.ckpt").string();
  o.final_checkpoint = (dir / "final.ckpt").string();
  o.snapshot_path = (dir / "config.snapshot").string();
  o.curve_path = (dir / "curve.csv").string();

  sac::AgentVariant agent;
  int first = 1;
  std::string start = c.get("train.init");
  if (!x.resume.empty()) start = x.resume;
  if (!start.empty()) {
    const auto ck = nets::load_checkpoint(start);
    agent = sac::agent_from_checkpoint(ck);
    if (agent.pairing() != sac::pairing_of(x.actor, x.critic) || agent.context_k != x.context_k)
      throw ConfigError("checkpoint '" + start + "' holds " + sac::to_string(agent.pairing()) + " k=" +
                        std::to_string(agent.context_k) + ", config asks for " +
                        sac::to_string(sac::pairing_of(x.actor, x.critic)) + " k=" + std::to_string(x.context_k));
    if (!x.resume.empty()) first = std::stoi(get_meta(ck.meta, "last_episode")) + 1;
  } else {
    agent = sac::make_agent(x.actor, x.critic, x.context_k, x.seed, x.hidden, x.sac.initial_alpha);
  }

  env::ShevEnv env(x.model, x.episode, x.reward);
  // resumed segments draw from a different stream than the first segment
  const std::uint64_t seed = first == 1 ? x.seed : x.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(first));
  sac::Trainer trainer(env, std::move(agent), x.sac, seed);

  const bool fresh_log = !fs::exists(o.log_path) || fs::file_size(o.log_path) == 0 || first == 1;
  if (fresh_log) {
    std::ofstream(o.log_path) << "# seed=" << x.seed << ",pairing=" << sac::to_string(sac::pairing_of(x.actor, x.critic))
                              << ",context_k=" << x.context_k << '\n'
                              << sac::log_header() << '\n';
  }
  write_text(o.snapshot_path, "# seed=" + std::to_string(x.seed) + "\n" + c.snapshot());

  sac::TrainOptions opt;
  opt.first_episode = first;
  opt.log_path = o.log_path;
  opt.best_checkpoint = o.best_checkpoint;
  opt.dump_dir = dir.string();
  opt.checkpoint_meta = config_meta(c);
  opt.checkpoint_meta["seed"] = std::to_string(x.seed);
  o.result = trainer.run(x.episodes, opt);
  o.last_episode = first - 1 + x.episodes;

  auto meta = config_meta(c);
  meta["seed"] = std::to_string(x.seed);
  meta["last_episode"] = std::to_string(o.last_episode);
  meta["episode"] = std::to_string(o.last_episode);
  meta["dt_return"] = fmt_double(trainer.running_best_return());
  nets::save_checkpoint(o.final_checkpoint, sac::agent_checkpoint(trainer.agent(), meta));
  if (!fs::exists(o.best_checkpoint)) nets::save_checkpoint(o.best_checkpoint, sac::agent_checkpoint(trainer.agent(), meta));

  const auto rows = read_log(o.log_path);
  const auto [lo, hi] = ma_range(rows);
  write_curve(o.curve_path, rows, lo, hi, x.seed);
  return o;
}

// --- eval / dp --------------------------------------------------------------------

namespace {

cycles::DriveCycle pick_cycle(const Config& c, const Experiment& x, const std::string& spec) {
  if (spec.empty() && x.eval_cycle.empty()) return x.cycle;
  const std::string s = spec.empty() ? x.eval_cycle : spec;
  const auto unit = cycles::parse_speed_unit(c.get("cycle.unit"));
  return cycles::resolve_cycle(s, unit);
}

void require_em_feasible(const cycles::DriveCycle& cyc, const pt::PowertrainModel& m) {
  std::vector<char> ok;
  env::cycle_demand(cyc, m, &ok);
  for (std::size_t t = 0; t < ok.size(); ++t)
    if (!ok[t])
      throw InfeasibleError("EM cannot follow cycle '" + cyc.name + "' at step " + std::to_string(t),
                            static_cast<long>(t));
}

void write_summary_file(const std::string& path, const env::EpisodeSummary& s, bool mpg_inf, env::Meta meta) {
  meta["mpg_infinite"] = mpg_inf ? "1" : "0";
  env::write_summary(path, s, meta);
}

}  // namespace

EvalOutcome cmd_eval(const std::string& checkpoint, const std::string& cycle_spec, double initial_soc,
                     const std::string& out, const Config* overrides) {
  const auto ck = nets::load_checkpoint(checkpoint);
  Config c = config_from_meta(ck.meta);
  if (overrides)
    for (const auto& k : config_keys())
      if (overrides->explicitly_set(k.key)) c.set(k.key, overrides->get(k.key));
  const Experiment x = resolve(c);
  const auto agent = sac::agent_from_checkpoint(ck);

  auto sc = x.sac;
  if (!sc.dt_target_return) {
    double r0 = 0.0;
    if (auto it = ck.meta.find("dt_return"); it != ck.meta.end() && text::parse_double(it->second, r0))
      sc.dt_target_return = r0;
  }
  const auto cyc = pick_cycle(c, x, cycle_spec);
  require_em_feasible(cyc, *x.model);

  env::EpisodeConfig ec;
  ec.cycle = cyc;
  ec.initial_soc_choices = {initial_soc};
  env::ShevEnv e(x.model, ec, x.reward);
  const auto trace = sac::evaluate(e, agent, sc, initial_soc, x.seed);

  EvalOutcome o;
  o.summary = env::summarize(trace, cyc.dt, x.model->fuel_density);
  const auto m = dp::mpg_of(trace, cyc.dt, *x.model);
  o.mpg = m.value;
  o.mpg_infinite = m.infinite;

  const fs::path dir(out.empty() ? x.out : out);
  fs::create_directories(dir);
  env::Meta meta{{"solver", "agent"},
                 {"pairing", sac::to_string(agent.pairing())},
                 {"context_k", std::to_string(agent.context_k)},
                 {"checkpoint", fs::path(checkpoint).filename().string()},
                 {"cycle", cyc.name},
                 {"initial_soc", fmt_double(initial_soc)},
                 {"seed", std::to_string(x.seed)},
                 {"dt", fmt_double(cyc.dt)}};
  o.trace_path = (dir / "trace.csv").string();
  o.summary_path = (dir / "summary.txt").string();
  env::write_trace(o.trace_path, trace, meta);
  write_summary_file(o.summary_path, o.summary, o.mpg_infinite, meta);
  return o;
}

DpOutcome cmd_dp(const Config& c, const std::string& cycle_spec, double initial_soc, const std::string& out) {
  const Experiment x = resolve(c);
  const auto cyc = pick_cycle(c, x, cycle_spec);
  DpOutcome o;
  o.solution = dp::dp_solve(cyc, *x.model, x.dp, initial_soc);
  o.dir = out.empty() ? x.out : out;
  fs::create_directories(o.dir);
  env::Meta meta{{"cycle", cyc.name},
                 {"initial_soc", fmt_double(initial_soc)},
                 {"seed", std::to_string(x.seed)},
                 {"dt", fmt_double(cyc.dt)},
                 {"soc_points", std::to_string(x.dp.soc_grid.size())},
                 {"actions", std::to_string(o.solution.actions.size())}};
  dp::export_solution(o.solution, o.dir, meta);
  const auto s = env::summarize(o.solution.trace, cyc.dt, x.model->fuel_density);
  meta["solver"] = "dp";
  write_summary_file((fs::path(o.dir) / "summary.txt").string(), s, o.solution.mpg_infinite, meta);
  return o;
}

// --- compare ----------------------------------------------------------------------

namespace {
double round2(double x) {
  const double r = std::round(x * 100.0) / 100.0;
  return r == 0.0 ? 0.0 : r;  // no negative zero
}
}  // namespace

double delta_percent(double dp_value, double agent_value) {
  if (dp_value == 0.0) throw ContractError("relative delta against a zero DP value");
  return round2(100.0 * (agent_value - dp_value) / dp_value);
}

double total_percent(double delta_soc, double delta_mpg) { return round2(round2(delta_soc) + round2(delta_mpg)); }

std::string fmt2(double x, bool sign) {
  x = round2(x);
  std::ostringstream o;
  o << std::fixed << std::setprecision(2);
  if (sign && x > 0.0) o << '+';
  o << x;
  return o.str();
}

Report make_report(const ReportRow& dp, std::vector<ReportRow> runs) {
  Report r;
  r.dp = dp;
  r.dp.delta_soc = r.dp.delta_mpg = r.dp.total = 0.0;
  for (auto& row : runs) {
    row.delta_soc = delta_percent(dp.soc_final_pct, row.soc_final_pct);
    row.delta_mpg = delta_percent(dp.mpg, row.mpg);
    row.total = total_percent(row.delta_soc, row.delta_mpg);
  }
  r.runs = std::move(runs);
  return r;
}

std::string render_csv(const Report& r) {
  std::ostringstream o;
  o << "# cycle=" << r.cycle << ",initial_soc=" << fmt_double(r.initial_soc) << '\n';
  o << "row,soc_final_pct,mpg,delta_soc_pct,delta_mpg_pct,total_pct,trace\n";
  o << r.dp.name << ',' << fmt2(r.dp.soc_final_pct) << ',' << fmt2(r.dp.mpg) << ",,,," << r.dp.trace << '\n';
  for (const auto& x : r.runs)
    o << x.name << ',' << fmt2(x.soc_final_pct) << ',' << fmt2(x.mpg) << ',' << fmt2(x.delta_soc, true) << ','
      << fmt2(x.delta_mpg, true) << ',' << fmt2(x.total, true) << ',' << x.trace << '\n';
  return o.str();
}

std::string render_text(const Report& r) {
  std::ostringstream o;
  o << "cycle " << r.cycle << ", initial SOC " << fmt2(100.0 * r.initial_soc) << " %\n";
  auto line = [&](const std::string& a, const std::string& b, const std::string& c) {
    o << std::left << std::setw(16) << a << std::right << std::setw(12) << b << std::setw(12) << c << '\n';
  };
  line("", "SoC_f (%)", "MPG");
  line(r.dp.name, fmt2(r.dp.soc_final_pct), fmt2(r.dp.mpg));
  for (const auto& x : r.runs) {
    line(x.name, fmt2(x.soc_final_pct), fmt2(x.mpg));
    line("  Delta (%)", fmt2(x.delta_soc, true), fmt2(x.delta_mpg, true));
    line("  Total (%)", fmt2(x.total, true), "");
  }
  return o.str();
}

Report cmd_compare(const std::string& dp_trace, const std::vector<std::string>& run_traces, const std::string& out) {
  if (run_traces.empty()) throw UsageError("compare needs at least one run trace");
  auto load = [](const std::string& path, const std::string& fallback) {
    env::Meta meta;
    const auto trace = env::read_trace(path, &meta);
    if (trace.empty()) throw FormatError("trace '" + path + "' has no steps");
    double dt = 1.0;
    if (auto it = meta.find("dt"); it != meta.end()) text::parse_double(it->second, dt);
    const auto s = env::summarize(trace, dt);
    ReportRow row;
    row.name = meta.count("pairing") ? meta.at("pairing") : fallback;
    row.soc_final_pct = 100.0 * s.soc_final;
    row.mpg = s.mpg;
    row.trace = path;
    return std::make_tuple(row, trace, meta);
  };
  auto [dp_row, dp_steps, dp_meta] = load(dp_trace, "DP");
  dp_row.name = "DP";
  std::vector<ReportRow> rows;
  for (const auto& p : run_traces) {
    auto [row, steps, meta] = load(p, stem(p));
    auto refuse = [&](const std::string& why) {
      throw ValidationError("refusing to compare '" + p + "' with '" + dp_trace + "': " + why);
    };
    if (dp_meta.count("cycle") && meta.count("cycle") && dp_meta.at("cycle") != meta.at("cycle"))
      refuse("cycle '" + meta.at("cycle") + "' vs '" + dp_meta.at("cycle") + "'");
    if (steps.size() != dp_steps.size()) refuse("different step counts");
    for (std::size_t t = 0; t + 1 < steps.size(); ++t)
      if (std::abs(steps[t].v - dp_steps[t].v) > 1e-9) refuse("velocity differs at step " + std::to_string(t));
    if (std::abs(steps.front().soc - dp_steps.front().soc) > 1e-12) refuse("different initial SOC");
    rows.push_back(row);
  }
  Report r = make_report(dp_row, std::move(rows));
  r.cycle = dp_meta.count("cycle") ? dp_meta.at("cycle") : "";
  r.initial_soc = dp_steps.front().soc;
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "report.csv", render_csv(r));
    write_text(fs::path(out) / "report.txt", render_text(r));
  }
  return r;
}

// --- ablations --------------------------------------------------------------------

std::vector<Arm> study_arms(int study) {
  using O = std::map<std::string, std::string>;
  auto arm = [](const std::string& actor, const std::string& critic, int k, O extra) {
    Arm a;
    a.name = actor + "-" + critic + "-k" + std::to_string(k);
    a.overrides = {{"agent.actor", actor}, {"agent.critic", critic}, {"agent.context_k", std::to_string(k)}};
    for (auto& [key, v] : extra) a.overrides[key] = v;
    return a;
  };
  const O fixed{{"episode.initial_soc", "0.85"}, {"cycle.repetitions", "10"}};
  const O random_soc{{"episode.initial_soc", "0.85,0.75,0.65,0.55,0.45"}, {"cycle.repetitions", "10"}};
  std::vector<Arm> arms;
  switch (study) {
    case 1: {
      arms.push_back(arm("ffn", "ffn", 1, {{"episode.initial_soc", "0.85"}, {"cycle.repetitions", "1"}}));
      arms.back().name = "ffn-random-1cycle";
      arms.push_back(arm("ffn", "ffn", 1, fixed));
      arms.back().name = "ffn-random-10cycle";
      O seq = fixed;
      seq["sac.sequential_sampling"] = "true";
      arms.push_back(arm("ffn", "ffn", 1, seq));
      arms.back().name = "ffn-sequential-10cycle";
      break;
    }
    case 2:
      arms = {arm("ffn", "ffn", 1, fixed), arm("gru", "gru", 1, fixed), arm("dt", "gru", 1, fixed),
              arm("dt", "dt", 1, fixed)};
      break;
    case 3:
      arms = {arm("gru", "gru", 10, fixed), arm("gru", "gru", 100, fixed), arm("dt", "gru", 10, fixed),
              arm("dt", "gru", 100, fixed)};
      break;
    case 4:
    case 5:
    case 6: {
      O o = random_soc;
      if (study >= 5) o["cycle.randomize"] = "1-10";
      if (study >= 6) o["episode.demand_scale"] = "0.5-1.5";
      arms = {arm("ffn", "ffn", 1, o), arm("gru", "gru", 10, o), arm("dt", "gru", 100, o)};
      break;
    }
    default:
      throw ConfigError("study must be 1-6, got " + std::to_string(study));
  }
  return arms;
}

AblationOutcome cmd_ablate(int study, const Config& base, const std::string& out) {
  const auto arms = study_arms(study);
  const Experiment x = resolve(base);
  const fs::path dir(out.empty() ? x.out : out);
  fs::create_directories(dir);

  AblationOutcome res;
  res.arms.resize(arms.size());
  std::vector<std::vector<CurveRow>> curves(arms.size());
  auto run_arm = [&](std::size_t i) {
    const auto& a = arms[i];
    ArmOutcome& o = res.arms[i];
    o.name = a.name;
    o.init = "fresh";
    try {
      Config c = base;
      for (const auto& [k, v] : a.overrides) c.set(k, v);
      const fs::path prev = x.continue_from.empty() ? fs::path() : fs::path(x.continue_from) / a.name / "best.ckpt";
      if (study >= 4 && !prev.empty() && fs::exists(prev)) {
        c.set("train.init", prev.string());
        o.init = prev.string();
      }
      const fs::path arm_dir = dir / a.name;
      const auto t = cmd_train(c, arm_dir.string());
      curves[i] = read_log(t.log_path);
      o.best_ma = t.result.best_ma;
      o.episodes = static_cast<int>(t.result.log.size());
      o.ok = true;
    } catch (const std::exception& e) {
      o.ok = false;
      o.message = e.what();
    }
  };

  const int workers = std::max(1, std::min<int>(x.workers, static_cast<int>(arms.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < arms.size(); ++i) run_arm(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < arms.size();) run_arm(i);
      });
    for (auto& t : pool) t.join();
  }

  bool any = false;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    if (!res.arms[i].ok || curves[i].empty()) continue;
    const auto [lo, hi] = ma_range(curves[i]);
    if (!any) {
      res.anchor_worst = lo;
      res.anchor_best = hi;
      any = true;
    }
    res.anchor_worst = std::min(res.anchor_worst, lo);
    res.anchor_best = std::max(res.anchor_best, hi);
  }

  std::ofstream f(dir / "arms.csv");
  f << "# study=" << study << ",seed=" << x.seed << ",arms=" << arms.size() << '\n';
  f << "arm,status,init,episodes,best_ma,overrides,message\n";
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto& o = res.arms[i];
    std::string ov;
    for (const auto& [k, v] : arms[i].overrides) ov += (ov.empty() ? "" : ";") + k + "=" + v;
    std::string msg = o.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    f << o.name << ',' << (o.ok ? "ok" : "failed") << ',' << o.init << ',' << o.episodes << ','
      << fmt_double(o.best_ma) << ',' << ov << ',' << msg << '\n';
    if (o.ok) write_curve((dir / o.name / "curve.csv").string(), curves[i], res.anchor_worst, res.anchor_best, x.seed);
  }
  write_text(dir / "anchors.txt", "anchor_worst=" + fmt_double(res.anchor_worst) +
                                      "\nanchor_best=" + fmt_double(res.anchor_best) + "\n");
  return res;
}

void cmd_maps(const std::string& dir, const Config& c) {
  Config defaults = c;
  defaults.set("model.maps_dir", "");
  const auto m = build_model(defaults);
  const fs::path d(dir);
  fs::create_directories(d);
  pt::write_component_map(m->engine_fuel, (d / "engine_fuel.csv").string(), (d / "engine_fuel.meta").string());
  pt::write_component_map(m->generator_eff, (d / "generator_eff.csv").string(), (d / "generator_eff.meta").string());
  pt::write_component_map(m->em_eff, (d / "em_eff.csv").string(), (d / "em_eff.meta").string());
  const auto& b = m->battery;
  const auto& v = m->vehicle;
  std::ostringstream o;
  o << "cells_series=" << b.cells_series << "\ncells_parallel=" << b.cells_parallel
    << "\ncell_capacity_ah=" << fmt_double(b.cell_capacity_ah) << "\ncell_rated_voltage=" << fmt_double(b.cell_rated_voltage)
    << "\ncell_resistance=" << fmt_double(b.cell_resistance) << "\nnominal_energy_wh=" << fmt_double(b.nominal_energy_wh())
    << "\nmass=" << fmt_double(v.mass) << "\naux_power=" << fmt_double(v.aux_power)
    << "\nwheel_radius=" << fmt_double(v.wheel_radius) << "\nfinal_drive_ratio=" << fmt_double(v.final_drive_ratio)
    << "\n";
  write_text(d / "params.txt", o.str());
}

}  // namespace shev::harness
