#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "shev/error.hpp"
#include "shev/harness.hpp"
#include "shev/text.hpp"
#include "support.hpp"

using namespace shev;
using namespace shev::harness;
namespace fs = std::filesystem;

namespace {

const char* kToy =
    "# toy run\n"
    "seed = 1\n"
    "cycle.source = synth:trapezoid:30:6:1\n"
    "episode.initial_soc = 0.85\n"
    "agent.hidden = 8\n"
    "train.episodes = 20\n"
    "sac.batch = 8\n"
    "sac.warmup_steps = 40\n"
    "model.cell_capacity_ah = 0.05\n";

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// log rows without the wall-clock column
std::vector<std::string> log_rows(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> rows;
  std::string line;
  int wall = -1;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto cols = text::split(line, ',');
    if (wall < 0) {
      for (std::size_t i = 0; i < cols.size(); ++i)
        if (cols[i] == "wall_s") wall = static_cast<int>(i);
      REQUIRE(wall >= 0);
      continue;
    }
    std::string r;
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (static_cast<int>(i) != wall) r += std::string(cols[i]) + ",";
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> row;
    for (auto c : text::split(line, ',')) row.emplace_back(c);
    out.push_back(row);
  }
  return out;
}

template <class E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  FAIL("expected exception");
  return {};
}

}  // namespace

TEST_CASE("config parsing and diagnostics") {
  SUBCASE("defaults resolve") {
    Config c;
    auto x = resolve(c);
    CHECK(x.seed == 1);
    CHECK(x.actor == nets::Family::FFN);
    CHECK(x.critic == nets::Family::FFN);
    CHECK(x.sac.train_freq == 5);
    CHECK(x.episode.initial_soc_choices.size() == 5);
    CHECK(x.dp.soc_grid.size() == 401);
  }
  SUBCASE("paired critic defaults") {
    Config c;
    c.set("agent.actor", "dt");
    c.set("agent.context_k", "10");
    auto x = resolve(c);
    CHECK(x.critic == nets::Family::GRU);
    CHECK(x.sac.train_freq == 50);
    c.set("agent.actor", "gru");
    x = resolve(c);
    CHECK(x.critic == nets::Family::GRU);
    CHECK(x.sac.grad_clip == 0.25);
  }
  SUBCASE("missing '=' reports the line") {
    try {
      Config::parse("seed = 1\n\n# fine\nagent.actor ffn\n");
      FAIL("no throw");
    } catch (const ParseError& e) {
      CHECK(e.line() == 4);
    }
  }
  SUBCASE("unknown and duplicate keys") {
    auto m = message_of<ConfigError>([] { Config::parse("seed = 1\nsac.lrr = 3\n", "a.cfg"); });
    CHECK(m.find("line 2") != std::string::npos);
    CHECK(m.find("sac.lrr") != std::string::npos);
    m = message_of<ConfigError>([] { Config::parse("seed = 1\nseed = 2\n"); });
    CHECK(m.find("line 2") != std::string::npos);
    CHECK(m.find("line 1") != std::string::npos);
  }
  SUBCASE("bad values name the key and line") {
    const char* cases[][2] = {
        {"seed = 1\nsac.lr = fast\n", "sac.lr"},
        {"seed = 1\n\nsac.auto_alpha = maybe\n", "sac.auto_alpha"},
        {"episode.demand_scale = 1.5-0.5\n", "episode.demand_scale"},
        {"agent.context_k = 4\n", "agent.context_k"},
        {"agent.actor = lstm\n", "agent.actor"},
        {"agent.actor = ffn\nagent.critic = dt\n", "agent.critic"},
        {"episode.initial_soc = 0.8,1.2\n", "episode.initial_soc"},
        {"cycle.source = /no/such/cycle.csv\n", "cycle.source"},
        {"train.resume = /no/such.ckpt\n", "train.resume"},
        {"dp.terminal_lo = 0.3\n", "dp.terminal_lo"},
    };
    for (auto& [text, key] : cases) {
      CAPTURE(text);
      auto c = Config::parse(text, "x.cfg");
      const auto m = message_of<ConfigError>([&] { resolve(c); });
      CHECK(m.find(key) != std::string::npos);
      CHECK(m.find("x.cfg") != std::string::npos);
      const int line = c.line_of(key);
      if (line > 0) CHECK(m.find("line " + std::to_string(line)) != std::string::npos);
    }
  }
  SUBCASE("ranges") {
    auto x = resolve(Config::parse("cycle.randomize = 1-10\nepisode.demand_scale = 0.5-1.5\n"));
    REQUIRE(x.episode.randomize_cycles);
    CHECK(*x.episode.randomize_cycles == std::pair<int, int>{1, 10});
    REQUIRE(x.episode.demand_scale_range);
    CHECK(*x.episode.demand_scale_range == std::pair<double, double>{0.5, 1.5});
  }
  SUBCASE("help covers every key and the snapshot round-trips") {
    const auto help = help_config();
    auto c = Config::parse(kToy);
    auto back = Config::parse(c.snapshot());
    for (const auto& k : config_keys()) {
      CHECK(help.find(k.key) != std::string::npos);
      CHECK(back.get(k.key) == c.get(k.key));
    }
  }
}

TEST_CASE("train: bookkeeping, determinism, resume, snapshot replay") {
  const auto root = testing::temp_dir("harness_train");
  auto c = Config::parse(kToy);
  auto a = cmd_train(c, (root / "a").string());

  auto rows = log_rows(a.log_path);
  CHECK(rows.size() == 20);
  CHECK(fs::exists(a.best_checkpoint));
  CHECK(fs::exists(a.final_checkpoint));
  CHECK(a.last_episode == 20);
  CHECK(slurp(a.log_path).find("seed=1") != std::string::npos);

  auto curve = csv(a.curve_path);
  REQUIRE(curve.size() == 21);
  for (int i = 1; i <= 20; ++i) CHECK(curve[static_cast<std::size_t>(i)][0] == std::to_string(i));

  SUBCASE("identical invocations give identical logs") {
    auto b = cmd_train(c, (root / "b").string());
    CHECK(log_rows(b.log_path) == rows);
  }
  SUBCASE("snapshot replays the run") {
    auto snap = Config::load(a.snapshot_path);
    auto r = cmd_train(snap, (root / "replay").string());
    CHECK(log_rows(r.log_path) == rows);
    CHECK(slurp(r.snapshot_path) == slurp(a.snapshot_path));
  }
  SUBCASE("resume continues numbering") {
    auto r = c;
    r.set("train.resume", a.final_checkpoint);
    r.set("train.episodes", "5");
    auto o = cmd_train(r, (root / "a").string());
    CHECK(o.last_episode == 25);
    auto all = csv(o.log_path);
    REQUIRE(all.size() == 26);
    for (int i = 1; i <= 25; ++i) CHECK(all[static_cast<std::size_t>(i)][0] == std::to_string(i));
  }
  SUBCASE("init from a checkpoint of another pairing is refused") {
    auto r = c;
    r.set("agent.actor", "gru");
    r.set("train.init", a.final_checkpoint);
    CHECK_THROWS_AS(cmd_train(r, (root / "bad").string()), ConfigError);
  }
}

TEST_CASE("eval: deterministic trace, initial SOC, recomputed economy") {
  const auto root = testing::temp_dir("harness_eval");
  auto c = Config::parse(kToy);
  c.set("train.episodes", "3");
  auto t = cmd_train(c, (root / "run").string());

  auto e1 = cmd_eval(t.best_checkpoint, "", 0.6, (root / "e1").string());
  auto e2 = cmd_eval(t.best_checkpoint, "", 0.6, (root / "e2").string());
  CHECK(slurp(e1.trace_path) == slurp(e2.trace_path));

  env::Meta meta;
  const auto trace = env::read_trace(e1.trace_path, &meta);
  CHECK(trace.size() <= 30);
  CHECK(trace.size() == static_cast<std::size_t>(e1.summary.steps));
  CHECK(trace.front().soc == 0.6);
  CHECK(meta.at("seed") == "1");
  CHECK(meta.at("initial_soc") == "0.6");

  // independent recomputation: left Riemann distance, fuel mass to US gallons
  double dist = 0.0, fuel = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    dist += trace[i].v * 1.0;
    fuel += trace[i].fuel_g;
  }
  const double gallons = fuel / 1000.0 / 0.85 / 3.78541;
  const auto kv = env::read_kv_file(e1.summary_path);
  double mpg = 0.0;
  REQUIRE(text::parse_double(kv.at("mpg"), mpg));
  if (fuel > 0.0) {
    CHECK(mpg == doctest::Approx(dist / 1609.344 / gallons).epsilon(1e-12));
    CHECK(e1.mpg == doctest::Approx(dist / 1609.344 / gallons).epsilon(1e-12));
  } else {
    CHECK(e1.mpg_infinite);
  }

  SUBCASE("EM-infeasible cycle is reported as infeasibility") {
    const auto p = root / "steep.csv";
    std::ofstream(p) << "time,velocity\n0,0\n1,0\n2,60\n3,0\n";
    CHECK_THROWS_AS(cmd_eval(t.best_checkpoint, p.string(), 0.6, (root / "e3").string()), InfeasibleError);
  }
}

TEST_CASE("compare: self-comparison, refusal, recomputable report") {
  const auto root = testing::temp_dir("harness_compare");
  auto c = Config::parse(
      "cycle.source = synth:trapezoid:60:8:1\n"
      "model.cell_capacity_ah = 0.02\n"
      "dp.soc_points = 201\n"
      "dp.omega_points = 7\n"
      "dp.torque_points = 7\n"
      "agent.hidden = 8\n"
      "train.episodes = 2\n"
      "sac.warmup_steps = 200\n");
  auto d = cmd_dp(c, "", 0.45, (root / "dp").string());
  const auto dp_trace = (root / "dp" / "trace.csv").string();
  CHECK(d.solution.soc_final >= 0.15);
  CHECK(d.solution.soc_final <= 0.18);

  SUBCASE("DP against itself") {
    auto r = cmd_compare(dp_trace, {dp_trace}, (root / "self").string());
    REQUIRE(r.runs.size() == 1);
    CHECK(r.runs[0].delta_soc == 0.0);
    CHECK(r.runs[0].delta_mpg == 0.0);
    CHECK(r.runs[0].total == 0.0);
    const auto rows = csv(root / "self" / "report.csv");
    REQUIRE(rows.size() == 3);
    CHECK(rows[2][3] == "0.00");
    CHECK(rows[2][5] == "0.00");
    CHECK(fs::exists(root / "self" / "report.txt"));
  }
  SUBCASE("numbers come from the traces") {
    // a second run: the DP actions replayed with one step at higher torque
    auto steps = env::read_trace(dp_trace);
    auto x = resolve(c);
    env::EpisodeConfig ec;
    ec.cycle = x.cycle;
    ec.initial_soc_choices = {0.45};
    env::ShevEnv e(x.model, ec, x.reward);
    e.reset_fixed(0.45);
    std::size_t off = 0;
    while (off < steps.size() && steps[off].fuel_g == 0.0) ++off;
    REQUIRE(off < steps.size());
    std::vector<env::StepInfo> replay;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      env::EnvAction a{steps[t].omega, steps[t].torque};
      if (t == off) a.torque_eng *= 1.1;
      replay.push_back(e.step(a).info);
    }
    const auto alt = (root / "alt.csv").string();
    env::write_trace(alt, replay, {{"cycle", "synth_trapezoid"}, {"pairing", "replay"}});
    auto r = cmd_compare(dp_trace, {alt}, "");
    REQUIRE(r.runs.size() == 1);
    const auto s_dp = env::summarize(steps, 1.0);
    const auto s_alt = env::summarize(replay, 1.0);
    CHECK(r.dp.mpg == doctest::Approx(d.solution.mpg).epsilon(1e-12));
    CHECK(r.dp.soc_final_pct == 100.0 * s_dp.soc_final);
    CHECK(r.runs[0].name == "replay");
    CHECK(r.runs[0].soc_final_pct == 100.0 * s_alt.soc_final);
    CHECK(r.runs[0].mpg == s_alt.mpg);
    CHECK(r.runs[0].delta_soc == delta_percent(r.dp.soc_final_pct, r.runs[0].soc_final_pct));
    CHECK(r.runs[0].delta_mpg == delta_percent(r.dp.mpg, r.runs[0].mpg));
    CHECK(r.runs[0].delta_mpg < 0.0);  // more fuel burnt
    CHECK(r.runs[0].total == total_percent(r.runs[0].delta_soc, r.runs[0].delta_mpg));
  }
  SUBCASE("different cycle is refused") {
    auto t = cmd_train(c, (root / "run2").string());
    auto e = cmd_eval(t.final_checkpoint, "synth:trapezoid:60:9:1", 0.45, (root / "other").string());
    CHECK_THROWS_AS(cmd_compare(dp_trace, {e.trace_path}, ""), ValidationError);
    env::Meta meta;
    auto steps = env::read_trace(dp_trace, &meta);
    meta["cycle"] = "hfet";
    env::write_trace((root / "renamed.csv").string(), steps, meta);
    CHECK_THROWS_AS(cmd_compare(dp_trace, {(root / "renamed.csv").string()}, ""), ValidationError);
  }
  SUBCASE("different initial SOC is refused") {
    env::Meta meta;
    auto steps = env::read_trace(dp_trace, &meta);
    steps[0].soc = 0.5;
    env::write_trace((root / "soc.csv").string(), steps, meta);
    CHECK_THROWS_AS(cmd_compare(dp_trace, {(root / "soc.csv").string()}, ""), ValidationError);
  }
}

TEST_CASE("report arithmetic on reference figures") {
  // {dp soc, dp mpg, agent soc, agent mpg, printed dsoc, printed dmpg, printed total}
  struct Cell {
    const char* row;
    double dsoc, dmpg, total;
  };
  const Cell printed[] = {
      {"FFN HFET", 1.68, -12.57, -10.89},  {"FFN US06", -10.73, -7.72, -18.45}, {"FFN HHDDT", 5.11, -13.81, -8.70},
      {"GRU HFET", -2.93, -11.14, -14.07}, {"GRU US06", -4.92, -4.24, -9.16},   {"GRU HHDDT", -5.24, -12.8, -18.04},
      {"DT HFET", -1.1, -8.54, -9.64},     {"DT US06", 6.93, -12.69, -5.76},    {"DT HHDDT", -7.44, -4.93, -12.37},
  };
  for (const auto& p : printed) {
    CAPTURE(p.row);
    CHECK(fmt2(total_percent(p.dsoc, p.dmpg), true) == fmt2(p.total, true));
  }

  ReportRow dp{"DP", 15.55, 23.71};
  auto r = make_report(dp, {ReportRow{"FFN", 15.81, 20.73}});
  CHECK(fmt2(r.runs[0].delta_mpg, true) == "-12.57");
  // 100 (15.81 - 15.55) / 15.55 = 1.672; printed as +1.68
  CHECK(std::abs(r.runs[0].delta_soc - 1.68) <= 0.01 + 1e-12);
  CHECK(fmt2(r.runs[0].delta_soc, true) == "+1.67");

  auto hh = make_report(ReportRow{"DP", 16.45, 21.83}, {ReportRow{"FFN", 17.29, 18.82}});
  CHECK(fmt2(hh.runs[0].delta_soc, true) == "+5.11");
  auto us = make_report(ReportRow{"DP", 16.44, 4.63}, {ReportRow{"DT", 17.58, 4.042}});
  CHECK(fmt2(us.runs[0].delta_soc, true) == "+6.93");

  CHECK(fmt2(-0.001, true) == "0.00");
  CHECK(fmt2(2.5, true) == "+2.50");
  CHECK_THROWS_AS(delta_percent(0.0, 1.0), ContractError);

  const auto txt = render_text(r);
  CHECK(txt.find("-12.57") != std::string::npos);
  CHECK(txt.find("Total") != std::string::npos);
}

TEST_CASE("ablation arms") {
  SUBCASE("study 3 is exactly k in {10, 100} for gru and dt actors") {
    auto arms = study_arms(3);
    std::set<std::string> names;
    for (const auto& a : arms) {
      names.insert(a.name);
      Config c;
      for (const auto& [k, v] : a.overrides) c.set(k, v);
      auto x = resolve(c);
      CHECK(x.actor != nets::Family::FFN);
      CHECK(x.critic == nets::Family::GRU);
      CHECK((x.context_k == 10 || x.context_k == 100));
    }
    CHECK(names == std::set<std::string>{"gru-gru-k10", "gru-gru-k100", "dt-gru-k10", "dt-gru-k100"});
  }
  SUBCASE("study 6 samples demand scale from [0.5, 1.5] on top of random SOC and length") {
    for (const auto& a : study_arms(6)) {
      Config c;
      for (const auto& [k, v] : a.overrides) c.set(k, v);
      auto x = resolve(c);
      REQUIRE(x.episode.demand_scale_range);
      CHECK(x.episode.demand_scale_range->first == 0.5);
      CHECK(x.episode.demand_scale_range->second == 1.5);
      CHECK(x.episode.randomize_cycles);
      CHECK(x.episode.initial_soc_choices.size() == 5);
    }
  }
  SUBCASE("every study resolves and is reproducible") {
    for (int s = 1; s <= 6; ++s) {
      auto a = study_arms(s), b = study_arms(s);
      REQUIRE(a.size() == b.size());
      CHECK(a.size() >= 3);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].overrides == b[i].overrides);
        Config c;
        for (const auto& [k, v] : a[i].overrides) c.set(k, v);
        CHECK_NOTHROW(resolve(c));
      }
    }
    CHECK_THROWS_AS(study_arms(0), ConfigError);
    CHECK_THROWS_AS(study_arms(7), ConfigError);
  }
  SUBCASE("batch runs, failures recorded, curves normalized with printed anchors") {
    const auto root = testing::temp_dir("harness_ablate");
    auto base = Config::parse(kToy);
    base.set("train.episodes", "2");
    base.set("sac.sequential_sampling", "true");  // invalid for recurrent actors
    base.set("ablate.workers", "2");
    auto o = cmd_ablate(2, base, root.string());
    REQUIRE(o.arms.size() == 4);
    CHECK(o.arms[0].ok);
    for (std::size_t i = 1; i < 4; ++i) {
      CHECK_FALSE(o.arms[i].ok);
      CHECK(o.arms[i].message.find("sac.sequential_sampling") != std::string::npos);
    }
    const auto arms = csv(root / "arms.csv");
    REQUIRE(arms.size() == 5);
    CHECK(arms[1][0] == "ffn-ffn-k1");
    CHECK(arms[1][1] == "ok");
    CHECK(arms[2][1] == "failed");
    CHECK(slurp(root / "arms.csv").find("seed=1") != std::string::npos);
    const auto curve = csv(root / "ffn-ffn-k1" / "curve.csv");
    REQUIRE(curve.size() == 3);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      double v = 0.0;
      REQUIRE(text::parse_double(curve[i][3], v));
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }
    CHECK(fs::exists(root / "anchors.txt"));

    // continuation from the previous study's arm of the same name
    auto next = Config::parse(kToy);
    next.set("train.episodes", "1");
    next.set("ablate.continue_from", root.string());
    next.set("sac.warmup_steps", "1000");
    auto o4 = cmd_ablate(4, next, (root / "s4").string());
    REQUIRE(o4.arms.size() == 3);
    CHECK(o4.arms[0].init.find("ffn-ffn-k1") != std::string::npos);
    CHECK(o4.arms[1].init == "fresh");
  }
}

TEST_CASE("maps round trip through model.maps_dir") {
  const auto root = testing::temp_dir("harness_maps");
  Config c;
  cmd_maps(root.string(), c);
  for (const char* f : {"engine_fuel.csv", "engine_fuel.meta", "generator_eff.csv", "em_eff.csv", "params.txt"})
    CHECK(fs::exists(root / f));
  c.set("model.maps_dir", root.string());
  auto m = build_model(c);
  Config d;
  auto ref = build_model(d);
  CHECK(m->engine_fuel.at(1300, 1200) == doctest::Approx(ref->engine_fuel.at(1300, 1200)).epsilon(1e-12));
  CHECK(m->em_eff.at(2000, 800) == doctest::Approx(ref->em_eff.at(2000, 800)).epsilon(1e-12));
  c.set("model.maps_dir", (root / "missing").string());
  CHECK_THROWS_AS(build_model(c), ConfigError);
}
