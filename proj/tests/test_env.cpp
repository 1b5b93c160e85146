#include <cmath>
#include <memory>
#include <random>

#include "doctest.h"
#include "shev/env.hpp"
#include "shev/error.hpp"
#include "support.hpp"

using namespace shev;
using namespace shev::env;
namespace pt = shev::powertrain;

namespace {
std::shared_ptr<const pt::PowertrainModel> model(double aux = 5000.0) {
  auto m = std::make_shared<pt::PowertrainModel>(pt::build_default_maps());
  m->vehicle.aux_power = aux;
  return m;
}

EpisodeConfig fixed(cycles::DriveCycle c, double soc) {
  EpisodeConfig e;
  e.cycle = std::move(c);
  e.initial_soc_choices = {soc};
  return e;
}
}  // namespace

TEST_CASE("reward shaping") {
  RewardWeights w;
  CHECK(reward_fn(0, 0.50, 0.85, w) == 0.0);
  CHECK(reward_fn(0, 0.165, 0.85, w) == doctest::Approx(3.75).epsilon(1e-12));
  CHECK(std::abs(soc_shaping(0.165, w) - 3.75) < 1e-12);
  CHECK(std::abs(soc_shaping(0.10, w) + 75.0) < 1e-12);
  CHECK(std::abs(reward_fn(1.0, 0.5, 0.85, w) + 3.6125) < 1e-12);
  CHECK(std::abs(soc_shaping(0.15, w)) < 1e-12);
  CHECK(std::abs(soc_shaping(std::nextafter(0.15, 0.0), w)) < 1e-12);
  CHECK(std::abs(soc_shaping(std::nextafter(0.15, 1.0), w)) < 1e-12);
  CHECK(std::abs(soc_shaping(0.18, w) - 7.5) < 1e-12);
  CHECK(soc_shaping(0.181, w) == 0.0);
  CHECK(soc_shaping(0.85, w) == 0.0);
  CHECK(soc_shaping(0.90, w) == doctest::Approx(-50.0).epsilon(1e-12));
  const double hi = reward_fn(3.0, 0.5, 0.85, w), lo = reward_fn(3.0, 0.5, 0.45, w);
  CHECK(std::abs(hi / lo - std::pow(0.85 / 0.45, 2)) < 1e-12);
  CHECK(hi < lo);
  RewardWeights bad;
  bad.w_fuel = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("normalization") {
  CHECK(normalize(5, 0, 10) == 0.0);
  CHECK(normalize(1, 0, 1) == 1.0);
  CHECK(normalize(0, 0, 1) == -1.0);
  CHECK(normalize(20, 0, 10) == 1.0);
  CHECK_THROWS_AS(normalize(1, 2, 2), ConfigError);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-7, 13);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng);
    CHECK(std::abs(denormalize(normalize(x, -7, 13), -7, 13) - x) < 1e-9);
  }
  NormBounds b;
  auto a = denormalize_action({0.0, 0.0}, b);
  CHECK(a.omega_eng == 1150.0);
  CHECK(a.torque_eng == 750.0);
  auto n = normalize_action({1700, 300}, b);
  auto back = denormalize_action(n, b);
  CHECK(back.omega_eng == doctest::Approx(1700));
  CHECK(back.torque_eng == doctest::Approx(300));
  auto o = normalize_obs({0.5, 0.0, 0.0}, b);
  CHECK(o[0] == 0.0);
  CHECK(o[1] == -1.0);
  CHECK(o[2] == 0.0);
}

TEST_CASE("reset") {
  auto m = model();
  auto zero = cycles::synth_cycle(cycles::SynthKind::constant, 20, 0.0, 1);
  ShevEnv e(m, fixed(zero, 0.85));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    auto obs = e.reset(rng);
    CHECK(obs.soc == 0.85);
    CHECK(obs.p_em == 0.0);
    CHECK(obs.distance == 0.0);
  }
  EpisodeConfig rnd;
  rnd.cycle = cycles::synth_cycle(cycles::SynthKind::trapezoid, 30, 8.0, 1);
  rnd.randomize_cycles = std::pair{1, 10};
  rnd.demand_scale_range = std::pair{0.5, 1.5};
  ShevEnv a(m, rnd), b(m, rnd);
  std::mt19937_64 ra(7), rb(7);
  for (int i = 0; i < 20; ++i) {
    a.reset(ra);
    b.reset(rb);
    CHECK(a.initial_soc() == b.initial_soc());
    CHECK(a.repetitions() == b.repetitions());
    CHECK(a.demand_scale() == b.demand_scale());
    CHECK(a.demand_scale() >= 0.5);
    CHECK(a.demand_scale() <= 1.5);
    CHECK(a.episode_length() == 30 * a.repetitions());
  }
  EpisodeConfig empty = rnd;
  empty.initial_soc_choices.clear();
  CHECK_THROWS_AS(ShevEnv(m, empty), ConfigError);
}

TEST_CASE("step semantics") {
  auto m0 = model(0.0);
  auto zero = cycles::synth_cycle(cycles::SynthKind::constant, 5, 0.0, 1);
  ShevEnv e(m0, fixed(zero, 0.5));
  e.reset_fixed(0.5);
  auto r = e.step({0, 0});
  CHECK(r.reward == 0.0);
  CHECK(r.info.p_batt == 0.0);
  auto c = e.step({1300, 1410});
  CHECK(c.info.p_batt < 0);
  CHECK(c.info.soc_next > c.info.soc);

  auto cyc = cycles::synth_cycle(cycles::SynthKind::trapezoid, 40, 8.0, 2);
  ShevEnv f(model(), fixed(cyc, 0.6));
  f.reset_fixed(0.6);
  int n = 0;
  double prev = 0;
  while (f.active()) {
    auto s = f.step({1000, 300});
    CHECK(s.obs.distance >= prev);
    prev = s.obs.distance;
    ++n;
  }
  CHECK(n == 40);
  CHECK(prev == doctest::Approx(cycles::cycle_distance(cyc)).epsilon(1e-12));
  CHECK_THROWS_AS(f.step({0, 0}), UsageError);
}

TEST_CASE("SOC floor ends the episode with a failure flag") {
  auto m = std::make_shared<pt::PowertrainModel>(pt::build_default_maps());
  m->battery.cell_capacity_ah = 0.0005;
  auto cyc = cycles::synth_cycle(cycles::SynthKind::constant, 200, 8.0, 1);
  ShevEnv e(m, fixed(cyc, 0.2));
  e.reset_fixed(0.2);
  StepResult s;
  while (e.active()) s = e.step({0, 0});
  CHECK(s.info.soc_failure);
  CHECK(s.done);
  CHECK(e.step_index() < 200);
  CHECK(s.obs.soc >= 0.0);
}

TEST_CASE("bus balance and fuel accounting over a random rollout") {
  auto cyc = cycles::synth_cycle(cycles::SynthKind::sinusoid, 600, 12.0, 3);
  ShevEnv e(model(), fixed(cyc, 0.85));
  e.reset_fixed(0.85);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<StepInfo> trace;
  while (e.active()) {
    auto s = e.step(denormalize_action({u(rng), u(rng)}, e.bounds()));
    trace.push_back(s.info);
    const double res = std::abs(s.info.p_em + e.model().vehicle.aux_power - s.info.p_genset - s.info.p_batt);
    CHECK(res <= 1e-6 * std::max(1.0, std::abs(s.info.p_em)));
  }
  double fuel = 0;
  for (const auto& t : trace) fuel += t.fuel_g;
  auto sum = summarize(trace, cyc.dt);
  CHECK(sum.total_fuel_g == fuel);
  CHECK(sum.steps == 600);
}

TEST_CASE("trace round trip") {
  auto cyc = cycles::synth_cycle(cycles::SynthKind::trapezoid, 30, 7.0, 1);
  ShevEnv e(model(), fixed(cyc, 0.7));
  e.reset_fixed(0.7);
  std::vector<StepInfo> trace;
  while (e.active()) trace.push_back(e.step({1200, 500}).info);
  auto dir = testing::temp_dir("trace");
  const auto path = (dir / "t.csv").string();
  write_trace(path, trace, {{"seed", "1"}, {"cycle", "toy"}});
  Meta meta;
  auto back = read_trace(path, &meta);
  CHECK(meta.at("seed") == "1");
  REQUIRE(back.size() == trace.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    CHECK(back[i].soc == trace[i].soc);
    CHECK(back[i].fuel_g == trace[i].fuel_g);
    CHECK(back[i].soc_next == trace[i].soc_next);
    CHECK(back[i].reward == trace[i].reward);
  }
  auto s1 = summarize(trace, 1.0), s2 = summarize(back, 1.0);
  CHECK(s1.mpg == s2.mpg);
  CHECK(s1.soc_final == s2.soc_final);
  write_summary((dir / "s.txt").string(), s1, {{"seed", "1"}});
  auto kv = read_kv_file((dir / "s.txt").string());
  CHECK(kv.at("seed") == "1");
  CHECK(kv.count("mpg") == 1);
}
