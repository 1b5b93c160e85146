#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "shev/dp.hpp"
#include "shev/error.hpp"
#include "support.hpp"

using namespace shev;
using namespace shev::dp;
namespace pt = shev::powertrain;

namespace {

const pt::PowertrainModel& default_model() {
  static const auto m = pt::build_default_maps();
  return m;
}

// Same cells, far smaller capacity: one step moves SOC by a few percent.
pt::PowertrainModel small_pack(double cell_ah = 0.0075) {
  auto m = default_model();
  m.battery.cell_capacity_ah = cell_ah;
  return m;
}

cycles::DriveCycle flat_cycle(std::vector<double> v) {
  cycles::DriveCycle c;
  c.velocity = std::move(v);
  c.grade.assign(c.velocity.size(), 0.0);
  c.name = "test";
  return c;
}

DpConfig tiny_config(const std::vector<pt::EngineCommand>& actions) {
  DpConfig c;
  c.soc_grid = linspace(0.1, 0.3, 21);  // 0.01 spacing, four nodes in the window
  c.actions = actions;
  c.snap = true;
  return c;
}

std::vector<pt::EngineCommand> valid_actions(const pt::PowertrainModel& m) {
  std::vector<pt::EngineCommand> out;
  DpConfig d;
  for (const auto& a : d.action_list())
    if (pt::clip_action(a.omega_rpm, a.torque_nm, m) == a) out.push_back(a);
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  DpConfig c;
  CHECK(c.soc_grid.size() == 401);
  CHECK(c.action_list().size() == 169);
  CHECK(c.omega_grid.front() == 0.0);
  CHECK(c.torque_grid.back() == 1500.0);
  CHECK_NOTHROW(c.validate());
  c.terminal_soc = {0.0, 0.18};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DpConfig{};
  c.soc_grid = {0.0, 0.5, 0.4};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DpConfig{};
  c.soc_grid = {0.0, 1.2};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(linspace(0, 1, 1), ConfigError);
  CHECK(linspace(0.0, 1.0, 401)[60] == 0.15);
}

TEST_CASE("fuel economy") {
  pt::PowertrainModel m = default_model();
  std::vector<env::StepInfo> tr(2);
  tr[0].v = 1609.344;
  tr[0].fuel_g = 3000.0;
  tr[1].fuel_g = 218.0;
  const double gallons = 3218.0 / 1000.0 / 0.85 / 3.78541;
  auto r = mpg_of(tr, 1.0, m);
  CHECK(r.value == doctest::Approx(1.0 / gallons).epsilon(1e-14));
  CHECK(r.value == doctest::Approx(0.9998).epsilon(2e-4));
  CHECK_FALSE(r.infinite);
  tr[0].fuel_g *= 2;
  tr[1].fuel_g *= 2;
  CHECK(mpg_of(tr, 1.0, m).value == doctest::Approx(r.value / 2).epsilon(1e-15));
  tr[0].fuel_g = tr[1].fuel_g = 0;
  CHECK(mpg_of(tr, 1.0, m).infinite);
  tr[0].v = 0;
  CHECK_THROWS_AS(mpg_of(tr, 1.0, m), ContractError);
}

TEST_CASE("zero demand, already in the window: engine stays off") {
  auto cyc = flat_cycle(std::vector<double>(120, 0.0));
  auto s = dp_solve(cyc, default_model(), DpConfig{}, 0.16);
  CHECK(s.total_fuel == 0.0);
  for (const auto& r : s.trace) CHECK(r.omega == 0.0);
  CHECK(s.soc_final == doctest::Approx(0.16).epsilon(1e-2));
  CHECK(s.soc_final <= 0.16);
  CHECK(s.mpg == 0.0);  // no distance, no economy figure
  CHECK_FALSE(s.mpg_infinite);
}

TEST_CASE("zero demand from a high SOC") {
  auto cyc = flat_cycle(std::vector<double>(120, 0.0));
  auto m = default_model();
  m.vehicle.aux_power = 0.0;
  // nothing can shed charge
  try {
    dp_solve(cyc, m, DpConfig{}, 0.85);
    FAIL("expected infeasibility");
  } catch (const InfeasibleError& e) {
    CHECK(e.stranded_index() == 0);
  }
  // aux load alone drains a default pack far too slowly in two minutes
  CHECK_THROWS_AS(dp_solve(cyc, default_model(), DpConfig{}, 0.85), InfeasibleError);
  // a tiny pack drains through the window on aux alone
  auto tiny = small_pack(0.003);
  auto s = dp_solve(cyc, tiny, DpConfig{}, 0.85);
  CHECK(s.soc_final >= 0.15);
  CHECK(s.soc_final <= 0.18);
}

TEST_CASE("EM infeasible cycle is reported") {
  auto cyc = flat_cycle({0, 0, 60, 0});
  CHECK_THROWS_AS(dp_solve(cyc, default_model(), DpConfig{}, 0.5), InfeasibleError);
}

TEST_CASE("dp equals brute force on snapped tiny instances") {
  const auto m = small_pack(0.0075);
  std::vector<pt::EngineCommand> pool;
  for (const auto& a : valid_actions(m))
    if (a.omega_rpm > 0 && pt::genset_output(a.omega_rpm, a.torque_nm, m).p_elec <= 60e3) pool.push_back(a);
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> dv(-1.0, 1.0), soc(0.1, 0.3);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  int feasible = 0, infeasible = 0;
  for (int inst = 0; inst < 60; ++inst) {
    std::vector<double> v(8, 0.0);
    for (std::size_t t = 1; t + 1 < v.size(); ++t) v[t] = std::clamp(v[t - 1] + 0.5 * dv(rng), 0.0, 6.0);
    auto cyc = flat_cycle(v);
    std::vector<pt::EngineCommand> acts{{0.0, 0.0}};
    while (acts.size() < 5) acts.push_back(pool[pick(rng)]);
    auto cfg = tiny_config(acts);
    const double s0 = soc(rng);
    CAPTURE(inst);
    REQUIRE_NOTHROW(env::cycle_demand(cyc, m));
    bool dp_ok = true, bf_ok = true;
    DpSolution a, b;
    try {
      a = dp_solve(cyc, m, cfg, s0);
    } catch (const InfeasibleError&) {
      dp_ok = false;
    }
    try {
      b = brute_force(cyc, m, cfg, s0);
    } catch (const InfeasibleError&) {
      bf_ok = false;
    }
    REQUIRE(dp_ok == bf_ok);
    if (!dp_ok) {
      ++infeasible;
      continue;
    }
    ++feasible;
    CHECK(a.total_fuel == b.total_fuel);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t t = 0; t < a.trace.size(); ++t) {
      CHECK(a.trace[t].omega == b.trace[t].omega);
      CHECK(a.trace[t].torque == b.trace[t].torque);
    }
    CHECK(a.total_fuel == a.value(0, static_cast<Eigen::Index>(std::lround((a.trace.front().soc - 0.1) * 100))));
    CHECK(a.soc_final >= 0.15 - 1e-12);
    CHECK(a.soc_final <= 0.18 + 1e-12);
  }
  MESSAGE("feasible ", feasible, " infeasible ", infeasible);
  CHECK(feasible >= 20);
  CHECK(infeasible >= 1);
}

TEST_CASE("brute force edge cases") {
  const auto m = small_pack(0.0075);
  auto acts = valid_actions(m);
  auto cfg = tiny_config(acts);
  SUBCASE("one step is the best single action") {
    auto cyc = flat_cycle({3.0});
    const double s0 = 0.1;
    double best = INFINITY;
    for (const auto& a : acts) {
      const auto g = pt::genset_output(a.omega_rpm, a.torque_nm, m);
      const auto d = env::cycle_demand(cyc, m);
      const auto bs = pt::battery_step(s0, d[0] + m.vehicle.aux_power - g.p_elec, 1.0, m.battery);
      const double snapped = 0.1 + std::clamp(std::round((bs.soc_next - 0.1) * 100), 0.0, 20.0) / 100;
      if (snapped >= 0.15 && snapped <= 0.18) best = std::min(best, g.fuel_rate);
    }
    REQUIRE(std::isfinite(best));
    CHECK(best > 0.0);
    CHECK(brute_force(cyc, m, cfg, s0).total_fuel == best);
    CHECK(dp_solve(cyc, m, cfg, s0).total_fuel == best);
  }
  acts.resize(6);
  cfg = tiny_config(acts);
  SUBCASE("too many sequences") {
    auto cyc = flat_cycle(std::vector<double>(10, 1.0));
    CHECK_THROWS_AS(brute_force(cyc, m, cfg, 0.2), ConfigError);
  }
  SUBCASE("both report an unreachable window") {
    auto cyc = flat_cycle(std::vector<double>(3, 0.0));
    CHECK_THROWS_AS(brute_force(cyc, m, cfg, 0.95), InfeasibleError);
    CHECK_THROWS_AS(dp_solve(cyc, m, cfg, 0.95), InfeasibleError);
  }
}

TEST_CASE("interpolated solution: replay, terminal window, table contents") {
  auto m = small_pack(0.02);
  auto cyc = cycles::synth_cycle(cycles::SynthKind::trapezoid, 60, 8.0, 1);
  DpConfig cfg;
  auto s = dp_solve(cyc, m, cfg, 0.45);
  CHECK(s.soc_final >= 0.15);
  CHECK(s.soc_final <= 0.18);
  CHECK(s.total_fuel > 0.0);
  for (Eigen::Index t = 0; t < s.policy.rows(); ++t)
    for (Eigen::Index i = 0; i < s.policy.cols(); ++i) {
      CHECK((s.policy(t, i) < 0) == (s.value(t, i) >= s.sentinel));
      CHECK(s.value(t, i) >= 0.0);
    }
  const double max_step = s.value.maxCoeff();
  CHECK(max_step == s.sentinel);

  // replaying the actions through the simulator reproduces the trace
  env::EpisodeConfig ec;
  ec.cycle = cyc;
  env::ShevEnv e(std::make_shared<pt::PowertrainModel>(m), ec);
  e.reset_fixed(0.45);
  for (const auto& r : s.trace) {
    auto out = e.step({r.omega, r.torque});
    CHECK(out.info.soc == r.soc);
    CHECK(out.info.soc_next == r.soc_next);
    CHECK(out.info.fuel_g == r.fuel_g);
    CHECK(out.info.reward == r.reward);
    CHECK(out.info.bus_residual == doctest::Approx(0.0).scale(1.0));
    CHECK_FALSE(out.info.soc_failure);
  }

  // refining the grid does not cost more than the interpolation bound
  DpConfig fine = cfg;
  fine.soc_grid = linspace(0.0, 1.0, 801);
  auto f = dp_solve(cyc, m, fine, 0.45);
  CHECK(f.total_fuel <= s.total_fuel * 1.01);

  auto dir = testing::temp_dir("dp_export");
  export_solution(s, dir.string(), {{"seed", "1"}});
  env::Meta meta;
  auto back = env::read_trace((dir / "trace.csv").string(), &meta);
  CHECK(back.size() == s.trace.size());
  CHECK(meta.at("solver") == "dp");
  CHECK(std::filesystem::exists(dir / "value.csv"));
  CHECK(std::filesystem::exists(dir / "policy.csv"));
  CHECK(std::filesystem::exists(dir / "actions.csv"));
}

TEST_CASE("cost-to-go never grows with more time, zero demand and aux") {
  auto m = small_pack(0.05);
  m.vehicle.aux_power = 0.0;
  auto cyc = flat_cycle(std::vector<double>(30, 0.0));
  DpConfig cfg;
  cfg.soc_grid = linspace(0.0, 1.0, 101);
  auto s = dp_solve(cyc, m, cfg, 0.16);
  // interior nodes only: idling at SOC 0 or 1 is itself a failure
  for (Eigen::Index t = 0; t + 1 < s.value.rows(); ++t)
    for (Eigen::Index i = 1; i + 1 < s.value.cols(); ++i) CHECK(s.value(t, i) <= s.value(t + 1, i));
  // and somewhere below the window the extra time is what makes it reachable
  CHECK((s.value.row(0).array() < s.sentinel).count() > (s.value.row(29).array() < s.sentinel).count());
}
