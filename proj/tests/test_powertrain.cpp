#include <cmath>
#include <random>

#include "doctest.h"
#include "shev/error.hpp"
#include "shev/powertrain.hpp"
#include "support.hpp"

using namespace shev;
using namespace shev::powertrain;

namespace {
const PowertrainModel& model() {
  static const PowertrainModel m = build_default_maps();
  return m;
}
}  // namespace

TEST_CASE("battery nominal energy matches the pack rating") {
  BatteryPack b;
  CHECK(std::abs(b.nominal_energy_wh() / 323940.0 - 1.0) < 1e-3);
  CHECK(b.pack_ocv(0.5) == doctest::Approx(580.8));
}

TEST_CASE("road load") {
  VehicleParams p;
  CHECK(road_load_force(0, 0, 0, p) == 0.0);
  const double rolling = 36287 * 9.81 * 0.007, drag = 0.5 * 1.225 * 0.6 * 8.48 * 625;
  CHECK(rolling == doctest::Approx(2491.7).epsilon(1e-4));
  CHECK(drag == doctest::Approx(1947.8).epsilon(1e-4));
  CHECK(road_load_force(25, 0, 0, p) == doctest::Approx(rolling + drag).epsilon(1e-14));
  CHECK(road_load_force(25, 0.5, 0, p) - road_load_force(25, 0, 0, p) == doctest::Approx(18143.5));
  const double th = 0.02;
  CHECK(road_load_force(10, 0, th, p) ==
        doctest::Approx(36287 * 9.81 * (0.007 * std::cos(th) + std::sin(th)) + 0.5 * 1.225 * 0.6 * 8.48 * 100));
}

TEST_CASE("EM demand") {
  const auto& m = model();
  auto z = em_power_demand(0, 0, 0, m);
  CHECK(z.p_em_elec == 0.0);
  CHECK(z.feasible);

  auto d = em_power_demand(25, 0, 0, m);
  const double mech = road_load_force(25, 0, 0, m.vehicle) * 25 / 0.97;
  const double w = 25 / 0.507 * 5;
  const double eta = m.em_eff.at(w / kRpmToRadS, mech / w);
  CHECK(d.p_em_elec == doctest::Approx(mech / eta).epsilon(1e-12));
  // the hand chain with a flat 0.92 efficiency map
  auto flat = m;
  flat.em_eff.values.setConstant(0.92);
  CHECK(em_power_demand(25, 0, 0, flat).p_em_elec == doctest::Approx(124.37e3).epsilon(1e-4));
  CHECK(em_power_demand(25, 0, 0, flat).p_em_elec == doctest::Approx(mech / 0.92).epsilon(1e-14));
  CHECK(d.em_speed_rpm == doctest::Approx(w / kRpmToRadS));

  auto fast = em_power_demand(35, 0, 0, m);
  CHECK(fast.em_speed_rpm == doctest::Approx(3296.4).epsilon(1e-4));
  CHECK(fast.feasible);
  CHECK_FALSE(em_power_demand(45, 0, 0, m).feasible);   // 4238 rpm
  CHECK_FALSE(em_power_demand(10, 3.0, 0, m).feasible); // torque beyond 3500 Nm

  auto regen = em_power_demand(20, -0.5, 0, m);
  CHECK(regen.p_em_elec < 0);
  CHECK(regen.feasible);
  const double wheel = road_load_force(20, -0.5, 0, m.vehicle) * 20;
  CHECK(std::abs(regen.p_em_elec) < std::abs(wheel));
}

TEST_CASE("genset") {
  const auto& m = model();
  auto off = genset_output(0, 0, m);
  CHECK(off.p_elec == 0.0);
  CHECK(off.fuel_rate == 0.0);
  auto idle = genset_output(800, 0, m);
  CHECK(idle.p_elec == 0.0);
  CHECK(idle.fuel_rate > 0.0);

  auto rated = genset_output(1300, 1410, m);
  const double mech = 1410 * 1300 * kRpmToRadS;
  CHECK(mech == doctest::Approx(191.97e3).epsilon(1e-4));
  CHECK(m.generator_eff.at(1300, 1410) == doctest::Approx(0.95).epsilon(1e-12));
  CHECK(rated.p_elec == doctest::Approx(mech * 0.95).epsilon(1e-12));

  // Willans point: 1300 rpm, 1200 Nm, eta 0.42
  const double p = 1200 * 1300 * kRpmToRadS;
  CHECK(m.engine_fuel.at(1300, 1200) == doctest::Approx(p / (0.42 * 42.5e6) * 1000).epsilon(1e-12));
  CHECK(engine_efficiency(1300, 1200) == doctest::Approx(0.42));
  CHECK_THROWS_AS(m.engine_fuel.at(2600, 100), ContractError);
}

TEST_CASE("battery step") {
  BatteryPack b;
  auto idle = battery_step(0.4, 0.0, 1.0, b);
  CHECK(idle.soc_next == 0.4);
  CHECK(idle.current == 0.0);

  auto s = battery_step(0.5, 100e3, 1.0, b);
  const double voc = 580.8, r = 0.0015 * 160 / 115;
  const double i = (voc - std::sqrt(voc * voc - 4 * r * 100e3)) / (2 * r);
  CHECK(i == doctest::Approx(172.3).epsilon(1e-3));
  CHECK(s.current == doctest::Approx(i).epsilon(1e-12));
  CHECK(s.soc_next - 0.5 == doctest::Approx(-i / (3600 * 557.75)).epsilon(1e-9));
  CHECK((s.soc_next - 0.5) == doctest::Approx(-8.58e-5).epsilon(1e-3));

  CHECK(battery_step(0.5, -100e3, 1.0, b).soc_next > 0.5);
  auto lim = battery_step(0.5, 1e9, 1.0, b);
  CHECK(lim.power_limited);
  CHECK(lim.current == doctest::Approx(voc / (2 * r)));
  CHECK_THROWS_AS(battery_step(1.2, 0, 1, b), ValidationError);
  CHECK_THROWS_AS(battery_step(-0.1, 0, 1, b), ValidationError);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> soc(0.05, 0.95), pw(-300e3, 300e3);
  for (int k = 0; k < 500; ++k) {
    const double s0 = soc(rng), p = pw(rng);
    const double s1 = battery_step(s0, p, 1.0, b).soc_next;
    CHECK(battery_step(s1, -p, 1.0, b).soc_next <= s0 + 1e-15);
  }
}

TEST_CASE("clip action") {
  const auto& m = model();
  CHECK(clip_action(1200, 1400, m) == EngineCommand{1200, 1400});
  auto hi = clip_action(3000, 2000, m);
  CHECK(hi.omega_rpm == 2300.0);
  CHECK(hi.torque_nm == m.genset_max_torque(2300));
  CHECK(clip_action(-50, -10, m) == EngineCommand{0, 0});
  CHECK(clip_action(std::nan(""), 100, m) == EngineCommand{0, 100});

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> w(-500, 3500), t(-300, 2500);
  for (int k = 0; k < 2000; ++k) {
    auto c = clip_action(w(rng), t(rng), m);
    CHECK(clip_action(c.omega_rpm, c.torque_nm, m) == c);
    CHECK(c.torque_nm * c.omega_rpm * kRpmToRadS <= 270e3 * 1.005);
    CHECK(c.torque_nm * c.omega_rpm * kRpmToRadS <= 240e3 / m.generator_eff.at(c.omega_rpm, c.torque_nm) + 1e-6);
  }
}

TEST_CASE("power balance") {
  CHECK(power_balance(0, 0, 0) == 0.0);
  CHECK(power_balance(120e3, 5e3, 100e3) == 25e3);
  CHECK(power_balance(-30e3, 5e3, 0) == -25e3);
}

TEST_CASE("default maps honour the ratings") {
  const auto& m = model();
  m.validate();
  const double p2300 = m.engine_fuel.max_torque(2300) * 2300 * kRpmToRadS;
  CHECK(std::abs(p2300 / 270e3 - 1) < 5e-3);
  CHECK(m.engine_fuel.max_torque(1120) == doctest::Approx(1500));
  CHECK(m.engine_fuel.max_torque(1480) == doctest::Approx(1500));
  CHECK(m.engine_fuel.max_torque(0) == doctest::Approx(900));
  CHECK(m.generator_eff.max_torque(1300) == doctest::Approx(1410));
  CHECK(m.generator_eff.max_torque(2200) * 2200 * kRpmToRadS == doctest::Approx(240e3));
  CHECK(m.generator_eff.speed_max == 2517.0);
  CHECK(m.em_eff.speed_max == 3900.0);
  // 3500 Nm at 1100 rpm would be 403 kW; the 400 kW cap takes over at ~1091 rpm
  CHECK(m.em_eff.max_torque(1000) == doctest::Approx(3500));
  CHECK(std::abs(m.em_eff.max_torque(1100) / 3500 - 1) < 1e-2);
  CHECK(m.em_eff.max_torque(2000) * 2000 * kRpmToRadS == doctest::Approx(400e3));
  CHECK(m.generator_eff.speed_max >= m.engine_speed_max);

  double peak = 0;
  for (double w = 0; w <= 2300; w += 10) peak = std::max(peak, m.engine_fuel.max_torque(w) * w * kRpmToRadS);
  CHECK(std::abs(peak / 270e3 - 1) < 5e-3);
  double em_peak = 0;
  for (double w = 0; w <= 3900; w += 10) em_peak = std::max(em_peak, m.em_eff.max_torque(w) * w * kRpmToRadS);
  CHECK(std::abs(em_peak / 400e3 - 1) < 5e-3);

  // grid nodes reproduce stored values exactly
  for (const ComponentMap* cm : {&m.engine_fuel, &m.generator_eff, &m.em_eff}) {
    for (std::size_t i = 0; i < cm->speed_axis.size(); ++i)
      for (std::size_t j = 0; j < cm->torque_axis.size(); ++j)
        CHECK(cm->at(cm->speed_axis[i], cm->torque_axis[j]) ==
              cm->values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  }
  // engine efficiency stays >= 0.25 on the full-load envelope
  for (double w = 0; w <= 2300; w += 50) CHECK(engine_efficiency(w, m.engine_fuel.max_torque(w)) >= 0.25);
}

TEST_CASE("map files round trip") {
  auto dir = testing::temp_dir("maps");
  const auto& m = model();
  write_component_map(m.em_eff, (dir / "em.csv").string(), (dir / "em.meta").string());
  auto back = read_component_map((dir / "em.csv").string(), (dir / "em.meta").string());
  CHECK(back.values == m.em_eff.values);
  CHECK(back.speed_axis == m.em_eff.speed_axis);
  CHECK(back.torque_axis == m.em_eff.torque_axis);
  CHECK(back.max_torque(1700) == m.em_eff.max_torque(1700));
  CHECK(back.power_max == m.em_eff.power_max);
}

TEST_CASE("mpg") {
  CHECK(mpg(1609.344, 3218.0) == doctest::Approx(0.9998).epsilon(1e-4));
  CHECK(mpg(5000, 2000) == doctest::Approx(2 * mpg(5000, 4000)).epsilon(1e-15));
}
