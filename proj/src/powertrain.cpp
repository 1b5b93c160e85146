#include "shev/powertrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "shev/error.hpp"
#include "shev/text.hpp"

namespace shev::powertrain {

namespace {

// Index i such that axis[i] <= x <= axis[i+1]; x must already lie on the axis span.
std::size_t bracket(const std::vector<double>& axis, double x) {
  auto it = std::upper_bound(axis.begin(), axis.end(), x);
  auto i = static_cast<std::size_t>(std::distance(axis.begin(), it));
  if (i == 0) return 0;
  return std::min(i - 1, axis.size() - 2);
}

double interp1(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto i = bracket(xs, x);
  const double w = (x - xs[i]) / (xs[i + 1] - xs[i]);
  return ys[i] + w * (ys[i + 1] - ys[i]);
}

std::vector<double> linspace_step(double lo, double hi, double step) {
  std::vector<double> out;
  for (double x = lo; x <= hi + 1e-9; x += step) out.push_back(x);
  return out;
}

// Concave quadratic efficiency surface, floored so it stays a valid fraction.
struct Bump {
  double peak, rpm0, nm0, drop_rpm, span_rpm, drop_nm, span_nm, floor;
  double operator()(double rpm, double nm) const {
    const double dr = (rpm - rpm0) / span_rpm;
    const double dt = (nm - nm0) / span_nm;
    return std::max(floor, peak - drop_rpm * dr * dr - drop_nm * dt * dt);
  }
};

Bump engine_bump(const RatedSpec& s) {
  return {s.engine_peak_eff, s.engine_peak_rpm, s.engine_peak_torque, 0.08, 1000.0, 0.12, 1200.0, 0.12};
}

}  // namespace

void VehicleParams::validate() const {
  if (!(mass > 0 && wheel_radius > 0 && frontal_area > 0 && drag_coeff > 0 && rolling_coeff > 0 &&
        air_density > 0 && gravity > 0 && final_drive_ratio > 0 && driveline_eff > 0 && aux_power >= 0))
    throw ValidationError("vehicle parameters must be positive");
  if (rolling_coeff >= 0.1) throw ValidationError("rolling coefficient must be < 0.1");
  if (driveline_eff > 1.0) throw ValidationError("driveline efficiency must be in (0, 1]");
}

double TorqueCurve::operator()(double omega_rpm) const {
  double t = interp1(rpm, nm, omega_rpm);
  if (power_cap > 0.0 && omega_rpm > 0.0) t = std::min(t, power_cap / (omega_rpm * kRpmToRadS));
  return t;
}

double ComponentMap::at(double omega_rpm, double torque_nm) const {
  constexpr double tol = 1e-9;
  if (!(omega_rpm >= speed_axis.front() - tol && omega_rpm <= speed_axis.back() + tol &&
        torque_nm >= torque_axis.front() - tol && torque_nm <= torque_axis.back() + tol))
    throw ContractError(name + " map queried outside its grid at (" + std::to_string(omega_rpm) +
                        " rpm, " + std::to_string(torque_nm) + " Nm)");
  const double w = std::clamp(omega_rpm, speed_axis.front(), speed_axis.back());
  const double t = std::clamp(torque_nm, torque_axis.front(), torque_axis.back());
  auto i = bracket(speed_axis, w);
  auto j = bracket(torque_axis, t);
  double fw = (w - speed_axis[i]) / (speed_axis[i + 1] - speed_axis[i]);
  double ft = (t - torque_axis[j]) / (torque_axis[j + 1] - torque_axis[j]);
  if (fw == 1.0) ++i, fw = 0.0;
  if (ft == 1.0) ++j, ft = 0.0;
  // Exact at grid nodes: zero weights drop the neighbouring terms.
  double v = values(i, j);
  if (fw != 0.0) v += fw * (values(i + 1, j) - values(i, j));
  if (ft != 0.0) {
    double upper = values(i, j + 1);
    if (fw != 0.0) upper += fw * (values(i + 1, j + 1) - values(i, j + 1));
    v += ft * (upper - v);
  }
  return v;
}

void ComponentMap::validate(bool efficiency) const {
  auto ascending = [](const std::vector<double>& a) {
    return a.size() >= 2 && std::adjacent_find(a.begin(), a.end(), std::greater_equal<>()) == a.end();
  };
  if (!ascending(speed_axis) || !ascending(torque_axis))
    throw ValidationError(name + " map axes must be strictly increasing");
  if (values.rows() != static_cast<long>(speed_axis.size()) ||
      values.cols() != static_cast<long>(torque_axis.size()))
    throw ValidationError(name + " map grid shape does not match its axes");
  for (long i = 0; i < values.size(); ++i) {
    const double x = values.data()[i];
    if (efficiency ? !(x > 0.0 && x < 1.0) : !(x >= 0.0))
      throw ValidationError(name + " map holds an out-of-range value");
  }
  for (double w : speed_axis)
    if (max_torque(w) > torque_axis.back() + 1e-9)
      throw ValidationError(name + " max-torque curve exceeds the torque axis");
}

void BatteryPack::validate() const {
  if (cells_series <= 0 || cells_parallel <= 0 || !(cell_capacity_ah > 0) || !(cell_rated_voltage > 0) ||
      !(cell_resistance > 0))
    throw ValidationError("battery parameters must be positive");
  if (ocv_slope < 0) throw ValidationError("OCV curve must be non-decreasing in SOC");
  if (!(soc_min >= 0 && soc_min < soc_max && soc_max <= 1))
    throw ValidationError("battery SOC bounds must satisfy 0 <= min < max <= 1");
}

double PowertrainModel::genset_max_torque(double omega_rpm) const {
  return std::min(engine_fuel.max_torque(omega_rpm), generator_eff.max_torque(omega_rpm));
}

void PowertrainModel::validate() const {
  vehicle.validate();
  battery.validate();
  engine_fuel.validate(false);
  generator_eff.validate(true);
  em_eff.validate(true);
  if (generator_eff.speed_max < engine_speed_max)
    throw ValidationError("generator speed range must cover the engine speed range");
}

double road_load_force(double v, double accel, double grade, const VehicleParams& p) {
  const double inertial = p.mass * accel;
  const double rolling = v > 0.0 ? p.mass * p.gravity * (p.rolling_coeff * std::cos(grade) + std::sin(grade)) : 0.0;
  const double drag = 0.5 * p.air_density * p.drag_coeff * p.frontal_area * v * v;
  return inertial + rolling + drag;
}

EmDemand em_power_demand(double v, double accel, double grade, const PowertrainModel& model) {
  const auto& veh = model.vehicle;
  EmDemand out;
  const double p_wheel = road_load_force(v, accel, grade, veh) * v;
  if (p_wheel == 0.0 || v <= 0.0) return out;

  const double w_em = v / veh.wheel_radius * veh.final_drive_ratio;  // rad/s
  const double rpm = w_em / kRpmToRadS;
  out.em_speed_rpm = rpm;
  const bool traction = p_wheel > 0.0;
  double p_mech = traction ? p_wheel / veh.driveline_eff : p_wheel * veh.driveline_eff;
  if (rpm > model.em_eff.speed_max) out.feasible = false;

  const double rpm_q = std::min(rpm, model.em_eff.speed_max);
  double torque = p_mech / w_em;
  const double t_max = model.em_eff.max_torque(rpm_q);
  if (std::abs(torque) > t_max) {
    // Regen beyond the EM envelope goes to the friction brakes.
    if (traction) out.feasible = false;
    torque = std::copysign(t_max, torque);
    p_mech = torque * w_em;
  }
  out.em_torque_nm = torque;
  const double eta = model.em_eff.at(rpm_q, std::min(std::abs(torque), model.em_eff.torque_axis.back()));
  out.p_em_elec = traction ? p_mech / eta : p_mech * eta;
  return out;
}

GensetOutput genset_output(double omega_rpm, double torque_nm, const PowertrainModel& model) {
  GensetOutput out;
  if (omega_rpm == 0.0) return out;
  out.fuel_rate = model.engine_fuel.at(omega_rpm, torque_nm);
  if (torque_nm == 0.0) return out;
  const double eta = model.generator_eff.at(omega_rpm, torque_nm);
  out.p_elec = torque_nm * omega_rpm * kRpmToRadS * eta;
  return out;
}

BatteryStep battery_step(double soc, double p_batt, double dt, const BatteryPack& pack) {
  if (!(soc >= 0.0 && soc <= 1.0)) throw ValidationError("battery SOC outside [0, 1]: " + std::to_string(soc));
  BatteryStep out;
  const double voc = pack.pack_ocv(soc);
  const double r = pack.pack_resistance();
  const double p_limit = voc * voc / (4.0 * r);
  double p = p_batt;
  if (p > p_limit) {
    p = p_limit;
    out.power_limited = true;
  }
  // Root of R i^2 - Voc i + P = 0, written in the cancellation-free form.
  const double disc = std::max(0.0, voc * voc - 4.0 * r * p);
  out.current = 2.0 * p / (voc + std::sqrt(disc));
  out.soc_next = soc - out.current * dt / (3600.0 * pack.capacity_ah());
  return out;
}

EngineCommand clip_action(double omega_cmd, double torque_cmd, const PowertrainModel& model) {
  const double w_hi = std::min(model.engine_speed_max, model.generator_eff.speed_max);
  const double w = std::isfinite(omega_cmd) ? std::clamp(omega_cmd, 0.0, w_hi) : 0.0;
  const double t_hi = model.genset_max_torque(w);
  const double t = std::isfinite(torque_cmd) ? std::clamp(torque_cmd, 0.0, t_hi) : 0.0;
  return {w, t};
}

double engine_efficiency(double omega_rpm, double torque_nm, const RatedSpec& spec) {
  return engine_bump(spec)(omega_rpm, torque_nm);
}

PowertrainModel build_default_maps(const RatedSpec& s) {
  PowertrainModel m;
  const double lhv = m.fuel_lhv;
  m.engine_speed_max = s.engine_power_rpm;

  // Engine: Willans-style fuel map from the brake-efficiency surface.
  auto& eng = m.engine_fuel;
  eng.name = "engine";
  eng.speed_axis = linspace_step(0.0, s.engine_power_rpm, 100.0);
  eng.torque_axis = linspace_step(0.0, s.engine_torque, 100.0);
  eng.max_torque.rpm = {0.0, s.engine_torque_rpm_lo, s.engine_torque_rpm_hi, s.engine_power_rpm};
  eng.max_torque.nm = {0.6 * s.engine_torque, s.engine_torque, s.engine_torque,
                       s.engine_power / (s.engine_power_rpm * kRpmToRadS)};
  eng.max_torque.power_cap = s.engine_power;
  eng.speed_max = s.engine_power_rpm;
  eng.power_max = s.engine_power;
  const Bump eta_e = engine_bump(s);
  constexpr double idle_torque = 30.0;  // friction-equivalent load at zero brake torque
  eng.values.resize(static_cast<long>(eng.speed_axis.size()), static_cast<long>(eng.torque_axis.size()));
  for (std::size_t i = 0; i < eng.speed_axis.size(); ++i) {
    const double w = eng.speed_axis[i] * kRpmToRadS;
    for (std::size_t j = 0; j < eng.torque_axis.size(); ++j) {
      const double t = j == 0 ? idle_torque : eng.torque_axis[j];
      const double rpm = eng.speed_axis[i];
      eng.values(static_cast<long>(i), static_cast<long>(j)) = t * w / (eta_e(rpm, eng.torque_axis[j]) * lhv) * 1000.0;
    }
  }

  auto& gen = m.generator_eff;
  gen.name = "generator";
  gen.speed_axis = linspace_step(0.0, 2500.0, 100.0);
  gen.speed_axis.push_back(s.gen_speed_max);
  gen.torque_axis = linspace_step(0.0, 1400.0, 100.0);
  gen.torque_axis.push_back(s.gen_torque);
  gen.max_torque.rpm = {0.0, s.gen_torque_rpm, s.gen_power_rpm, s.gen_speed_max};
  gen.max_torque.nm = {s.gen_torque, s.gen_torque, s.gen_power / (s.gen_power_rpm * kRpmToRadS),
                       s.gen_power / (s.gen_speed_max * kRpmToRadS)};
  gen.max_torque.power_cap = s.gen_power;
  gen.speed_max = s.gen_speed_max;
  gen.power_max = s.gen_power;
  const Bump eta_g{s.gen_peak_eff, s.gen_torque_rpm, s.gen_torque, 0.08, 1300.0, 0.12, 1410.0, 0.5};
  gen.values.resize(static_cast<long>(gen.speed_axis.size()), static_cast<long>(gen.torque_axis.size()));
  for (std::size_t i = 0; i < gen.speed_axis.size(); ++i)
    for (std::size_t j = 0; j < gen.torque_axis.size(); ++j)
      gen.values(static_cast<long>(i), static_cast<long>(j)) = eta_g(gen.speed_axis[i], gen.torque_axis[j]);

  auto& em = m.em_eff;
  em.name = "em";
  em.speed_axis = linspace_step(0.0, s.em_speed_max, 100.0);
  em.torque_axis = linspace_step(0.0, s.em_torque, 100.0);
  em.max_torque.rpm = {0.0, s.em_speed_max};
  em.max_torque.nm = {s.em_torque, s.em_torque};
  em.max_torque.power_cap = s.em_power;
  em.speed_max = s.em_speed_max;
  em.power_max = s.em_power;
  const Bump eta_m{s.em_peak_eff, s.em_torque_rpm, s.em_torque, 0.10, 2800.0, 0.13, 3500.0, 0.5};
  em.values.resize(static_cast<long>(em.speed_axis.size()), static_cast<long>(em.torque_axis.size()));
  for (std::size_t i = 0; i < em.speed_axis.size(); ++i)
    for (std::size_t j = 0; j < em.torque_axis.size(); ++j)
      em.values(static_cast<long>(i), static_cast<long>(j)) = eta_m(em.speed_axis[i], em.torque_axis[j]);

  m.validate();
  return m;
}

namespace {

std::string join(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += text::fmt_double(xs[i]);
  }
  return out;
}

std::vector<double> parse_list(std::string_view s, const std::string& what) {
  std::vector<double> out;
  for (auto f : text::split(s, ',')) {
    double x = 0.0;
    if (!text::parse_double(f, x)) throw FormatError("malformed number in " + what);
    out.push_back(x);
  }
  return out;
}

}  // namespace

void write_component_map(const ComponentMap& map, const std::string& csv_path, const std::string& meta_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw ValidationError("cannot write '" + csv_path + "'");
  csv << "rpm\\Nm," << join(map.torque_axis) << "\n";
  for (std::size_t i = 0; i < map.speed_axis.size(); ++i) {
    std::vector<double> row(map.torque_axis.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = map.values(static_cast<long>(i), static_cast<long>(j));
    csv << text::fmt_double(map.speed_axis[i]) << "," << join(row) << "\n";
  }
  std::ofstream meta(meta_path);
  if (!meta) throw ValidationError("cannot write '" + meta_path + "'");
  meta << "name=" << map.name << "\n"
       << "speed_max=" << text::fmt_double(map.speed_max) << "\n"
       << "power_max=" << text::fmt_double(map.power_max) << "\n"
       << "max_torque.rpm=" << join(map.max_torque.rpm) << "\n"
       << "max_torque.nm=" << join(map.max_torque.nm) << "\n"
       << "max_torque.power_cap=" << text::fmt_double(map.max_torque.power_cap) << "\n";
}

ComponentMap read_component_map(const std::string& csv_path, const std::string& meta_path) {
  ComponentMap map;
  std::ifstream csv(csv_path);
  if (!csv) throw ValidationError("cannot open '" + csv_path + "'");
  std::string line;
  std::vector<std::vector<double>> rows;
  int lineno = 0;
  while (std::getline(csv, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    auto fields = text::split(line, ',');
    std::vector<double> nums;
    for (std::size_t k = 1; k < fields.size(); ++k) {
      double x = 0.0;
      if (!text::parse_double(fields[k], x)) throw ParseError("malformed map value", lineno);
      nums.push_back(x);
    }
    if (lineno == 1) {
      map.torque_axis = nums;
      continue;
    }
    double w = 0.0;
    if (!text::parse_double(fields[0], w)) throw ParseError("malformed speed value", lineno);
    if (nums.size() != map.torque_axis.size()) throw ParseError("ragged map row", lineno);
    map.speed_axis.push_back(w);
    rows.push_back(nums);
  }
  map.values.resize(static_cast<long>(rows.size()), static_cast<long>(map.torque_axis.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) map.values(static_cast<long>(i), static_cast<long>(j)) = rows[i][j];

  std::ifstream meta(meta_path);
  if (!meta) throw ValidationError("cannot open '" + meta_path + "'");
  std::map<std::string, std::string> kv;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[std::string(text::trim(line.substr(0, eq)))] = std::string(text::trim(line.substr(eq + 1)));
  }
  auto num = [&](const std::string& k) {
    double x = 0.0;
    if (!kv.count(k) || !text::parse_double(kv[k], x)) throw FormatError("map sidecar missing '" + k + "'");
    return x;
  };
  map.name = kv["name"];
  map.speed_max = num("speed_max");
  map.power_max = num("power_max");
  map.max_torque.rpm = parse_list(kv["max_torque.rpm"], "max_torque.rpm");
  map.max_torque.nm = parse_list(kv["max_torque.nm"], "max_torque.nm");
  map.max_torque.power_cap = num("max_torque.power_cap");
  if (map.max_torque.rpm.size() != map.max_torque.nm.size() || map.max_torque.rpm.empty())
    throw FormatError("max-torque breakpoint lists differ in length");
  return map;
}

double mpg(double distance_m, double fuel_g, double fuel_density) {
  const double miles = distance_m / 1609.344;
  const double gallons = fuel_g / 1000.0 / fuel_density / 3.78541;
  return miles / gallons;
}

}  // namespace shev::powertrain
