#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace shev::powertrain {

inline constexpr double kRpmToRadS = 0.10471975511965977;  // 2*pi/60

struct VehicleParams {
  double mass = 36287.0;         // kg
  double wheel_radius = 0.507;   // m
  double frontal_area = 8.48;    // m^2
  double drag_coeff = 0.60;
  double rolling_coeff = 0.007;
  double air_density = 1.225;    // kg/m^3
  double gravity = 9.81;         // m/s^2
  double final_drive_ratio = 5.0;
  double driveline_eff = 0.97;
  double aux_power = 5000.0;     // W

  void validate() const;
};

/// Piecewise-linear full-load torque curve with an optional constant-power cap.
struct TorqueCurve {
  std::vector<double> rpm;   // ascending breakpoints
  std::vector<double> nm;
  double power_cap = 0.0;    // W, 0 disables

  double operator()(double omega_rpm) const;
};

/// 2-D lookup table over (speed rpm, torque Nm) with the component's envelope.
struct ComponentMap {
  std::string name;
  std::vector<double> speed_axis;    // rpm
  std::vector<double> torque_axis;   // Nm
  Eigen::MatrixXd values;            // rows: speed, cols: torque
  TorqueCurve max_torque;
  double speed_max = 0.0;            // rpm
  double power_max = 0.0;            // W

  // Bilinear interpolation; throws ContractError outside the grid.
  double at(double omega_rpm, double torque_nm) const;
  void validate(bool efficiency) const;
};

struct BatteryPack {
  int cells_series = 160;
  int cells_parallel = 115;
  double cell_capacity_ah = 4.85;
  double cell_rated_voltage = 3.63;
  double cell_resistance = 0.0015;
  double ocv_offset = 3.45;  // per-cell OCV = offset + slope * soc
  double ocv_slope = 0.36;
  double soc_min = 0.0;
  double soc_max = 1.0;

  double nominal_energy_wh() const {
    return cells_series * cells_parallel * cell_rated_voltage * cell_capacity_ah;
  }
  double capacity_ah() const { return cell_capacity_ah * cells_parallel; }
  double pack_ocv(double soc) const { return cells_series * (ocv_offset + ocv_slope * soc); }
  double pack_resistance() const { return cell_resistance * cells_series / cells_parallel; }
  void validate() const;
};

struct PowertrainModel {
  VehicleParams vehicle;
  ComponentMap engine_fuel;    // g/s
  ComponentMap generator_eff;  // fraction
  ComponentMap em_eff;         // fraction, indexed by |torque|
  BatteryPack battery;
  double fuel_density = 0.85;  // kg/L
  double fuel_lhv = 42.5e6;    // J/kg
  double engine_speed_max = 2300.0;  // rpm

  // Combined engine/generator full-load torque at a shaft speed.
  double genset_max_torque(double omega_rpm) const;
  void validate() const;
};

double road_load_force(double v, double accel, double grade, const VehicleParams& p);

struct EmDemand {
  double p_em_elec = 0.0;  // W, negative when regenerating
  bool feasible = true;
  double em_speed_rpm = 0.0;
  double em_torque_nm = 0.0;
};
EmDemand em_power_demand(double v, double accel, double grade, const PowertrainModel& model);

struct GensetOutput {
  double p_elec = 0.0;     // W
  double fuel_rate = 0.0;  // g/s
};
GensetOutput genset_output(double omega_rpm, double torque_nm, const PowertrainModel& model);

struct BatteryStep {
  double soc_next = 0.0;
  double current = 0.0;  // A, positive discharging
  bool power_limited = false;
};
BatteryStep battery_step(double soc, double p_batt, double dt, const BatteryPack& pack);

struct EngineCommand {
  double omega_rpm = 0.0;
  double torque_nm = 0.0;
  bool operator==(const EngineCommand&) const = default;
};
EngineCommand clip_action(double omega_cmd, double torque_cmd, const PowertrainModel& model);

inline double power_balance(double p_em_elec, double p_aux, double p_genset) {
  return p_em_elec + p_aux - p_genset;
}

// Component ratings used to synthesize the default maps.
struct RatedSpec {
  double engine_power = 270e3, engine_power_rpm = 2300.0;
  double engine_torque = 1500.0, engine_torque_rpm_lo = 1120.0, engine_torque_rpm_hi = 1480.0;
  double gen_power = 240e3, gen_power_rpm = 2200.0;
  double gen_torque = 1410.0, gen_torque_rpm = 1300.0, gen_speed_max = 2517.0;
  double em_power = 400e3, em_power_rpm = 2000.0;
  double em_torque = 3500.0, em_torque_rpm = 1100.0, em_speed_max = 3900.0;
  double engine_peak_eff = 0.42, engine_peak_rpm = 1300.0, engine_peak_torque = 1200.0;
  double gen_peak_eff = 0.95;
  double em_peak_eff = 0.93;
};

PowertrainModel build_default_maps(const RatedSpec& spec = {});

// Engine brake efficiency surface behind the synthesized fuel map.
double engine_efficiency(double omega_rpm, double torque_nm, const RatedSpec& spec = {});

// Grid CSV (torque axis on the first row, speed axis in the first column) plus
// a key=value sidecar with the envelope.
void write_component_map(const ComponentMap& map, const std::string& csv_path,
                         const std::string& meta_path);
ComponentMap read_component_map(const std::string& csv_path, const std::string& meta_path);

// Fuel economy in miles per US gallon of diesel.
double mpg(double distance_m, double fuel_g, double fuel_density = 0.85);

}  // namespace shev::powertrain
