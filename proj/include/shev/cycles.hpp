#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace shev::cycles {

/// 1 Hz (by default) velocity/grade trace driving the simulator.
struct DriveCycle {
  double dt = 1.0;                // s
  std::vector<double> velocity;   // m/s
  std::vector<double> grade;      // rad
  std::string name;
  int repetitions = 1;

  std::size_t size() const { return velocity.size(); }

  // Throws ValidationError when an invariant is broken.
  void validate() const;

  // Forward-difference acceleration; the last sample holds zero.
  std::vector<double> acceleration() const;
};

enum class SpeedUnit { mps, mph, kph };
SpeedUnit parse_speed_unit(const std::string& s);
double to_mps(double value, SpeedUnit unit);

DriveCycle load_cycle(const std::string& path, SpeedUnit unit = SpeedUnit::mps);
DriveCycle parse_cycle(const std::string& text, SpeedUnit unit, const std::string& name);
void save_cycle(const DriveCycle& cycle, const std::string& path);
std::string format_cycle(const DriveCycle& cycle);

DriveCycle repeat_cycle(const DriveCycle& cycle, int n);

enum class SynthKind { trapezoid, sinusoid, constant };
SynthKind parse_synth_kind(const std::string& s);

// Deterministic synthetic cycle of `duration` samples at dt = 1 s. Starts and
// ends at rest; the maximum equals v_peak.
DriveCycle synth_cycle(SynthKind kind, double duration, double v_peak, std::uint64_t seed);

// Left Riemann sum of velocity * dt.
double cycle_distance(const DriveCycle& cycle);

// Resolves either a file path or a "synth:KIND:DURATION:VPEAK[:SEED]" spec.
DriveCycle resolve_cycle(const std::string& spec, SpeedUnit unit = SpeedUnit::mps);

}  // namespace shev::cycles
