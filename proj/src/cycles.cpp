#include "shev/cycles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "shev/error.hpp"
#include "shev/text.hpp"

namespace shev::cycles {

void DriveCycle::validate() const {
  if (!(dt > 0.0)) throw ValidationError("drive cycle dt must be positive");
  if (velocity.size() < 2) throw ValidationError("drive cycle needs at least 2 samples");
  if (grade.size() != velocity.size())
    throw ValidationError("drive cycle velocity and grade lengths differ");
  if (repetitions < 1) throw ValidationError("drive cycle repetitions must be >= 1");
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    if (!(velocity[i] >= 0.0) || !std::isfinite(velocity[i]))
      throw ValidationError("negative or non-finite velocity at sample " + std::to_string(i));
    if (!std::isfinite(grade[i]))
      throw ValidationError("non-finite grade at sample " + std::to_string(i));
  }
}

std::vector<double> DriveCycle::acceleration() const {
  std::vector<double> a(velocity.size(), 0.0);
  for (std::size_t i = 0; i + 1 < velocity.size(); ++i) a[i] = (velocity[i + 1] - velocity[i]) / dt;
  return a;
}

SpeedUnit parse_speed_unit(const std::string& s) {
  if (s == "mps") return SpeedUnit::mps;
  if (s == "mph") return SpeedUnit::mph;
  if (s == "kph") return SpeedUnit::kph;
  throw ConfigError("unknown speed unit '" + s + "' (expected mps, mph or kph)");
}

double to_mps(double value, SpeedUnit unit) {
  switch (unit) {
    case SpeedUnit::mps: return value;
    case SpeedUnit::mph: return value * 0.44704;
    case SpeedUnit::kph: return value / 3.6;
  }
  return value;
}

DriveCycle parse_cycle(const std::string& text, SpeedUnit unit, const std::string& name) {
  std::vector<double> times, vel;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto trimmed = text::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    auto fields = text::split(trimmed, ',');
    if (fields.size() != 2) throw ParseError("expected two comma-separated columns", lineno);
    double t = 0.0, v = 0.0;
    if (!text::parse_double(fields[0], t) || !text::parse_double(fields[1], v)) {
      // A non-numeric first row is a header.
      if (times.empty() && lineno == 1) continue;
      throw ParseError("malformed numeric row '" + std::string(trimmed) + "'", lineno);
    }
    if (v < 0.0) throw ValidationError("negative velocity at line " + std::to_string(lineno));
    times.push_back(t);
    vel.push_back(to_mps(v, unit));
  }
  if (vel.size() < 2) throw ValidationError("drive cycle needs at least 2 samples");
  const double dt = times[1] - times[0];
  if (!(dt > 0.0)) throw FormatError("time column must be strictly increasing");
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (std::abs((times[i] - times[i - 1]) - dt) > 1e-6)
      throw FormatError("non-uniform time step at sample " + std::to_string(i));
  }
  DriveCycle c;
  c.dt = dt;
  c.velocity = std::move(vel);
  c.grade.assign(c.velocity.size(), 0.0);
  c.name = name;
  c.validate();
  return c;
}

DriveCycle load_cycle(const std::string& path, SpeedUnit unit) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open cycle file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  std::string stem = path.substr(path.find_last_of('/') + 1);
  stem = stem.substr(0, stem.find_last_of('.'));
  return parse_cycle(ss.str(), unit, stem);
}

std::string format_cycle(const DriveCycle& cycle) {
  std::string out = "t_s,v\n";
  char buf[96];
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", static_cast<double>(i) * cycle.dt, cycle.velocity[i]);
    out += buf;
  }
  return out;
}

void save_cycle(const DriveCycle& cycle, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write cycle file '" + path + "'");
  f << format_cycle(cycle);
}

DriveCycle repeat_cycle(const DriveCycle& cycle, int n) {
  if (n < 1) throw ValidationError("repeat count must be >= 1");
  DriveCycle out;
  out.dt = cycle.dt;
  out.name = cycle.name;
  out.repetitions = n;
  out.velocity.reserve(cycle.size() * n);
  out.grade.reserve(cycle.size() * n);
  for (int r = 0; r < n; ++r) {
    out.velocity.insert(out.velocity.end(), cycle.velocity.begin(), cycle.velocity.end());
    out.grade.insert(out.grade.end(), cycle.grade.begin(), cycle.grade.end());
  }
  return out;
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "trapezoid") return SynthKind::trapezoid;
  if (s == "sinusoid") return SynthKind::sinusoid;
  if (s == "constant") return SynthKind::constant;
  throw ConfigError("unknown synthetic cycle kind '" + s + "'");
}

DriveCycle synth_cycle(SynthKind kind, double duration, double v_peak, std::uint64_t seed) {
  if (!(duration >= 2.0)) throw ValidationError("synthetic cycle duration must be >= 2 s");
  if (!(v_peak >= 0.0)) throw ValidationError("synthetic cycle v_peak must be >= 0");
  const auto n = static_cast<std::size_t>(std::llround(duration));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> v(n, 0.0);
  const double last = static_cast<double>(n - 1);

  switch (kind) {
    case SynthKind::constant:
      for (std::size_t i = 1; i + 1 < n; ++i) v[i] = v_peak;
      break;
    case SynthKind::trapezoid: {
      // Ramp fractions jittered by the seed; the flat top always exists.
      const double up = last * (0.25 + 0.1 * unit(rng));
      const double down = last * (0.25 + 0.1 * unit(rng));
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i);
        double f = 1.0;
        if (t < up) f = t / up;
        if (t > last - down) f = (last - t) / down;
        v[i] = v_peak * std::clamp(f, 0.0, 1.0);
      }
      const auto top = static_cast<std::size_t>(std::ceil(up));
      if (n > 2 && top < n - 1) v[top] = v_peak;
      break;
    }
    case SynthKind::sinusoid: {
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      const double depth = 0.1 + 0.2 * unit(rng);
      const double freq = 2.0 + std::floor(4.0 * unit(rng));
      double vmax = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(i) / last;
        const double envelope = std::sin(std::numbers::pi * x);
        const double ripple = 1.0 - depth * 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * freq * x + phase));
        v[i] = std::max(0.0, envelope * ripple);
        vmax = std::max(vmax, v[i]);
      }
      for (auto& x : v) x = vmax > 0.0 ? v_peak * (x / vmax) : 0.0;
      v.front() = 0.0;
      v.back() = 0.0;
      break;
    }
  }

  DriveCycle c;
  c.velocity = std::move(v);
  c.grade.assign(n, 0.0);
  const char* names[] = {"trapezoid", "sinusoid", "constant"};
  c.name = std::string("synth_") + names[static_cast<int>(kind)];
  c.validate();
  return c;
}

double cycle_distance(const DriveCycle& cycle) {
  double d = 0.0;
  for (double v : cycle.velocity) d += v * cycle.dt;
  return d;
}

DriveCycle resolve_cycle(const std::string& spec, SpeedUnit unit) {
  if (spec.rfind("synth:", 0) != 0) return load_cycle(spec, unit);
  auto parts = text::split(spec, ':');
  if (parts.size() < 4 || parts.size() > 5)
    throw ConfigError("synthetic cycle spec must be synth:KIND:DURATION:VPEAK[:SEED]");
  double duration = 0.0, vpeak = 0.0, seed = 1.0;
  if (!text::parse_double(parts[2], duration) || !text::parse_double(parts[3], vpeak) ||
      (parts.size() == 5 && !text::parse_double(parts[4], seed)))
    throw ConfigError("malformed synthetic cycle spec '" + spec + "'");
  return synth_cycle(parse_synth_kind(std::string(parts[1])), duration, vpeak,
                     static_cast<std::uint64_t>(seed));
}

}  // namespace shev::cycles
