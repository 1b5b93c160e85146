#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "shev/dp.hpp"
#include "shev/env.hpp"
#include "shev/error.hpp"
#include "shev/harness.hpp"

namespace py = pybind11;
using namespace shev;
namespace pt = shev::powertrain;

namespace {

py::dict step_dict(const env::StepInfo& s) {
  py::dict d;
  d["step"] = s.step;
  d["v"] = s.v;
  d["soc"] = s.soc;
  d["soc_next"] = s.soc_next;
  d["p_em"] = s.p_em;
  d["omega"] = s.omega;
  d["torque"] = s.torque;
  d["fuel_g"] = s.fuel_g;
  d["p_genset"] = s.p_genset;
  d["p_batt"] = s.p_batt;
  d["reward"] = s.reward;
  d["bus_residual"] = s.bus_residual;
  d["done"] = s.done;
  d["power_limited"] = s.power_limited;
  d["soc_failure"] = s.soc_failure;
  return d;
}

py::list trace_list(const std::vector<env::StepInfo>& t) {
  py::list l;
  for (const auto& s : t) l.append(step_dict(s));
  return l;
}

harness::Config config_of(const std::string& text, const py::dict& overrides) {
  auto c = harness::Config::parse(text, "config");
  for (auto [k, v] : overrides) c.set(py::str(k), py::str(v));
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Series-HEV energy management core";

  static py::exception<Error> base(m, "ShevError");
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<InfeasibleError> infeasible(m, "InfeasibleError", base.ptr());
  static py::exception<NumericError> numeric(m, "NumericError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const ParseError& e) {
      config_error(e.what());
    } catch (const InfeasibleError& e) {
      infeasible(e.what());
    } catch (const NumericError& e) {
      numeric(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  py::class_<cycles::DriveCycle>(m, "DriveCycle")
      .def_readonly("dt", &cycles::DriveCycle::dt)
      .def_readonly("velocity", &cycles::DriveCycle::velocity)
      .def_readonly("grade", &cycles::DriveCycle::grade)
      .def_readonly("name", &cycles::DriveCycle::name)
      .def("__len__", &cycles::DriveCycle::size)
      .def("distance", [](const cycles::DriveCycle& c) { return cycles::cycle_distance(c); });
  m.def("resolve_cycle", [](const std::string& spec, const std::string& unit) {
    return cycles::resolve_cycle(spec, cycles::parse_speed_unit(unit));
  }, py::arg("spec"), py::arg("unit") = "mps");
  m.def("repeat_cycle", &cycles::repeat_cycle);

  py::class_<pt::PowertrainModel, std::shared_ptr<pt::PowertrainModel>>(m, "PowertrainModel")
      .def_property_readonly("cell_capacity_ah", [](const pt::PowertrainModel& p) { return p.battery.cell_capacity_ah; })
      .def_property_readonly("aux_power", [](const pt::PowertrainModel& p) { return p.vehicle.aux_power; })
      .def_property_readonly("mass", [](const pt::PowertrainModel& p) { return p.vehicle.mass; })
      .def_property_readonly("pack_energy_wh", [](const pt::PowertrainModel& p) { return p.battery.nominal_energy_wh(); })
      .def("fuel_rate", [](const pt::PowertrainModel& p, double w, double t) { return p.engine_fuel.at(w, t); })
      .def("genset", [](const pt::PowertrainModel& p, double w, double t) {
        const auto g = pt::genset_output(w, t, p);
        return py::make_tuple(g.p_elec, g.fuel_rate);
      });
  m.def("build_model", [](const std::string& text, const py::dict& overrides) {
    return harness::build_model(config_of(text, overrides));
  }, py::arg("config") = "", py::arg("overrides") = py::dict());

  m.def("soc_shaping", [](double soc) { return env::soc_shaping(soc, {}); });
  m.def("reward", [](double fuel_g, double soc, double soc_init) { return env::reward_fn(fuel_g, soc, soc_init, {}); },
        py::arg("fuel_g"), py::arg("soc"), py::arg("soc_init"));
  m.def("mpg", [](double distance_m, double fuel_g) { return pt::mpg(distance_m, fuel_g); });

  py::class_<env::ShevEnv>(m, "Env")
      .def(py::init([](std::shared_ptr<pt::PowertrainModel> model, const cycles::DriveCycle& cycle) {
        env::EpisodeConfig ec;
        ec.cycle = cycle;
        return std::make_unique<env::ShevEnv>(model, ec);
      }), py::arg("model"), py::arg("cycle"))
      .def("reset", [](env::ShevEnv& e, double soc) {
        const auto o = e.reset_fixed(soc);
        return py::make_tuple(o.soc, o.distance, o.p_em);
      }, py::arg("initial_soc"))
      .def("step", [](env::ShevEnv& e, double omega, double torque) { return step_dict(e.step({omega, torque}).info); })
      .def_property_readonly("active", &env::ShevEnv::active)
      .def_property_readonly("length", &env::ShevEnv::episode_length);

  m.def("dp_solve", [](const cycles::DriveCycle& cycle, std::shared_ptr<pt::PowertrainModel> model, double initial_soc,
                       int soc_points, int omega_points, int torque_points) {
    dp::DpConfig cfg;
    cfg.soc_grid = dp::linspace(0.0, 1.0, soc_points);
    cfg.omega_grid = dp::linspace(0.0, cfg.omega_grid.back(), omega_points);
    cfg.torque_grid = dp::linspace(0.0, cfg.torque_grid.back(), torque_points);
    dp::DpSolution s;
    {
      py::gil_scoped_release nogil;
      s = dp::dp_solve(cycle, *model, cfg, initial_soc);
    }
    py::dict d;
    d["total_fuel"] = s.total_fuel;
    d["mpg"] = s.mpg;
    d["mpg_infinite"] = s.mpg_infinite;
    d["soc_final"] = s.trace.empty() ? initial_soc : s.trace.back().soc_next;
    d["trace"] = trace_list(s.trace);
    return d;
  }, py::arg("cycle"), py::arg("model"), py::arg("initial_soc"), py::arg("soc_points") = 401,
     py::arg("omega_points") = 13, py::arg("torque_points") = 13);

  m.def("help_config", &harness::help_config);
  m.def("train", [](const std::string& config, const std::string& out, const py::dict& overrides) {
    const auto c = config_of(config, overrides);
    harness::TrainOutcome o;
    {
      py::gil_scoped_release nogil;
      o = harness::cmd_train(c, out);
    }
    py::dict d;
    py::list rewards;
    for (const auto& r : o.result.log) rewards.append(r.mean_reward);
    d["mean_rewards"] = rewards;
    d["best_moving_average"] = o.result.best_ma;
    d["best_episode"] = o.result.best_episode;
    d["last_episode"] = o.last_episode;
    d["log"] = o.log_path;
    d["best_checkpoint"] = o.best_checkpoint;
    d["final_checkpoint"] = o.final_checkpoint;
    return d;
  }, py::arg("config"), py::arg("out"), py::arg("overrides") = py::dict());
  m.def("evaluate", [](const std::string& checkpoint, double initial_soc, const std::string& out,
                       const std::string& cycle) {
    const auto o = harness::cmd_eval(checkpoint, cycle, initial_soc, out);
    py::dict d;
    d["total_fuel"] = o.summary.total_fuel_g;
    d["mpg"] = o.mpg;
    d["soc_final"] = o.summary.soc_final;
    d["trace"] = o.trace_path;
    return d;
  }, py::arg("checkpoint"), py::arg("initial_soc"), py::arg("out"), py::arg("cycle") = "");
  m.def("dp", [](const std::string& config, double initial_soc, const std::string& out, const std::string& cycle) {
    const auto o = harness::cmd_dp(harness::Config::parse(config), cycle, initial_soc, out);
    py::dict d;
    d["total_fuel"] = o.solution.total_fuel;
    d["soc_final"] = o.solution.trace.empty() ? initial_soc : o.solution.trace.back().soc_next;
    d["trace"] = o.dir + "/trace.csv";
    return d;
  }, py::arg("config"), py::arg("initial_soc"), py::arg("out"), py::arg("cycle") = "");
  m.def("compare", [](const std::string& dp_trace, const std::vector<std::string>& runs, const std::string& out) {
    return harness::render_text(harness::cmd_compare(dp_trace, runs, out));
  }, py::arg("dp_trace"), py::arg("runs"), py::arg("out") = "");
  m.def("delta_percent", &harness::delta_percent, py::arg("dp"), py::arg("agent"));
  m.def("total_percent", &harness::total_percent, py::arg("delta_soc"), py::arg("delta_mpg"));
  m.def("study_arms", [](int study) {
    py::list l;
    for (const auto& a : harness::study_arms(study)) l.append(py::make_tuple(a.name, a.overrides));
    return l;
  });
}
