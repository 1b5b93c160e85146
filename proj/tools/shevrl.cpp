#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shev/error.hpp"
#include "shev/harness.hpp"
#include "shev/text.hpp"

using namespace shev;
using namespace shev::harness;

namespace {

struct Globals {
  std::string config;
  std::string out;
  long seed = -1;
};

Config load_config(const Globals& g, const std::string& sub_config) {
  const std::string path = sub_config.empty() ? g.config : sub_config;
  Config c = path.empty() ? Config() : Config::load(path);
  if (g.seed >= 0) c.set("seed", std::to_string(g.seed));
  return c;
}

std::string out_dir(const Globals& g, const Config& c) { return g.out.empty() ? c.get("out") : g.out; }

int run(int argc, char** argv) {
  CLI::App app{"Series-HEV energy management: SAC agents and a DP baseline"};
  app.require_subcommand(0, 1);
  Globals g;
  bool help_cfg = false;
  app.add_option("--config", g.config, "configuration file");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "random seed (overrides the config)")->check(CLI::NonNegativeNumber);
  app.add_flag("--help-config", help_cfg, "list every configuration key");

  std::string cfg_path;
  auto* train = app.add_subcommand("train", "train an agent");
  train->add_option("--config", cfg_path, "configuration file");

  std::string ckpt, cycle;
  double soc = -1.0;
  auto* eval = app.add_subcommand("eval", "greedy rollout of a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--cycle", cycle, "cycle file or synth spec (default: the training cycle)");
  eval->add_option("--soc", soc, "initial SOC (default: eval.initial_soc)");

  auto* dpc = app.add_subcommand("dp", "dynamic-programming baseline");
  dpc->add_option("--cycle", cycle, "cycle file or synth spec (default: cycle.source)");
  dpc->add_option("--soc", soc, "initial SOC (default: eval.initial_soc)");
  dpc->add_option("--config", cfg_path, "configuration file");

  std::string dp_trace;
  std::vector<std::string> runs;
  auto* cmp = app.add_subcommand("compare", "DP vs agent report");
  cmp->add_option("--dp", dp_trace, "DP trace.csv")->required();
  cmp->add_option("--runs", runs, "agent trace.csv files")->required();

  int study = 0;
  auto* abl = app.add_subcommand("ablate", "run one ablation study");
  abl->add_option("--study", study, "study 1-6")->required();
  abl->add_option("--config", cfg_path, "base configuration");

  std::string emit;
  auto* maps = app.add_subcommand("maps", "write the component maps");
  maps->add_option("--emit", emit, "directory")->required();

  for (auto* s : {train, eval, dpc, cmp, abl, maps}) {
    s->add_option("--out", g.out, "output directory");
    s->add_option("--seed", g.seed, "random seed")->check(CLI::NonNegativeNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (help_cfg) {
    std::cout << help_config();
    return 0;
  }

  if (*train) {
    const auto c = load_config(g, cfg_path);
    const auto o = cmd_train(c, out_dir(g, c));
    std::cout << "episodes " << o.result.log.size() << " (last " << o.last_episode << "), best moving average "
              << text::fmt_double(o.result.best_ma) << " at episode " << o.result.best_episode << "\n"
              << "log " << o.log_path << "\ncheckpoint " << o.best_checkpoint << "\n";
  } else if (*eval) {
    const auto c = load_config(g, "");
    const Config* over = g.config.empty() && g.seed < 0 ? nullptr : &c;
    double s = soc;
    if (s < 0.0 && !text::parse_double(c.get("eval.initial_soc"), s)) throw ConfigError("bad eval.initial_soc");
    const auto o = cmd_eval(ckpt, cycle, s, g.out, over);
    std::cout << "fuel " << text::fmt_double(o.summary.total_fuel_g) << " g, mpg "
              << (o.mpg_infinite ? std::string("inf") : fmt2(o.mpg)) << ", final SOC "
              << fmt2(100.0 * o.summary.soc_final) << " %\ntrace " << o.trace_path << "\n";
  } else if (*dpc) {
    const auto c = load_config(g, cfg_path);
    double s = soc;
    if (s < 0.0 && !text::parse_double(c.get("eval.initial_soc"), s)) throw ConfigError("bad eval.initial_soc");
    const auto o = cmd_dp(c, cycle, s, out_dir(g, c));
    std::cout << "fuel " << text::fmt_double(o.solution.total_fuel) << " g, mpg "
              << (o.solution.mpg_infinite ? std::string("inf") : fmt2(o.solution.mpg)) << ", final SOC "
              << fmt2(100.0 * o.solution.soc_final) << " %\nsolution " << o.dir << "\n";
  } else if (*cmp) {
    const auto r = cmd_compare(dp_trace, runs, g.out);
    std::cout << render_text(r);
  } else if (*abl) {
    const auto c = load_config(g, cfg_path);
    const auto o = cmd_ablate(study, c, out_dir(g, c));
    for (const auto& a : o.arms)
      std::cout << a.name << ": " << (a.ok ? "ok" : "failed: " + a.message) << "\n";
    std::cout << "anchors worst " << text::fmt_double(o.anchor_worst) << ", best " << text::fmt_double(o.anchor_best)
              << "\n";
    for (const auto& a : o.arms)
      if (!a.ok) return 1;
  } else if (*maps) {
    cmd_maps(emit, load_config(g, ""));
    std::cout << "maps written to " << emit << "\n";
  } else {
    std::cout << app.help();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
