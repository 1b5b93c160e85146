#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "shev/cycles.hpp"
#include "shev/dp.hpp"
#include "shev/env.hpp"
#include "shev/powertrain.hpp"
#include "shev/sac.hpp"

namespace shev::harness {

struct KeyDoc {
  std::string key;
  std::string fallback;  // empty means "derived" (see doc)
  std::string doc;
};
const std::vector<KeyDoc>& config_keys();
std::string help_config();

/// Flat `key = value` configuration with dotted keys. Every known key always
/// has a value; `line` records where it was set (0 for defaults, -1 for overrides).
class Config {
 public:
  Config();
  static Config parse(const std::string& text, const std::string& origin = "config");
  static Config load(const std::string& path);

  void set(const std::string& key, const std::string& value, int line = -1);
  const std::string& get(const std::string& key) const;
  bool explicitly_set(const std::string& key) const;
  int line_of(const std::string& key) const;
  const std::string& origin() const { return origin_; }

  // All keys in registry order; parses back to an equivalent config.
  std::string snapshot() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, Entry> entries_;
  std::string origin_ = "defaults";
};

/// Typed view of a Config.
struct Experiment {
  std::uint64_t seed = 1;
  std::string out;
  std::string cycle_source;
  cycles::DriveCycle cycle;  // one repetition
  env::EpisodeConfig episode;
  env::RewardWeights reward;
  std::shared_ptr<const powertrain::PowertrainModel> model;
  sac::SacConfig sac;
  nets::Family actor = nets::Family::FFN, critic = nets::Family::FFN;
  int context_k = 1;
  int hidden = 128;
  int episodes = 0;
  std::string resume;
  double eval_soc = 0.85;
  std::string eval_cycle;
  dp::DpConfig dp;
  std::string continue_from;
  int workers = 1;
};

// Raises ConfigError naming the key and the line it came from.
Experiment resolve(const Config& c);
std::shared_ptr<powertrain::PowertrainModel> build_model(const Config& c);

// --- commands -------------------------------------------------------------------

struct TrainOutcome {
  sac::TrainResult result;
  std::string log_path, best_checkpoint, final_checkpoint, snapshot_path, curve_path;
  int last_episode = 0;
};
// Writes log.csv, curve.csv, best.ckpt, final.ckpt and config.snapshot under out.
TrainOutcome cmd_train(const Config& c, const std::string& out);

struct EvalOutcome {
  env::EpisodeSummary summary;
  double mpg = 0.0;
  bool mpg_infinite = false;
  std::string trace_path, summary_path;
};
// Greedy rollout; model and reward settings come from the checkpoint's
// embedded config unless `overrides` is given.
EvalOutcome cmd_eval(const std::string& checkpoint, const std::string& cycle_spec, double initial_soc,
                     const std::string& out, const Config* overrides = nullptr);

struct DpOutcome {
  dp::DpSolution solution;
  std::string dir;
};
DpOutcome cmd_dp(const Config& c, const std::string& cycle_spec, double initial_soc, const std::string& out);

// --- comparison report ------------------------------------------------------------

// 100 (agent - dp) / dp, rounded to the two printed decimals.
double delta_percent(double dp_value, double agent_value);
// Signed sum of the two printed delta entries.
double total_percent(double delta_soc, double delta_mpg);
std::string fmt2(double x, bool sign = false);

struct ReportRow {
  std::string name;
  double soc_final_pct = 0.0;
  double mpg = 0.0;
  double delta_soc = 0.0, delta_mpg = 0.0, total = 0.0;
  std::string trace;
};
struct Report {
  std::string cycle;
  double initial_soc = 0.0;
  ReportRow dp;
  std::vector<ReportRow> runs;
};
Report make_report(const ReportRow& dp, std::vector<ReportRow> runs);
std::string render_text(const Report& r);
std::string render_csv(const Report& r);
// Reads traces (cycle name, initial SOC and length must agree) and writes report.{csv,txt}.
Report cmd_compare(const std::string& dp_trace, const std::vector<std::string>& run_traces, const std::string& out);

// --- ablations --------------------------------------------------------------------

struct Arm {
  std::string name;
  std::map<std::string, std::string> overrides;
};
// Arms of study 1-6 (ConfigError otherwise).
std::vector<Arm> study_arms(int study);

struct ArmOutcome {
  std::string name;
  bool ok = false;
  std::string message;
  std::string init;  // checkpoint continued from, or "fresh"
  double best_ma = 0.0;
  int episodes = 0;
};
struct AblationOutcome {
  std::vector<ArmOutcome> arms;
  double anchor_worst = 0.0, anchor_best = 0.0;
};
// Per-arm failures are recorded and the batch continues.
AblationOutcome cmd_ablate(int study, const Config& base, const std::string& out);

// Writes the default maps (CSV + sidecar) and the pack/vehicle parameters.
void cmd_maps(const std::string& dir, const Config& c);

}  // namespace shev::harness
