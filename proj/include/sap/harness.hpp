#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sap/meta.hpp"
#include "sap/network.hpp"
#include "sap/tasks.hpp"

namespace sap {

// ---- statistics ----------------------------------------------------------------

double mean_of(const std::vector<double>& xs);
double sample_variance(const std::vector<double>& xs);
double ci95_half_width(const std::vector<double>& xs);  // 1.96 * stderr

// Welch's two-sample t-test. p_greater is the one-sided p-value for
// mean(a) > mean(b); p_two_sided doubles the smaller tail.
struct WelchResult {
  double t = 0, df = 0, p_greater = 1, p_two_sided = 1;
};
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

// regularized incomplete beta I_x(a, b), used by the t-distribution CDF
double incomplete_beta(double a, double b, double x);

// ---- run configuration ---------------------------------------------------------

// Flat key = value text config. Unknown keys are an error; every field has a
// default mirroring the sine protocol.
struct RunConfig {
  LearnerKind learner = LearnerKind::Sap;
  std::string task = "sine";  // sine | family | images
  std::string family;         // task=family: name from TaskFamily::name()
  std::vector<Eigen::Index> layers = {1, 40, 40, 1};
  std::vector<Eigen::Index> conv_channels = {8, 8};  // task=images backbone
  Eigen::Index side = 8;
  int n_way = 2;
  int k_shot = 5;
  int n_query = 50;
  std::vector<int> svd_ranks = {5, 10, 15};
  int conv_svd_rank = 2;
  // empty = default pools for the backbone; "none" = no set at that point
  std::vector<std::string> pools;

  MetaConfig meta;
  int64_t total_train_tasks = 70000;
  int64_t validate_every = 2500;
  int64_t val_episodes = 500;
  int64_t test_tasks = 2000;
  uint64_t seed = 0;
  std::string out_dir;

  void validate() const;
  bool classification() const { return task == "images"; }

  NetworkSpec network_spec() const;
  PoolConfig pool_config() const;  // resolved against the backbone
  Network build_network(Rng& rng) const;
  Episode sample_task(Rng& rng) const;
};

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);
void apply_config_line(RunConfig& cfg, const std::string& line);  // "key = value"
std::string serialize_run_config(const RunConfig& cfg);

// ---- metrics -------------------------------------------------------------------

struct MetricsRow {
  int64_t tasks_seen = 0;
  std::string split;   // train | val | test
  std::string metric;  // mse | accuracy
  double mean = 0;
  double ci95 = 0;
  double seconds = 0;
};

// header: tasks_seen,split,metric,mean,ci95,seconds
void export_csv(const std::vector<MetricsRow>& rows, const std::string& path);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  int version = 1;
  std::string config_text;  // serialized RunConfig snapshot
  std::vector<std::pair<std::string, Tensor>> params;  // store order
  OptState opt_state;
  int64_t tasks_seen = 0;
  double best_val = 0;

  static Checkpoint capture(const Network& net, const RunConfig& cfg,
                            const OuterOptimizer& opt, int64_t tasks_seen,
                            double best_val);
  void restore_into(Network& net) const;  // ids must match
};

// text header plus a little-endian 64-bit binary payload; round-trips bit-exactly
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- orchestration -------------------------------------------------------------

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<MetricsRow> rows;
  bool diverged = false;
  std::string divergence_message;
};

// Algorithm: batches of meta_batch_size tasks, an outer step per batch,
// validation every validate_every tasks, best checkpoint by validation metric
// (lowest MSE / highest accuracy). Divergence aborts with the last good
// checkpoint retained. When cfg.out_dir is set, writes config snapshot,
// metrics.csv, strengths.csv (SAP only) and checkpoints/{best,last}.ckpt.
TrainResult meta_train(const RunConfig& cfg);

// fresh episodes from a dedicated stream; adaptation from the current init.
// episode_metrics, when given, receives the per-episode metric values.
MetricsRow evaluate(const Network& net, const RunConfig& cfg, int64_t n_tasks,
                    int steps, Rng stream, const std::string& split,
                    int64_t tasks_seen, std::vector<double>* episode_metrics = nullptr);

// per-set top-K by strength (ties to the lower op index); returns a config
// whose pools contain only the survivors, for retraining from scratch
RunConfig prune_topk(const Network& net, const RunConfig& cfg, int k);

struct StrengthRow {
  int set_index = 0;
  std::string op;      // spec name
  double strength = 0; // NaN marks an absent kind when tabulated
};
std::vector<StrengthRow> report_strengths(const Network& net);
void export_strengths_csv(const std::vector<StrengthRow>& rows, const std::string& path);

// ---- random search -------------------------------------------------------------

struct SearchSpace {
  double inner_lr_lo = 1e-3, inner_lr_hi = 6e-1;  // LogUniform
  int steps_train_lo = 1, steps_train_hi = 10;
  int steps_eval_hi = 15;  // eval ~ U{train..15}
  int batch_lo = 1, batch_hi = 10;

  MetaConfig sample(const MetaConfig& base, Rng& rng) const;
};

struct TrialResult {
  int index = 0;
  MetaConfig cfg;
  double val_metric = 0;
  bool ok = false;
  std::string error;
};

// runs `trials` shortened trainings; result sorted best-first (failed last)
std::vector<TrialResult> random_search(const SearchSpace& space, const RunConfig& base,
                                       int trials);

}  // namespace sap
