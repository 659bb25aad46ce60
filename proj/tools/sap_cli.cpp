// Experiment runner: meta-train/test few-shot learners, prune candidate
// pools, report activation strengths, random-search hyperparameters, and dump
// task episodes.
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sap/harness.hpp"

namespace fs = std::filesystem;
using namespace sap;

namespace {

struct CommonOpts {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
  auto* c = cmd->add_option("--config", o.config, "run configuration file");
  if (config_required) c->required();
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--out", o.out, "override the output directory");
}

RunConfig resolve_config(const CommonOpts& o) {
  RunConfig cfg = load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  return cfg;
}

void print_rows(const std::vector<MetricsRow>& rows) {
  for (const auto& r : rows) {
    std::printf("%8lld  %-5s  %-8s  %.6f +/- %.6f  (%.1fs)\n",
                static_cast<long long>(r.tasks_seen), r.split.c_str(), r.metric.c_str(),
                r.mean, r.ci95, r.seconds);
  }
}

Network network_from_checkpoint(const Checkpoint& ckpt, RunConfig& cfg_out) {
  std::istringstream in(ckpt.config_text);
  cfg_out = parse_run_config(in);
  Rng master(cfg_out.seed);
  Rng init_rng = master.split(0);
  Network net = cfg_out.build_network(init_rng);
  ckpt.restore_into(net);
  return net;
}

int run_train(const CommonOpts& o) {
  RunConfig cfg = resolve_config(o);
  TrainResult r = meta_train(cfg);
  print_rows(r.rows);
  if (r.diverged) {
    std::cerr << "training diverged: " << r.divergence_message
              << " (last good checkpoint retained)\n";
    return 2;
  }
  std::printf("best validation %s: %.6f at %lld tasks\n",
              cfg.classification() ? "accuracy" : "mse", r.best.best_val,
              static_cast<long long>(r.best.tasks_seen));
  return 0;
}

int run_test(const CommonOpts& o, const std::string& ckpt_path, int steps,
             int64_t n_tasks) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg;
  Network net = network_from_checkpoint(ckpt, cfg);
  if (!o.config.empty()) cfg = resolve_config(o);
  if (o.seed) cfg.seed = *o.seed;
  if (steps <= 0) steps = cfg.meta.inner_steps_eval;
  if (n_tasks <= 0) n_tasks = cfg.test_tasks;
  Rng master(cfg.seed);
  MetricsRow row =
      evaluate(net, cfg, n_tasks, steps, master.split(3), "test", ckpt.tasks_seen);
  print_rows({row});
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    export_csv({row}, (fs::path(cfg.out_dir) / "test_metrics.csv").string());
  }
  return 0;
}

int run_prune(const CommonOpts& o, const std::string& ckpt_path, int k, bool retrain) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg;
  Network net = network_from_checkpoint(ckpt, cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  RunConfig pruned = prune_topk(net, cfg, k);
  if (!pruned.out_dir.empty()) {
    fs::create_directories(pruned.out_dir);
    std::ofstream out(fs::path(pruned.out_dir) / "pruned.cfg");
    out << serialize_run_config(pruned);
  }
  std::cout << serialize_run_config(pruned);
  if (!retrain) return 0;
  // hard pruning requires retraining from a fresh initialization
  TrainResult r = meta_train(pruned);
  print_rows(r.rows);
  return r.diverged ? 2 : 0;
}

int run_strengths(const std::vector<std::string>& ckpt_paths, const std::string& out) {
  // aggregate over checkpoints (seeds): mean and standard deviation per set/op
  std::map<std::pair<int, std::string>, std::vector<double>> samples;
  for (const auto& path : ckpt_paths) {
    Checkpoint ckpt = load_checkpoint(path);
    RunConfig cfg;
    Network net = network_from_checkpoint(ckpt, cfg);
    for (const auto& row : report_strengths(net))
      samples[{row.set_index, row.op}].push_back(row.strength);
  }
  std::ostringstream table;
  table << "set,op,mean,std,n\n";
  for (const auto& [key, xs] : samples) {
    double m = mean_of(xs);
    double sd = xs.size() > 1 ? std::sqrt(sample_variance(xs)) : 0.0;
    table << key.first << ',' << key.second << ',' << m << ',' << sd << ','
          << xs.size() << '\n';
  }
  std::cout << table.str();
  if (!out.empty()) {
    fs::create_directories(fs::path(out));
    std::ofstream f(fs::path(out) / "strengths_summary.csv");
    f << table.str();
  }
  return 0;
}

int run_search(const CommonOpts& o, int trials) {
  RunConfig cfg = resolve_config(o);
  SearchSpace space;
  auto results = random_search(space, cfg, trials);
  std::ostringstream table;
  table << "rank,trial,ok,inner_lr,steps_train,steps_eval,meta_batch,val_metric,error\n";
  int rank = 0;
  for (const auto& t : results) {
    table << rank++ << ',' << t.index << ',' << (t.ok ? 1 : 0) << ',' << t.cfg.inner_lr
          << ',' << t.cfg.inner_steps_train << ',' << t.cfg.inner_steps_eval << ','
          << t.cfg.meta_batch_size << ',' << t.val_metric << ',' << t.error << '\n';
  }
  std::cout << table.str();
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream f(fs::path(cfg.out_dir) / "search.csv");
    f << table.str();
  }
  return 0;
}

int run_gen_tasks(const CommonOpts& o, int count, const std::string& file) {
  RunConfig cfg = resolve_config(o);
  Rng master(cfg.seed);
  Rng stream = master.split(9);
  std::vector<Episode> eps;
  for (int i = 0; i < count; ++i) {
    Rng ep_rng = stream.split(static_cast<uint64_t>(i));
    eps.push_back(cfg.sample_task(ep_rng));
  }
  if (file.empty() || file == "-") {
    dump_episodes(std::cout, eps);
  } else {
    std::ofstream f(file);
    if (!f) throw std::runtime_error("cannot write " + file);
    dump_episodes(f, eps);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot meta-learning experiments"};
  app.require_subcommand(1);

  CommonOpts train_o, test_o, prune_o, search_o, gen_o;
  std::string test_ckpt, prune_ckpt, gen_file, strengths_out;
  std::vector<std::string> strengths_ckpts;
  int test_steps = 0, prune_k = 2, trials = 10, gen_count = 10;
  int64_t test_tasks = 0;
  bool retrain = false;

  auto* train = app.add_subcommand("train", "meta-train per the run config");
  add_common(train, train_o);

  auto* test = app.add_subcommand("test", "evaluate a checkpoint on fresh test tasks");
  add_common(test, test_o, false);
  test->add_option("--checkpoint", test_ckpt, "checkpoint file")->required();
  test->add_option("--steps", test_steps, "inner steps at test time");
  test->add_option("--tasks", test_tasks, "number of test tasks");

  auto* prune = app.add_subcommand("prune", "layer-wise top-K pruning of the pools");
  add_common(prune, prune_o, false);
  prune->add_option("--checkpoint", prune_ckpt, "checkpoint file")->required();
  prune->add_option("-k,--top-k", prune_k, "operations to keep per set");
  prune->add_flag("--retrain", retrain, "retrain the pruned config from scratch");

  auto* strengths = app.add_subcommand("strengths", "report activation strengths");
  strengths->add_option("--checkpoint", strengths_ckpts, "checkpoint file(s)")
      ->required();
  strengths->add_option("--out", strengths_out, "output directory");

  auto* search = app.add_subcommand("search", "random hyperparameter search");
  add_common(search, search_o);
  search->add_option("--trials", trials, "number of trials");

  auto* gen = app.add_subcommand("gen-tasks", "dump sampled episodes as text");
  add_common(gen, gen_o);
  gen->add_option("--count", gen_count, "episodes to dump");
  gen->add_option("--file", gen_file, "output file ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_train(train_o);
    if (test->parsed()) return run_test(test_o, test_ckpt, test_steps, test_tasks);
    if (prune->parsed()) return run_prune(prune_o, prune_ckpt, prune_k, retrain);
    if (strengths->parsed()) return run_strengths(strengths_ckpts, strengths_out);
    if (search->parsed()) return run_search(search_o, trials);
    if (gen->parsed()) return run_gen_tasks(gen_o, gen_count, gen_file);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
