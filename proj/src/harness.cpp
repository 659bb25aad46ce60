#include "sap/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sap {

namespace fs = std::filesystem;

// ---- statistics ----------------------------------------------------------------

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0;
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0;
  double m = mean_of(xs), s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

double ci95_half_width(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0;
  return 1.96 * std::sqrt(sample_variance(xs) / static_cast<double>(xs.size()));
}

namespace {

// continued fraction for the regularized incomplete beta (modified Lentz)
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double eps = 3e-14, fpmin = 1e-300;
  double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1) / (a + b + 2)) return bt * betacf(a, b, x) / a;
  return 1 - bt * betacf(b, a, 1 - x) / b;
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("welch_t_test: need at least 2 samples per group");
  double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double sa = sample_variance(a) / na, sb = sample_variance(b) / nb;
  WelchResult r;
  double denom = sa + sb;
  if (denom <= 0) {
    r.t = mean_of(a) == mean_of(b) ? 0 : std::copysign(1e18, mean_of(a) - mean_of(b));
    r.df = na + nb - 2;
  } else {
    r.t = (mean_of(a) - mean_of(b)) / std::sqrt(denom);
    r.df = denom * denom / (sa * sa / (na - 1) + sb * sb / (nb - 1));
  }
  double x = r.df / (r.df + r.t * r.t);
  r.p_two_sided = incomplete_beta(r.df / 2, 0.5, x);
  double tail = 0.5 * r.p_two_sided;
  r.p_greater = r.t > 0 ? tail : 1 - tail;
  return r;
}

// ---- run configuration ---------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<T>(std::stoll(item)));
  }
  return out;
}

template <typename T>
std::string join_list(const std::vector<T>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void apply_config_line(RunConfig& cfg, const std::string& raw) {
  std::string line = raw;
  size_t hash = line.find('#');
  if (hash != std::string::npos) line.resize(hash);
  line = trim(line);
  if (line.empty()) return;
  size_t eq = line.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("config: expected key = value, got: " + raw);
  std::string key = trim(line.substr(0, eq));
  std::string val = trim(line.substr(eq + 1));

  if (key == "learner") cfg.learner = parse_learner(val);
  else if (key == "task") cfg.task = val;
  else if (key == "family") cfg.family = val;
  else if (key == "layers") cfg.layers = parse_list<Eigen::Index>(val);
  else if (key == "conv_channels") cfg.conv_channels = parse_list<Eigen::Index>(val);
  else if (key == "side") cfg.side = std::stoll(val);
  else if (key == "n_way") cfg.n_way = std::stoi(val);
  else if (key == "k_shot") cfg.k_shot = std::stoi(val);
  else if (key == "n_query") cfg.n_query = std::stoi(val);
  else if (key == "svd_ranks") cfg.svd_ranks = parse_list<int>(val);
  else if (key == "conv_svd_rank") cfg.conv_svd_rank = std::stoi(val);
  else if (key.rfind("pool", 0) == 0) {
    size_t idx = std::stoul(key.substr(4));
    if (cfg.pools.size() <= idx) cfg.pools.resize(idx + 1, "none");
    cfg.pools[idx] = val;
  } else if (key == "inner_lr") cfg.meta.inner_lr = std::stod(val);
  else if (key == "outer_lr") cfg.meta.outer_lr = std::stod(val);
  else if (key == "inner_steps_train") cfg.meta.inner_steps_train = std::stoi(val);
  else if (key == "inner_steps_eval") cfg.meta.inner_steps_eval = std::stoi(val);
  else if (key == "meta_batch") cfg.meta.meta_batch_size = std::stoi(val);
  else if (key == "gradient_order") cfg.meta.gradient_order = parse_gradient_order(val);
  else if (key == "outer_optimizer") cfg.meta.outer_optimizer = parse_outer_opt(val);
  else if (key == "total_train_tasks") cfg.total_train_tasks = std::stoll(val);
  else if (key == "validate_every") cfg.validate_every = std::stoll(val);
  else if (key == "val_episodes") cfg.val_episodes = std::stoll(val);
  else if (key == "test_tasks") cfg.test_tasks = std::stoll(val);
  else if (key == "seed") cfg.seed = std::stoull(val);
  else if (key == "out_dir") cfg.out_dir = val;
  else throw std::invalid_argument("config: unknown key: " + key);
}

RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  while (std::getline(in, line)) apply_config_line(cfg, line);
  cfg.meta.learner = cfg.learner;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return parse_run_config(in);
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "learner = " << learner_name(cfg.learner) << '\n';
  out << "task = " << cfg.task << '\n';
  if (!cfg.family.empty()) out << "family = " << cfg.family << '\n';
  out << "layers = " << join_list(cfg.layers) << '\n';
  out << "conv_channels = " << join_list(cfg.conv_channels) << '\n';
  out << "side = " << cfg.side << '\n';
  out << "n_way = " << cfg.n_way << '\n';
  out << "k_shot = " << cfg.k_shot << '\n';
  out << "n_query = " << cfg.n_query << '\n';
  out << "svd_ranks = " << join_list(cfg.svd_ranks) << '\n';
  out << "conv_svd_rank = " << cfg.conv_svd_rank << '\n';
  for (size_t i = 0; i < cfg.pools.size(); ++i)
    out << "pool" << i << " = " << cfg.pools[i] << '\n';
  out << "inner_lr = " << fmt_double(cfg.meta.inner_lr) << '\n';
  out << "outer_lr = " << fmt_double(cfg.meta.outer_lr) << '\n';
  out << "inner_steps_train = " << cfg.meta.inner_steps_train << '\n';
  out << "inner_steps_eval = " << cfg.meta.inner_steps_eval << '\n';
  out << "meta_batch = " << cfg.meta.meta_batch_size << '\n';
  out << "gradient_order = "
      << (cfg.meta.gradient_order == GradientOrder::First ? "first" : "second") << '\n';
  out << "outer_optimizer = "
      << (cfg.meta.outer_optimizer == OuterOpt::Sgd ? "sgd" : "adam") << '\n';
  out << "total_train_tasks = " << cfg.total_train_tasks << '\n';
  out << "validate_every = " << cfg.validate_every << '\n';
  out << "val_episodes = " << cfg.val_episodes << '\n';
  out << "test_tasks = " << cfg.test_tasks << '\n';
  out << "seed = " << cfg.seed << '\n';
  if (!cfg.out_dir.empty()) out << "out_dir = " << cfg.out_dir << '\n';
  return out.str();
}

void RunConfig::validate() const {
  if (task != "sine" && task != "family" && task != "images")
    throw std::invalid_argument("config: task must be sine, family or images");
  if (task == "family") {
    bool found = false;
    for (const auto& f : enumerate_task_families()) found = found || f.name() == family;
    if (!found) throw std::invalid_argument("config: unknown task family: " + family);
  }
  if (k_shot < 1 || n_query < 1 || total_train_tasks < 1 || validate_every < 1 ||
      val_episodes < 1 || test_tasks < 1)
    throw std::invalid_argument("config: counts must be positive");
  if (validate_every > total_train_tasks)
    throw std::invalid_argument("config: validate_every must be <= total_train_tasks");
  MetaConfig m = meta;
  m.learner = learner;
  m.validate();
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec spec;
  if (classification()) {
    spec.conv = true;
    spec.in_channels = 1;
    spec.side = side;
    spec.conv_channels = conv_channels;
    spec.n_classes = n_way;
  } else {
    spec.layer_sizes = layers;
  }
  return spec;
}

PoolConfig RunConfig::pool_config() const {
  NetworkSpec spec = network_spec();
  if (pools.empty()) return default_pools(spec, svd_ranks, conv_svd_rank);
  if (static_cast<Eigen::Index>(pools.size()) != spec.num_op_sets())
    throw std::invalid_argument("config: pool count does not match the backbone");
  PoolConfig out;
  for (const auto& entry : pools) {
    std::vector<OpSpec> set;
    if (entry != "none" && entry != "") {
      std::istringstream is(entry);
      std::string item;
      while (std::getline(is, item, ',')) set.push_back(parse_op_spec(trim(item)));
    }
    out.sets.push_back(std::move(set));
  }
  return out;
}

Network RunConfig::build_network(Rng& rng) const {
  PoolConfig pc = learner == LearnerKind::Sap ? pool_config() : PoolConfig{};
  return Network::build(learner, network_spec(), pc, rng);
}

Episode RunConfig::sample_task(Rng& rng) const {
  if (task == "sine") return sample_sine_task(rng, k_shot, n_query);
  if (task == "family") {
    for (const auto& f : enumerate_task_families())
      if (f.name() == family) return sample_family_task(f, rng, k_shot, n_query);
    throw std::invalid_argument("unknown task family: " + family);
  }
  return sample_synthetic_image_task(rng, n_way, k_shot, side);
}

// ---- metrics -------------------------------------------------------------------

void export_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "tasks_seen,split,metric,mean,ci95,seconds\n";
  for (const auto& r : rows)
    out << r.tasks_seen << ',' << r.split << ',' << r.metric << ',' << fmt_double(r.mean)
        << ',' << fmt_double(r.ci95) << ',' << fmt_double(r.seconds) << '\n';
}

// ---- checkpoints ---------------------------------------------------------------

Checkpoint Checkpoint::capture(const Network& net, const RunConfig& cfg,
                               const OuterOptimizer& opt, int64_t tasks_seen,
                               double best_val) {
  Checkpoint c;
  c.config_text = serialize_run_config(cfg);
  for (const auto& id : net.store().ids())
    c.params.emplace_back(id, net.store().handle(id).value);
  c.opt_state = opt.state();
  c.tasks_seen = tasks_seen;
  c.best_val = best_val;
  return c;
}

void Checkpoint::restore_into(Network& net) const {
  for (const auto& [id, value] : params) net.assign(id, value);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "sap-checkpoint " << ckpt.version << '\n';
  out << "tasks_seen " << ckpt.tasks_seen << '\n';
  out << "best_val " << fmt_double(ckpt.best_val) << '\n';
  out << "opt_t " << ckpt.opt_state.t << '\n';
  out << "config " << ckpt.config_text.size() << '\n' << ckpt.config_text;
  int64_t total = 0;
  out << "params " << ckpt.params.size() << '\n';
  for (const auto& [id, t] : ckpt.params) {
    out << id << ' ' << t.shape().size();
    for (auto d : t.shape()) out << ' ' << d;
    out << '\n';
    total += t.size();
  }
  auto write_moments = [&](const char* tag, const std::map<std::string, Array>& m) {
    out << tag << ' ' << m.size() << '\n';
    for (const auto& [id, a] : m) {
      out << id << ' ' << a.size() << '\n';
      total += a.size();
    }
  };
  write_moments("opt_m", ckpt.opt_state.m);
  write_moments("opt_v", ckpt.opt_state.v);
  out << "payload " << total << '\n';
  auto dump = [&](const Array& a) {
    out.write(reinterpret_cast<const char*>(a.data()),
              static_cast<std::streamsize>(a.size() * sizeof(double)));
  };
  for (const auto& [id, t] : ckpt.params) dump(t.array());
  for (const auto& [id, a] : ckpt.opt_state.m) dump(a);
  for (const auto& [id, a] : ckpt.opt_state.v) dump(a);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string word;
  auto expect = [&](const char* tag) {
    in >> word;
    if (word != tag) throw std::runtime_error("checkpoint: expected " + std::string(tag));
  };
  Checkpoint c;
  expect("sap-checkpoint");
  in >> c.version;
  if (c.version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(c.version));
  expect("tasks_seen");
  in >> c.tasks_seen;
  expect("best_val");
  in >> c.best_val;
  expect("opt_t");
  in >> c.opt_state.t;
  expect("config");
  size_t cfg_len;
  in >> cfg_len;
  in.get();  // newline
  c.config_text.resize(cfg_len);
  in.read(c.config_text.data(), static_cast<std::streamsize>(cfg_len));
  expect("params");
  size_t n_params;
  in >> n_params;
  std::vector<Shape> shapes(n_params);
  for (size_t i = 0; i < n_params; ++i) {
    std::string id;
    size_t ndim;
    in >> id >> ndim;
    Shape shape(ndim);
    for (auto& d : shape) in >> d;
    c.params.emplace_back(id, Tensor());
    shapes[i] = std::move(shape);
  }
  auto read_moment_header = [&](const char* tag, std::vector<std::pair<std::string, Eigen::Index>>& hdr) {
    expect(tag);
    size_t n;
    in >> n;
    hdr.resize(n);
    for (auto& [id, len] : hdr) in >> id >> len;
  };
  std::vector<std::pair<std::string, Eigen::Index>> m_hdr, v_hdr;
  read_moment_header("opt_m", m_hdr);
  read_moment_header("opt_v", v_hdr);
  expect("payload");
  int64_t total;
  in >> total;
  in.get();  // newline before the binary payload
  auto read_array = [&](Eigen::Index n) {
    Array a(n);
    in.read(reinterpret_cast<char*>(a.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated payload");
    return a;
  };
  for (size_t i = 0; i < n_params; ++i) {
    Eigen::Index n = 1;
    for (auto d : shapes[i]) n *= d;
    c.params[i].second = Tensor(shapes[i], read_array(n));
  }
  for (auto& [id, len] : m_hdr) c.opt_state.m.emplace(id, read_array(len));
  for (auto& [id, len] : v_hdr) c.opt_state.v.emplace(id, read_array(len));
  return c;
}

// ---- orchestration -------------------------------------------------------------

namespace {

double episode_metric(const Network& net, const Episode& ep, const ParamEnv& env,
                      const Tensor& query_loss) {
  if (!ep.classification) return query_loss.item();
  NoGradGuard no_grad;
  Tensor out = net.forward(ep.query_x, env);
  Eigen::Index n = out.shape()[0], c = out.shape()[1];
  int correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < c; ++j)
      if (out.array()(i * c + j) > out.array()(i * c + best)) best = j;
    if (best == static_cast<Eigen::Index>(ep.query_y.array()(i))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace

MetricsRow evaluate(const Network& net, const RunConfig& cfg, int64_t n_tasks, int steps,
                    Rng stream, const std::string& split, int64_t tasks_seen,
                    std::vector<double>* episode_metrics) {
  auto t0 = std::chrono::steady_clock::now();
  MetaConfig mc = cfg.meta;
  mc.learner = cfg.learner;
  std::vector<double> metrics;
  metrics.reserve(static_cast<size_t>(n_tasks));
  for (int64_t i = 0; i < n_tasks; ++i) {
    Rng ep_rng = stream.split(static_cast<uint64_t>(i));
    Episode ep = cfg.sample_task(ep_rng);
    AdaptResult r = inner_adapt(net, ep, mc, steps, false);
    metrics.push_back(episode_metric(net, ep, r.env, r.query_loss));
  }
  if (episode_metrics) *episode_metrics = metrics;
  MetricsRow row;
  row.tasks_seen = tasks_seen;
  row.split = split;
  row.metric = cfg.classification() ? "accuracy" : "mse";
  row.mean = mean_of(metrics);
  row.ci95 = ci95_half_width(metrics);
  row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

TrainResult meta_train(const RunConfig& cfg) {
  cfg.validate();
  Rng master(cfg.seed);
  Rng init_rng = master.split(0);
  Rng train_rng = master.split(1);
  Rng val_rng = master.split(2);

  Network net = cfg.build_network(init_rng);
  MetaConfig mc = cfg.meta;
  mc.learner = cfg.learner;
  OuterOptimizer opt(mc.outer_optimizer, mc.outer_lr);

  TrainResult res;
  const bool maximize = cfg.classification();
  double best_val = maximize ? -1e300 : 1e300;
  res.best = Checkpoint::capture(net, cfg, opt, 0, best_val);

  auto t0 = std::chrono::steady_clock::now();
  int64_t seen = 0, next_validation = cfg.validate_every;
  std::vector<double> train_losses;
  auto validate_now = [&]() {
    MetricsRow row = evaluate(net, cfg, cfg.val_episodes, mc.inner_steps_eval,
                              val_rng.split(static_cast<uint64_t>(seen)), "val", seen);
    if (!train_losses.empty()) {
      MetricsRow trow;
      trow.tasks_seen = seen;
      trow.split = "train";
      trow.metric = cfg.classification() ? "loss" : "mse";
      trow.mean = mean_of(train_losses);
      trow.ci95 = ci95_half_width(train_losses);
      trow.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.rows.push_back(trow);
      train_losses.clear();
    }
    res.rows.push_back(row);
    bool improved = maximize ? row.mean > best_val : row.mean < best_val;
    if (improved) {
      best_val = row.mean;
      res.best = Checkpoint::capture(net, cfg, opt, seen, best_val);
    }
  };

  while (seen < cfg.total_train_tasks) {
    int64_t m = std::min<int64_t>(mc.meta_batch_size, cfg.total_train_tasks - seen);
    std::vector<Episode> batch;
    batch.reserve(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) batch.push_back(cfg.sample_task(train_rng));
    try {
      train_losses.push_back(outer_step(net, batch, mc, opt));
      seen += m;
      if (seen >= next_validation || seen >= cfg.total_train_tasks) {
        validate_now();
        next_validation += cfg.validate_every;
      }
    } catch (const DivergenceError& e) {
      res.diverged = true;
      res.divergence_message = e.what();
      break;
    }
  }
  res.last = Checkpoint::capture(net, cfg, opt, seen, best_val);
  if (res.best.tasks_seen == 0 && res.rows.empty()) res.best = res.last;

  if (!cfg.out_dir.empty()) {
    fs::create_directories(fs::path(cfg.out_dir) / "checkpoints");
    std::ofstream cfg_out(fs::path(cfg.out_dir) / "config.txt");
    cfg_out << serialize_run_config(cfg);
    export_csv(res.rows, (fs::path(cfg.out_dir) / "metrics.csv").string());
    if (cfg.learner == LearnerKind::Sap) {
      Network best_net = cfg.build_network(init_rng);
      res.best.restore_into(best_net);
      export_strengths_csv(report_strengths(best_net),
                           (fs::path(cfg.out_dir) / "strengths.csv").string());
    }
    save_checkpoint(res.best, (fs::path(cfg.out_dir) / "checkpoints" / "best.ckpt").string());
    save_checkpoint(res.last, (fs::path(cfg.out_dir) / "checkpoints" / "last.ckpt").string());
  }
  return res;
}

RunConfig prune_topk(const Network& net, const RunConfig& cfg, int k) {
  if (net.learner() != LearnerKind::Sap)
    throw std::invalid_argument("prune_topk: SAP checkpoint required");
  if (k < 1) throw std::invalid_argument("prune_topk: K must be >= 1");
  RunConfig out = cfg;
  out.pools.clear();
  ParamEnv env = net.env();
  size_t set_idx = 0;
  for (const auto& pool : net.pools().sets) {
    if (pool.empty()) {
      out.pools.push_back("none");
      continue;
    }
    const OperationSet& set = net.op_sets()[set_idx++];
    if (k > static_cast<int>(set.ops.size()))
      throw std::invalid_argument("prune_topk: K exceeds pool size");
    Array w = strengths(set, env).array();
    std::vector<int> order(set.ops.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return w(a) > w(b); });  // ties keep lower index
    order.resize(k);
    std::sort(order.begin(), order.end());
    std::string entry;
    for (size_t i = 0; i < order.size(); ++i) {
      if (i) entry += ',';
      entry += spec_name(set.ops[order[i]].spec);
    }
    out.pools.push_back(entry);
  }
  return out;
}

std::vector<StrengthRow> report_strengths(const Network& net) {
  if (net.learner() != LearnerKind::Sap)
    throw std::invalid_argument("report_strengths: SAP checkpoint required");
  std::vector<StrengthRow> rows;
  ParamEnv env = net.env();
  int set_index = 0;
  for (const auto& set : net.op_sets()) {
    Array w = strengths(set, env).array();
    for (size_t i = 0; i < set.ops.size(); ++i)
      rows.push_back({set_index, spec_name(set.ops[i].spec), w(static_cast<Eigen::Index>(i))});
    ++set_index;
  }
  return rows;
}

void export_strengths_csv(const std::vector<StrengthRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "set,op,strength\n";
  for (const auto& r : rows)
    out << r.set_index << ',' << r.op << ',' << fmt_double(r.strength) << '\n';
}

// ---- random search -------------------------------------------------------------

MetaConfig SearchSpace::sample(const MetaConfig& base, Rng& rng) const {
  MetaConfig out = base;
  out.inner_lr = std::exp(rng.uniform(std::log(inner_lr_lo), std::log(inner_lr_hi)));
  out.inner_steps_train = rng.uniform_int(steps_train_lo, steps_train_hi);
  out.inner_steps_eval = rng.uniform_int(out.inner_steps_train, steps_eval_hi);
  out.meta_batch_size = rng.uniform_int(batch_lo, batch_hi);
  return out;
}

std::vector<TrialResult> random_search(const SearchSpace& space, const RunConfig& base,
                                       int trials) {
  if (trials < 1) throw std::invalid_argument("random_search: trials must be >= 1");
  Rng rng(base.seed);
  Rng sampler = rng.split(17);
  std::vector<TrialResult> out;
  const bool maximize = base.classification();
  for (int i = 0; i < trials; ++i) {
    TrialResult trial;
    trial.index = i;
    trial.cfg = space.sample(base.meta, sampler);
    RunConfig cfg = base;
    cfg.meta = trial.cfg;
    cfg.out_dir.clear();
    try {
      TrainResult r = meta_train(cfg);
      if (r.diverged) throw std::runtime_error("diverged: " + r.divergence_message);
      trial.val_metric = r.best.best_val;
      trial.ok = true;
    } catch (const std::exception& e) {
      trial.error = e.what();
    }
    out.push_back(std::move(trial));
  }
  std::stable_sort(out.begin(), out.end(), [&](const TrialResult& a, const TrialResult& b) {
    if (a.ok != b.ok) return a.ok;
    if (!a.ok) return false;
    return maximize ? a.val_metric > b.val_metric : a.val_metric < b.val_metric;
  });
  return out;
}

}  // namespace sap
