#include "sap/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace sap {

namespace {

constexpr double kPi = std::numbers::pi;

Episode make_sine_episode(Rng& rng, int k, int n_query, double A, double f, double p,
                          double beta) {
  auto sample_xy = [&](int n, Array& x, Array& y) {
    x = Array(n);
    y = Array(n);
    for (int i = 0; i < n; ++i) {
      x(i) = rng.uniform(-5.0, 5.0);
      y(i) = A * std::sin(f * x(i) - p) + beta;
    }
  };
  Array sx, sy, qx, qy;
  sample_xy(k, sx, sy);
  sample_xy(n_query, qx, qy);
  Episode ep;
  ep.support_x = Tensor({k, 1}, std::move(sx));
  ep.support_y = Tensor({k, 1}, std::move(sy));
  ep.query_x = Tensor({n_query, 1}, std::move(qx));
  ep.query_y = Tensor({n_query, 1}, std::move(qy));
  ep.amplitude = A;
  ep.frequency = f;
  ep.phase = p;
  ep.offset = beta;
  return ep;
}

}  // namespace

std::string TaskFamily::name() const {
  std::string out;
  auto add = [&](bool flag, const char* tag) {
    if (!flag) return;
    if (!out.empty()) out += '+';
    out += tag;
  };
  add(vary_amplitude, "amp");
  add(vary_frequency, "freq");
  add(vary_phase, "phase");
  add(vary_offset, "offset");
  return out.empty() ? "none" : out;
}

std::vector<TaskFamily> enumerate_task_families() {
  std::vector<TaskFamily> out;
  for (int bits = 0; bits < 16; ++bits)
    out.push_back({.vary_amplitude = (bits & 1) != 0,
                   .vary_frequency = (bits & 2) != 0,
                   .vary_phase = (bits & 4) != 0,
                   .vary_offset = (bits & 8) != 0});
  return out;
}

Episode sample_sine_task(Rng& rng, int k, int n_query) {
  if (k < 1) throw std::invalid_argument("sample_sine_task: k must be >= 1");
  double A = rng.uniform(0.1, 5.0);
  double p = rng.uniform(0.0, kPi);
  return make_sine_episode(rng, k, n_query, A, 1.0, p, 0.0);
}

Episode sample_family_task(const TaskFamily& family, Rng& rng, int k, int n_query) {
  if (k < 1) throw std::invalid_argument("sample_family_task: k must be >= 1");
  double A = family.vary_amplitude ? rng.uniform(0.1, 5.0) : 1.0;
  double f = family.vary_frequency ? rng.uniform(0.5, 2.0) : 1.0;
  double p = family.vary_phase ? rng.uniform(0.0, kPi) : 0.0;
  double beta = family.vary_offset ? rng.uniform(-2.0, 2.0) : 0.0;
  return make_sine_episode(rng, k, n_query, A, f, p, beta);
}

namespace {

// Distinct binary prototypes: four bar orientations, a center blob, and a
// four-corner dot pattern.
void render_pattern(int pattern, Eigen::Index side, double* px) {
  std::fill(px, px + side * side, 0.0);
  auto at = [&](Eigen::Index r, Eigen::Index c) -> double& { return px[r * side + c]; };
  Eigen::Index mid = side / 2;
  switch (pattern) {
    case 0:  // horizontal bar
      for (Eigen::Index c = 0; c < side; ++c) at(mid, c) = 1.0;
      break;
    case 1:  // vertical bar
      for (Eigen::Index r = 0; r < side; ++r) at(r, mid) = 1.0;
      break;
    case 2:  // main diagonal
      for (Eigen::Index i = 0; i < side; ++i) at(i, i) = 1.0;
      break;
    case 3:  // anti-diagonal
      for (Eigen::Index i = 0; i < side; ++i) at(i, side - 1 - i) = 1.0;
      break;
    case 4:  // center blob
      for (Eigen::Index r = mid - 1; r <= mid; ++r)
        for (Eigen::Index c = mid - 1; c <= mid; ++c) at(r, c) = 1.0;
      break;
    case 5:  // corner dots
      at(0, 0) = at(0, side - 1) = at(side - 1, 0) = at(side - 1, side - 1) = 1.0;
      break;
    default:
      throw std::invalid_argument("render_pattern: unknown pattern");
  }
}

}  // namespace

Eigen::Index synthetic_pattern_count() { return 6; }

Episode sample_synthetic_image_task(Rng& rng, int n_way, int k, Eigen::Index side,
                                    double noise) {
  if (n_way < 2) throw std::invalid_argument("sample_synthetic_image_task: N >= 2");
  if (side < 8) throw std::invalid_argument("sample_synthetic_image_task: side >= 8");
  if (n_way > synthetic_pattern_count())
    throw std::invalid_argument("sample_synthetic_image_task: N exceeds pattern space");

  // pick N distinct patterns for this episode
  std::vector<int> patterns(synthetic_pattern_count());
  for (size_t i = 0; i < patterns.size(); ++i) patterns[i] = static_cast<int>(i);
  for (size_t i = patterns.size() - 1; i > 0; --i)
    std::swap(patterns[i], patterns[rng.uniform_int(0, static_cast<int>(i))]);
  patterns.resize(n_way);

  const int n_query_per_class = 15;
  auto render_set = [&](int per_class, Tensor& x, Tensor& y) {
    Eigen::Index n = static_cast<Eigen::Index>(n_way) * per_class;
    Array imgs(n * side * side), labels(n);
    Eigen::Index row = 0;
    for (int c = 0; c < n_way; ++c)
      for (int j = 0; j < per_class; ++j, ++row) {
        double* px = imgs.data() + row * side * side;
        render_pattern(patterns[c], side, px);
        for (Eigen::Index i = 0; i < side * side; ++i) px[i] += rng.normal(0.0, noise);
        labels(row) = c;
      }
    x = Tensor({n, 1, side, side}, std::move(imgs));
    y = Tensor({n}, std::move(labels));
  };
  Episode ep;
  ep.classification = true;
  ep.n_classes = n_way;
  render_set(k, ep.support_x, ep.support_y);
  render_set(n_query_per_class, ep.query_x, ep.query_y);
  return ep;
}

namespace {

void dump_tensor(std::ostream& out, const char* tag, const Tensor& t) {
  out << tag << ' ' << t.shape().size();
  for (auto d : t.shape()) out << ' ' << d;
  char buf[32];
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof(buf), " %.17g", t.array()(i));
    out << buf;
  }
  out << '\n';
}

Tensor load_tensor(std::istream& in, const std::string& tag) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("episode dump: truncated record");
  std::istringstream ls(line);
  std::string got;
  size_t ndim;
  ls >> got >> ndim;
  if (got != tag) throw std::runtime_error("episode dump: expected " + tag + ", got " + got);
  Shape shape(ndim);
  Eigen::Index n = 1;
  for (auto& d : shape) {
    ls >> d;
    n *= d;
  }
  Array a(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(ls >> a(i))) throw std::runtime_error("episode dump: short tensor payload");
  return Tensor(std::move(shape), std::move(a));
}

}  // namespace

void dump_episodes(std::ostream& out, const std::vector<Episode>& episodes) {
  out << "sap-episode-dump 1\n";
  char buf[160];
  for (const auto& ep : episodes) {
    std::snprintf(buf, sizeof(buf), "episode %s %d %.17g %.17g %.17g %.17g\n",
                  ep.classification ? "classification" : "regression", ep.n_classes,
                  ep.amplitude, ep.frequency, ep.phase, ep.offset);
    out << buf;
    dump_tensor(out, "support_x", ep.support_x);
    dump_tensor(out, "support_y", ep.support_y);
    dump_tensor(out, "query_x", ep.query_x);
    dump_tensor(out, "query_y", ep.query_y);
  }
}

std::vector<Episode> load_episodes(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "sap-episode-dump 1")
    throw std::runtime_error("episode dump: bad or missing header");
  std::vector<Episode> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, kind;
    Episode ep;
    ls >> tag >> kind >> ep.n_classes >> ep.amplitude >> ep.frequency >> ep.phase >>
        ep.offset;
    if (tag != "episode" || (kind != "regression" && kind != "classification"))
      throw std::runtime_error("episode dump: malformed episode line");
    ep.classification = kind == "classification";
    ep.support_x = load_tensor(in, "support_x");
    ep.support_y = load_tensor(in, "support_y");
    ep.query_x = load_tensor(in, "query_x");
    ep.query_y = load_tensor(in, "query_y");
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace sap
