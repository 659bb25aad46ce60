#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sap/rng.hpp"
#include "sap/tensor.hpp"

namespace sap {

// One few-shot task: a support set for adaptation and a query set for
// evaluation. Regression tensors are [n, d]; classification inputs are
// [n, C, side, side] with integer class labels in y.
struct Episode {
  Tensor support_x, support_y;
  Tensor query_x, query_y;
  bool classification = false;
  int n_classes = 0;
  // ground-truth parameters of g(x) = A sin(f x - p) + beta, for debugging
  double amplitude = 1, frequency = 1, phase = 0, offset = 0;
};

// Which parameters of g(x) = A sin(f x - p) + beta vary across tasks.
// Non-varied parameters stay at values that leave the sine unaltered:
// A = f = 1, p = 0, beta = 0.
struct TaskFamily {
  bool vary_amplitude = false;
  bool vary_frequency = false;
  bool vary_phase = false;
  bool vary_offset = false;

  std::string name() const;  // e.g. "amp+phase", "none"
};

// all 2^4 combinations in a stable order (bit 0 = amplitude .. bit 3 = offset)
std::vector<TaskFamily> enumerate_task_families();

// A ~ U[0.1, 5], p ~ U[0, pi], x ~ U[-5, 5], y = A sin(x - p)
Episode sample_sine_task(Rng& rng, int k, int n_query = 50);

// varied parameters: A ~ U[0.1, 5], f ~ U[0.5, 2], p ~ U[0, pi], beta ~ U[-2, 2]
Episode sample_family_task(const TaskFamily& family, Rng& rng, int k = 20,
                           int n_query = 50);

// N-way k-shot classification over oriented bar / blob patterns on a
// side x side single-channel grid with additive Gaussian pixel noise.
// Query is 15 examples per class.
Episode sample_synthetic_image_task(Rng& rng, int n_way, int k, Eigen::Index side = 8,
                                    double noise = 0.1);
Eigen::Index synthetic_pattern_count();

// line-delimited text dump with a versioned header; round-trips bit-exactly
void dump_episodes(std::ostream& out, const std::vector<Episode>& episodes);
std::vector<Episode> load_episodes(std::istream& in);

}  // namespace sap
