#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sap/rng.hpp"

namespace sap {

using Array = Eigen::ArrayXd;
using Shape = std::vector<Eigen::Index>;

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

class Tensor;
struct Node;
using NodePtr = std::shared_ptr<Node>;

// Backward closure: upstream gradient plus a mask of which parents actually
// need a gradient. Entries for unneeded parents may be left default-constructed.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor&, const std::vector<bool>&)>;

struct Node {
  std::vector<NodePtr> parents;
  BackwardFn backward;  // empty for leaves
  const char* op = "leaf";
  bool is_leaf() const { return !backward; }
};

// Immutable n-dimensional double array, row-major, optionally attached to the
// computation graph through a shared node.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array data, NodePtr node = nullptr);

  static Tensor scalar(double v);
  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor constant(const Shape& shape, double v);
  static Tensor from(const Shape& shape, Array data) { return Tensor(shape, std::move(data)); }
  // value with a fresh leaf node, i.e. a differentiation root
  static Tensor leaf(const Shape& shape, Array data);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return *shape_; }
  Eigen::Index size() const { return data_->size(); }
  const Array& array() const { return *data_; }
  double item() const;

  Tensor detach() const { return Tensor(*shape_, *data_); }
  const NodePtr& node() const { return node_; }
  bool tracked() const { return node_ != nullptr; }

 private:
  std::shared_ptr<const Shape> shape_;
  std::shared_ptr<const Array> data_;
  NodePtr node_;
};

// Scoped switch that stops new operations from being recorded.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();
void set_grad_enabled(bool on);

// ---- construction -----------------------------------------------------------

enum class InitPolicy { Zeros, Ones, Constant, Uniform, Normal };

struct InitSpec {
  InitPolicy policy = InitPolicy::Zeros;
  double a = 0.0;  // constant c / uniform lower / normal mean
  double b = 0.0;  // uniform upper / normal sigma
  static InitSpec zeros() { return {InitPolicy::Zeros}; }
  static InitSpec ones() { return {InitPolicy::Ones}; }
  static InitSpec constant(double c) { return {InitPolicy::Constant, c}; }
  static InitSpec uniform(double lo, double hi) { return {InitPolicy::Uniform, lo, hi}; }
  static InitSpec normal(double mu, double sigma) { return {InitPolicy::Normal, mu, sigma}; }
};

Tensor create(const Shape& shape, const InitSpec& init, Rng& rng);
Tensor create(const Shape& shape, const InitSpec& init);  // non-stochastic policies only

// ---- elementwise / arithmetic ----------------------------------------------

// add/sub/mul/div broadcast one operand against the trailing dimensions of the
// other (or from a single-element tensor).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- structure ---------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor flatten_rows(const Tensor& a);  // [B, ...] -> [B, rest]
Tensor transpose(const Tensor& a);     // 2-D
Tensor matmul(const Tensor& a, const Tensor& b);

// out[i] = map[i] >= 0 ? a.flat[map[i]] : 0 — linear gather; exact adjoint of
// scatter_sum with the same map.
using IndexMap = std::shared_ptr<const std::vector<Eigen::Index>>;
Tensor gather(const Tensor& a, const IndexMap& map, const Shape& out_shape);
Tensor scatter_sum(const Tensor& a, const IndexMap& map, const Shape& out_shape);

// replicate to `shape`; a.shape must be a trailing suffix of shape or size 1
Tensor broadcast_to(const Tensor& a, const Shape& shape);

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a);   // -> shape {1}
Tensor mean(const Tensor& a);  // -> shape {1}
Tensor row_sum(const Tensor& a);            // [m,n] -> [m,1]
Tensor col_broadcast(const Tensor& a, Eigen::Index n);  // [m,1] -> [m,n]

// ---- network primitives --------------------------------------------------------

// stride 1, zero "same" padding; x [B,C,H,W], k [Co,C,kh,kw] (odd kh,kw)
Tensor conv2d(const Tensor& x, const Tensor& k);
// 2x2 window, stride 2; ties take the first index in row-major order
Tensor maxpool2d(const Tensor& x);
// per-channel statistics over the whole batch (and spatial dims); gamma/beta [C]
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);
// row-wise softmax on [B,N] (or a single row [N])
Tensor softmax(const Tensor& logits);

// ---- losses ------------------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
inline Tensor softmax_cross_entropy(const Tensor& logits, int label) {
  return softmax_cross_entropy(logits, std::vector<int>{label});
}

// ---- parameters and gradients -------------------------------------------------

struct ParamHandle {
  std::string id;
  Tensor value;  // leaf at creation; may be an adapted (non-leaf) tensor
  bool trainable = true;
};

using GradientMap = std::unordered_map<std::string, Tensor>;

// Exact reverse-mode gradients of a scalar loss. With create_graph the
// returned tensors stay on the graph so they can be differentiated again.
// Parameters unreachable from the loss get zero gradients.
GradientMap gradient(const Tensor& loss, const std::vector<ParamHandle>& wrt,
                     bool create_graph = false);

// Central-difference oracle, independent of the reverse-mode path.
GradientMap finite_diff_oracle(
    const std::function<double(const std::vector<ParamHandle>&)>& f,
    const std::vector<ParamHandle>& params, double h = 1e-5);

}  // namespace sap
