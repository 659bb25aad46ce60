#include "sap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_set>

namespace sap {

namespace {

thread_local bool g_grad_enabled = true;

Eigen::Index shape_size(const Shape& s) {
  Eigen::Index n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " vs " + shape_str(b));
}

NodePtr make_node(const char* op, const std::vector<Tensor>& inputs, BackwardFn bw) {
  if (!g_grad_enabled) return nullptr;
  bool any = false;
  for (const auto& t : inputs) any = any || t.tracked();
  if (!any) return nullptr;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->backward = std::move(bw);
  node->parents.reserve(inputs.size());
  for (const auto& t : inputs) node->parents.push_back(t.node());
  return node;
}

Tensor make_op(const char* op, const std::vector<Tensor>& inputs, Shape out_shape,
               Array out_data, BackwardFn bw) {
  return Tensor(std::move(out_shape), std::move(out_data),
                make_node(op, inputs, std::move(bw)));
}

// true if `small` equals the trailing dimensions of `big`
bool trailing_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

Tensor ones_const(const Shape& s) { return Tensor::ones(s); }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape shape, Array data, NodePtr node)
    : shape_(std::make_shared<const Shape>(std::move(shape))),
      data_(std::make_shared<const Array>(std::move(data))),
      node_(std::move(node)) {
  if (data_->size() != shape_size(*shape_))
    throw ShapeError("tensor: data length " + std::to_string(data_->size()) +
                     " does not match shape " + shape_str(*shape_));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, Array::Constant(1, v)); }

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, Array::Zero(shape_size(shape)));
}

Tensor Tensor::ones(const Shape& shape) {
  return Tensor(shape, Array::Constant(shape_size(shape), 1.0));
}

Tensor Tensor::constant(const Shape& shape, double v) {
  return Tensor(shape, Array::Constant(shape_size(shape), v));
}

Tensor Tensor::leaf(const Shape& shape, Array data) {
  auto node = std::make_shared<Node>();
  return Tensor(shape, std::move(data), std::move(node));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(*shape_));
  return (*data_)(0);
}

// ---- construction ---------------------------------------------------------------

Tensor create(const Shape& shape, const InitSpec& init, Rng& rng) {
  if (shape.empty()) throw ShapeError("create: empty shape");
  for (auto d : shape)
    if (d < 1) throw ShapeError("create: non-positive dimension in " + shape_str(shape));
  Eigen::Index n = shape_size(shape);
  Array data(n);
  switch (init.policy) {
    case InitPolicy::Zeros: data.setZero(); break;
    case InitPolicy::Ones: data.setConstant(1.0); break;
    case InitPolicy::Constant: data.setConstant(init.a); break;
    case InitPolicy::Uniform:
      for (Eigen::Index i = 0; i < n; ++i) data(i) = rng.uniform(init.a, init.b);
      break;
    case InitPolicy::Normal:
      for (Eigen::Index i = 0; i < n; ++i) data(i) = rng.normal(init.a, init.b);
      break;
  }
  return Tensor(shape, std::move(data));
}

Tensor create(const Shape& shape, const InitSpec& init) {
  if (init.policy == InitPolicy::Uniform || init.policy == InitPolicy::Normal)
    throw std::runtime_error("create: stochastic init policy needs an rng");
  Rng dummy(0);
  return create(shape, init, dummy);
}

// ---- elementwise primitives ------------------------------------------------------

namespace {

// binary op on identical shapes
template <typename F, typename B>
Tensor binary_same(const char* name, const Tensor& a, const Tensor& b, F f, B bw) {
  if (a.shape() != b.shape()) shape_fail(name, a.shape(), b.shape());
  return make_op(name, {a, b}, a.shape(), f(a.array(), b.array()), std::move(bw));
}

// broadcast the smaller operand against the trailing dims of the larger
void align(const char* name, Tensor& a, Tensor& b) {
  if (a.shape() == b.shape()) return;
  if (b.size() == 1 || trailing_suffix(b.shape(), a.shape()))
    b = broadcast_to(b, a.shape());
  else if (a.size() == 1 || trailing_suffix(a.shape(), b.shape()))
    a = broadcast_to(a, b.shape());
  else
    shape_fail(name, a.shape(), b.shape());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor x = a, y = b;
  align("add", x, y);
  return binary_same(
      "add", x, y, [](const Array& u, const Array& v) -> Array { return u + v; },
      [](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{g, g};
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor x = a, y = b;
  align("sub", x, y);
  return binary_same(
      "sub", x, y, [](const Array& u, const Array& v) -> Array { return u - v; },
      [](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> gs(2);
        if (need[0]) gs[0] = g;
        if (need[1]) gs[1] = neg(g);
        return gs;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor x = a, y = b;
  align("mul", x, y);
  return binary_same(
      "mul", x, y, [](const Array& u, const Array& v) -> Array { return u * v; },
      [x, y](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> gs(2);
        if (need[0]) gs[0] = mul(g, y);
        if (need[1]) gs[1] = mul(g, x);
        return gs;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor x = a, y = b;
  align("div", x, y);
  return binary_same(
      "div", x, y, [](const Array& u, const Array& v) -> Array { return u / v; },
      [x, y](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> gs(2);
        if (need[0]) gs[0] = div(g, y);
        if (need[1]) gs[1] = neg(div(mul(g, x), mul(y, y)));
        return gs;
      });
}

Tensor neg(const Tensor& a) {
  return make_op("neg", {a}, a.shape(), -a.array(),
                 [](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{neg(g)};
                 });
}

Tensor scale(const Tensor& a, double c) {
  return make_op("scale", {a}, a.shape(), Array(a.array() * c),
                 [c](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{scale(g, c)};
                 });
}

Tensor exp(const Tensor& a) {
  return make_op("exp", {a}, a.shape(), Array(a.array().exp()),
                 [a](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{mul(g, exp(a))};
                 });
}

Tensor log(const Tensor& a) {
  return make_op("log", {a}, a.shape(), Array(a.array().log()),
                 [a](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{div(g, a)};
                 });
}

Tensor sqrt(const Tensor& a) {
  return make_op("sqrt", {a}, a.shape(), Array(a.array().sqrt()),
                 [a](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{scale(div(g, sqrt(a)), 0.5)};
                 });
}

Tensor relu(const Tensor& a) {
  return make_op("relu", {a}, a.shape(), Array(a.array().max(0.0)),
                 [a](const Tensor& g, const std::vector<bool>&) {
                   // derivative at 0 is defined as 0
                   Tensor mask(a.shape(), Array((a.array() > 0.0).cast<double>()));
                   return std::vector<Tensor>{mul(g, mask)};
                 });
}

// ---- structure -------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  Shape in_shape = a.shape();
  return make_op("reshape", {a}, shape, a.array(),
                 [in_shape](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{reshape(g, in_shape)};
                 });
}

Tensor flatten_rows(const Tensor& a) {
  if (a.shape().size() < 2) shape_fail("flatten_rows", a.shape(), a.shape());
  Eigen::Index rows = a.shape()[0];
  return reshape(a, {rows, a.size() / rows});
}

namespace {

Array transpose_data(const Array& d, Eigen::Index m, Eigen::Index n) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> mat(d.data(), m, n);
  RowMat t = mat.transpose();
  return Eigen::Map<const Array>(t.data(), t.size());
}

}  // namespace

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) shape_fail("transpose", a.shape(), a.shape());
  Eigen::Index m = a.shape()[0], n = a.shape()[1];
  return make_op("transpose", {a}, {n, m}, transpose_data(a.array(), m, n),
                 [](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{transpose(g)};
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    shape_fail("matmul", a.shape(), b.shape());
  Eigen::Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> am(a.array().data(), m, k);
  Eigen::Map<const RowMat> bm(b.array().data(), k, n);
  RowMat out = am * bm;
  Array data = Eigen::Map<const Array>(out.data(), out.size());
  return make_op("matmul", {a, b}, {m, n}, std::move(data),
                 [a, b](const Tensor& g, const std::vector<bool>& need) {
                   std::vector<Tensor> gs(2);
                   if (need[0]) gs[0] = matmul(g, transpose(b));
                   if (need[1]) gs[1] = matmul(transpose(a), g);
                   return gs;
                 });
}

Tensor gather(const Tensor& a, const IndexMap& map, const Shape& out_shape) {
  Eigen::Index n = shape_size(out_shape);
  if (static_cast<Eigen::Index>(map->size()) != n)
    throw ShapeError("gather: map size does not match output shape");
  Array data(n);
  const Array& src = a.array();
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index j = (*map)[i];
    data(i) = j >= 0 ? src(j) : 0.0;
  }
  Shape in_shape = a.shape();
  return make_op("gather", {a}, out_shape, std::move(data),
                 [map, in_shape](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{scatter_sum(g, map, in_shape)};
                 });
}

Tensor scatter_sum(const Tensor& a, const IndexMap& map, const Shape& out_shape) {
  if (static_cast<Eigen::Index>(map->size()) != a.size())
    throw ShapeError("scatter_sum: map size does not match input shape");
  Array data = Array::Zero(shape_size(out_shape));
  const Array& src = a.array();
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    Eigen::Index j = (*map)[i];
    if (j >= 0) data(j) += src(i);
  }
  Shape in_shape = a.shape();
  return make_op("scatter_sum", {a}, out_shape, std::move(data),
                 [map, in_shape](const Tensor& g, const std::vector<bool>&) {
                   return std::vector<Tensor>{gather(g, map, in_shape)};
                 });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Eigen::Index total = shape_size(shape);
  if (a.size() == 1) {
    Tensor rep = matmul(ones_const({total, 1}), reshape(a, {1, 1}));
    return reshape(rep, shape);
  }
  if (!trailing_suffix(a.shape(), shape)) shape_fail("broadcast_to", a.shape(), shape);
  Eigen::Index rest = a.size();
  Eigen::Index lead = total / rest;
  Tensor rep = matmul(ones_const({lead, 1}), reshape(a, {1, rest}));
  return reshape(rep, shape);
}

// ---- reductions -------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  return reshape(matmul(reshape(a, {1, a.size()}), ones_const({a.size(), 1})), {1});
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor row_sum(const Tensor& a) {
  if (a.shape().size() != 2) shape_fail("row_sum", a.shape(), a.shape());
  return matmul(a, ones_const({a.shape()[1], 1}));
}

Tensor col_broadcast(const Tensor& a, Eigen::Index n) {
  if (a.shape().size() != 2 || a.shape()[1] != 1) shape_fail("col_broadcast", a.shape(), {n});
  return matmul(a, ones_const({1, n}));
}

// ---- conv / pool / norm -------------------------------------------------------------

namespace {

struct ConvGeom {
  Eigen::Index B, C, H, W, Co, KH, KW;
};

IndexMap im2col_map(const ConvGeom& g) {
  static std::map<std::array<Eigen::Index, 6>, IndexMap> cache;
  std::array<Eigen::Index, 6> key{g.B, g.C, g.H, g.W, g.KH, g.KW};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Eigen::Index ph = g.KH / 2, pw = g.KW / 2;
  auto map = std::make_shared<std::vector<Eigen::Index>>();
  map->resize(g.B * g.H * g.W * g.C * g.KH * g.KW);
  Eigen::Index idx = 0;
  for (Eigen::Index b = 0; b < g.B; ++b)
    for (Eigen::Index i = 0; i < g.H; ++i)
      for (Eigen::Index j = 0; j < g.W; ++j)
        for (Eigen::Index c = 0; c < g.C; ++c)
          for (Eigen::Index u = 0; u < g.KH; ++u)
            for (Eigen::Index v = 0; v < g.KW; ++v) {
              Eigen::Index si = i + u - ph, sj = j + v - pw;
              bool in = si >= 0 && si < g.H && sj >= 0 && sj < g.W;
              (*map)[idx++] = in ? ((b * g.C + c) * g.H + si) * g.W + sj : -1;
            }
  IndexMap m = map;
  cache.emplace(key, m);
  return m;
}

// [B*H*W, Co] row-major -> [B, Co, H, W]
IndexMap conv_out_map(const ConvGeom& g) {
  static std::map<std::array<Eigen::Index, 4>, IndexMap> cache;
  std::array<Eigen::Index, 4> key{g.B, g.Co, g.H, g.W};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto map = std::make_shared<std::vector<Eigen::Index>>();
  map->resize(g.B * g.Co * g.H * g.W);
  Eigen::Index idx = 0;
  for (Eigen::Index b = 0; b < g.B; ++b)
    for (Eigen::Index co = 0; co < g.Co; ++co)
      for (Eigen::Index i = 0; i < g.H; ++i)
        for (Eigen::Index j = 0; j < g.W; ++j)
          (*map)[idx++] = ((b * g.H + i) * g.W + j) * g.Co + co;
  IndexMap m = map;
  cache.emplace(key, m);
  return m;
}

// [B,C,H,W] -> [C, B*H*W] and its inverse
IndexMap channelize_map(Eigen::Index B, Eigen::Index C, Eigen::Index S, bool inverse) {
  static std::map<std::array<Eigen::Index, 4>, IndexMap> cache;
  std::array<Eigen::Index, 4> key{B, C, S, inverse ? 1 : 0};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto map = std::make_shared<std::vector<Eigen::Index>>();
  map->resize(B * C * S);
  if (!inverse) {
    Eigen::Index idx = 0;
    for (Eigen::Index c = 0; c < C; ++c)
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index s = 0; s < S; ++s) (*map)[idx++] = (b * C + c) * S + s;
  } else {
    Eigen::Index idx = 0;
    for (Eigen::Index b = 0; b < B; ++b)
      for (Eigen::Index c = 0; c < C; ++c)
        for (Eigen::Index s = 0; s < S; ++s) (*map)[idx++] = c * (B * S) + b * S + s;
  }
  IndexMap m = map;
  cache.emplace(key, m);
  return m;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k) {
  if (x.shape().size() != 4 || k.shape().size() != 4 || x.shape()[1] != k.shape()[1])
    shape_fail("conv2d", x.shape(), k.shape());
  ConvGeom g{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
             k.shape()[0], k.shape()[2], k.shape()[3]};
  if (g.KH % 2 == 0 || g.KW % 2 == 0)
    throw ShapeError("conv2d: kernel dims must be odd for same padding");
  Eigen::Index patch = g.C * g.KH * g.KW;
  Tensor cols = gather(x, im2col_map(g), {g.B * g.H * g.W, patch});
  Tensor kmat = reshape(k, {g.Co, patch});
  Tensor prod = matmul(cols, transpose(kmat));  // [B*H*W, Co]
  return gather(prod, conv_out_map(g), {g.B, g.Co, g.H, g.W});
}

Tensor maxpool2d(const Tensor& x) {
  if (x.shape().size() != 4) shape_fail("maxpool2d", x.shape(), x.shape());
  Eigen::Index B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("maxpool2d: spatial dims must be even, got " + shape_str(x.shape()));
  Eigen::Index Ho = H / 2, Wo = W / 2;
  auto map = std::make_shared<std::vector<Eigen::Index>>(B * C * Ho * Wo);
  const Array& d = x.array();
  Eigen::Index idx = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c)
      for (Eigen::Index i = 0; i < Ho; ++i)
        for (Eigen::Index j = 0; j < Wo; ++j) {
          Eigen::Index base = ((b * C + c) * H + 2 * i) * W + 2 * j;
          Eigen::Index best = base;
          for (Eigen::Index u = 0; u < 2; ++u)
            for (Eigen::Index v = 0; v < 2; ++v) {
              Eigen::Index p = base + u * W + v;
              if (d(p) > d(best)) best = p;  // strict: ties keep first index
            }
          (*map)[idx++] = best;
        }
  return gather(x, map, {B, C, Ho, Wo});
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  Eigen::Index B, C, S;
  if (x.shape().size() == 4) {
    B = x.shape()[0]; C = x.shape()[1]; S = x.shape()[2] * x.shape()[3];
  } else if (x.shape().size() == 2) {
    B = x.shape()[0]; C = x.shape()[1]; S = 1;
  } else {
    shape_fail("batchnorm", x.shape(), x.shape());
  }
  if (gamma.size() != C || beta.size() != C) shape_fail("batchnorm", gamma.shape(), {C});
  Eigen::Index n = B * S;
  Tensor xt = gather(x, channelize_map(B, C, S, false), {C, n});
  Tensor mu = scale(row_sum(xt), 1.0 / static_cast<double>(n));  // [C,1]
  Tensor xc = sub(xt, col_broadcast(mu, n));
  Tensor var = scale(row_sum(mul(xc, xc)), 1.0 / static_cast<double>(n));
  Tensor inv = div(Tensor::ones({C, 1}), sqrt(add(var, Tensor::constant({C, 1}, eps))));
  Tensor norm = mul(xc, col_broadcast(inv, n));
  Tensor out = add(mul(norm, col_broadcast(reshape(gamma, {C, 1}), n)),
                   col_broadcast(reshape(beta, {C, 1}), n));
  return gather(out, channelize_map(B, C, S, true), x.shape());
}

Tensor softmax(const Tensor& logits) {
  bool vec = logits.shape().size() == 1;
  Tensor z = vec ? reshape(logits, {1, logits.size()}) : logits;
  if (z.shape().size() != 2) shape_fail("softmax", logits.shape(), logits.shape());
  Eigen::Index B = z.shape()[0], N = z.shape()[1];
  // subtracting the (detached) row max leaves softmax and its gradients unchanged
  Array m(B);
  for (Eigen::Index b = 0; b < B; ++b)
    m(b) = z.array().segment(b * N, N).maxCoeff();
  Tensor shifted = sub(z, col_broadcast(Tensor({B, 1}, std::move(m)), N));
  Tensor e = exp(shifted);
  Tensor out = div(e, col_broadcast(row_sum(e), N));
  return vec ? reshape(out, logits.shape()) : out;
}

// ---- losses --------------------------------------------------------------------

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_fail("mse_loss", pred.shape(), target.shape());
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  bool vec = logits.shape().size() == 1;
  Tensor z = vec ? reshape(logits, {1, logits.size()}) : logits;
  if (z.shape().size() != 2) shape_fail("softmax_cross_entropy", logits.shape(), logits.shape());
  Eigen::Index B = z.shape()[0], N = z.shape()[1];
  if (static_cast<Eigen::Index>(labels.size()) != B)
    throw ShapeError("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(B) + " rows");
  auto pick = std::make_shared<std::vector<Eigen::Index>>(B);
  Array m(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= N)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                              " out of range [0," + std::to_string(N) + ")");
    (*pick)[b] = b * N + labels[b];
    m(b) = z.array().segment(b * N, N).maxCoeff();
  }
  Tensor shifted = sub(z, col_broadcast(Tensor({B, 1}, std::move(m)), N));
  Tensor lse = log(row_sum(exp(shifted)));            // [B,1]
  Tensor picked = gather(shifted, pick, {B, 1});      // logit of the true class
  return mean(sub(lse, picked));
}

// ---- gradient ------------------------------------------------------------------

GradientMap gradient(const Tensor& loss, const std::vector<ParamHandle>& wrt,
                     bool create_graph) {
  if (loss.size() != 1) throw ShapeError("gradient: loss must be scalar");
  GradientMap out;
  auto zeros_for = [](const ParamHandle& p) { return Tensor::zeros(p.value.shape()); };
  if (!loss.tracked()) {
    for (const auto& p : wrt) out[p.id] = zeros_for(p);
    return out;
  }

  // iterative DFS postorder: parents appear before their consumers
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Tensor> acc;
  acc[loss.node().get()] = Tensor::ones(loss.shape());

  bool prev = grad_enabled();
  set_grad_enabled(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->is_leaf()) continue;
    auto found = acc.find(node);
    if (found == acc.end()) continue;  // not on any path from the loss
    Tensor g = found->second;
    std::vector<bool> need(node->parents.size());
    for (size_t i = 0; i < node->parents.size(); ++i) need[i] = node->parents[i] != nullptr;
    std::vector<Tensor> gs = node->backward(g, need);
    for (size_t i = 0; i < node->parents.size(); ++i) {
      if (!need[i] || !gs[i].defined()) continue;
      Node* p = node->parents[i].get();
      auto slot = acc.find(p);
      if (slot == acc.end())
        acc.emplace(p, gs[i]);
      else
        slot->second = add(slot->second, gs[i]);
    }
  }
  set_grad_enabled(prev);

  for (const auto& p : wrt) {
    Node* key = p.value.node().get();
    auto found = key ? acc.find(key) : acc.end();
    if (found == acc.end())
      out[p.id] = zeros_for(p);
    else
      out[p.id] = create_graph ? found->second : found->second.detach();
  }
  return out;
}

GradientMap finite_diff_oracle(
    const std::function<double(const std::vector<ParamHandle>&)>& f,
    const std::vector<ParamHandle>& params, double h) {
  if (h <= 0) throw std::invalid_argument("finite_diff_oracle: h must be positive");
  GradientMap out;
  std::vector<ParamHandle> work = params;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const ParamHandle& p = params[pi];
    Array grad(p.value.size());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      Array plus = p.value.array();
      Array minus = p.value.array();
      plus(i) += h;
      minus(i) -= h;
      work[pi] = {p.id, Tensor::leaf(p.value.shape(), std::move(plus)), p.trainable};
      double fp = f(work);
      work[pi] = {p.id, Tensor::leaf(p.value.shape(), std::move(minus)), p.trainable};
      double fm = f(work);
      grad(i) = (fp - fm) / (2.0 * h);
    }
    work[pi] = p;
    out[p.id] = Tensor(p.value.shape(), std::move(grad));
  }
  return out;
}

}  // namespace sap
