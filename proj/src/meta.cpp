#include "sap/meta.hpp"

#include <cmath>

namespace sap {

GradientOrder parse_gradient_order(const std::string& name) {
  if (name == "first") return GradientOrder::First;
  if (name == "second") return GradientOrder::Second;
  throw std::invalid_argument("unknown gradient order: " + name);
}

OuterOpt parse_outer_opt(const std::string& name) {
  if (name == "sgd") return OuterOpt::Sgd;
  if (name == "adam") return OuterOpt::Adam;
  throw std::invalid_argument("unknown outer optimizer: " + name);
}

void MetaConfig::validate() const {
  if (!(inner_lr > 0)) throw std::invalid_argument("inner_lr must be > 0");
  if (!(outer_lr > 0)) throw std::invalid_argument("outer_lr must be > 0");
  if (inner_steps_train < 1) throw std::invalid_argument("inner_steps_train must be >= 1");
  if (inner_steps_eval < inner_steps_train)
    throw std::invalid_argument("inner_steps_eval must be >= inner_steps_train");
  if (meta_batch_size < 1) throw std::invalid_argument("meta_batch_size must be >= 1");
}

Tensor episode_loss(const Network& net, const Tensor& x, const Tensor& y,
                    const Episode& ep, const ParamEnv& env) {
  Tensor out = net.forward(x, env);
  if (!ep.classification) return mse_loss(out, y);
  std::vector<int> labels(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    labels[i] = static_cast<int>(y.array()(i));
  return softmax_cross_entropy(out, labels);
}

AdaptResult inner_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg,
                        int steps, bool track_for_meta) {
  if (ep.support_x.size() == 0)
    throw std::invalid_argument("inner_adapt: empty support set");
  AdaptResult res;
  res.env = net.env();
  std::vector<ParamHandle> params = net.inner_params();
  bool keep_graph = track_for_meta && cfg.gradient_order == GradientOrder::Second;
  for (int t = 0; t < steps; ++t) {
    Tensor loss = episode_loss(net, ep.support_x, ep.support_y, ep, res.env);
    double l = loss.item();
    if (!std::isfinite(l))
      throw DivergenceError("non-finite support loss at inner step " + std::to_string(t),
                            t);
    res.support_loss_trace.push_back(l);
    GradientMap g = gradient(loss, params, keep_graph);
    for (auto& h : params) {
      Tensor updated = sub(h.value, scale(g.at(h.id), cfg.inner_lr));
      res.env.set(h.id, updated);
      h.value = updated;  // next step differentiates against the new value
    }
  }
  res.query_loss = episode_loss(net, ep.query_x, ep.query_y, ep, res.env);
  if (!std::isfinite(res.query_loss.item()))
    throw DivergenceError("non-finite query loss after adaptation", steps);
  return res;
}

AdaptResult maml_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg) {
  if (net.learner() != LearnerKind::Maml)
    throw std::invalid_argument("maml_adapt expects a MAML network");
  return inner_adapt(net, ep, cfg, cfg.inner_steps_train, true);
}

AdaptResult tnet_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg) {
  if (net.learner() != LearnerKind::Tnet)
    throw std::invalid_argument("tnet_adapt expects a T-Net network");
  return inner_adapt(net, ep, cfg, cfg.inner_steps_train, true);
}

Tensor meta_objective(const Network& net, const std::vector<Episode>& batch,
                      const MetaConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("meta_objective: empty batch");
  Tensor total = Tensor::scalar(0.0);
  for (const auto& ep : batch) {
    AdaptResult r = cfg.inner_steps_train == 0
                        ? AdaptResult{net.env(), {},
                                      episode_loss(net, ep.query_x, ep.query_y, ep,
                                                   net.env())}
                        : inner_adapt(net, ep, cfg, cfg.inner_steps_train, true);
    total = add(total, r.query_loss);
  }
  return total;
}

void OuterOptimizer::step(Network& net, const GradientMap& grads) {
  // validate every gradient before touching any parameter, so a divergence
  // never leaves the network half-updated
  for (const auto& h : net.all_trainable()) {
    auto it = grads.find(h.id);
    if (it != grads.end() && !it->second.array().isFinite().all())
      throw DivergenceError("non-finite outer gradient for " + h.id,
                            static_cast<int>(t_ + 1));
  }
  ++t_;
  for (const auto& h : net.all_trainable()) {
    auto it = grads.find(h.id);
    if (it == grads.end()) continue;
    const Array& g = it->second.array();
    Array value = h.value.array();
    if (kind_ == OuterOpt::Sgd) {
      value -= lr_ * g;
    } else {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      Array& m = m_.try_emplace(h.id, Array::Zero(g.size())).first->second;
      Array& v = v_.try_emplace(h.id, Array::Zero(g.size())).first->second;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g.square();
      double tf = static_cast<double>(t_);
      Array mhat = m / (1 - std::pow(b1, tf));
      Array vhat = v / (1 - std::pow(b2, tf));
      value -= lr_ * mhat / (vhat.sqrt() + eps);
    }
    net.assign(h.id, Tensor(h.value.shape(), std::move(value)));
  }
}

OptState OuterOptimizer::state() const {
  OptState s;
  s.t = t_;
  for (const auto& [id, a] : m_) s.m.emplace(id, a);
  for (const auto& [id, a] : v_) s.v.emplace(id, a);
  return s;
}

void OuterOptimizer::restore(const OptState& s) {
  t_ = s.t;
  m_.clear();
  v_.clear();
  for (const auto& [id, a] : s.m) m_.emplace(id, a);
  for (const auto& [id, a] : s.v) v_.emplace(id, a);
}

double outer_step(Network& net, const std::vector<Episode>& batch, const MetaConfig& cfg,
                  OuterOptimizer& opt) {
  Tensor objective = meta_objective(net, batch, cfg);
  GradientMap grads = gradient(objective, net.all_trainable());
  opt.step(net, grads);
  return objective.item() / static_cast<double>(batch.size());
}

Tensor predict_post_update_output(const Tensor& W, const Tensor& O, const Tensor& x,
                                  double alpha, const Tensor& grad_O) {
  // v - alpha (W grad_O) x, all column vectors
  Tensor v = matmul(W, matmul(O, x));
  return sub(v, scale(matmul(matmul(W, grad_O), x), alpha));
}

}  // namespace sap
