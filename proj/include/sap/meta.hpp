#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sap/network.hpp"
#include "sap/tasks.hpp"

namespace sap {

enum class GradientOrder { First, Second };
enum class OuterOpt { Sgd, Adam };

GradientOrder parse_gradient_order(const std::string& name);
OuterOpt parse_outer_opt(const std::string& name);

struct MetaConfig {
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  int inner_steps_train = 1;   // T
  int inner_steps_eval = 1;    // >= T
  int meta_batch_size = 4;     // M
  GradientOrder gradient_order = GradientOrder::Second;
  OuterOpt outer_optimizer = OuterOpt::Adam;
  LearnerKind learner = LearnerKind::Sap;

  void validate() const;  // throws std::invalid_argument on a broken invariant
};

// non-finite loss or gradient during training
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, int step_index)
      : std::runtime_error(what), step(step_index) {}
  int step;
};

struct AdaptResult {
  ParamEnv env;  // adapted parameter values as per-task overrides
  std::vector<double> support_loss_trace;
  Tensor query_loss;
};

// loss by episode kind: MSE for regression, softmax cross-entropy otherwise
Tensor episode_loss(const Network& net, const Tensor& x, const Tensor& y,
                    const Episode& ep, const ParamEnv& env);

// `steps` gradient-descent steps on the support loss over the learner's
// inner parameters (phi for SAP; base weights for MAML/T-Net, warps frozen).
// With track_for_meta and a second-order config the update chain stays
// differentiable w.r.t. all meta-parameters; first-order detaches the
// inner gradients. theta and lambda stored values are never touched.
AdaptResult inner_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg,
                        int steps, bool track_for_meta);

inline AdaptResult inner_adapt(const Network& net, const Episode& ep,
                               const MetaConfig& cfg, bool track_for_meta) {
  return inner_adapt(net, ep, cfg, cfg.inner_steps_train, track_for_meta);
}

// named baseline entry points; both defer to the same inner loop
AdaptResult maml_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg);
AdaptResult tnet_adapt(const Network& net, const Episode& ep, const MetaConfig& cfg);

// sum over the batch of query losses at the adapted parameters (tracked)
Tensor meta_objective(const Network& net, const std::vector<Episode>& batch,
                      const MetaConfig& cfg);

// serializable optimizer state (step count and Adam moments, keyed by id)
struct OptState {
  int64_t t = 0;
  std::map<std::string, Array> m, v;
};

// Outer optimizer state; Adam moments are keyed by parameter id.
class OuterOptimizer {
 public:
  OuterOptimizer(OuterOpt kind, double lr) : kind_(kind), lr_(lr) {}

  // applies one update to every trainable parameter with a gradient entry
  void step(Network& net, const GradientMap& grads);

  int64_t steps_taken() const { return t_; }

  OptState state() const;
  void restore(const OptState& s);

 private:
  OuterOpt kind_;
  double lr_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Array> m_, v_;
};

// one meta-update: grad of meta_objective w.r.t. all trainable parameters,
// then an optimizer step. Returns the batch meta-loss (mean query loss).
double outer_step(Network& net, const std::vector<Episode>& batch, const MetaConfig& cfg,
                  OuterOptimizer& opt);

// v - alpha (W grad_O L) x: predicted post-update output of a linear layer
// v = W O x after one gradient step on O; exact for linear layers.
Tensor predict_post_update_output(const Tensor& W, const Tensor& O, const Tensor& x,
                                  double alpha, const Tensor& grad_O);

}  // namespace sap
