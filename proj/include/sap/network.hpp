#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sap/candidate_ops.hpp"
#include "sap/param_env.hpp"
#include "sap/rng.hpp"
#include "sap/tensor.hpp"

namespace sap {

enum class LearnerKind { Sap, Maml, Tnet };

std::string learner_name(LearnerKind k);
LearnerKind parse_learner(const std::string& name);

// Backbone description. MLP: layer_sizes like {1, 40, 40, 1}. Conv: blocks of
// conv/maxpool/batchnorm/relu followed by a linear head.
struct NetworkSpec {
  bool conv = false;
  std::vector<Eigen::Index> layer_sizes;     // MLP
  Eigen::Index in_channels = 1;              // conv
  Eigen::Index side = 8;                     // conv input is side x side
  std::vector<Eigen::Index> conv_channels;   // per block
  Eigen::Index ksize = 3;
  Eigen::Index n_classes = 2;

  Eigen::Index num_op_sets() const;  // L + 1 insertion points
};

// Per-insertion-point candidate pools. Empty inner vector = no operation set
// at that point. When not specified, defaults are derived from the backbone.
struct PoolConfig {
  std::vector<std::vector<OpSpec>> sets;
};

// Default pools: every FC kind valid for the dimension (SVD ranks per
// `svd_ranks`) at FC insertion points; every conv kind (SVD rank
// `conv_svd_rank`) before each conv layer; FC kinds on the head output.
PoolConfig default_pools(const NetworkSpec& spec, const std::vector<int>& svd_ranks = {5, 10, 15},
                         int conv_svd_rank = 2);

// A base-learner network with interleaved operation sets (SAP), a plain
// network (MAML), or a plain network with frozen linear warps after every
// affine layer (T-Net).
class Network {
 public:
  static Network build(LearnerKind learner, const NetworkSpec& spec,
                       const PoolConfig& pools, Rng& rng);

  // x is [B, d_in] for MLP backbones, [B, C, side, side] for conv ones
  Tensor forward(const Tensor& x, const ParamEnv& env) const;
  Tensor forward(const Tensor& x) const { return forward(x, ParamEnv(&store_)); }

  ParamEnv env() const { return ParamEnv(&store_); }

  LearnerKind learner() const { return learner_; }
  const NetworkSpec& spec() const { return spec_; }
  const PoolConfig& pools() const { return pools_; }
  const std::vector<OperationSet>& op_sets() const { return op_sets_; }
  const ParamStore& store() const { return store_; }

  // trainable parameters only
  Eigen::Index param_count() const;

  // disjoint, exhaustive partition of trainable handles
  std::vector<ParamHandle> theta() const;   // base weights incl. warps
  std::vector<ParamHandle> phi() const;     // candidate operation parameters
  std::vector<ParamHandle> lambda() const;  // strength logits
  std::vector<ParamHandle> all_trainable() const { return store_.trainable(); }

  // parameters updated by the inner loop for this learner kind
  std::vector<ParamHandle> inner_params() const;

  // replace a stored value (outer update); the new tensor becomes a fresh leaf
  void assign(const std::string& id, const Tensor& value);

  // deep copy with freshly created leaves
  Network clone() const;

 private:
  struct Step {
    enum class Kind { OpSet, Affine, Relu, Conv, Warp, ConvWarp, MaxPool, BatchNorm, Flatten };
    Kind kind;
    int set_index = -1;       // OpSet
    std::string w, b;         // Affine/Conv (w,b), Warp (w), BatchNorm (gamma,beta)
  };

  LearnerKind learner_;
  NetworkSpec spec_;
  PoolConfig pools_;
  std::vector<Step> steps_;
  std::vector<OperationSet> op_sets_;
  ParamStore store_;
};

}  // namespace sap
