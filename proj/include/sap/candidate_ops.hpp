#pragma once

#include <string>
#include <vector>

#include "sap/param_env.hpp"
#include "sap/rng.hpp"
#include "sap/tensor.hpp"

namespace sap {

// Candidate operations, fully-connected and convolutional columns. Every kind
// maps its input to an output of identical dimensionality.
enum class OpKind {
  Identity,
  MatMul,       // d x d
  SvdMatMul,    // U d x v, sigma v, V d x v; residual z + U diag(sigma) V^T z
  ElemScale,    // d
  ScalarScale,  // 1
  VectorShift,  // d
  ScalarShift,  // 1
  ConvIdentity,
  Conv,            // C x C x k x k
  SvdConv,         // per channel pair: U k x v, sigma v, V k x v; residual
  Conv1x1,         // C x C
  MtlScale,        // phi C x C over a fixed internal k x k kernel
  ChannelScale,    // C
  ChannelShift,    // C
  ScalarShiftConv  // 1
};

struct OpSpec {
  OpKind kind = OpKind::Identity;
  int rank = 0;  // SVD kinds only

  bool operator==(const OpSpec&) const = default;
};

bool is_conv_kind(OpKind kind);
std::string kind_name(OpKind kind);
std::string spec_name(const OpSpec& spec);        // e.g. "svd:5"
OpSpec parse_op_spec(const std::string& name);    // inverse of spec_name

// Dimensions an operation acts on: feature dim for FC kinds, channel count and
// kernel size for conv kinds.
struct OpDims {
  Eigen::Index d = 0;
  Eigen::Index channels = 0;
  Eigen::Index ksize = 3;
};

struct CandidateOp {
  OpSpec spec;
  OpDims dims;
  std::vector<ParamHandle> params;         // phi slice; empty for identity
  std::vector<ParamHandle> frozen_params;  // theta slice (MtlScale kernel K)
};

// Parameters initialized to leave the input unaffected: transforms to the
// identity, scales to 1, shifts to 0, SVD singular values to 0 with
// U, V ~ N(0, 0.01).
CandidateOp build_op(const OpSpec& spec, const OpDims& dims, Rng& rng,
                     const std::string& id_prefix);

// z is [B, d] for FC kinds and [B, C, H, W] for conv kinds.
Tensor apply_op(const CandidateOp& op, const Tensor& z, const ParamEnv& env);

inline Tensor apply_op(const CandidateOp& op, const Tensor& z) {
  return apply_op(op, z, ParamEnv{});
}

// A layer's candidate pool with its strength logits (lambda slice). Logits are
// zero at build time, so strengths start uniform.
struct OperationSet {
  std::vector<CandidateOp> ops;
  ParamHandle logits;
};

OperationSet build_operation_set(const std::vector<OpSpec>& pool, const OpDims& dims,
                                 Rng& rng, const std::string& id_prefix);

// softmax of the logits; on the simplex by construction
Tensor strengths(const OperationSet& set, const ParamEnv& env = ParamEnv{});

// convex combination of partial outputs, sum_i w_i o_i(z)
Tensor apply_operation_set(const OperationSet& set, const Tensor& z,
                           const ParamEnv& env = ParamEnv{});

// Single (d+1)x(d+1) affine matrix (homogeneous coordinates) equivalent to the
// set on dimension d. Only defined for fully-connected pools.
Tensor fold_operation_set(const OperationSet& set, Eigen::Index d,
                          const ParamEnv& env = ParamEnv{});

}  // namespace sap
