#include "sap/candidate_ops.hpp"

#include <unordered_map>

namespace sap {

namespace {

IndexMap iota_map(Eigen::Index offset, Eigen::Index len) {
  auto m = std::make_shared<std::vector<Eigen::Index>>(len);
  for (Eigen::Index i = 0; i < len; ++i) (*m)[i] = offset + i;
  return m;
}

Tensor slice_flat(const Tensor& t, Eigen::Index offset, const Shape& shape) {
  Eigen::Index len = 1;
  for (auto d : shape) len *= d;
  return gather(t, iota_map(offset, len), shape);
}

Tensor place_flat(const Tensor& t, Eigen::Index offset, const Shape& out_shape) {
  return scatter_sum(t, iota_map(offset, t.size()), out_shape);
}

// p [C] -> value at (b,c,h,w) is p[c]
Tensor channel_broadcast(const Tensor& p, const Shape& shape) {
  Eigen::Index B = shape[0], C = shape[1], S = shape[2] * shape[3];
  auto m = std::make_shared<std::vector<Eigen::Index>>(B * C * S);
  Eigen::Index idx = 0;
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index c = 0; c < C; ++c)
      for (Eigen::Index s = 0; s < S; ++s) (*m)[idx++] = c;
  return gather(p, m, shape);
}

// phi [C,C] -> value at (co,ci,u,v) is phi[co,ci]
Tensor kernel_broadcast(const Tensor& phi, Eigen::Index C, Eigen::Index k) {
  auto m = std::make_shared<std::vector<Eigen::Index>>(C * C * k * k);
  Eigen::Index idx = 0;
  for (Eigen::Index a = 0; a < C * C; ++a)
    for (Eigen::Index s = 0; s < k * k; ++s) (*m)[idx++] = a;
  return gather(phi, m, {C, C, k, k});
}

Array identity_matrix(Eigen::Index d) {
  Array a = Array::Zero(d * d);
  for (Eigen::Index i = 0; i < d; ++i) a(i * d + i) = 1.0;
  return a;
}

// center delta on matching channels
Array identity_kernel(Eigen::Index C, Eigen::Index k) {
  Array a = Array::Zero(C * C * k * k);
  Eigen::Index center = (k / 2) * k + k / 2;
  for (Eigen::Index c = 0; c < C; ++c) a((c * C + c) * k * k + center) = 1.0;
  return a;
}

ParamHandle leaf_param(const std::string& id, const Shape& shape, Array data,
                       bool trainable = true) {
  return {id, Tensor::leaf(shape, std::move(data)), trainable};
}

ParamHandle random_param(const std::string& id, const Shape& shape, double sigma, Rng& rng) {
  Tensor t = create(shape, InitSpec::normal(0.0, sigma), rng);
  return {id, Tensor::leaf(shape, t.array()), true};
}

void check_rank(int v, Eigen::Index limit, const std::string& prefix) {
  if (v < 1 || v >= limit)
    throw std::invalid_argument("build_op: invalid rank " + std::to_string(v) + " for " +
                                prefix + " (must be in [1," + std::to_string(limit) + "))");
}

}  // namespace

bool is_conv_kind(OpKind kind) { return kind >= OpKind::ConvIdentity; }

std::string kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Identity: return "identity";
    case OpKind::MatMul: return "matmul";
    case OpKind::SvdMatMul: return "svd";
    case OpKind::ElemScale: return "elem_scale";
    case OpKind::ScalarScale: return "scalar_scale";
    case OpKind::VectorShift: return "vector_shift";
    case OpKind::ScalarShift: return "scalar_shift";
    case OpKind::ConvIdentity: return "conv_identity";
    case OpKind::Conv: return "conv";
    case OpKind::SvdConv: return "svd_conv";
    case OpKind::Conv1x1: return "conv1x1";
    case OpKind::MtlScale: return "mtl_scale";
    case OpKind::ChannelScale: return "channel_scale";
    case OpKind::ChannelShift: return "channel_shift";
    case OpKind::ScalarShiftConv: return "scalar_shift_conv";
  }
  return "?";
}

std::string spec_name(const OpSpec& spec) {
  std::string n = kind_name(spec.kind);
  if (spec.kind == OpKind::SvdMatMul || spec.kind == OpKind::SvdConv)
    n += ":" + std::to_string(spec.rank);
  return n;
}

OpSpec parse_op_spec(const std::string& name) {
  auto colon = name.find(':');
  std::string base = colon == std::string::npos ? name : name.substr(0, colon);
  int rank = colon == std::string::npos ? 0 : std::stoi(name.substr(colon + 1));
  static const std::unordered_map<std::string, OpKind> kinds = {
      {"identity", OpKind::Identity},
      {"matmul", OpKind::MatMul},
      {"svd", OpKind::SvdMatMul},
      {"elem_scale", OpKind::ElemScale},
      {"scalar_scale", OpKind::ScalarScale},
      {"vector_shift", OpKind::VectorShift},
      {"scalar_shift", OpKind::ScalarShift},
      {"conv_identity", OpKind::ConvIdentity},
      {"conv", OpKind::Conv},
      {"svd_conv", OpKind::SvdConv},
      {"conv1x1", OpKind::Conv1x1},
      {"mtl_scale", OpKind::MtlScale},
      {"channel_scale", OpKind::ChannelScale},
      {"channel_shift", OpKind::ChannelShift},
      {"scalar_shift_conv", OpKind::ScalarShiftConv},
  };
  auto it = kinds.find(base);
  if (it == kinds.end()) throw std::invalid_argument("unknown op kind: " + name);
  return {it->second, rank};
}

CandidateOp build_op(const OpSpec& spec, const OpDims& dims, Rng& rng,
                     const std::string& id_prefix) {
  CandidateOp op;
  op.spec = spec;
  op.dims = dims;
  const std::string p = id_prefix + "." + spec_name(spec);
  const Eigen::Index d = dims.d, C = dims.channels, k = dims.ksize;
  switch (spec.kind) {
    case OpKind::Identity:
    case OpKind::ConvIdentity:
      break;
    case OpKind::MatMul:
      op.params.push_back(leaf_param(p + ".M", {d, d}, identity_matrix(d)));
      break;
    case OpKind::SvdMatMul:
      check_rank(spec.rank, d, p);
      op.params.push_back(random_param(p + ".U", {d, spec.rank}, 0.01, rng));
      op.params.push_back(leaf_param(p + ".s", {spec.rank}, Array::Zero(spec.rank)));
      op.params.push_back(random_param(p + ".V", {d, spec.rank}, 0.01, rng));
      break;
    case OpKind::ElemScale:
      op.params.push_back(leaf_param(p + ".a", {d}, Array::Ones(d)));
      break;
    case OpKind::ScalarScale:
      op.params.push_back(leaf_param(p + ".s", {1}, Array::Ones(1)));
      break;
    case OpKind::VectorShift:
      op.params.push_back(leaf_param(p + ".b", {d}, Array::Zero(d)));
      break;
    case OpKind::ScalarShift:
    case OpKind::ScalarShiftConv:
      op.params.push_back(leaf_param(p + ".b", {1}, Array::Zero(1)));
      break;
    case OpKind::Conv:
      op.params.push_back(leaf_param(p + ".K", {C, C, k, k}, identity_kernel(C, k)));
      break;
    case OpKind::SvdConv:
      check_rank(spec.rank, k, p);
      op.params.push_back(random_param(p + ".U", {C, C, k, spec.rank}, 0.01, rng));
      op.params.push_back(leaf_param(p + ".s", {C, C, spec.rank},
                                     Array::Zero(C * C * spec.rank)));
      op.params.push_back(random_param(p + ".V", {C, C, k, spec.rank}, 0.01, rng));
      break;
    case OpKind::Conv1x1:
      op.params.push_back(leaf_param(p + ".M", {C, C, 1, 1}, identity_matrix(C)));
      break;
    case OpKind::MtlScale:
      op.params.push_back(leaf_param(p + ".phi", {C, C}, Array::Ones(C * C)));
      op.frozen_params.push_back(
          leaf_param(p + ".K", {C, C, k, k}, identity_kernel(C, k), /*trainable=*/false));
      break;
    case OpKind::ChannelScale:
      op.params.push_back(leaf_param(p + ".a", {C}, Array::Ones(C)));
      break;
    case OpKind::ChannelShift:
      op.params.push_back(leaf_param(p + ".b", {C}, Array::Zero(C)));
      break;
  }
  return op;
}

Tensor apply_op(const CandidateOp& op, const Tensor& z, const ParamEnv& env) {
  bool conv = is_conv_kind(op.spec.kind);
  if (conv && z.shape().size() != 4)
    throw ShapeError("apply_op: " + spec_name(op.spec) + " expects [B,C,H,W] input");
  if (!conv && z.shape().size() != 2)
    throw ShapeError("apply_op: " + spec_name(op.spec) + " expects [B,d] input");
  auto param = [&](size_t i) { return env.get(op.params[i]); };
  const Eigen::Index C = op.dims.channels, k = op.dims.ksize;
  switch (op.spec.kind) {
    case OpKind::Identity:
    case OpKind::ConvIdentity:
      return z;
    case OpKind::MatMul:
      return matmul(z, transpose(param(0)));
    case OpKind::SvdMatMul: {
      // z + z V diag(s) U^T, exactly z when s = 0
      Tensor zv = matmul(z, param(2));
      return add(z, matmul(mul(zv, param(1)), transpose(param(0))));
    }
    case OpKind::ElemScale:
    case OpKind::ScalarScale:
      return mul(z, param(0));
    case OpKind::VectorShift:
    case OpKind::ScalarShift:
    case OpKind::ScalarShiftConv:
      return add(z, conv ? broadcast_to(param(0), z.shape()) : param(0));
    case OpKind::Conv:
      return conv2d(z, param(0));
    case OpKind::SvdConv: {
      // assemble the C*C spatial kernels U_a diag(s_a) V_a^T, then residual conv
      const int v = op.spec.rank;
      Tensor U = param(0), s = param(1), V = param(2);
      Tensor kernel = Tensor::zeros({C, C, k, k});
      for (Eigen::Index a = 0; a < C * C; ++a) {
        Tensor Ua = slice_flat(U, a * k * v, {k, v});
        Tensor sa = slice_flat(s, a * v, {v});
        Tensor Va = slice_flat(V, a * k * v, {k, v});
        Tensor block = matmul(mul(Ua, sa), transpose(Va));  // [k,k]
        kernel = add(kernel, place_flat(block, a * k * k, {C, C, k, k}));
      }
      return add(z, conv2d(z, kernel));
    }
    case OpKind::Conv1x1:
      return conv2d(z, param(0));
    case OpKind::MtlScale: {
      Tensor K = env.get(op.frozen_params[0]);
      return conv2d(z, mul(kernel_broadcast(param(0), C, k), K));
    }
    case OpKind::ChannelScale:
      return mul(z, channel_broadcast(param(0), z.shape()));
    case OpKind::ChannelShift:
      return add(z, channel_broadcast(param(0), z.shape()));
  }
  throw std::logic_error("apply_op: unreachable");
}

OperationSet build_operation_set(const std::vector<OpSpec>& pool, const OpDims& dims,
                                 Rng& rng, const std::string& id_prefix) {
  if (pool.empty()) throw std::invalid_argument("build_operation_set: empty pool");
  OperationSet set;
  for (size_t i = 0; i < pool.size(); ++i)
    set.ops.push_back(build_op(pool[i], dims, rng, id_prefix + ".op" + std::to_string(i)));
  Eigen::Index n = static_cast<Eigen::Index>(pool.size());
  set.logits = {id_prefix + ".logits", Tensor::leaf({n}, Array::Zero(n)), true};
  return set;
}

Tensor strengths(const OperationSet& set, const ParamEnv& env) {
  return softmax(env.get(set.logits));
}

Tensor apply_operation_set(const OperationSet& set, const Tensor& z, const ParamEnv& env) {
  if (set.ops.empty()) throw std::invalid_argument("apply_operation_set: empty op list");
  Tensor w = strengths(set, env);
  Tensor out;
  for (size_t i = 0; i < set.ops.size(); ++i) {
    Tensor wi = slice_flat(w, static_cast<Eigen::Index>(i), {1});
    Tensor part = mul(apply_op(set.ops[i], z, env), wi);
    out = i == 0 ? part : add(out, part);
  }
  return out;
}

Tensor fold_operation_set(const OperationSet& set, Eigen::Index d, const ParamEnv& env) {
  for (const auto& op : set.ops)
    if (is_conv_kind(op.spec.kind))
      throw std::invalid_argument("fold_operation_set: unsupported kind " +
                                  spec_name(op.spec));
  NoGradGuard ng;
  Tensor zero = apply_operation_set(set, Tensor::zeros({1, d}), env);  // translation
  Array folded = Array::Zero((d + 1) * (d + 1));
  for (Eigen::Index i = 0; i < d; ++i) {
    Array e = Array::Zero(d);
    e(i) = 1.0;
    Tensor col = apply_operation_set(set, Tensor({1, d}, std::move(e)), env);
    for (Eigen::Index r = 0; r < d; ++r)
      folded(r * (d + 1) + i) = col.array()(r) - zero.array()(r);
  }
  for (Eigen::Index r = 0; r < d; ++r) folded(r * (d + 1) + d) = zero.array()(r);
  folded(d * (d + 1) + d) = 1.0;
  return Tensor({d + 1, d + 1}, std::move(folded));
}

}  // namespace sap
