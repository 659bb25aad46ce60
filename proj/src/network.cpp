#include "sap/network.hpp"

#include <cmath>

namespace sap {

namespace {

Array identity_matrix(Eigen::Index d) {
  Array a = Array::Zero(d * d);
  for (Eigen::Index i = 0; i < d; ++i) a(i * d + i) = 1.0;
  return a;
}

// Glorot-uniform fan-based init
ParamHandle glorot(const std::string& id, Eigen::Index fan_out, Eigen::Index fan_in,
                   const Shape& shape, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = create(shape, InitSpec::uniform(-limit, limit), rng);
  return {id, Tensor::leaf(shape, t.array()), true};
}

ParamHandle zeros_param(const std::string& id, const Shape& shape) {
  Eigen::Index n = 1;
  for (auto d : shape) n *= d;
  return {id, Tensor::leaf(shape, Array::Zero(n)), true};
}

ParamHandle const_param(const std::string& id, const Shape& shape, double v) {
  Eigen::Index n = 1;
  for (auto d : shape) n *= d;
  return {id, Tensor::leaf(shape, Array::Constant(n, v)), true};
}

std::vector<OpSpec> fc_pool(Eigen::Index d, const std::vector<int>& ranks) {
  std::vector<OpSpec> pool = {{OpKind::Identity}, {OpKind::MatMul}};
  for (int r : ranks)
    if (r >= 1 && r < d) pool.push_back({OpKind::SvdMatMul, r});
  pool.push_back({OpKind::ElemScale});
  pool.push_back({OpKind::ScalarScale});
  pool.push_back({OpKind::VectorShift});
  pool.push_back({OpKind::ScalarShift});
  return pool;
}

std::vector<OpSpec> conv_pool(Eigen::Index ksize, int svd_rank) {
  std::vector<OpSpec> pool = {{OpKind::ConvIdentity}, {OpKind::Conv}};
  if (svd_rank >= 1 && svd_rank < ksize) pool.push_back({OpKind::SvdConv, svd_rank});
  pool.push_back({OpKind::Conv1x1});
  pool.push_back({OpKind::MtlScale});
  pool.push_back({OpKind::ChannelScale});
  pool.push_back({OpKind::ChannelShift});
  pool.push_back({OpKind::ScalarShiftConv});
  return pool;
}

}  // namespace

std::string learner_name(LearnerKind k) {
  switch (k) {
    case LearnerKind::Sap: return "sap";
    case LearnerKind::Maml: return "maml";
    case LearnerKind::Tnet: return "tnet";
  }
  return "?";
}

LearnerKind parse_learner(const std::string& name) {
  if (name == "sap") return LearnerKind::Sap;
  if (name == "maml") return LearnerKind::Maml;
  if (name == "tnet") return LearnerKind::Tnet;
  throw std::invalid_argument("unknown learner: " + name);
}

Eigen::Index NetworkSpec::num_op_sets() const {
  if (conv) return static_cast<Eigen::Index>(conv_channels.size()) + 2;  // per block + head
  return static_cast<Eigen::Index>(layer_sizes.size());                  // L + 1
}

PoolConfig default_pools(const NetworkSpec& spec, const std::vector<int>& svd_ranks,
                         int conv_svd_rank) {
  PoolConfig cfg;
  if (spec.conv) {
    for (size_t i = 0; i < spec.conv_channels.size(); ++i)
      cfg.sets.push_back(conv_pool(spec.ksize, conv_svd_rank));
    cfg.sets.push_back({});  // before the linear head: none by default
    cfg.sets.push_back(fc_pool(spec.n_classes, svd_ranks));
  } else {
    for (size_t i = 0; i + 1 < spec.layer_sizes.size(); ++i)
      cfg.sets.push_back(fc_pool(spec.layer_sizes[i], svd_ranks));
    cfg.sets.push_back(fc_pool(spec.layer_sizes.back(), svd_ranks));
  }
  return cfg;
}

Network Network::build(LearnerKind learner, const NetworkSpec& spec,
                       const PoolConfig& pools_in, Rng& rng) {
  Network net;
  net.learner_ = learner;
  net.spec_ = spec;
  net.pools_ = pools_in;
  bool sap = learner == LearnerKind::Sap;
  if (sap && net.pools_.sets.empty()) net.pools_ = default_pools(spec);
  if (sap && static_cast<Eigen::Index>(net.pools_.sets.size()) != spec.num_op_sets())
    throw std::invalid_argument("pool config size does not match the backbone");

  auto add_set = [&](int point, const OpDims& dims) {
    if (!sap) return;
    const auto& pool = net.pools_.sets[point];
    if (pool.empty()) return;
    OperationSet set =
        build_operation_set(pool, dims, rng, "o" + std::to_string(point + 1));
    for (const auto& op : set.ops) {
      for (const auto& h : op.params) net.store_.add(h, ParamGroup::Phi);
      for (const auto& h : op.frozen_params) net.store_.add(h, ParamGroup::Theta);
    }
    net.store_.add(set.logits, ParamGroup::Lambda);
    net.steps_.push_back({Step::Kind::OpSet, static_cast<int>(net.op_sets_.size())});
    net.op_sets_.push_back(std::move(set));
  };

  if (!spec.conv) {
    if (spec.layer_sizes.size() < 2)
      throw std::invalid_argument("MLP needs at least input and output sizes");
    size_t L = spec.layer_sizes.size() - 1;
    for (size_t l = 0; l < L; ++l) {
      Eigen::Index din = spec.layer_sizes[l], dout = spec.layer_sizes[l + 1];
      add_set(static_cast<int>(l), {.d = din});
      std::string base = "l" + std::to_string(l + 1);
      ParamHandle W = glorot(base + ".W", dout, din, {dout, din}, rng);
      ParamHandle b = zeros_param(base + ".b", {dout});
      net.store_.add(W, ParamGroup::Theta);
      net.store_.add(b, ParamGroup::Theta);
      net.steps_.push_back({Step::Kind::Affine, -1, W.id, b.id});
      if (learner == LearnerKind::Tnet) {
        ParamHandle T = {base + ".warp", Tensor::leaf({dout, dout}, identity_matrix(dout)), true};
        net.store_.add(T, ParamGroup::ThetaWarp);
        net.steps_.push_back({Step::Kind::Warp, -1, T.id});
      }
      if (l + 1 < L) net.steps_.push_back({Step::Kind::Relu});
    }
    add_set(static_cast<int>(L), {.d = spec.layer_sizes.back()});
  } else {
    Eigen::Index C = spec.in_channels;
    Eigen::Index side = spec.side;
    for (size_t bi = 0; bi < spec.conv_channels.size(); ++bi) {
      Eigen::Index Co = spec.conv_channels[bi];
      add_set(static_cast<int>(bi), {.channels = C, .ksize = spec.ksize});
      std::string base = "block" + std::to_string(bi + 1);
      Eigen::Index fan_in = C * spec.ksize * spec.ksize;
      ParamHandle W = glorot(base + ".W", Co, fan_in, {Co, C, spec.ksize, spec.ksize}, rng);
      ParamHandle b = zeros_param(base + ".b", {Co});
      net.store_.add(W, ParamGroup::Theta);
      net.store_.add(b, ParamGroup::Theta);
      net.steps_.push_back({Step::Kind::Conv, -1, W.id, b.id});
      if (learner == LearnerKind::Tnet) {
        Array id1x1 = identity_matrix(Co);
        ParamHandle T = {base + ".warp", Tensor::leaf({Co, Co, 1, 1}, std::move(id1x1)), true};
        net.store_.add(T, ParamGroup::ThetaWarp);
        net.steps_.push_back({Step::Kind::ConvWarp, -1, T.id});
      }
      net.steps_.push_back({Step::Kind::MaxPool});
      ParamHandle gamma = const_param(base + ".bn.gamma", {Co}, 1.0);
      ParamHandle beta = zeros_param(base + ".bn.beta", {Co});
      net.store_.add(gamma, ParamGroup::Theta);
      net.store_.add(beta, ParamGroup::Theta);
      net.steps_.push_back({Step::Kind::BatchNorm, -1, gamma.id, beta.id});
      net.steps_.push_back({Step::Kind::Relu});
      C = Co;
      side /= 2;
    }
    net.steps_.push_back({Step::Kind::Flatten});
    Eigen::Index flat = C * side * side;
    int head_point = static_cast<int>(spec.conv_channels.size());
    add_set(head_point, {.d = flat});
    ParamHandle W = glorot("head.W", spec.n_classes, flat, {spec.n_classes, flat}, rng);
    ParamHandle b = zeros_param("head.b", {spec.n_classes});
    net.store_.add(W, ParamGroup::Theta);
    net.store_.add(b, ParamGroup::Theta);
    net.steps_.push_back({Step::Kind::Affine, -1, W.id, b.id});
    if (learner == LearnerKind::Tnet) {
      ParamHandle T = {"head.warp",
                       Tensor::leaf({spec.n_classes, spec.n_classes},
                                    identity_matrix(spec.n_classes)),
                       true};
      net.store_.add(T, ParamGroup::ThetaWarp);
      net.steps_.push_back({Step::Kind::Warp, -1, T.id});
    }
    add_set(head_point + 1, {.d = spec.n_classes});
  }
  return net;
}

Tensor Network::forward(const Tensor& x, const ParamEnv& env) const {
  Tensor z = x;
  auto get = [&](const std::string& id) { return env.get(store_.handle(id)); };
  for (const auto& step : steps_) {
    switch (step.kind) {
      case Step::Kind::OpSet:
        z = apply_operation_set(op_sets_[step.set_index], z, env);
        break;
      case Step::Kind::Affine:
        z = add(matmul(z, transpose(get(step.w))), get(step.b));
        break;
      case Step::Kind::Relu:
        z = relu(z);
        break;
      case Step::Kind::Conv: {
        Tensor y = conv2d(z, get(step.w));
        Tensor bias = get(step.b);
        // bias is per output channel
        Eigen::Index B = y.shape()[0], C = y.shape()[1], S = y.shape()[2] * y.shape()[3];
        auto m = std::make_shared<std::vector<Eigen::Index>>(B * C * S);
        Eigen::Index idx = 0;
        for (Eigen::Index b = 0; b < B; ++b)
          for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index s = 0; s < S; ++s) (*m)[idx++] = c;
        z = add(y, gather(bias, m, y.shape()));
        break;
      }
      case Step::Kind::Warp:
        z = matmul(z, transpose(get(step.w)));
        break;
      case Step::Kind::ConvWarp:
        z = conv2d(z, get(step.w));
        break;
      case Step::Kind::MaxPool:
        z = maxpool2d(z);
        break;
      case Step::Kind::BatchNorm:
        z = batchnorm(z, get(step.w), get(step.b));
        break;
      case Step::Kind::Flatten:
        z = flatten_rows(z);
        break;
    }
  }
  return z;
}

Eigen::Index Network::param_count() const {
  Eigen::Index n = 0;
  for (const auto& h : store_.trainable()) n += h.value.size();
  return n;
}

std::vector<ParamHandle> Network::theta() const {
  std::vector<ParamHandle> out = store_.handles(ParamGroup::Theta);
  for (auto& h : store_.handles(ParamGroup::ThetaWarp)) out.push_back(h);
  std::vector<ParamHandle> trainable;
  for (auto& h : out)
    if (h.trainable) trainable.push_back(h);
  return trainable;
}

std::vector<ParamHandle> Network::phi() const { return store_.handles(ParamGroup::Phi); }

std::vector<ParamHandle> Network::lambda() const {
  return store_.handles(ParamGroup::Lambda);
}

std::vector<ParamHandle> Network::inner_params() const {
  switch (learner_) {
    case LearnerKind::Sap:
      return phi();
    case LearnerKind::Maml: {
      std::vector<ParamHandle> out;
      for (auto& h : store_.handles(ParamGroup::Theta))
        if (h.trainable) out.push_back(h);
      return out;
    }
    case LearnerKind::Tnet: {
      std::vector<ParamHandle> out;
      for (auto& h : store_.handles(ParamGroup::Theta))
        if (h.trainable) out.push_back(h);  // warps stay frozen inner-loop
      return out;
    }
  }
  return {};
}

void Network::assign(const std::string& id, const Tensor& value) {
  store_.set(id, Tensor::leaf(value.shape(), value.array()));
}

Network Network::clone() const {
  Network copy = *this;
  // refresh leaves so gradients against the clone are independent
  for (const auto& id : store_.ids()) {
    const auto& h = store_.handle(id);
    copy.store_.set(id, Tensor::leaf(h.value.shape(), h.value.array()));
  }
  return copy;
}

}  // namespace sap
