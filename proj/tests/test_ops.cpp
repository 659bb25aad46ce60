#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sap/candidate_ops.hpp"
#include "sap/network.hpp"

using namespace sap;

namespace {

Tensor row(std::initializer_list<double> vals) {
  Array a(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (double v : vals) a(i++) = v;
  return Tensor({1, static_cast<Eigen::Index>(vals.size())}, std::move(a));
}

}  // namespace

TEST_CASE("ops initialized to leave the input unaffected") {
  Rng rng(1);
  SUBCASE("scalar scale") {
    CandidateOp op = build_op({OpKind::ScalarScale}, {.d = 2}, rng, "t");
    Tensor z = row({3, -1});
    CHECK(apply_op(op, z).array().isApprox(z.array()));
  }
  SUBCASE("svd residual is zero at init") {
    CandidateOp op = build_op({OpKind::SvdMatMul, 5}, {.d = 40}, rng, "t");
    Rng data_rng(2);
    Tensor z = create({3, 40}, InitSpec::uniform(-2, 2), data_rng);
    CHECK((apply_op(op, z).array() - z.array()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("matmul init is the identity") {
    CandidateOp op = build_op({OpKind::MatMul}, {.d = 2}, rng, "t");
    Array expect(4);
    expect << 1, 0, 0, 1;
    CHECK(op.params[0].value.array().isApprox(expect));
  }
  SUBCASE("every kind is the identity at init") {
    Rng data_rng(3);
    Tensor zfc = create({2, 6}, InitSpec::uniform(-2, 2), data_rng);
    for (OpSpec spec : {OpSpec{OpKind::Identity}, {OpKind::MatMul}, {OpKind::SvdMatMul, 3},
                        {OpKind::ElemScale}, {OpKind::ScalarScale}, {OpKind::VectorShift},
                        {OpKind::ScalarShift}}) {
      CandidateOp op = build_op(spec, {.d = 6}, rng, "fc_" + spec_name(spec));
      INFO(spec_name(spec));
      CHECK((apply_op(op, zfc).array() - zfc.array()).abs().maxCoeff() < 1e-15);
      CHECK(apply_op(op, zfc).shape() == zfc.shape());
    }
    Tensor zc = create({2, 3, 4, 4}, InitSpec::uniform(-2, 2), data_rng);
    for (OpSpec spec : {OpSpec{OpKind::ConvIdentity}, {OpKind::Conv}, {OpKind::SvdConv, 2},
                        {OpKind::Conv1x1}, {OpKind::MtlScale}, {OpKind::ChannelScale},
                        {OpKind::ChannelShift}, {OpKind::ScalarShiftConv}}) {
      CandidateOp op = build_op(spec, {.channels = 3, .ksize = 3}, rng, "cv_" + spec_name(spec));
      INFO(spec_name(spec));
      CHECK((apply_op(op, zc).array() - zc.array()).abs().maxCoeff() < 1e-15);
      CHECK(apply_op(op, zc).shape() == zc.shape());
    }
  }
  SUBCASE("invalid rank") {
    CHECK_THROWS(build_op({OpKind::SvdMatMul, 40}, {.d = 40}, rng, "t"));
    CHECK_THROWS(build_op({OpKind::SvdConv, 3}, {.channels = 2, .ksize = 3}, rng, "t"));
  }
}

TEST_CASE("apply_op values") {
  Rng rng(4);
  SUBCASE("scalar shift") {
    CandidateOp op = build_op({OpKind::ScalarShift}, {.d = 2}, rng, "t");
    ParamEnv env;
    env.set(op.params[0].id, Tensor::scalar(2.0));
    Array expect(2);
    expect << 2, 3;
    CHECK(apply_op(op, row({0, 1}), env).array().isApprox(expect));
  }
  SUBCASE("element-wise scale") {
    CandidateOp op = build_op({OpKind::ElemScale}, {.d = 2}, rng, "t");
    ParamEnv env;
    env.set(op.params[0].id, Tensor({2}, (Array(2) << 2, 0.5).finished()));
    Array expect(2);
    expect << 2, 2;
    CHECK(apply_op(op, row({1, 4}), env).array().isApprox(expect));
  }
  SUBCASE("channel shift") {
    CandidateOp op = build_op({OpKind::ChannelShift}, {.channels = 2, .ksize = 3}, rng, "t");
    ParamEnv env;
    env.set(op.params[0].id, Tensor({2}, (Array(2) << 1, -1).finished()));
    Tensor z = Tensor::zeros({1, 2, 2, 2});
    Tensor out = apply_op(op, z, env);
    CHECK(out.array().head(4).isApproxToConstant(1.0));
    CHECK(out.array().tail(4).isApproxToConstant(-1.0));
  }
}

TEST_CASE("operation set combination") {
  Rng rng(5);
  SUBCASE("identity pool leaves input unchanged for any logits") {
    OperationSet set = build_operation_set(
        {{OpKind::Identity}, {OpKind::MatMul}, {OpKind::ScalarScale}}, {.d = 3}, rng, "s");
    ParamEnv env;
    env.set(set.logits.id, Tensor({3}, (Array(3) << 1.5, -0.3, 0.7).finished()));
    Rng data_rng(6);
    Tensor z = create({4, 3}, InitSpec::uniform(-2, 2), data_rng);
    CHECK((apply_operation_set(set, z, env).array() - z.array()).abs().maxCoeff() < 1e-15);
  }
  SUBCASE("weighted combination, direct arithmetic") {
    OperationSet set = build_operation_set({{OpKind::ScalarScale}, {OpKind::VectorShift}},
                                           {.d = 2}, rng, "s");
    ParamEnv env;
    env.set(set.ops[0].params[0].id, Tensor::scalar(2.0));
    env.set(set.ops[1].params[0].id, Tensor({2}, (Array(2) << 1, -1).finished()));
    env.set(set.logits.id,
            Tensor({2}, (Array(2) << std::log(0.25), std::log(0.75)).finished()));
    Tensor out = apply_operation_set(set, row({1, 2}), env);
    CHECK(out.array()(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out.array()(1) == doctest::Approx(1.75).epsilon(1e-12));
  }
  SUBCASE("single op equals direct application") {
    OperationSet set = build_operation_set({{OpKind::MatMul}}, {.d = 2}, rng, "s");
    ParamEnv env;
    env.set(set.logits.id, Tensor({1}, Array::Constant(1, 3.7)));
    Rng data_rng(7);
    Tensor m = create({2, 2}, InitSpec::uniform(-1, 1), data_rng);
    env.set(set.ops[0].params[0].id, m);
    Tensor z = row({0.5, -1.5});
    Tensor direct = apply_op(set.ops[0], z, env);
    CHECK(apply_operation_set(set, z, env).array().isApprox(direct.array(), 1e-14));
  }
  SUBCASE("strength simplex and uniform init") {
    OperationSet set = build_operation_set(
        {{OpKind::Identity}, {OpKind::ScalarScale}, {OpKind::ScalarShift}, {OpKind::MatMul}},
        {.d = 2}, rng, "s");
    Tensor w0 = strengths(set);
    CHECK(w0.array().isApproxToConstant(0.25));
    for (int rep = 0; rep < 20; ++rep) {
      ParamEnv env;
      Rng lr(100 + rep);
      env.set(set.logits.id, create({4}, InitSpec::uniform(-8, 8), lr));
      Array w = strengths(set, env).array();
      CHECK(std::abs(w.sum() - 1.0) < 1e-12);
      CHECK(w.minCoeff() >= 0.0);
      CHECK(w.maxCoeff() <= 1.0);
    }
  }
  CHECK_THROWS(build_operation_set({}, {.d = 2}, rng, "s"));
}

TEST_CASE("folding a fully-connected set") {
  Rng rng(8);
  SUBCASE("all-identity set folds to the identity") {
    OperationSet set = build_operation_set({{OpKind::Identity}, {OpKind::Identity}},
                                           {.d = 3}, rng, "s");
    Tensor f = fold_operation_set(set, 3);
    Array expect = Array::Zero(16);
    for (int i = 0; i < 4; ++i) expect(i * 4 + i) = 1.0;
    CHECK(f.array().isApprox(expect));
  }
  SUBCASE("scalar scale with identity at equal weights") {
    OperationSet set = build_operation_set({{OpKind::ScalarScale}, {OpKind::Identity}},
                                           {.d = 2}, rng, "s");
    ParamEnv env;
    env.set(set.ops[0].params[0].id, Tensor::scalar(3.0));
    Tensor f = fold_operation_set(set, 2, env);
    // ((1+s)/2) I block with s=3
    CHECK(f.array()(0) == doctest::Approx(2.0));
    CHECK(f.array()(4) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(f.array()(1) == doctest::Approx(0.0));
  }
  SUBCASE("folded matrix agrees with direct application") {
    const Eigen::Index d = 5;
    OperationSet set = build_operation_set(
        {{OpKind::Identity}, {OpKind::MatMul}, {OpKind::SvdMatMul, 2}, {OpKind::ElemScale},
         {OpKind::ScalarScale}, {OpKind::VectorShift}, {OpKind::ScalarShift}},
        {.d = d}, rng, "s");
    ParamEnv env;
    Rng pr(9);
    for (const auto& op : set.ops)
      for (const auto& h : op.params)
        env.set(h.id, create(h.value.shape(), InitSpec::uniform(-1, 1), pr));
    env.set(set.logits.id, create({(Eigen::Index)set.ops.size()}, InitSpec::uniform(-1, 1), pr));
    Tensor f = fold_operation_set(set, d, env);
    for (int rep = 0; rep < 100; ++rep) {
      Tensor z = create({1, d}, InitSpec::uniform(-2, 2), pr);
      Tensor direct = apply_operation_set(set, z, env);
      // folded * [z;1]
      Array hz(d + 1);
      hz.head(d) = z.array();
      hz(d) = 1.0;
      Tensor out = matmul(f, Tensor({d + 1, 1}, std::move(hz)));
      CHECK((out.array().head(d) - direct.array()).abs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("conv set cannot fold") {
    OperationSet set = build_operation_set({{OpKind::ConvIdentity}},
                                           {.channels = 2, .ksize = 3}, rng, "s");
    CHECK_THROWS(fold_operation_set(set, 4));
  }
}

TEST_CASE("candidate op gradients") {
  Rng rng(10);
  // every parametric kind participates in gradient flow
  auto check_fc = [&](OpSpec spec) {
    CandidateOp op = build_op(spec, {.d = 4}, rng, "g_" + spec_name(spec));
    Rng pr(20);
    std::vector<ParamHandle> params;
    for (auto& h : op.params) {
      Tensor v = create(h.value.shape(), InitSpec::uniform(-0.8, 0.8), pr);
      params.push_back({h.id, Tensor::leaf(v.shape(), v.array()), true});
    }
    Tensor z = create({3, 4}, InitSpec::uniform(-2, 2), pr);
    auto loss = [&, z](const std::vector<ParamHandle>& ps) {
      ParamEnv env;
      for (const auto& h : ps) env.set(h.id, h.value);
      Tensor y = apply_op(op, z, env);
      return sum(mul(y, y));
    };
    INFO(spec_name(spec));
    CHECK(sap::testing::gradcheck(loss, params) < 1e-6);
  };
  for (OpSpec spec : {OpSpec{OpKind::MatMul}, {OpKind::SvdMatMul, 2}, {OpKind::ElemScale},
                      {OpKind::ScalarScale}, {OpKind::VectorShift}, {OpKind::ScalarShift}})
    check_fc(spec);

  auto check_conv = [&](OpSpec spec) {
    CandidateOp op = build_op(spec, {.channels = 2, .ksize = 3}, rng, "gc_" + spec_name(spec));
    Rng pr(21);
    std::vector<ParamHandle> params;
    for (auto& h : op.params) {
      Tensor v = create(h.value.shape(), InitSpec::uniform(-0.8, 0.8), pr);
      params.push_back({h.id, Tensor::leaf(v.shape(), v.array()), true});
    }
    Tensor z = create({2, 2, 4, 4}, InitSpec::uniform(-2, 2), pr);
    auto loss = [&, z](const std::vector<ParamHandle>& ps) {
      ParamEnv env;
      for (const auto& h : ps) env.set(h.id, h.value);
      Tensor y = apply_op(op, z, env);
      return sum(mul(y, y));
    };
    INFO(spec_name(spec));
    CHECK(sap::testing::gradcheck(loss, params) < 1e-6);
  };
  for (OpSpec spec : {OpSpec{OpKind::Conv}, {OpKind::SvdConv, 2}, {OpKind::Conv1x1},
                      {OpKind::MtlScale}, {OpKind::ChannelScale}, {OpKind::ChannelShift},
                      {OpKind::ScalarShiftConv}})
    check_conv(spec);
}
