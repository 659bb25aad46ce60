#include <set>

#include "doctest.h"
#include "sap/network.hpp"

using namespace sap;

namespace {

NetworkSpec sine_spec() {
  NetworkSpec s;
  s.layer_sizes = {1, 40, 40, 1};
  return s;
}

NetworkSpec conv_spec() {
  NetworkSpec s;
  s.conv = true;
  s.in_channels = 1;
  s.side = 8;
  s.conv_channels = {8, 8};
  s.n_classes = 2;
  return s;
}

// copy every base-weight parameter that both networks share
void copy_theta(const Network& from, Network& to) {
  for (const auto& h : from.theta())
    if (to.store().has(h.id)) to.assign(h.id, h.value);
}

}  // namespace

TEST_CASE("parameter counts match the plain backbones") {
  Rng rng(1);
  // 1->40->40->1: (40+40) + (1600+40) + (40+1)
  Network maml = Network::build(LearnerKind::Maml, sine_spec(), {}, rng);
  CHECK(maml.param_count() == 1761);
  // + warp after every affine including the output: 1600 + 1600 + 1
  Network tnet = Network::build(LearnerKind::Tnet, sine_spec(), {}, rng);
  CHECK(tnet.param_count() == 4962);
}

TEST_CASE("trainable handles partition into theta, phi, lambda") {
  Rng rng(2);
  for (LearnerKind k : {LearnerKind::Sap, LearnerKind::Maml, LearnerKind::Tnet}) {
    Network net = Network::build(k, sine_spec(), {}, rng);
    std::set<std::string> seen;
    Eigen::Index n = 0;
    for (const auto& part : {net.theta(), net.phi(), net.lambda()})
      for (const auto& h : part) {
        CHECK(seen.insert(h.id).second);  // disjoint
        n += h.value.size();
      }
    CHECK(n == net.param_count());  // exhaustive
    CHECK(seen.size() == net.all_trainable().size());
  }
}

TEST_CASE("operation sets are transparent at initialization") {
  Rng r1(3), r2(4);
  Network maml = Network::build(LearnerKind::Maml, sine_spec(), {}, r1);
  Network saps = Network::build(LearnerKind::Sap, sine_spec(), {}, r2);
  Network tnet = Network::build(LearnerKind::Tnet, sine_spec(), {}, r2);
  copy_theta(maml, saps);
  copy_theta(maml, tnet);
  Rng data(5);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor x = create({4, 1}, InitSpec::uniform(-5, 5), data);
    Tensor base = maml.forward(x);
    CHECK((saps.forward(x).array() - base.array()).abs().maxCoeff() <= 1e-12);
    CHECK((tnet.forward(x).array() - base.array()).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("conv backbones are transparent at initialization") {
  Rng r1(6), r2(7);
  Network maml = Network::build(LearnerKind::Maml, conv_spec(), {}, r1);
  Network saps = Network::build(LearnerKind::Sap, conv_spec(), {}, r2);
  Network tnet = Network::build(LearnerKind::Tnet, conv_spec(), {}, r2);
  copy_theta(maml, saps);
  copy_theta(maml, tnet);
  Rng data(8);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor x = create({4, 1, 8, 8}, InitSpec::uniform(-1, 1), data);
    Tensor base = maml.forward(x);
    CHECK(base.shape() == Shape{4, 2});
    CHECK((saps.forward(x).array() - base.array()).abs().maxCoeff() <= 1e-10);
    CHECK((tnet.forward(x).array() - base.array()).abs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("single-affine network computes A*(x + p) symbolically") {
  Rng rng(9);
  NetworkSpec spec;
  spec.layer_sizes = {1, 1};
  PoolConfig pools{{{{OpKind::ScalarShift}}, {{OpKind::ScalarScale}}}};
  Network net = Network::build(LearnerKind::Sap, spec, pools, rng);
  net.assign("l1.W", Tensor::ones({1, 1}));
  net.assign("l1.b", Tensor::zeros({1}));
  const double p = 0.8, A = 2.5;
  net.assign(net.op_sets()[0].ops[0].params[0].id, Tensor::scalar(p));
  net.assign(net.op_sets()[1].ops[0].params[0].id, Tensor::scalar(A));
  Rng data(10);
  for (int rep = 0; rep < 20; ++rep) {
    double x = data.uniform(-5, 5);
    Tensor out = net.forward(Tensor({1, 1}, Array::Constant(1, x)));
    CHECK(out.item() == doctest::Approx(A * (x + p)).epsilon(1e-12));
  }
  // zero weights: only the bias path survives, output A * b
  net.assign("l1.W", Tensor::zeros({1, 1}));
  net.assign("l1.b", Tensor({1}, Array::Constant(1, 0.4)));
  Tensor out = net.forward(Tensor({1, 1}, Array::Constant(1, 3.0)));
  CHECK(out.item() == doctest::Approx(A * 0.4).epsilon(1e-12));
}

TEST_CASE("inner-loop parameter selection per learner") {
  Rng rng(11);
  Network saps = Network::build(LearnerKind::Sap, sine_spec(), {}, rng);
  for (const auto& h : saps.inner_params()) CHECK(h.id.find(".op") != std::string::npos);
  CHECK(saps.inner_params().size() == saps.phi().size());

  Network tnet = Network::build(LearnerKind::Tnet, sine_spec(), {}, rng);
  for (const auto& h : tnet.inner_params())
    CHECK(h.id.find(".warp") == std::string::npos);  // warps adapt only outer-loop
  CHECK(tnet.inner_params().size() == 6);            // W and b of three layers

  Network maml = Network::build(LearnerKind::Maml, sine_spec(), {}, rng);
  CHECK(maml.inner_params().size() == 6);
}

TEST_CASE("pool config size must match the backbone") {
  Rng rng(12);
  PoolConfig bad{{{{OpKind::Identity}}}};
  CHECK_THROWS(Network::build(LearnerKind::Sap, sine_spec(), bad, rng));
  CHECK_THROWS([&] {
    NetworkSpec s;
    s.layer_sizes = {1};
    return Network::build(LearnerKind::Maml, s, {}, rng);
  }());
}

TEST_CASE("clone is independent and build is deterministic") {
  Rng r1(13), r2(13);
  Network a = Network::build(LearnerKind::Sap, sine_spec(), {}, r1);
  Network b = Network::build(LearnerKind::Sap, sine_spec(), {}, r2);
  Rng data(14);
  Tensor x = create({3, 1}, InitSpec::uniform(-5, 5), data);
  CHECK((a.forward(x).array() - b.forward(x).array()).abs().maxCoeff() == 0.0);

  Network c = a.clone();
  c.assign("l1.b", Tensor({40}, Array::Constant(40, 1.0)));
  CHECK((a.forward(x).array() - b.forward(x).array()).abs().maxCoeff() == 0.0);
  CHECK((c.forward(x).array() - a.forward(x).array()).abs().maxCoeff() > 0.0);
}
