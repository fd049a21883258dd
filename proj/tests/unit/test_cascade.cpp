#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "textcsp/cascade/cascade.hpp"
#include "textcsp/textenc/textenc.hpp"

using namespace textcsp;
using namespace textcsp::cascade;
using nn::Var;
using testing::random_tensor;

namespace {

CascadeConfig small_cfg(Topology topo, Index c = 8, Index d = 8) {
  CascadeConfig cfg;
  cfg.topology = topo;
  cfg.channels = c;
  cfg.text_dim = d;
  cfg.reduction = 4;
  return cfg;
}

Tensor<std::uint8_t> full_mask(Index b, Index l) {
  Tensor<std::uint8_t> m(Shape{b, l});
  m.fill(1);
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// y[b, v] = sum_c w[c] * x[b, c, v] + bias
Tensor<double> head_oracle(const Tensor<double>& x, const Tensor<double>& w, double bias) {
  const Index b = x.dim(0), c = x.dim(1), v = x.inner_size(1);
  Tensor<double> y(Shape{b, 1, x.dim(2), x.dim(3), x.dim(4)});
  for (Index bi = 0; bi < b; ++bi)
    for (Index i = 0; i < v; ++i) {
      double s = bias;
      for (Index ci = 0; ci < c; ++ci) s += w[ci] * x[(bi * c + ci) * v + i];
      y[bi * v + i] = s;
    }
  return y;
}

}  // namespace

TEST_CASE("spatial gate matches a nested-loop oracle and the sigmoid midpoint example") {
  Rng rng(3);
  const auto f = random_tensor(Shape{2, 3, 2, 2, 2}, rng);
  const auto a = random_tensor(Shape{2, 1, 2, 2, 2}, rng, 0.0, 1.0);
  const auto out = nn::spatial_gate(Var<double>(f), Var<double>(a)).value();
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index v = 0; v < 8; ++v) {
        const double expect = f[(b * 3 + c) * 8 + v] * (1.0 + a[b * 8 + v]);
        CHECK(std::abs(out[(b * 3 + c) * 8 + v] - expect) < 1e-7);
      }

  Tensor<double> two(Shape{1, 1, 1, 1, 1}, 2.0);
  const auto gate = nn::sigmoid(Var<double>(Tensor<double>(Shape{1, 1, 1, 1, 1}, 0.0)));
  CHECK(nn::spatial_gate(Var<double>(two), gate).value()[0] == doctest::Approx(3.0).epsilon(1e-12));

  const auto shut = nn::sigmoid(Var<double>(Tensor<double>(Shape{2, 1, 2, 2, 2}, -40.0)));
  CHECK(max_diff(nn::spatial_gate(Var<double>(f), shut).value(), f) < 1e-6);

  CHECK_THROWS_AS(nn::spatial_gate(Var<double>(f), Var<double>(Tensor<double>(Shape{2, 1, 2, 2, 3}))), ShapeError);
}

TEST_CASE("gate multiplier stays strictly inside (1, 2) for extreme logits") {
  Tensor<double> logits(Shape{1, 1, 1, 1, 5});
  const double ys[] = {-30.0, -5.0, 0.0, 5.0, 30.0};
  for (Index i = 0; i < 5; ++i) logits[i] = ys[i];
  Tensor<double> ones(Shape{1, 1, 1, 1, 5}, 1.0);
  const auto mult = nn::spatial_gate(Var<double>(ones), nn::sigmoid(Var<double>(logits))).value();
  for (Index i = 0; i < 5; ++i) {
    CHECK(mult[i] > 1.0);
    CHECK(mult[i] < 2.0);
  }
}

TEST_CASE("modulator with zero weights or zero input gives 0.5") {
  nn::ParameterStore<double> store(1);
  ChannelModulator<double> mod(store, "m", 48, 64, 4);
  CHECK(mod.fc1().weight().shape() == Shape{12, 64});
  CHECK(mod.fc2().weight().shape() == Shape{48, 12});
  Rng rng(2);
  const auto t = random_tensor(Shape{2, 64}, rng);

  // Biases start at zero, so a zero input gives 0.5 whatever the weights.
  const auto g0 = mod(Var<double>(Tensor<double>(Shape{2, 64}))).value();
  for (Index i = 0; i < g0.size(); ++i) CHECK(g0[i] == 0.5);

  for (auto& p : store.params()) p.var.mutable_value().fill(0.0);
  const auto g = mod(Var<double>(t)).value();
  CHECK(g.shape() == Shape{2, 48});
  for (Index i = 0; i < g.size(); ++i) CHECK(g[i] == 0.5);
}

TEST_CASE("modulator matches a scalar-loop oracle and its gradient check") {
  nn::ParameterStore<double> store(4);
  ChannelModulator<double> mod(store, "m", 8, 8, 4);
  Rng rng(9);
  for (auto& p : store.params()) p.var.mutable_value() = random_tensor(p.var.shape(), rng, -0.5, 0.5);
  const auto t = random_tensor(Shape{2, 8}, rng);
  const auto g = mod(Var<double>(t)).value();

  const auto& w1 = mod.fc1().weight().value();
  const auto& b1 = mod.fc1().bias().value();
  const auto& w2 = mod.fc2().weight().value();
  const auto& b2 = mod.fc2().bias().value();
  for (Index b = 0; b < 2; ++b) {
    double hidden[2];
    for (Index h = 0; h < 2; ++h) {
      double s = b1[h];
      for (Index i = 0; i < 8; ++i) s += w1[h * 8 + i] * t[b * 8 + i];
      hidden[h] = std::max(s, 0.0);
    }
    for (Index c = 0; c < 8; ++c) {
      double s = b2[c];
      for (Index h = 0; h < 2; ++h) s += w2[c * 2 + h] * hidden[h];
      CHECK(std::abs(g[b * 8 + c] - sigmoid(s)) < 1e-7);
    }
  }

  const auto res = testing::gradcheck_params(
      store, {"m.fc1.weight", "m.fc1.bias", "m.fc2.weight"},
      [&] { return testing::weighted_sum(mod(Var<double>(t))); }, 0);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gates and logits are consistent and WT ignores the text") {
  nn::ParameterStore<double> store(5);
  CascadeHead<double> head(store, small_cfg(Topology::kFull));
  Rng rng(1);
  const Var<double> f(random_tensor(Shape{2, 8, 2, 3, 2}, rng));
  const Var<double> t_tc(random_tensor(Shape{2, 5, 8}, rng));
  const Var<double> t_et(random_tensor(Shape{2, 5, 8}, rng));
  const auto mask = full_mask(2, 5);
  const auto out = head.forward(f, t_tc, t_et, mask);

  for (const auto& y : out.logits) CHECK(y.shape() == Shape{2, 1, 2, 3, 2});
  CHECK(out.g_tc.shape() == Shape{2, 8});
  for (Index i = 0; i < out.a_wt.size(); ++i) {
    CHECK(out.a_wt.value()[i] == nn::sigmoid(out.logits[0]).value()[i]);
    CHECK(out.a_tc.value()[i] == nn::sigmoid(out.logits[1]).value()[i]);
  }
  for (const auto* g : {&out.g_tc, &out.g_et})
    for (Index i = 0; i < g->size(); ++i) {
      CHECK(g->value()[i] > 0.0);
      CHECK(g->value()[i] < 1.0);
    }

  const Var<double> other_tc(random_tensor(Shape{2, 5, 8}, rng));
  const Var<double> other_et(random_tensor(Shape{2, 5, 8}, rng));
  const auto moved = head.forward(f, other_tc, other_et, mask);
  CHECK(moved.logits[0].value() == out.logits[0].value());
  CHECK(max_diff(moved.logits[1].value(), out.logits[1].value()) > 0.0);

  // In the full topology TC only sees T_TC.
  const auto et_only = head.forward(f, t_tc, other_et, mask);
  CHECK(et_only.logits[1].value() == out.logits[1].value());
  CHECK(max_diff(et_only.logits[2].value(), out.logits[2].value()) > 0.0);
}

TEST_CASE("full topology follows the branch equations") {
  nn::ParameterStore<double> store(6);
  CascadeHead<double> head(store, small_cfg(Topology::kFull));
  Rng rng(8);
  for (auto& p : store.params())
    if (p.name.rfind("cascade.head", 0) == 0) p.var.mutable_value() = random_tensor(p.var.shape(), rng);
  const auto f = random_tensor(Shape{2, 8, 2, 2, 2}, rng);
  const auto g_tc = random_tensor(Shape{2, 8}, rng, 0.1, 0.9);
  const auto g_et = random_tensor(Shape{2, 8}, rng, 0.1, 0.9);
  const auto out = head.forward_with_gates(Var<double>(f), Var<double>(g_tc), Var<double>(g_et));

  const auto& pw = [&](const char* n) { return store.at(n).var.value(); };
  const auto y_wt = head_oracle(f, pw("cascade.head.wt.weight"), pw("cascade.head.wt.bias")[0]);
  CHECK(max_diff(out.logits[0].value(), y_wt) < 1e-12);

  auto gated = [&](const Tensor<double>& y_prior, const Tensor<double>& g) {
    Tensor<double> x(f.shape());
    for (Index b = 0; b < 2; ++b)
      for (Index c = 0; c < 8; ++c)
        for (Index v = 0; v < 8; ++v)
          x[(b * 8 + c) * 8 + v] = f[(b * 8 + c) * 8 + v] * (1.0 + sigmoid(y_prior[b * 8 + v])) * g[b * 8 + c];
    return x;
  };
  const auto y_tc = head_oracle(gated(y_wt, g_tc), pw("cascade.head.tc.weight"), pw("cascade.head.tc.bias")[0]);
  CHECK(max_diff(out.logits[1].value(), y_tc) < 1e-12);
  const auto y_et = head_oracle(gated(y_tc, g_et), pw("cascade.head.et.weight"), pw("cascade.head.et.bias")[0]);
  CHECK(max_diff(out.logits[2].value(), y_et) < 1e-12);
}

TEST_CASE("partial topology gates both branches on A_WT") {
  nn::ParameterStore<double> sp(6), sf(6);
  CascadeHead<double> partial(sp, small_cfg(Topology::kPartial));
  CascadeHead<double> full(sf, small_cfg(Topology::kFull));
  Rng rng(2);
  const Var<double> f(random_tensor(Shape{1, 8, 2, 2, 2}, rng));
  const Var<double> g(random_tensor(Shape{1, 8}, rng, 0.1, 0.9));
  const auto p = partial.forward_with_gates(f, g, g);
  const auto q = full.forward_with_gates(f, g, g);
  CHECK(p.logits[1].value() == q.logits[1].value());
  // ET of partial equals the ET head applied to the A_WT-gated features.
  const auto expect = nn::conv3d(nn::channel_gate(nn::spatial_gate(f, p.a_wt), g), sp.at("cascade.head.et.weight").var,
                                 sp.at("cascade.head.et.bias").var, 1, 0);
  CHECK(max_diff(p.logits[2].value(), expect.value()) < 1e-12);
}

TEST_CASE("identity gates collapse the cascade to plain heads") {
  nn::ParameterStore<double> store(7);
  CascadeHead<double> head(store, small_cfg(Topology::kFull));
  store.find("cascade.head.wt.bias")->var.mutable_value().fill(-40.0);
  store.find("cascade.head.wt.weight")->var.mutable_value().fill(0.0);
  store.find("cascade.head.tc.bias")->var.mutable_value().fill(-40.0);
  Rng rng(4);
  const Var<double> f(random_tensor(Shape{1, 8, 2, 2, 2}, rng, -0.01, 0.01));
  const Var<double> ones(Tensor<double>(Shape{1, 8}, 1.0));
  const auto out = head.forward_with_gates(f, ones, ones);
  const auto plain_tc = nn::conv3d(f, store.at("cascade.head.tc.weight").var, store.at("cascade.head.tc.bias").var, 1, 0);
  CHECK(max_diff(out.logits[1].value(), plain_tc.value()) < 1e-5);
}

TEST_CASE("parallel and full differ only through a closed WT gate") {
  nn::ParameterStore<double> sa(11), sb(11);
  CascadeHead<double> parallel(sa, small_cfg(Topology::kParallel));
  CascadeHead<double> full(sb, small_cfg(Topology::kFull));
  for (auto* s : {&sa, &sb}) s->find("cascade.head.wt.bias")->var.mutable_value().fill(-40.0);
  Rng rng(12);
  const Var<double> f(random_tensor(Shape{2, 8, 2, 2, 2}, rng, -0.05, 0.05));
  const Var<double> t_tc(random_tensor(Shape{2, 3, 8}, rng));
  const Var<double> t_et(random_tensor(Shape{2, 3, 8}, rng));
  const auto mask = full_mask(2, 3);
  const auto a = parallel.forward(f, t_tc, t_et, mask);
  const auto b = full.forward(f, t_tc, t_et, mask);
  CHECK(a.logits[0].value() == b.logits[0].value());
  CHECK(max_diff(a.logits[1].value(), b.logits[1].value()) < 1e-4);
  // ET of the full cascade is gated by A_TC, which is not closed, so only TC is compared tightly.
  const auto c = parallel.forward_with_gates(f, a.g_tc, a.g_et);
  CHECK(c.logits[2].value() == a.logits[2].value());
}

TEST_CASE("modulators off leaves the gates undefined and features ungated by channel") {
  auto cfg = small_cfg(Topology::kFull);
  cfg.modulators_on = false;
  nn::ParameterStore<double> store(3);
  CascadeHead<double> head(store, cfg);
  CHECK(store.find("cascade.mod.tc.fc1.weight") == nullptr);
  Rng rng(1);
  const Var<double> f(random_tensor(Shape{1, 8, 2, 2, 2}, rng));
  const Var<double> t(random_tensor(Shape{1, 2, 8}, rng));
  const auto out = head.forward(f, t, t, full_mask(1, 2));
  CHECK_FALSE(out.g_tc.defined());
  const Var<double> ones(Tensor<double>(Shape{1, 8}, 1.0));
  CHECK(max_diff(head.forward_with_gates(f, ones, ones).logits[2].value(), out.logits[2].value()) < 1e-15);
}

TEST_CASE("topology names parse and reject unknown values") {
  CHECK(parse_topology("parallel") == Topology::kParallel);
  CHECK(parse_topology("partial") == Topology::kPartial);
  CHECK(parse_topology("full") == Topology::kFull);
  CHECK_THROWS_AS(parse_topology("serial"), ConfigError);
  nn::ParameterStore<double> store(0);
  CHECK_THROWS_AS(CascadeHead<double>(store, small_cfg(Topology::kFull, 10, 8)), ConfigError);
  const auto round = CascadeConfig::from_json(small_cfg(Topology::kPartial).to_json());
  CHECK(round.topology == Topology::kPartial);
  CHECK_THROWS_AS(CascadeConfig::from_json(nlohmann::json{{"topologee", "full"}}), ConfigError);
}

TEST_CASE("whole cascade gradient check at C=8 on a 2^3 grid") {
  for (auto topo : {Topology::kParallel, Topology::kPartial, Topology::kFull}) {
    CAPTURE(topology_name(topo));
    nn::ParameterStore<double> store(21);
    CascadeHead<double> head(store, small_cfg(topo));
    Rng rng(22);
    for (auto& p : store.params()) p.var.mutable_value() = random_tensor(p.var.shape(), rng, -0.5, 0.5);
    const auto mask = full_mask(1, 3);
    auto fn = [&](const std::vector<Var<double>>& in) {
      const auto out = head.forward(in[0], in[1], in[2], mask);
      return nn::add(nn::add(testing::weighted_sum(out.logits[0], 1), testing::weighted_sum(out.logits[1], 2)),
                     testing::weighted_sum(out.logits[2], 3));
    };
    const auto res = testing::gradcheck(fn,
                                        {random_tensor(Shape{1, 8, 2, 2, 2}, rng), random_tensor(Shape{1, 3, 8}, rng),
                                         random_tensor(Shape{1, 3, 8}, rng)});
    CHECK(res.max_rel_error < 1e-3);

    const Var<double> f(random_tensor(Shape{1, 8, 2, 2, 2}, rng));
    const Var<double> t(random_tensor(Shape{1, 3, 8}, rng));
    std::vector<std::string> names;
    for (const auto& p : store.params()) names.push_back(p.name);
    const auto pres = testing::gradcheck_params(store, names, [&] {
      const auto out = head.forward(f, t, t, mask);
      return nn::add(testing::weighted_sum(out.logits[1], 2), testing::weighted_sum(out.logits[2], 3));
    });
    CHECK(pres.max_rel_error < 1e-3);
  }
}
