#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "textcsp/visionnet/visionnet.hpp"

using namespace textcsp;
using namespace textcsp::visionnet;
using nn::Var;
using testing::random_tensor;

namespace {

VisionConfig tiny() {
  VisionConfig c;
  c.base_channels = 4;
  c.depth = 2;
  c.out_channels = 8;
  c.fusion_heads = 2;
  c.groups = 2;
  return c;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor<float>& t) {
  for (Index i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

void randomise(nn::ParameterStore<double>& store, const std::string& prefix, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : store.params())
    if (p.name.rfind(prefix, 0) == 0) p.var.mutable_value() = random_tensor(p.var.shape(), rng, -0.4, 0.4);
}

}  // namespace

TEST_CASE("default encoder halves the grid down to a 4^3 bottleneck") {
  nn::ParameterStore<float> store(0);
  VisionNet<float> net(store, VisionConfig{}, 64);
  Rng rng(1);
  const Var<float> x(testing::random_tensor_f(Shape{2, 4, 32, 32, 32}, rng));
  const auto pyr = net.encode(x);
  REQUIRE(pyr.size() == 4);
  CHECK(pyr[0].shape() == Shape{2, 8, 32, 32, 32});
  CHECK(pyr[1].shape() == Shape{2, 16, 16, 16, 16});
  CHECK(pyr[3].shape() == Shape{2, 64, 4, 4, 4});
  const auto f = net.decode(pyr, pyr.back());
  CHECK(f.shape() == Shape{2, 48, 32, 32, 32});
  CHECK(all_finite(f.value()));
}

TEST_CASE("zero input gives finite features") {
  nn::ParameterStore<float> store(2);
  VisionNet<float> net(store, tiny(), 8);
  const Var<float> x(Tensor<float>(Shape{1, 4, 8, 8, 8}));
  const auto pyr = net.encode(x);
  for (const auto& p : pyr) CHECK(all_finite(p.value()));
  CHECK(all_finite(net.decode(pyr, pyr.back()).value()));
}

TEST_CASE("batched forward equals per-sample forwards") {
  nn::ParameterStore<double> store(3);
  VisionNet<double> net(store, tiny(), 8);
  randomise(store, "vision.fuse", 4);
  Rng rng(5);
  const auto x = random_tensor(Shape{2, 4, 8, 8, 8}, rng);
  const auto text = random_tensor(Shape{2, 3, 8}, rng);
  Tensor<double> mask(Shape{2, 3}, 1.0);
  mask[5] = 0.0;

  auto run = [&](const Tensor<double>& xv, const Tensor<double>& tv, const Tensor<double>& mv) {
    const auto pyr = net.encode(Var<double>(xv));
    const auto fused = net.fuse_bottleneck(pyr.back(), Var<double>(tv), mv);
    return net.decode(pyr, fused.vision).value();
  };
  const auto both = run(x, text, mask);
  const Index per = both.inner_size(0);
  for (Index b = 0; b < 2; ++b) {
    Tensor<double> xb(Shape{1, 4, 8, 8, 8}), tb(Shape{1, 3, 8}), mb(Shape{1, 3});
    std::copy(x.data() + b * xb.size(), x.data() + (b + 1) * xb.size(), xb.data());
    std::copy(text.data() + b * tb.size(), text.data() + (b + 1) * tb.size(), tb.data());
    std::copy(mask.data() + b * 3, mask.data() + (b + 1) * 3, mb.data());
    const auto one = run(xb, tb, mb);
    double m = 0.0;
    for (Index i = 0; i < per; ++i) m = std::max(m, std::abs(one[i] - both[b * per + i]));
    CHECK(m < 1e-12);
  }
}

TEST_CASE("fusion is the identity at initialisation") {
  nn::ParameterStore<double> store(6);
  VisionNet<double> net(store, tiny(), 8);
  CHECK(store.at("vision.fuse.vision_from_text.out.weight").var.value() ==
        Tensor<double>(Shape{16, 16}));
  Rng rng(7);
  const auto bottleneck = random_tensor(Shape{2, 16, 2, 2, 2}, rng);
  const auto text = random_tensor(Shape{2, 5, 8}, rng);
  const auto fused = net.fuse_bottleneck(Var<double>(bottleneck), Var<double>(text), Tensor<double>(Shape{2, 5}, 1.0));
  CHECK(fused.vision.value() == bottleneck);
  CHECK(fused.text.value() == text);
}

TEST_CASE("an all-zero text mask leaves the vision tokens untouched") {
  for (bool vision_first : {false, true}) {
    auto cfg = tiny();
    cfg.vision_first = vision_first;
    nn::ParameterStore<double> store(8);
    VisionNet<double> net(store, cfg, 8);
    randomise(store, "vision.fuse", 9);
    Rng rng(10);
    const auto bottleneck = random_tensor(Shape{1, 16, 2, 2, 2}, rng);
    const auto text = random_tensor(Shape{1, 4, 8}, rng);
    const auto fused = net.fuse_bottleneck(Var<double>(bottleneck), Var<double>(text), Tensor<double>(Shape{1, 4}));
    CHECK(max_diff(fused.vision.value(), bottleneck) == 0.0);
    const auto open = net.fuse_bottleneck(Var<double>(bottleneck), Var<double>(text), Tensor<double>(Shape{1, 4}, 1.0));
    CHECK(max_diff(open.vision.value(), bottleneck) > 0.0);
  }
}

TEST_CASE("fusion parameters pass a float64 gradient check") {
  nn::ParameterStore<double> store(11);
  VisionNet<double> net(store, tiny(), 8);
  randomise(store, "vision.fuse", 12);
  Rng rng(13);
  const Var<double> bottleneck(random_tensor(Shape{2, 16, 2, 2, 2}, rng));
  const Var<double> text(random_tensor(Shape{2, 3, 8}, rng));
  Tensor<double> mask(Shape{2, 3}, 1.0);
  mask[2] = 0.0;
  const auto loss = [&] { return testing::weighted_sum(net.fuse_bottleneck(bottleneck, text, mask).vision); };
  // A key bias shifts every logit of a query row equally, so softmax cancels it
  // and its true gradient is zero; relative errors there only measure noise.
  std::vector<std::string> names;
  for (const auto& p : store.params())
    if (p.name.rfind("vision.fuse", 0) == 0 && p.name.find(".k.bias") == std::string::npos) names.push_back(p.name);
  REQUIRE(names.size() == 20);
  const auto res = testing::gradcheck_params(store, names, loss);
  CHECK(res.max_rel_error < 1e-4);
  for (const char* kb : {"vision.fuse.text_from_vision.k.bias", "vision.fuse.vision_from_text.k.bias"}) {
    const auto& g = store.at(kb).var.grad();
    for (Index i = 0; i < g.size(); ++i) CHECK(std::abs(g[i]) < 1e-12);
  }
}

TEST_CASE("whole vision path gradient reaches the encoder") {
  nn::ParameterStore<double> store(14);
  auto cfg = tiny();
  cfg.depth = 1;
  VisionNet<double> net(store, cfg, 8);
  randomise(store, "vision.fuse", 15);
  Rng rng(16);
  const Var<double> x(random_tensor(Shape{1, 4, 4, 4, 4}, rng));
  const Var<double> text(random_tensor(Shape{1, 2, 8}, rng));
  const Tensor<double> mask(Shape{1, 2}, 1.0);
  const auto res = testing::gradcheck_params(
      store, {"vision.enc.0.0.conv.weight", "vision.enc.1.1.norm.gamma", "vision.dec.0.up.weight",
              "vision.dec.out.conv.weight"},
      [&] {
        const auto pyr = net.encode(x);
        return testing::weighted_sum(net.decode(pyr, net.fuse_bottleneck(pyr.back(), text, mask).vision));
      },
      8);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grid and config validation") {
  nn::ParameterStore<float> store(0);
  VisionNet<float> net(store, VisionConfig{}, 64);
  CHECK_THROWS_AS(net.check_grid(Shape{1, 4, 30, 32, 32}), ConfigError);
  CHECK_THROWS_AS(net.check_grid(Shape{1, 3, 32, 32, 32}), ConfigError);
  CHECK_NOTHROW(net.check_grid(Shape{1, 4, 16, 24, 32}));

  auto bad = VisionConfig{};
  bad.fusion_heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(VisionConfig::from_json(nlohmann::json{{"width", 3}}), ConfigError);
  const auto round = VisionConfig::from_json(tiny().to_json());
  CHECK(round.to_json() == tiny().to_json());
}
