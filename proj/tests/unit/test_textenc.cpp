#include <doctest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "textcsp/textenc/textenc.hpp"

using namespace textcsp;
using namespace textcsp::textenc;
using nn::Var;

namespace {

TextEncoderConfig tiny(Index k = 4, Index l = 10) {
  TextEncoderConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 2;
  c.max_tokens = l;
  c.vocab_size = 20;
  c.prompt_tokens = k;
  c.lora_rank = 4;
  return c;
}

TokenBatch batch(Index b, Index l, std::uint64_t seed, Index real) {
  Rng rng(seed);
  std::vector<std::vector<std::int32_t>> ids(static_cast<std::size_t>(b));
  std::vector<std::vector<std::uint8_t>> masks(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < l; ++j) {
      const bool on = j < real - i;
      ids[static_cast<std::size_t>(i)].push_back(on ? 3 + static_cast<std::int32_t>(rng.below(17)) : 0);
      masks[static_cast<std::size_t>(i)].push_back(on);
    }
  return make_token_batch(ids, masks);
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("lora scalar example") {
  Var<double> w(Tensor<double>({1, 1}, 1.0));
  Var<double> a(Tensor<double>({1, 1}, 2.0));
  Var<double> b(Tensor<double>({1, 1}, 3.0));
  Var<double> x(Tensor<double>({1, 1}, 1.0));
  CHECK(lora_forward(w, a, b, 16.0, 8, x).value()[0] == 13.0);
}

TEST_CASE("lora with zero B reproduces the base projection") {
  nn::ParameterStore<float> store(3);
  LoRALinear<float> lin(store, "base", "lora.0.q", 16, 16, 4, 16.0);
  CHECK(lin.scale() == 4.0);
  Rng rng(1);
  Tensor<float> xt({3, 16});
  for (Index i = 0; i < xt.size(); ++i) xt[i] = static_cast<float>(rng.normal());
  Var<float> x(xt);
  CHECK(lin(x).value() == lin.base()(x).value());
  CHECK(lin.A().requires_grad());
  CHECK(lin.B().requires_grad());
  CHECK(!lin.base().weight().requires_grad());
  double sd = 0;
  for (float v : lin.A().value().vec()) sd += static_cast<double>(v) * v;
  sd = std::sqrt(sd / static_cast<double>(lin.A().size()));
  CHECK(sd > 0.01);
  CHECK(sd < 0.03);
}

TEST_CASE("lora rank validation and parameter counts") {
  nn::ParameterStore<float> store(1);
  CHECK_THROWS_AS(LoRALinear<float>(store, "b", "lora.x", 4, 4, 8, 16.0), ConfigError);
  auto cfg = tiny();
  cfg.lora_rank = 32;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  nn::ParameterStore<float> big(1);
  LoRALinear<float> l768(big, "base", "lora.0.q", 768, 768, 8, 16.0);
  CHECK(big.count(true) == 2 * 768 * 8);
  CHECK(big.count(true) == 12288);
}

TEST_CASE("prompt slicing keeps the token length") {
  nn::ParameterStore<float> store(5);
  TextEncoder<float> enc(store, tiny(4, 10));
  const auto tb = batch(2, 10, 1, 7);
  const auto t = enc.encode_subregion(tb, 0);
  CHECK(enc.last_internal_length() == 14);
  CHECK(t.shape() == Shape{2, 10, 16});
  for (Index k : {1, 4, 10}) {
    nn::ParameterStore<float> s2(5);
    TextEncoder<float> e2(s2, tiny(k, 6));
    CHECK(e2.encode_subregion(batch(1, 6, 2, 4), 2).shape() == Shape{1, 6, 16});
    CHECK(e2.last_internal_length() == k + 6);
  }
}

TEST_CASE("equal prompts give identical sub-region outputs") {
  nn::ParameterStore<float> store(5);
  TextEncoder<float> enc(store, tiny());
  const auto tb = batch(2, 10, 4, 8);
  CHECK(!(enc.encode_subregion(tb, 0).value() == enc.encode_subregion(tb, 1).value()));
  store.find("prompt.TC")->var.mutable_value() = store.at("prompt.WT").var.value();
  CHECK(enc.encode_subregion(tb, 0).value() == enc.encode_subregion(tb, 1).value());
  store.find("prompt.ET")->var.mutable_value() = store.at("prompt.WT").var.value();
  const auto rep = enc.encode_all(tb);
  // float32 rounding of (3t)/3 stays within two ulps of t
  CHECK(max_abs_diff(rep.shared.value(), rep.sub[0].value()) <= 5e-7);

  nn::ParameterStore<double> sd(5);
  TextEncoder<double> ed(sd, tiny());
  for (const char* k : {"prompt.TC", "prompt.ET"}) sd.find(k)->var.mutable_value() = sd.at("prompt.WT").var.value();
  const auto rd = ed.encode_all(tb);
  double worst = 0;
  for (Index i = 0; i < rd.shared.size(); ++i) worst = std::max(worst, std::abs(rd.shared.value()[i] - rd.sub[0].value()[i]));
  CHECK(worst <= 1e-7);
}

TEST_CASE("shared representation is the mean of the three") {
  nn::ParameterStore<double> store(6);
  TextEncoder<double> enc(store, tiny());
  const auto rep = enc.encode_all(batch(2, 10, 9, 9));
  for (int s = 0; s < 3; ++s) CHECK(rep.sub[static_cast<std::size_t>(s)].shape() == Shape{2, 10, 16});
  double worst = 0;
  for (Index i = 0; i < rep.shared.size(); ++i) {
    const double m = (rep.sub[0].value()[i] + rep.sub[1].value()[i] + rep.sub[2].value()[i]) / 3.0;
    worst = std::max(worst, std::abs(m - rep.shared.value()[i]));
  }
  CHECK(worst <= 1e-7);
  CHECK(!(rep.sub[0].value() == rep.sub[2].value()));
}

TEST_CASE("prompt positions are attended even without real tokens") {
  nn::ParameterStore<float> store(7);
  TextEncoder<float> enc(store, tiny());
  const auto empty = batch(1, 10, 3, 0);
  const auto before = enc.encode_subregion(empty, 0).value();
  for (float v : before.vec()) REQUIRE(std::isfinite(v));
  store.find("prompt.WT")->var.mutable_value()[0] += 0.5f;
  CHECK(!(enc.encode_subregion(empty, 0).value() == before));
}

TEST_CASE("zero-initialised lora leaves the encoder output unchanged") {
  auto with = tiny();
  auto without = tiny();
  without.lora_on = false;
  nn::ParameterStore<float> s1(11), s2(11);
  TextEncoder<float> e1(s1, with), e2(s2, without);
  const auto tb = batch(2, 10, 5, 8);
  for (int r = 0; r < 3; ++r)
    CHECK(max_abs_diff(e1.encode_subregion(tb, r).value(), e2.encode_subregion(tb, r).value()) < 1e-6);
  CHECK(s2.count(true) == 3 * 4 * 16);
  CHECK(s1.count(true) == 3 * 4 * 16 + 2 * 2 * (2 * 16 * 4));
}

TEST_CASE("prompts off runs a single plain encode") {
  auto cfg = tiny();
  cfg.prompts_on = false;
  nn::ParameterStore<float> store(2);
  TextEncoder<float> enc(store, cfg);
  const auto tb = batch(2, 10, 5, 8);
  const auto rep = enc.encode_all(tb);
  CHECK(enc.last_internal_length() == 10);
  CHECK(rep.sub[0].value() == rep.sub[2].value());
  CHECK(rep.shared.value() == rep.sub[1].value());
  CHECK(store.find("prompt.WT") == nullptr);
  CHECK_THROWS_AS(enc.encode_subregion(tb, 0), ConfigError);
}

TEST_CASE("sentence pooling") {
  Tensor<double> t({1, 3, 2}, std::vector<double>{1, 2, 5, 8, 100, 100});
  Tensor<std::uint8_t> m({1, 3}, std::vector<std::uint8_t>{1, 1, 0});
  const auto p = pool_sentence(Var<double>(t), m);
  CHECK(p.value()[0] == 3.0);
  CHECK(p.value()[1] == 5.0);
  Tensor<std::uint8_t> none({1, 3});
  const auto z = pool_sentence(Var<double>(t), none);
  CHECK(z.value()[0] == 0.0);
  CHECK(z.value()[1] == 0.0);
  Tensor<double> same({1, 3, 2}, std::vector<double>{4, -1, 4, -1, 4, -1});
  const auto s = pool_sentence(Var<double>(same), m);
  CHECK(s.value()[0] == 4.0);
  CHECK(s.value()[1] == -1.0);
}

TEST_CASE("gradients reach prompts and lora factors") {
  auto cfg = tiny(3, 6);
  cfg.d = 8;
  cfg.lora_rank = 2;
  nn::ParameterStore<double> store(13);
  TextEncoder<double> enc(store, cfg);
  // Move B off zero so gradients w.r.t. A are non-trivial.
  for (auto& p : store.params())
    if (p.name.ends_with(".B"))
      for (Index i = 0; i < p.var.size(); ++i) p.var.mutable_value()[i] = 0.05 * std::sin(static_cast<double>(i + 1));
  const auto tb = batch(2, 6, 8, 5);
  auto loss = [&] {
    const auto rep = enc.encode_all(tb);
    return testing::weighted_sum(nn::add(rep.shared, nn::mul(rep.sub[2], rep.sub[2])), 3);
  };
  const auto r = testing::gradcheck_params(
      store, {"prompt.WT", "prompt.TC", "prompt.ET", "lora.0.q.A", "lora.1.v.A", "lora.0.v.B", "lora.1.q.B"}, loss, 10);
  CHECK(r.max_rel_error < 1e-4);
}
