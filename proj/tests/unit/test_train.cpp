#include <doctest.h>

#include <cmath>
#include <numbers>

#include "support/tempdir.hpp"
#include "textcsp/core/io.hpp"
#include "textcsp/train/train.hpp"

using namespace textcsp;
using namespace textcsp::train;
using nn::Var;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig cfg;
  cfg.data.grid = {16, 16, 16};
  cfg.data.num_cases = 6;
  cfg.data.wt_radius = {4.0, 5.5};
  cfg.data.tc_radius = {2.5, 3.5};
  cfg.data.et_radius = {1.2, 2.0};
  cfg.model.text.d = 16;
  cfg.model.text.heads = 2;
  cfg.model.text.layers = 1;
  cfg.model.text.ffn_mult = 2;
  cfg.model.text.lora_rank = 4;
  cfg.model.text.lora_alpha = 8;
  cfg.model.vision.base_channels = 4;
  cfg.model.vision.depth = 2;
  cfg.model.vision.out_channels = 8;
  cfg.model.vision.fusion_heads = 2;
  cfg.model.vision.groups = 2;
  cfg.train.epochs = 4;
  cfg.train.warmup_epochs = 1;
  cfg.train.base_lr = 0.05;
  cfg.train.eval_interval = 2;
  cfg.train.holdout = 2;
  cfg.train.batch_size = 2;
  return cfg;
}

struct Fixture {
  ExperimentConfig cfg = tiny_experiment();
  synth::Dataset ds;
  Fixture() {
    ds = synth::generate_dataset(cfg.data);
    cfg.model.text.vocab_size = static_cast<Index>(ds.vocab.size());
    cfg.model.text.max_tokens = cfg.data.max_tokens;
  }
};

// L(w) = sum_i c_i (w_i - t_i)^2 over a few tensors.
struct Quadratic {
  nn::ParameterStore<double> store{1};
  std::vector<Tensor<double>> centre;
  std::vector<Tensor<double>> curvature;
  Quadratic() {
    Rng rng(3);
    for (int k = 0; k < 3; ++k) {
      store.create("p" + std::to_string(k), Shape{4 + k}, nn::Init::normal(1.0), true);
      Tensor<double> c(Shape{4 + k}), h(Shape{4 + k});
      for (Index i = 0; i < c.size(); ++i) {
        c[i] = rng.uniform(-1.0, 1.0);
        h[i] = rng.uniform(0.5, 3.0);
      }
      centre.push_back(c);
      curvature.push_back(h);
    }
    store.create("frozen", Shape{3}, nn::Init::normal(1.0), false);
  }
  Var<double> loss() {
    Var<double> total;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& p = store.params()[k].var;
      const auto d = nn::sub(p, Var<double>(centre[k]));
      const auto term = nn::sum(nn::mul(nn::mul(d, d), Var<double>(curvature[k])));
      total = total.defined() ? nn::add(total, term) : term;
    }
    return total;
  }
};

}  // namespace

TEST_CASE("lr schedule matches warmup and cosine values") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == doctest::Approx(0.1 / 50));
  CHECK(lr_at(49, cfg) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(std::abs(lr_at(125, cfg) - 0.05) < 1e-15);
  const double last = 0.5 * 0.1 * (1.0 + std::cos(std::numbers::pi * 149.0 / 150.0));
  CHECK(std::abs(lr_at(199, cfg) - last) < 1e-18);
  CHECK(lr_at(199, cfg) == doctest::Approx(1.1e-5).epsilon(0.01));
  CHECK(lr_at(50, cfg) - lr_at(49, cfg) == 0.0);
  CHECK_THROWS_AS(lr_at(200, cfg), ConfigError);
  CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);

  TrainConfig bad;
  bad.warmup_epochs = bad.epochs;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.base_lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("SAM hand example on L(w) = w^2") {
  nn::ParameterStore<double> store(0);
  auto w = store.create("w", Shape{1}, nn::Init::ones(), true);
  auto params = store.trainable();
  std::vector<Tensor<double>> vel;
  const LossFn<double> loss = [&] { return nn::mul(w, w); };
  const auto r = sam_step(params, loss, 0.1, 0.5, 0.0, vel);
  CHECK(r.perturbed);
  CHECK(r.grad_norm == doctest::Approx(2.0));
  CHECK(std::abs(w.value()[0] - 0.7) < 1e-15);

  w.mutable_value()[0] = 0.0;
  vel.clear();
  const auto z = sam_step(params, loss, 0.1, 0.5, 0.9, vel);
  CHECK_FALSE(z.perturbed);
  CHECK(w.value()[0] == 0.0);
}

TEST_CASE("SAM with rho = 0 reproduces SGD with momentum") {
  Quadratic a, b;
  auto pa = a.store.trainable(), pb = b.store.trainable();
  std::vector<Tensor<double>> va, vb;
  const auto frozen = a.store.at("frozen").var.value();
  for (int step = 0; step < 10; ++step) {
    sam_step(pa, LossFn<double>([&] { return a.loss(); }), 0.05, 0.0, 0.9, va);
    sgd_step(pb, LossFn<double>([&] { return b.loss(); }), 0.05, 0.9, vb);
    double m = 0.0;
    for (std::size_t k = 0; k < pa.size(); ++k)
      for (Index i = 0; i < pa[k]->var.size(); ++i)
        m = std::max(m, std::abs(pa[k]->var.value()[i] - pb[k]->var.value()[i]));
    CHECK(m <= 1e-12);
  }
  CHECK(a.store.at("frozen").var.value() == frozen);
}

TEST_CASE("SAM moves towards the minimum and restores weights before the update") {
  Quadratic q;
  auto params = q.store.trainable();
  std::vector<Tensor<double>> vel;
  const LossFn<double> loss = [&] { return q.loss(); };
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    const auto r = sam_step(params, loss, 0.05, 0.05, 0.5, vel);
    if (step == 0) first = r.loss;
    last = r.loss;
  }
  CHECK(last < 0.01 * first);

  // With momentum 0 the update uses only g(w'), applied at the restored w.
  Quadratic r;
  auto rp = r.store.trainable();
  std::vector<Tensor<double>> rv;
  std::vector<Tensor<double>> before;
  for (auto* p : rp) before.push_back(p->var.value());
  double norm = 0.0;
  for (std::size_t k = 0; k < 3; ++k)
    for (Index i = 0; i < before[k].size(); ++i) {
      const double g = 2.0 * r.curvature[k][i] * (before[k][i] - r.centre[k][i]);
      norm += g * g;
    }
  norm = std::sqrt(norm);
  sam_step(rp, LossFn<double>([&] { return r.loss(); }), 0.1, 0.2, 0.0, rv);
  for (std::size_t k = 0; k < 3; ++k)
    for (Index i = 0; i < before[k].size(); ++i) {
      const double g = 2.0 * r.curvature[k][i] * (before[k][i] - r.centre[k][i]);
      const double wp = before[k][i] + 0.2 * g / norm;
      const double gp = 2.0 * r.curvature[k][i] * (wp - r.centre[k][i]);
      CHECK(std::abs(rp[k]->var.value()[i] - (before[k][i] - 0.1 * gp)) < 1e-14);
    }
}

TEST_CASE("non-finite loss aborts the step and leaves weights alone") {
  nn::ParameterStore<double> store(0);
  auto w = store.create("w", Shape{2}, nn::Init::ones(), true);
  auto params = store.trainable();
  std::vector<Tensor<double>> vel;
  int calls = 0;
  const LossFn<double> loss = [&] {
    ++calls;
    auto s = nn::sum(nn::mul(w, w));
    if (calls == 2) return nn::scale(s, std::numeric_limits<double>::infinity());
    return s;
  };
  const auto keep = w.value();
  CHECK_THROWS_AS(sam_step(params, loss, 0.1, 0.05, 0.9, vel), NumericError);
  CHECK(w.value() == keep);
}

TEST_CASE("freeze audit reports the expected trainable groups") {
  nn::ParameterStore<double> store(0);
  textenc::TextEncoderConfig cfg;
  cfg.d = 768;
  cfg.heads = 12;
  cfg.layers = 2;
  cfg.ffn_mult = 1;
  cfg.max_tokens = 8;
  cfg.vocab_size = 8;
  cfg.prompt_tokens = 4;
  textenc::TextEncoder<double> enc(store, cfg);
  const auto rep = freeze_audit(store);
  CHECK(rep.ok());
  CHECK(rep.lora_trainable == 49152);
  CHECK(rep.prompt_trainable == 3 * 4 * 768);
  CHECK(rep.groups.at("text").trainable == 0);

  nn::ParameterStore<double> off_store(0);
  cfg.lora_on = false;
  cfg.prompts_on = false;
  textenc::TextEncoder<double> off(off_store, cfg);
  const auto off_rep = freeze_audit(off_store);
  CHECK(off_rep.ok());
  CHECK(off_rep.lora_trainable == 0);
  CHECK(off_rep.prompt_trainable == 0);
  CHECK(off_store.count(true) == 0);

  // A trainable text weight is flagged.
  nn::ParameterStore<double> bad(0);
  bad.create("text.rogue", Shape{2}, nn::Init::zeros(), true);
  bad.create("vision.frozen", Shape{2}, nn::Init::zeros(), false);
  CHECK(freeze_audit(bad).violations.size() == 2);
}

TEST_CASE("model freeze audit and frozen tensors survive training steps") {
  Fixture fx;
  TextCSPModel<float> model(fx.cfg.model, 0);
  const auto rep = freeze_audit(model.store());
  CHECK(rep.ok());
  const auto& t = fx.cfg.model.text;
  CHECK(rep.lora_trainable == t.layers * 2 * 2 * t.d * t.lora_rank);
  CHECK(rep.prompt_trainable == 3 * t.prompt_tokens * t.d);
  CHECK(model.store().count(true) + model.store().count(false) ==
        [&] {
          Index n = 0;
          for (const auto& [name, g] : rep.groups) n += g.trainable + g.frozen;
          return n;
        }());

  std::vector<std::pair<std::string, Tensor<float>>> frozen;
  for (const auto& p : model.store().params())
    if (!p.trainable) frozen.emplace_back(p.name, p.var.value());
  REQUIRE_FALSE(frozen.empty());

  const auto split = split_dataset(fx.ds, 2);
  const Batch b = make_batch({split.train[0], split.train[1]});
  const Var<float> vol(b.volume);
  auto params = model.store().trainable();
  std::vector<Tensor<float>> vel;
  const auto lora_before = model.store().at("lora.0.v.B").var.value();
  for (int s = 0; s < 5; ++s)
    sam_step(params, LossFn<float>([&] {
               return metrics::segmentation_loss(model.forward(vol, b.tokens).cascade.logits, b.labels).total;
             }),
             0.05, 0.05, 0.9, vel);
  for (const auto& [name, value] : frozen) {
    CAPTURE(name);
    CHECK(model.store().at(name).var.value() == value);
  }
  CHECK_FALSE(model.store().at("lora.0.v.B").var.value() == lora_before);
}

TEST_CASE("checkpoint round trip and resumed step equality") {
  Fixture fx;
  testing::TempDir dir;
  TextCSPModel<float> a(fx.cfg.model, 1);
  const auto split = split_dataset(fx.ds, 2);
  const Batch b = make_batch({split.train[0], split.train[1]});
  const Var<float> vol(b.volume);
  auto step = [&](TextCSPModel<float>& m, std::vector<Tensor<float>>& vel) {
    auto params = m.store().trainable();
    sam_step(params, LossFn<float>([&] {
               return metrics::segmentation_loss(m.forward(vol, b.tokens).cascade.logits, b.labels).total;
             }),
             0.05, 0.05, 0.9, vel);
  };
  std::vector<Tensor<float>> va;
  step(a, va);
  const auto path = dir.path() / "state.ckpt";
  save_checkpoint(path, a.store(), va, nlohmann::json{{"epoch", 3}, {"note", "x"}});

  TextCSPModel<float> b2(fx.cfg.model, 99);
  std::vector<Tensor<float>> vb;
  const auto meta = load_checkpoint(path, b2.store(), &vb);
  CHECK(meta.at("epoch") == 3);
  CHECK(read_checkpoint_meta(path).at("note") == "x");
  for (std::size_t i = 0; i < a.store().params().size(); ++i)
    CHECK(a.store().params()[i].var.value() == b2.store().params()[i].var.value());
  REQUIRE(vb.size() == va.size());

  step(a, va);
  step(b2, vb);
  for (std::size_t i = 0; i < a.store().params().size(); ++i)
    CHECK(a.store().params()[i].var.value() == b2.store().params()[i].var.value());

  auto other = fx.cfg.model;
  other.vision.base_channels = 8;
  TextCSPModel<float> c(other, 0);
  CHECK_THROWS_AS(load_checkpoint(path, c.store()), IncompatibleError);
  io::write_text(dir.path() / "junk.ckpt", "not a checkpoint at all");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "junk.ckpt", b2.store()), IncompatibleError);
  TextCSPModel<double> d(fx.cfg.model, 0);
  CHECK_THROWS_AS(load_checkpoint(path, d.store()), IncompatibleError);
}

TEST_CASE("train loop writes artifacts, is deterministic and resumes exactly") {
  Fixture fx;
  testing::TempDir dir;
  TrainResult first, second, resumed;
  {
    TextCSPModel<float> m(fx.cfg.model, fx.cfg.train.seed);
    first = train_loop(fx.ds, m, fx.cfg, TrainOptions{dir.path() / "a", false, {}});
  }
  for (const char* f : {"best.ckpt", "last.ckpt", "history.csv"}) CHECK(std::filesystem::exists(dir.path() / "a" / f));
  const auto csv = io::read_text(dir.path() / "a" / "history.csv");
  CHECK(csv.rfind("epoch,lr,loss,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,violation_rate\n", 0) == 0);
  REQUIRE(first.history.size() == 4);
  CHECK_FALSE(first.history[0].evaluated);
  CHECK(first.history[1].evaluated);
  CHECK(first.history[3].evaluated);
  CHECK(first.final_report.cases.size() == 2);
  for (int e = 0; e < 4; ++e) CHECK(first.history[static_cast<std::size_t>(e)].lr == lr_at(e, fx.cfg.train));

  {
    TextCSPModel<float> m(fx.cfg.model, fx.cfg.train.seed);
    second = train_loop(fx.ds, m, fx.cfg, TrainOptions{dir.path() / "b", false, {}});
  }
  CHECK(history_csv(first.history) == history_csv(second.history));

  {
    TextCSPModel<float> m(fx.cfg.model, fx.cfg.train.seed);
    TrainOptions opts{dir.path() / "c", false, [](const HistoryRow& r) {
                        if (r.epoch == 1) throw std::runtime_error("interrupted");
                      }};
    CHECK_THROWS_AS(train_loop(fx.ds, m, fx.cfg, opts), std::runtime_error);
  }
  {
    TextCSPModel<float> m(fx.cfg.model, 1234);
    resumed = train_loop(fx.ds, m, fx.cfg, TrainOptions{dir.path() / "c", true, {}});
  }
  CHECK(history_csv(resumed.history) == history_csv(first.history));
  CHECK(io::read_text(dir.path() / "c" / "history.csv") == csv);

  auto changed = fx.cfg;
  changed.train.base_lr = 0.01;
  TextCSPModel<float> m(changed.model, 0);
  CHECK_THROWS_AS(train_loop(fx.ds, m, changed, TrainOptions{dir.path() / "c", true, {}}), IncompatibleError);
}

TEST_CASE("short training run lowers the loss") {
  Fixture fx;
  fx.cfg.train.epochs = 8;
  fx.cfg.train.warmup_epochs = 2;
  fx.cfg.train.eval_interval = 8;
  testing::TempDir dir;
  TextCSPModel<float> m(fx.cfg.model, 0);
  const auto res = train_loop(fx.ds, m, fx.cfg, TrainOptions{dir.path(), false, {}});
  CHECK(res.history.back().loss < res.history.front().loss);
}

TEST_CASE("experiment config round trip, hash stability and validation") {
  const auto cfg = tiny_experiment();
  const auto j = cfg.to_json();
  CHECK(ExperimentConfig::from_json(j).to_json() == j);
  const auto reordered = nlohmann::json::parse(R"({"train": {"seed": 0, "epochs": 4}, "data": {"num_cases": 6}})");
  const auto same = nlohmann::json::parse(R"({"data": {"num_cases": 6}, "train": {"epochs": 4, "seed": 0}})");
  CHECK(config_hash(reordered) == config_hash(same));
  CHECK(config_hash(reordered) != config_hash(j));
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json{{"optimizer", {}}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epochs", "many"}}), ConfigError);
  auto bad = cfg;
  bad.train.holdout = 6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(cfg.validate());
}
