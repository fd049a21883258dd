#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "textcsp/core/io.hpp"
#include "textcsp/train/train.hpp"

namespace textcsp::train {

using nlohmann::json;
namespace fs = std::filesystem;

Batch make_batch(const std::vector<const synth::Case*>& cases) {
  if (cases.empty()) throw ShapeError("make_batch: no cases");
  const auto& first = *cases.front();
  const Index b = static_cast<Index>(cases.size());
  Shape vs = first.volume.shape(), ls = first.labels.shape();
  vs.insert(vs.begin(), b);
  ls.insert(ls.begin(), b);
  Batch out{Tensor<float>(vs), Tensor<float>(ls), {}};
  std::vector<std::vector<std::int32_t>> ids;
  std::vector<std::vector<std::uint8_t>> masks;
  const Index vn = first.volume.size(), ln = first.labels.size();
  for (Index i = 0; i < b; ++i) {
    const auto& c = *cases[static_cast<std::size_t>(i)];
    if (c.volume.shape() != first.volume.shape() || c.labels.shape() != first.labels.shape())
      throw ShapeError("make_batch: case " + c.case_id + " has a different grid");
    std::copy(c.volume.data(), c.volume.data() + vn, out.volume.data() + i * vn);
    for (Index j = 0; j < ln; ++j) out.labels[i * ln + j] = c.labels[j] ? 1.0f : 0.0f;
    ids.push_back(c.token_ids);
    masks.push_back(c.attention_mask);
  }
  out.tokens = textenc::make_token_batch(ids, masks);
  return out;
}

std::vector<Tensor<std::uint8_t>> predict(const TextCSPModel<float>& model, const std::vector<const synth::Case*>& cases,
                                          Index batch_size) {
  nn::NoGradGuard guard;
  std::vector<Tensor<std::uint8_t>> out;
  for (std::size_t start = 0; start < cases.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(cases.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const synth::Case*> chunk(cases.begin() + static_cast<std::ptrdiff_t>(start),
                                          cases.begin() + static_cast<std::ptrdiff_t>(stop));
    Batch b = make_batch(chunk);
    const auto res = model.forward(nn::Var<float>(b.volume), b.tokens);
    const Index n = chunk.front()->labels.inner_size(0);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Tensor<std::uint8_t> pred(chunk[i]->labels.shape());
      for (int r = 0; r < 3; ++r) {
        const float* y = res.cascade.logits[static_cast<std::size_t>(r)].value().data() + static_cast<Index>(i) * n;
        for (Index v = 0; v < n; ++v) pred[r * n + v] = y[v] > 0.0f ? 1 : 0;
      }
      out.push_back(std::move(pred));
    }
  }
  return out;
}

metrics::MetricReport evaluate(const TextCSPModel<float>& model, const std::vector<const synth::Case*>& cases,
                               Index batch_size) {
  const auto preds = predict(model, cases, batch_size);
  metrics::MetricReport report;
  for (std::size_t i = 0; i < cases.size(); ++i)
    report.cases.push_back(metrics::evaluate_case(cases[i]->case_id, preds[i], cases[i]->labels));
  return report;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,lr,loss,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,violation_rate\n";
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + num(r.lr) + "," + num(r.loss);
    for (double d : r.dice) out += "," + (r.evaluated ? num(d) : std::string());
    for (double h : r.hd95) out += "," + (r.evaluated ? num(h) : std::string());
    out += "," + (r.evaluated ? num(r.violation) : std::string()) + "\n";
  }
  return out;
}

namespace {

json row_to_json(const HistoryRow& r) {
  return json{{"epoch", r.epoch}, {"lr", r.lr},     {"loss", r.loss},          {"evaluated", r.evaluated},
              {"dice", r.dice},   {"hd95", r.hd95}, {"violation", r.violation}};
}

HistoryRow row_from_json(const json& j) {
  HistoryRow r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.loss = j.at("loss").get<double>();
  r.evaluated = j.at("evaluated").get<bool>();
  r.dice = j.at("dice").get<std::array<double, 3>>();
  r.hd95 = j.at("hd95").get<std::array<double, 3>>();
  r.violation = j.at("violation").get<double>();
  return r;
}

void fill_metrics(HistoryRow& row, const metrics::MetricReport& report) {
  row.evaluated = true;
  row.dice = report.mean_dice();
  row.hd95 = report.mean_hd95();
  row.violation = report.mean_violation();
}

}  // namespace

Split split_dataset(const synth::Dataset& ds, Index holdout) {
  const Index n = static_cast<Index>(ds.cases.size());
  if (holdout < 1 || holdout >= n)
    throw ConfigError("train.holdout (" + std::to_string(holdout) + ") must be in [1, " + std::to_string(n) + ")");
  Split s;
  for (Index i = 0; i < n; ++i) (i < n - holdout ? s.train : s.holdout).push_back(&ds.cases[static_cast<std::size_t>(i)]);
  return s;
}

TrainResult train_loop(const synth::Dataset& ds, TextCSPModel<float>& model, const ExperimentConfig& cfg,
                       const TrainOptions& opts) {
  const TrainConfig& tc = cfg.train;
  tc.validate();
  const Split split = split_dataset(ds, tc.holdout);
  const std::string hash = config_hash(cfg.to_json());
  fs::create_directories(opts.out_dir);
  const fs::path last_path = opts.out_dir / "last.ckpt", best_path = opts.out_dir / "best.ckpt";

  TrainResult result;
  std::vector<Tensor<float>> velocity;
  Rng shuffle(derive_seed(tc.seed, "shuffle"));
  int start = 0;
  if (opts.resume) {
    const json meta = load_checkpoint(last_path, model.store(), &velocity);
    if (meta.value("config_hash", "") != hash)
      throw IncompatibleError("resume: " + last_path.string() + " was written with a different config");
    start = meta.at("epoch").get<int>() + 1;
    shuffle.set_state(meta.at("rng_state").get<std::string>());
    for (const auto& r : meta.at("history")) result.history.push_back(row_from_json(r));
    result.best_dice = meta.at("best_dice").get<double>();
    result.best_epoch = meta.at("best_epoch").get<int>();
  }

  const auto params = model.store().trainable();
  const auto meta_for = [&](int epoch) {
    json h = json::array();
    for (const auto& r : result.history) h.push_back(row_to_json(r));
    return json{{"config", cfg.to_json()},        {"config_hash", hash},          {"epoch", epoch},
                {"rng_state", shuffle.state()},   {"history", std::move(h)},      {"best_dice", result.best_dice},
                {"best_epoch", result.best_epoch}};
  };

  bool have_final = false;
  for (int epoch = start; epoch < tc.epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr_at(epoch, tc);

    std::vector<std::size_t> order(split.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<const synth::Case*> chunk;
      for (std::size_t i = s; i < std::min(order.size(), s + static_cast<std::size_t>(tc.batch_size)); ++i)
        chunk.push_back(split.train[order[i]]);
      const Batch b = make_batch(chunk);
      const nn::Var<float> volume(b.volume);
      const LossFn<float> loss_fn = [&] {
        const auto out = model.forward(volume, b.tokens);
        return metrics::segmentation_loss(out.cascade.logits, b.labels, tc.loss_weights, tc.batch_dice).total;
      };
      const auto step = sam_step(params, loss_fn, row.lr, tc.sam_rho, tc.momentum, velocity, tc.weight_decay);
      loss_sum += step.loss;
      ++batches;
    }
    row.loss = loss_sum / batches;

    const bool last = epoch == tc.epochs - 1;
    bool improved = false;
    if ((epoch + 1) % tc.eval_interval == 0 || last) {
      result.final_report = evaluate(model, split.holdout, tc.batch_size);
      fill_metrics(row, result.final_report);
      have_final = last;
      if (result.final_report.avg_dice() > result.best_dice) {
        result.best_dice = result.final_report.avg_dice();
        result.best_epoch = epoch;
        improved = true;
      }
    }
    result.history.push_back(row);
    if (improved) save_checkpoint(best_path, model.store(), velocity, meta_for(epoch));
    io::write_text(opts.out_dir / "history.csv", history_csv(result.history));
    save_checkpoint(last_path, model.store(), velocity, meta_for(epoch));
    if (opts.on_epoch) opts.on_epoch(row);
  }
  if (!have_final) result.final_report = evaluate(model, split.holdout, tc.batch_size);
  if (!fs::exists(best_path)) save_checkpoint(best_path, model.store(), velocity, meta_for(tc.epochs - 1));
  io::write_text(opts.out_dir / "history.csv", history_csv(result.history));
  return result;
}

json FreezeReport::to_json() const {
  json g = json::object();
  for (const auto& [name, c] : groups) g[name] = {{"trainable", c.trainable}, {"frozen", c.frozen}};
  return json{{"groups", g},
              {"lora_trainable", lora_trainable},
              {"prompt_trainable", prompt_trainable},
              {"violations", violations},
              {"ok", ok()}};
}

template <typename T>
FreezeReport freeze_audit(const nn::ParameterStore<T>& store) {
  FreezeReport rep;
  for (const auto& p : store.params()) {
    const std::string group = p.name.substr(0, p.name.find('.'));
    auto& c = rep.groups[group];
    (p.trainable ? c.trainable : c.frozen) += p.var.size();
    if (p.trainable && !p.var.requires_grad()) rep.violations.push_back(p.name + ": trainable but not tracking grads");
    if (group == "text") {
      if (p.trainable) rep.violations.push_back(p.name + ": text encoder weight is trainable");
    } else if (!p.trainable) {
      rep.violations.push_back(p.name + ": expected trainable");
    }
    if (p.trainable && group == "lora") rep.lora_trainable += p.var.size();
    if (p.trainable && group == "prompt") rep.prompt_trainable += p.var.size();
  }
  return rep;
}

template FreezeReport freeze_audit<float>(const nn::ParameterStore<float>&);
template FreezeReport freeze_audit<double>(const nn::ParameterStore<double>&);

}  // namespace textcsp::train
