#include "textcsp/cli/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <optional>

#include "textcsp/core/io.hpp"

namespace textcsp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const IncompatibleError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e))
    return kIncompatible;
  return kConfig;
}

json RunManifest::to_json() const {
  return json{{"command", command},   {"config_path", config_path}, {"config_hash", config_hash},
              {"seed", seed},         {"out_dir", out_dir},         {"started", started},
              {"finished", finished}, {"artifacts", artifacts}};
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void guard_output_dir(const fs::path& out, const std::string& hash, bool force) {
  const auto path = out / kManifestName;
  if (!fs::exists(path) || force) return;
  json old;
  try {
    old = io::read_json(path);
  } catch (const IoError&) {
    return;
  }
  if (old.value("config_hash", "") == hash)
    throw ConfigError(out.string() + " already holds a run with config hash " + hash + "; pass --force to rerun");
}

void bind_dataset(train::ExperimentConfig& cfg, const synth::Dataset& ds) {
  cfg.model.text.vocab_size = static_cast<Index>(ds.vocab.size());
  cfg.model.text.max_tokens = ds.config.max_tokens;
  cfg.data = ds.config;
  check_compatible(cfg, ds);
}

void check_compatible(const train::ExperimentConfig& cfg, const synth::Dataset& ds) {
  if (ds.cases.empty()) throw ConfigError("dataset has no cases");
  if (static_cast<Index>(ds.vocab.size()) != cfg.model.text.vocab_size)
    throw IncompatibleError("dataset vocabulary has " + std::to_string(ds.vocab.size()) + " tokens, model expects " +
                            std::to_string(cfg.model.text.vocab_size));
  const auto& c = ds.cases.front();
  if (static_cast<Index>(c.token_ids.size()) != cfg.model.text.max_tokens)
    throw IncompatibleError("dataset reports have " + std::to_string(c.token_ids.size()) +
                            " token slots, model expects " + std::to_string(cfg.model.text.max_tokens));
  const auto grid = c.grid();
  if (grid != cfg.data.grid)
    throw IncompatibleError("dataset grid " + shape_str(Shape(grid.begin(), grid.end())) + " does not match the " +
                            shape_str(Shape(cfg.data.grid.begin(), cfg.data.grid.end())) + " grid of the config");
  const Index f = Index{1} << cfg.model.vision.depth;
  for (int a = 1; a < 4; ++a)
    if (c.volume.dim(a) % f != 0)
      throw IncompatibleError("dataset grid " + shape_str(c.volume.shape()) + " is not divisible by 2^depth = " +
                              std::to_string(f));
  if (c.volume.dim(0) != cfg.model.vision.in_channels)
    throw IncompatibleError("dataset volumes have " + std::to_string(c.volume.dim(0)) + " channels, model expects " +
                            std::to_string(cfg.model.vision.in_channels));
}

TrainRun train_run(train::ExperimentConfig cfg, const synth::Dataset& ds, const fs::path& out, bool resume,
                   bool verbose) {
  bind_dataset(cfg, ds);
  cfg.validate();
  fs::create_directories(out);
  io::write_json(out / "config.json", cfg.to_json());

  TrainRun run;
  run.out_dir = out;
  train::TextCSPModel<float> model(cfg.model, cfg.train.seed);
  run.audit = train::freeze_audit(model.store());
  io::write_json(out / "freeze_audit.json", run.audit.to_json());
  if (!run.audit.ok()) throw ConfigError("freeze audit failed: " + run.audit.violations.front());

  train::TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  const auto t0 = std::chrono::steady_clock::now();
  if (verbose)
    opts.on_epoch = [&](const train::HistoryRow& r) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "epoch %3d  lr %.5f  loss %.4f", r.epoch, r.lr, r.loss);
      if (r.evaluated)
        std::fprintf(stderr, "  dice wt/tc/et %.3f/%.3f/%.3f  violation %.4f", r.dice[0], r.dice[1], r.dice[2],
                     r.violation);
      std::fprintf(stderr, "  [%.0fs]\n", s);
    };
  run.result = train::train_loop(ds, model, cfg, opts);
  run.result.final_report.write(out / "holdout_metrics.json", out / "holdout_metrics.csv");
  return run;
}

LoadedModel load_model(const fs::path& checkpoint) {
  const json meta = train::read_checkpoint_meta(checkpoint);
  if (!meta.contains("config")) throw IncompatibleError("checkpoint " + checkpoint.string() + " carries no config");
  LoadedModel m;
  m.cfg = train::ExperimentConfig::from_json(meta.at("config"));
  m.model = std::make_unique<train::TextCSPModel<float>>(m.cfg.model, m.cfg.train.seed);
  train::load_checkpoint(checkpoint, m.model->store());
  return m;
}

void write_pgm_mid_slice(const fs::path& path, const Tensor<double>& map, int axis) {
  if (map.rank() != 5) throw ShapeError("write_pgm_mid_slice: expected [1, 1, D, H, W]");
  const Index d = map.dim(2), h = map.dim(3), w = map.dim(4);
  Index rows = 0, cols = 0;
  if (axis == 0) rows = h, cols = w;
  else if (axis == 1) rows = d, cols = w;
  else rows = d, cols = h;
  std::string img = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      Index z, y, x;
      if (axis == 0) z = d / 2, y = r, x = c;
      else if (axis == 1) z = r, y = h / 2, x = c;
      else z = r, y = c, x = w / 2;
      const double v = std::clamp(map[(z * h + y) * w + x], 0.0, 1.0);
      img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  io::write_text(path, img);
}

AttentionExport export_attention(const train::TextCSPModel<float>& model, const synth::Case& c, const fs::path& out) {
  nn::NoGradGuard guard;
  const auto batch = train::make_batch({&c});
  const auto res = model.forward(nn::Var<float>(batch.volume), batch.tokens);
  const auto sigmoid = [](const Tensor<float>& logit) {
    auto a = logit.cast<double>();
    for (Index i = 0; i < a.size(); ++i) a[i] = 1.0 / (1.0 + std::exp(-a[i]));
    return a;
  };
  const auto& y_wt = res.cascade.logits[0].value();
  const auto& y_tc = res.cascade.logits[1].value();
  // float sigmoid hits exactly 1.0 near logit 17, double near 37; trained WT logits go well past both
  AttentionExport ex{sigmoid(y_wt), sigmoid(y_tc), 0.0, 0, {}};
  for (const auto* y : {&y_wt, &y_tc})
    for (float v : y->vec()) {
      if (!std::isfinite(v)) throw NumericError("non-finite attention logit");
      ex.max_abs_logit = std::max(ex.max_abs_logit, std::abs(static_cast<double>(v)));
    }
  fs::create_directories(out);
  json maps = json::object();
  const std::pair<const char*, const Tensor<double>*> items[] = {{"a_wt", &ex.a_wt}, {"a_tc", &ex.a_tc}};
  const char* axes[] = {"axial", "coronal", "sagittal"};
  for (const auto& [name, t] : items) {
    double lo = t->size() ? (*t)[0] : 0.5, hi = lo;
    Index saturated = 0;
    for (Index i = 0; i < t->size(); ++i) {
      const double v = (*t)[i];
      if (!(v >= 0.0 && v <= 1.0)) throw NumericError(std::string(name) + " has a value outside [0, 1]");
      lo = std::min(lo, v), hi = std::max(hi, v);
      saturated += v == 0.0 || v == 1.0;
    }
    ex.saturated += saturated;
    const auto file = out / (std::string(name) + ".f64");
    io::write_raw(file, t->vec());
    ex.files.push_back(file);
    maps[name] = {{"file", file.filename().string()}, {"dtype", "float64"}, {"shape", t->shape()},
                  {"min", lo}, {"max", hi}, {"saturated_voxels", saturated}};
    for (int axis = 0; axis < 3; ++axis) {
      const auto png = out / (std::string(name) + "_" + axes[axis] + ".pgm");
      write_pgm_mid_slice(png, *t, axis);
      ex.files.push_back(png);
    }
  }
  io::write_json(out / "meta.json", json{{"case_id", c.case_id}, {"maps", maps}});
  ex.files.push_back(out / "meta.json");
  return ex;
}

std::vector<AblationRow> ablation_rows(const std::string& suite, const train::ExperimentConfig& base) {
  std::vector<AblationRow> rows;
  if (suite == "components") {
    auto c = base;
    c.model.text.prompts_on = false;
    c.model.text.lora_on = false;
    c.model.cascade.modulators_on = false;
    rows.push_back({"cascade-only", c});
    c.model.text.prompts_on = true;
    rows.push_back({"+prompts", c});
    c.model.text.lora_on = true;
    rows.push_back({"+lora", c});
    c.model.cascade.modulators_on = true;
    rows.push_back({"+modulators", c});
  } else if (suite == "cascade") {
    for (auto t : {cascade::Topology::kParallel, cascade::Topology::kPartial, cascade::Topology::kFull}) {
      auto c = base;
      c.model.cascade.topology = t;
      rows.push_back({cascade::topology_name(t), c});
    }
  } else if (suite == "tokens") {
    for (Index k : {1, 4, 10}) {
      auto c = base;
      c.model.text.prompt_tokens = k;
      rows.push_back({std::to_string(k), c});
    }
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "' (expected components, cascade or tokens)");
  }
  return rows;
}

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config_path, "experiment config (JSON)");
  app->add_option("--seed", c.seed, "seed override");
  auto* o = app->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  app->add_flag("--force", c.force, "rerun into a directory that already holds this config");
}

train::ExperimentConfig load_config(const Common& c) {
  return c.config_path.empty() ? train::ExperimentConfig{} : train::ExperimentConfig::load(c.config_path);
}

bool parse_switch(const std::string& v, const char* flag) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(std::string(flag) + ": expected on or off, got '" + v + "'");
}

struct ModelFlags {
  std::string topology;
  std::optional<Index> prompt_tokens;
  std::string prompts, lora, modulators;
  std::optional<int> epochs;
  void add(CLI::App* app) {
    app->add_option("--topology", topology, "parallel|partial|full");
    app->add_option("--prompt-tokens", prompt_tokens, "learnable prompt tokens K per region");
    app->add_option("--prompts", prompts, "on|off");
    app->add_option("--lora", lora, "on|off");
    app->add_option("--modulators", modulators, "on|off");
    app->add_option("--epochs", epochs, "training epochs");
  }
  void apply(train::ExperimentConfig& cfg) const {
    if (!topology.empty()) cfg.model.cascade.topology = cascade::parse_topology(topology);
    if (prompt_tokens) cfg.model.text.prompt_tokens = *prompt_tokens;
    if (!prompts.empty()) cfg.model.text.prompts_on = parse_switch(prompts, "--prompts");
    if (!lora.empty()) cfg.model.text.lora_on = parse_switch(lora, "--lora");
    if (!modulators.empty()) cfg.model.cascade.modulators_on = parse_switch(modulators, "--modulators");
    if (epochs) cfg.train.epochs = *epochs;
  }
};

synth::Dataset dataset_for(const std::string& data_dir, const train::ExperimentConfig& cfg) {
  if (!data_dir.empty()) return synth::load_dataset(data_dir);
  return synth::generate_dataset(cfg.data);
}

void finish_manifest(RunManifest m, const fs::path& out) {
  m.finished = utc_now();
  m.out_dir = out.string();
  io::write_json(out / kManifestName, m.to_json());
}

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != kManifestName) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_generate(const Common& c) {
  auto cfg = load_config(c);
  if (c.seed) cfg.data.seed = *c.seed;
  cfg.data.validate();
  const fs::path out = c.out;
  const std::string hash = train::config_hash(cfg.data.to_json());
  guard_output_dir(out, hash, c.force);
  RunManifest m{"generate", c.config_path, hash, cfg.data.seed, out.string(), utc_now(), "", {}};
  const auto ds = synth::generate_dataset(cfg.data);
  synth::save_dataset(out, ds);
  double violations = 0.0;
  for (const auto& cs : ds.cases) violations += metrics::evaluate_case(cs.case_id, cs.labels, cs.labels).violation;
  std::printf("cases: %zu\n", ds.cases.size());
  std::printf("containment violation rate: %g\n", violations / static_cast<double>(ds.cases.size()));
  m.artifacts = {"manifest.json", "vocab.json"};
  finish_manifest(m, out);
  return kOk;
}

int cmd_train(const Common& c, const ModelFlags& flags, const std::string& data_dir, bool resume) {
  auto cfg = load_config(c);
  if (c.seed) cfg.train.seed = *c.seed;
  flags.apply(cfg);
  const auto ds = dataset_for(data_dir, cfg);
  bind_dataset(cfg, ds);
  cfg.validate();
  const fs::path out = c.out;
  const std::string hash = train::config_hash(cfg.to_json());
  if (!resume) guard_output_dir(out, hash, c.force);
  RunManifest m{"train", c.config_path, hash, cfg.train.seed, out.string(), utc_now(), "", {}};
  const auto run = train_run(cfg, ds, out, resume);
  std::printf("best held-out avg Dice %.4f at epoch %d\n", run.result.best_dice, run.result.best_epoch);
  std::printf("%s", run.result.final_report.summary_table().c_str());
  m.artifacts = list_files(out);
  finish_manifest(m, out);
  return kOk;
}

std::vector<const synth::Case*> select_split(const synth::Dataset& ds, const std::string& split, Index holdout) {
  if (split == "all") {
    std::vector<const synth::Case*> all;
    for (const auto& cs : ds.cases) all.push_back(&cs);
    return all;
  }
  const auto s = train::split_dataset(ds, holdout);
  if (split == "holdout") return s.holdout;
  if (split == "train") return s.train;
  throw ConfigError("unknown split '" + split + "' (expected holdout, train or all)");
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data_dir, const std::string& split,
             bool labels_as_predictions) {
  auto loaded = load_model(checkpoint);
  const auto ds = dataset_for(data_dir, loaded.cfg);
  check_compatible(loaded.cfg, ds);
  const auto cases = select_split(ds, split, loaded.cfg.train.holdout);
  const fs::path out = c.out;
  const std::string hash =
      train::config_hash(json{{"checkpoint", fs::absolute(checkpoint).string()}, {"split", split},
                              {"data", data_dir}, {"labels_as_predictions", labels_as_predictions}});
  guard_output_dir(out, hash, c.force);
  RunManifest m{"eval", c.config_path, hash, loaded.cfg.train.seed, out.string(), utc_now(), "", {}};
  metrics::MetricReport report;
  if (labels_as_predictions) {
    for (const auto* cs : cases) report.cases.push_back(metrics::evaluate_case(cs->case_id, cs->labels, cs->labels));
  } else {
    report = train::evaluate(*loaded.model, cases, loaded.cfg.train.batch_size);
  }
  fs::create_directories(out);
  report.write(out / "metrics.json", out / "metrics.csv");
  std::printf("%s", report.summary_table().c_str());
  std::printf("containment violation rate: %.6f  hd95 sentinels: %d\n", report.mean_violation(),
              report.sentinel_count());
  m.artifacts = {"metrics.json", "metrics.csv"};
  finish_manifest(m, out);
  return kOk;
}

int cmd_ablate(const Common& c, const ModelFlags& flags, const std::string& suite, const std::string& data_dir) {
  auto base = load_config(c);
  if (c.seed) base.train.seed = *c.seed;
  flags.apply(base);
  const auto rows = ablation_rows(suite, base);
  const auto ds = dataset_for(data_dir, base);
  bind_dataset(base, ds);
  const fs::path out = c.out;
  const std::string hash = train::config_hash(json{{"suite", suite}, {"base", base.to_json()}});
  guard_output_dir(out, hash, c.force);
  RunManifest m{"ablate", c.config_path, hash, base.train.seed, out.string(), utc_now(), "", {}};

  std::string md = "| " + suite + " | Dice Avg | HD95 Avg | violation | status |\n|---|---|---|---|---|\n";
  std::string csv = "row,dice_avg,hd95_avg,violation_rate,status\n";
  int worst = kOk;
  char buf[256];
  for (const auto& row : rows) {
    std::string slug = row.label;
    std::erase(slug, '+');
    const fs::path dir = out / ("row-" + slug);
    std::fprintf(stderr, "== %s row %s\n", suite.c_str(), row.label.c_str());
    RunManifest rm{"ablate/" + suite + "/" + row.label, c.config_path, "", row.cfg.train.seed, dir.string(),
                   utc_now(), "", {}};
    try {
      auto cfg = row.cfg;
      bind_dataset(cfg, ds);
      rm.config_hash = train::config_hash(cfg.to_json());
      const auto run = train_run(row.cfg, ds, dir);
      const auto& r = run.result.final_report;
      std::snprintf(buf, sizeof buf, "| %s | %.1f | %.2f | %.4f | ok |\n", row.label.c_str(), 100 * r.avg_dice(),
                    r.avg_hd95(), r.mean_violation());
      md += buf;
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,ok\n", row.label.c_str(), r.avg_dice(), r.avg_hd95(),
                    r.mean_violation());
      csv += buf;
    } catch (const std::exception& e) {
      const int code = exit_code_for(e);
      worst = std::max(worst, code);
      std::fprintf(stderr, "row %s failed: %s\n", row.label.c_str(), e.what());
      md += "| " + row.label + " | - | - | - | failed (exit " + std::to_string(code) + ") |\n";
      csv += row.label + ",,,,failed\n";
    }
    if (fs::exists(dir)) {
      rm.artifacts = list_files(dir);
      finish_manifest(rm, dir);
    }
    m.artifacts.push_back(dir.filename().string());
  }
  io::write_text(out / "ablation.md", md);
  io::write_text(out / "ablation.csv", csv);
  std::printf("%s", md.c_str());
  m.artifacts.push_back("ablation.md");
  m.artifacts.push_back("ablation.csv");
  finish_manifest(m, out);
  return worst;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& data_dir,
               const std::string& case_id) {
  auto loaded = load_model(checkpoint);
  const auto ds = dataset_for(data_dir, loaded.cfg);
  check_compatible(loaded.cfg, ds);
  const synth::Case* found = nullptr;
  for (const auto& cs : ds.cases)
    if (cs.case_id == case_id) found = &cs;
  if (!found) throw ConfigError("case '" + case_id + "' not found in the dataset");
  const fs::path out = c.out;
  const std::string hash =
      train::config_hash(json{{"checkpoint", fs::absolute(checkpoint).string()}, {"case", case_id}, {"data", data_dir}});
  guard_output_dir(out, hash, c.force);
  RunManifest m{"export-attention", c.config_path, hash, loaded.cfg.train.seed, out.string(), utc_now(), "", {}};
  const auto ex = export_attention(*loaded.model, *found, out);
  for (const auto& f : ex.files) m.artifacts.push_back(f.filename().string());
  std::printf("exported %zu files for %s to %s\n", ex.files.size(), case_id.c_str(), out.string().c_str());
  finish_manifest(m, out);
  return kOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"textcsp: text-guided soft cascade segmentation on synthetic volumes"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, abl_c, exp_c;
  ModelFlags train_f, abl_f;
  std::string train_data, eval_data, abl_data, exp_data, checkpoint, exp_ckpt, split = "holdout", suite, case_id;
  bool resume = false, labels_pred = false;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen, gen_c);

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_c);
  train_f.add(tr);
  tr->add_option("--data", train_data, "dataset directory (generated from the config when omitted)");
  tr->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset directory");
  ev->add_option("--split", split, "holdout|train|all");
  ev->add_flag("--labels-as-predictions", labels_pred, "score the ground truth against itself");

  auto* ab = app.add_subcommand("ablate", "run an ablation suite");
  add_common(ab, abl_c);
  abl_f.add(ab);
  ab->add_option("--suite", suite, "components|cascade|tokens")->required();
  ab->add_option("--data", abl_data, "dataset directory");

  auto* ex = app.add_subcommand("export-attention", "export A_WT and A_TC maps for one case");
  add_common(ex, exp_c);
  ex->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
  ex->add_option("--data", exp_data, "dataset directory");
  ex->add_option("--case", case_id, "case id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_c);
    if (tr->parsed()) return cmd_train(train_c, train_f, train_data, resume);
    if (ev->parsed()) return cmd_eval(eval_c, checkpoint, eval_data, split, labels_pred);
    if (ab->parsed()) return cmd_ablate(abl_c, abl_f, suite, abl_data);
    if (ex->parsed()) return cmd_export(exp_c, exp_ckpt, exp_data, case_id);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return kOk;
}

}  // namespace textcsp::cli
