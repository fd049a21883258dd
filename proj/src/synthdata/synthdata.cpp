#include "textcsp/synthdata/synthdata.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "textcsp/core/io.hpp"
#include "textcsp/core/random.hpp"

namespace textcsp::synth {

using nlohmann::json;
namespace fs = std::filesystem;

const char* region_name(int region) {
  switch (region) {
    case kWT: return "WT";
    case kTC: return "TC";
    case kET: return "ET";
    default: return "?";
  }
}

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("generator config: " + field + " " + why);
}

json range_json(const RadiusRange& r) { return json::array({r.lo, r.hi}); }

RadiusRange range_from(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError("generator config: " + field + " must be [lo, hi]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

void GeneratorConfig::validate() const {
  for (int a = 0; a < 3; ++a) require(grid[a] >= 8, "grid", "dimensions must be at least 8");
  require(num_cases >= 1, "num_cases", "must be positive");
  require(p_no_enhancement >= 0.0 && p_no_enhancement <= 1.0, "p_no_enhancement", "must lie in [0, 1]");
  require(p_no_necrosis >= 0.0 && p_no_necrosis <= 1.0, "p_no_necrosis", "must lie in [0, 1]");
  require(std::isfinite(noise_sigma) && noise_sigma >= 0.0, "noise_sigma", "must be finite and non-negative");
  require(max_tokens >= 2, "max_tokens", "must be at least 2");
  const struct {
    const char* name;
    const RadiusRange& r;
  } ranges[] = {{"wt_radius", wt_radius}, {"tc_radius", tc_radius}, {"et_radius", et_radius}};
  for (const auto& e : ranges)
    require(e.r.lo > 0.0 && e.r.lo <= e.r.hi, e.name, "must satisfy 0 < lo <= hi");
  require(tc_radius.hi < wt_radius.lo, "tc_radius", "must lie strictly inside wt_radius (tc.hi < wt.lo)");
  require(et_radius.hi < tc_radius.lo, "et_radius", "must lie strictly inside tc_radius (et.hi < tc.lo)");
  const Index smallest = std::min({grid[0], grid[1], grid[2]});
  // The brain ellipsoid spans 0.46 of each axis on either side of the centre.
  require(wt_radius.hi + 1.0 <= 0.46 * static_cast<double>(smallest), "wt_radius",
          "does not fit inside the grid (needs wt.hi + 1 <= 0.46 * min(grid))");
}

json GeneratorConfig::to_json() const {
  return json{{"grid", {grid[0], grid[1], grid[2]}},
              {"num_cases", num_cases},
              {"seed", seed},
              {"wt_radius", range_json(wt_radius)},
              {"tc_radius", range_json(tc_radius)},
              {"et_radius", range_json(et_radius)},
              {"p_no_enhancement", p_no_enhancement},
              {"p_no_necrosis", p_no_necrosis},
              {"noise_sigma", noise_sigma},
              {"max_tokens", max_tokens}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("generator config: expected a JSON object");
  GeneratorConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "grid") {
        if (!v.is_array() || v.size() != 3) throw ConfigError("generator config: grid must be [D, H, W]");
        for (int a = 0; a < 3; ++a) c.grid[a] = v[a].get<Index>();
      } else if (key == "num_cases") {
        c.num_cases = v.get<Index>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "wt_radius") {
        c.wt_radius = range_from(v, key);
      } else if (key == "tc_radius") {
        c.tc_radius = range_from(v, key);
      } else if (key == "et_radius") {
        c.et_radius = range_from(v, key);
      } else if (key == "p_no_enhancement") {
        c.p_no_enhancement = v.get<double>();
      } else if (key == "p_no_necrosis") {
        c.p_no_necrosis = v.get<double>();
      } else if (key == "noise_sigma") {
        c.noise_sigma = v.get<double>();
      } else if (key == "max_tokens") {
        c.max_tokens = v.get<Index>();
      } else {
        throw ConfigError("generator config: unknown field " + key);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report templates

namespace {

const std::vector<std::string> kSizes{"small", "moderate", "large"};
const std::vector<std::string> kSides{"left", "right"};
const std::vector<std::string> kLobes{"frontal", "parietal", "temporal", "occipital"};
const std::string kLocationTemplate = "A {size} lesion is seen in the {side} {lobe} lobe.";

const std::vector<std::string> kEnhancing{"The mass is ring-enhancing.", "There is avid enhancement after contrast.",
                                          "An enhancing rim surrounds the core."};
const std::vector<std::string> kNonEnhancing{"There is no contrast uptake.", "No enhancement is seen after contrast.",
                                             "The lesion is non-enhancing."};
const std::vector<std::string> kNecrotic{"There is central necrosis.", "A necrotic core is present."};
const std::vector<std::string> kSolid{"No necrosis is identified.", "The core appears solid."};
const std::vector<std::string> kEdema{"There is surrounding edema.", "Perilesional edema is noted.",
                                      "Vasogenic edema extends into the adjacent white matter."};
const std::vector<std::string> kNoEdema{"No edema is seen."};

std::string fill(std::string text, const std::string& key, const std::string& value) {
  const std::string tag = "{" + key + "}";
  const auto pos = text.find(tag);
  if (pos != std::string::npos) text.replace(pos, tag.size(), value);
  return text;
}

const std::string& pick(const std::vector<std::string>& options, Rng& rng) {
  return options[static_cast<std::size_t>(rng.below(options.size()))];
}

}  // namespace

const std::vector<std::string>& enhancement_lexicon() {
  static const std::vector<std::string> v{"ring-enhancing", "avid enhancement", "enhancing rim"};
  return v;
}
const std::vector<std::string>& necrosis_lexicon() {
  static const std::vector<std::string> v{"central necrosis", "necrotic core"};
  return v;
}
const std::vector<std::string>& edema_lexicon() {
  static const std::vector<std::string> v{"surrounding edema", "perilesional edema", "vasogenic edema"};
  return v;
}

bool contains_phrase(const std::string& text, const std::string& phrase) {
  const auto words = split_words(text);
  const auto needle = split_words(phrase);
  if (needle.empty() || needle.size() > words.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= words.size(); ++i)
    if (std::equal(needle.begin(), needle.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) return true;
  return false;
}

bool contains_any(const std::string& text, const std::vector<std::string>& phrases) {
  for (const auto& p : phrases)
    if (contains_phrase(text, p)) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    const char c = static_cast<char>(std::tolower(ch));
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-') {
      cur.push_back(c);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary() {
  add("[PAD]");
  add("[UNK]");
  add("[CLS]");
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  std::set<std::string> sorted(words.begin(), words.end());
  for (const auto& w : sorted) add(w);
}

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token)) throw ConfigError("vocabulary: duplicate token " + token);
  ids_[token] = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(token);
}

Vocabulary Vocabulary::report_lexicon() {
  std::vector<std::string> words;
  auto take = [&words](const std::string& text) {
    for (auto& w : split_words(text)) words.push_back(w);
  };
  take(fill(fill(fill(kLocationTemplate, "size", ""), "side", ""), "lobe", ""));
  for (const auto* list : {&kSizes, &kSides, &kLobes, &kEnhancing, &kNonEnhancing, &kNecrotic, &kSolid, &kEdema, &kNoEdema})
    for (const auto& s : *list) take(s);
  return Vocabulary(words);
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw ConfigError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

json Vocabulary::to_json() const {
  json j = json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
  return j;
}

Vocabulary Vocabulary::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("vocab.json: expected an object of token -> id");
  std::vector<std::string> tokens(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [tok, v] : j.items()) {
    if (!v.is_number_integer()) throw ValidationError("vocab.json: id for " + tok + " is not an integer");
    const auto id = v.get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= tokens.size() || seen[static_cast<std::size_t>(id)])
      throw ValidationError("vocab.json: ids must be a permutation of 0..n-1");
    seen[static_cast<std::size_t>(id)] = true;
    tokens[static_cast<std::size_t>(id)] = tok;
  }
  if (tokens.size() < 3 || tokens[0] != "[PAD]" || tokens[1] != "[UNK]" || tokens[2] != "[CLS]")
    throw ValidationError("vocab.json: reserved ids 0, 1, 2 must be [PAD], [UNK], [CLS]");
  Vocabulary v;
  for (std::size_t i = 3; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

TokenizedText tokenize(const std::string& report, const Vocabulary& vocab, Index length) {
  if (length < 2) throw ConfigError("tokenize: length must be at least 2");
  TokenizedText out;
  out.ids.assign(static_cast<std::size_t>(length), Vocabulary::kPad);
  out.mask.assign(static_cast<std::size_t>(length), 0);
  const auto words = split_words(report);
  const std::size_t n = std::min(words.size(), static_cast<std::size_t>(length));
  for (std::size_t i = 0; i < n; ++i) {
    out.ids[i] = vocab.id(words[i]);
    out.mask[i] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator

std::string case_id_for(Index index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%04lld", static_cast<long long>(index));
  return buf;
}

namespace {

struct Ellipsoid {
  std::array<double, 3> centre{};
  std::array<double, 3> radii{};
  bool contains(double z, double y, double x) const {
    const double dz = (z - centre[0]) / radii[0];
    const double dy = (y - centre[1]) / radii[1];
    const double dx = (x - centre[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

// Per-channel additive offsets (T1, T1ce, T2, FLAIR) on top of unit tissue.
constexpr double kEdemaOffset[4] = {-0.2, 0.0, 0.6, 0.9};
constexpr double kCoreOffset[4] = {-0.5, -0.1, 0.9, 0.3};
constexpr double kEnhancingOffset[4] = {-0.2, 1.0, 0.4, 0.3};

}  // namespace

Case generate_case(const GeneratorConfig& cfg, Index index) {
  cfg.validate();
  if (index < 0 || index >= cfg.num_cases)
    throw ConfigError("generate_case: index " + std::to_string(index) + " outside [0, num_cases)");
  Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const Index d = cfg.grid[0], h = cfg.grid[1], w = cfg.grid[2];

  Ellipsoid brain;
  for (int a = 0; a < 3; ++a) {
    brain.centre[a] = 0.5 * static_cast<double>(cfg.grid[a] - 1);
    brain.radii[a] = 0.46 * static_cast<double>(cfg.grid[a]);
  }
  Ellipsoid wt, tc, et;
  for (int a = 0; a < 3; ++a) {
    wt.radii[a] = rng.uniform(cfg.wt_radius.lo, cfg.wt_radius.hi);
    const double room = std::max(0.0, brain.radii[a] - cfg.wt_radius.hi - 1.0);
    wt.centre[a] = brain.centre[a] + rng.uniform(-0.6, 0.6) * room;
  }
  const double tc_shift = (cfg.wt_radius.lo - cfg.tc_radius.hi) / (2.0 * std::sqrt(3.0));
  const double et_shift = (cfg.tc_radius.lo - cfg.et_radius.hi) / (2.0 * std::sqrt(3.0));
  for (int a = 0; a < 3; ++a) {
    tc.radii[a] = rng.uniform(cfg.tc_radius.lo, cfg.tc_radius.hi);
    tc.centre[a] = wt.centre[a] + rng.uniform(-tc_shift, tc_shift);
  }
  for (int a = 0; a < 3; ++a) {
    et.radii[a] = rng.uniform(cfg.et_radius.lo, cfg.et_radius.hi);
    et.centre[a] = tc.centre[a] + rng.uniform(-et_shift, et_shift);
  }
  const bool has_et = rng.uniform() >= cfg.p_no_enhancement;
  const bool solid_core = rng.uniform() < cfg.p_no_necrosis;

  const Index vox = d * h * w;
  Case c;
  c.case_id = case_id_for(index);
  c.volume = Tensor<float>(Shape{kNumModalities, d, h, w});
  c.labels = Tensor<std::uint8_t>(Shape{kNumRegions, d, h, w});
  std::vector<double> raw(static_cast<std::size_t>(kNumModalities * vox), 0.0);

  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index v = (z * h + y) * w + x;
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        if (!brain.contains(fz, fy, fx)) continue;
        const bool in_wt = wt.contains(fz, fy, fx);
        const bool in_tc = in_wt && tc.contains(fz, fy, fx);
        // The enhancing-looking region appears in the image even when the case
        // has no enhancement; only the report tells the two apart.
        const bool bright = in_tc && (solid_core || et.contains(fz, fy, fx));
        const bool in_et = bright && has_et;
        c.labels[kWT * vox + v] = in_wt;
        c.labels[kTC * vox + v] = in_tc;
        c.labels[kET * vox + v] = in_et;
        const double* offset = bright ? kEnhancingOffset : in_tc ? kCoreOffset : in_wt ? kEdemaOffset : nullptr;
        for (int ch = 0; ch < kNumModalities; ++ch) {
          double value = 1.0 + rng.normal(0.0, cfg.noise_sigma);
          if (offset) value += offset[ch];
          raw[static_cast<std::size_t>(ch * vox + v)] = value;
        }
      }

  for (int ch = 0; ch < kNumModalities; ++ch) {
    const double* src = raw.data() + ch * vox;
    double mean = 0.0;
    Index n = 0;
    for (Index v = 0; v < vox; ++v)
      if (src[v] != 0.0) {
        mean += src[v];
        ++n;
      }
    if (n == 0) continue;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (Index v = 0; v < vox; ++v)
      if (src[v] != 0.0) var += (src[v] - mean) * (src[v] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    for (Index v = 0; v < vox; ++v)
      c.volume[ch * vox + v] = src[v] != 0.0 ? static_cast<float>((src[v] - mean) * inv) : 0.0f;
  }

  Index n_wt = 0, n_tc = 0, n_et = 0;
  double cz = 0, cy = 0, cx = 0;
  for (Index v = 0; v < vox; ++v) {
    n_wt += c.labels[kWT * vox + v];
    n_tc += c.labels[kTC * vox + v];
    n_et += c.labels[kET * vox + v];
    if (c.labels[kWT * vox + v]) {
      cz += static_cast<double>(v / (h * w));
      cy += static_cast<double>((v / w) % h);
      cx += static_cast<double>(v % w);
    }
  }
  const double r_eff = std::cbrt(3.0 * static_cast<double>(n_wt) / (4.0 * std::numbers::pi));
  const double span = cfg.wt_radius.hi - cfg.wt_radius.lo;
  const std::string& size = r_eff < cfg.wt_radius.lo + span / 3.0       ? kSizes[0]
                            : r_eff < cfg.wt_radius.lo + 2.0 * span / 3.0 ? kSizes[1]
                                                                          : kSizes[2];
  const double denom = std::max<Index>(n_wt, 1);
  const bool right = cx / denom > brain.centre[2];
  const bool posterior = cy / denom > brain.centre[1];
  const bool superior = cz / denom < brain.centre[0];
  const std::string& lobe = posterior ? (superior ? kLobes[1] : kLobes[3]) : (superior ? kLobes[0] : kLobes[2]);

  std::vector<std::string> findings;
  findings.push_back(n_et > 0 ? pick(kEnhancing, rng) : pick(kNonEnhancing, rng));
  findings.push_back(n_tc > n_et ? pick(kNecrotic, rng) : pick(kSolid, rng));
  findings.push_back(n_wt > n_tc ? pick(kEdema, rng) : pick(kNoEdema, rng));
  for (std::size_t i = findings.size() - 1; i > 0; --i)
    std::swap(findings[i], findings[static_cast<std::size_t>(rng.below(i + 1))]);

  std::string report = fill(fill(fill(kLocationTemplate, "size", size), "side", right ? kSides[1] : kSides[0]), "lobe", lobe);
  for (const auto& f : findings) report += " " + f;
  c.report = report;

  const auto tok = tokenize(c.report, Vocabulary::report_lexicon(), cfg.max_tokens);
  c.token_ids = tok.ids;
  c.attention_mask = tok.mask;
  return c;
}

Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds{cfg, Vocabulary::report_lexicon(), {}};
  ds.cases.reserve(static_cast<std::size_t>(cfg.num_cases));
  for (Index i = 0; i < cfg.num_cases; ++i) ds.cases.push_back(generate_case(cfg, i));
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk format

void save_case(const fs::path& dir, const Case& c) {
  fs::create_directories(dir);
  if (c.volume.rank() != 4 || c.volume.dim(0) != kNumModalities)
    throw ShapeError("save_case: volume must be [4, D, H, W], got " + shape_str(c.volume.shape()));
  if (c.labels.shape() != Shape{kNumRegions, c.volume.dim(1), c.volume.dim(2), c.volume.dim(3)})
    throw ShapeError("save_case: labels shape " + shape_str(c.labels.shape()) + " disagrees with volume");
  if (c.token_ids.size() != c.attention_mask.size())
    throw ShapeError("save_case: token_ids and attention_mask differ in length");
  io::write_raw(dir / "volume.f32", c.volume.vec());
  io::write_raw(dir / "labels.u8", c.labels.vec());
  io::write_text(dir / "report.txt", c.report);
  json meta{{"case_id", c.case_id},
            {"volume", {{"file", "volume.f32"}, {"dtype", "float32"}, {"shape", c.volume.shape()}}},
            {"labels", {{"file", "labels.u8"}, {"dtype", "uint8"}, {"shape", c.labels.shape()}, {"channels", {"WT", "TC", "ET"}}}},
            {"token_ids", c.token_ids},
            {"attention_mask", c.attention_mask}};
  io::write_json(dir / "meta.json", meta);
}

namespace {

Shape shape_from(const json& meta, const char* member) {
  try {
    return meta.at(member).at("shape").get<Shape>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("meta.json: missing or malformed ") + member + ".shape");
  }
}

}  // namespace

Case load_case(const fs::path& dir) {
  for (const char* member : {"meta.json", "volume.f32", "labels.u8", "report.txt"})
    if (!fs::exists(dir / member)) throw IoError(std::string(member) + ": missing from case directory " + dir.string());
  const json meta = io::read_json(dir / "meta.json");
  Case c;
  try {
    c.case_id = meta.at("case_id").get<std::string>();
    c.token_ids = meta.at("token_ids").get<std::vector<std::int32_t>>();
    c.attention_mask = meta.at("attention_mask").get<std::vector<std::uint8_t>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("meta.json: ") + e.what());
  }
  const Shape vshape = shape_from(meta, "volume");
  const Shape lshape = shape_from(meta, "labels");
  if (vshape.size() != 4 || vshape[0] != kNumModalities)
    throw ValidationError("meta.json: volume shape must be [4, D, H, W], got " + shape_str(vshape));
  if (lshape != Shape{kNumRegions, vshape[1], vshape[2], vshape[3]})
    throw ValidationError("meta.json: labels shape " + shape_str(lshape) + " disagrees with volume " + shape_str(vshape));
  if (c.token_ids.size() != c.attention_mask.size())
    throw ValidationError("meta.json: token_ids and attention_mask differ in length");
  c.volume = Tensor<float>(vshape, io::read_raw<float>(dir / "volume.f32", static_cast<std::size_t>(shape_numel(vshape))));
  c.labels = Tensor<std::uint8_t>(lshape, io::read_raw<std::uint8_t>(dir / "labels.u8", static_cast<std::size_t>(shape_numel(lshape))));
  for (auto v : c.labels.vec())
    if (v > 1) throw ValidationError("labels.u8: values must be 0 or 1");
  c.report = io::read_text(dir / "report.txt");
  return c;
}

void save_dataset(const fs::path& root, const Dataset& ds) {
  fs::create_directories(root);
  json ids = json::array();
  for (const auto& c : ds.cases) {
    save_case(root / c.case_id, c);
    ids.push_back(c.case_id);
  }
  io::write_json(root / "vocab.json", ds.vocab.to_json());
  json manifest{{"format_version", 1},
                {"grid", {ds.config.grid[0], ds.config.grid[1], ds.config.grid[2]}},
                {"max_tokens", ds.config.max_tokens},
                {"vocabulary", "vocab.json"},
                {"generator", ds.config.to_json()},
                {"cases", ids}};
  io::write_json(root / "manifest.json", manifest);
}

Dataset load_dataset(const fs::path& root) {
  if (!fs::exists(root / "manifest.json")) throw IoError("manifest.json: missing from dataset " + root.string());
  const json manifest = io::read_json(root / "manifest.json");
  Dataset ds;
  std::array<Index, 3> grid{};
  std::vector<std::string> ids;
  std::string vocab_file;
  try {
    ds.config = GeneratorConfig::from_json(manifest.at("generator"));
    const auto g = manifest.at("grid").get<std::vector<Index>>();
    if (g.size() != 3) throw ValidationError("manifest.json: grid must have 3 entries");
    grid = {g[0], g[1], g[2]};
    ids = manifest.at("cases").get<std::vector<std::string>>();
    vocab_file = manifest.at("vocabulary").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest.json: ") + e.what());
  }
  ds.vocab = Vocabulary::from_json(io::read_json(root / vocab_file));
  for (const auto& id : ids) {
    Case c = load_case(root / id);
    if (c.grid() != grid)
      throw ValidationError("manifest.json: grid [" + std::to_string(grid[0]) + ", " + std::to_string(grid[1]) + ", " +
                            std::to_string(grid[2]) + "] disagrees with " + id + " volume shape " +
                            shape_str(c.volume.shape()));
    ds.cases.push_back(std::move(c));
  }
  return ds;
}

}  // namespace textcsp::synth
