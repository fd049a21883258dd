#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/core/tensor.hpp"

namespace textcsp::synth {

enum Channel : int { kT1 = 0, kT1ce = 1, kT2 = 2, kFlair = 3 };
enum Region : int { kWT = 0, kTC = 1, kET = 2 };
inline constexpr int kNumModalities = 4;
inline constexpr int kNumRegions = 3;
const char* region_name(int region);

struct RadiusRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct GeneratorConfig {
  std::array<Index, 3> grid{32, 32, 32};
  Index num_cases = 64;
  std::uint64_t seed = 0;
  RadiusRange wt_radius{7.5, 10.5};
  RadiusRange tc_radius{4.5, 6.5};
  RadiusRange et_radius{2.8, 4.0};
  double p_no_enhancement = 0.3;
  double p_no_necrosis = 0.1;
  double noise_sigma = 0.15;
  Index max_tokens = 32;

  // Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static GeneratorConfig from_json(const nlohmann::json& j);
};

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;

  Vocabulary();  // reserved tokens only
  explicit Vocabulary(const std::vector<std::string>& words);
  // Reserved tokens plus every word the report templates can emit, sorted.
  static Vocabulary report_lexicon();

  std::int32_t id(const std::string& token) const;  // kUnk when absent
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t> ids_;
};

// Lowercase; words are maximal runs of [a-z0-9-]; everything else separates.
std::vector<std::string> split_words(const std::string& text);

struct TokenizedText {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
};
TokenizedText tokenize(const std::string& report, const Vocabulary& vocab, Index length);

struct Case {
  std::string case_id;
  Tensor<float> volume;          // [4, D, H, W]
  Tensor<std::uint8_t> labels;   // [3, D, H, W], channels WT, TC, ET
  std::string report;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attention_mask;

  std::array<Index, 3> grid() const { return {volume.dim(1), volume.dim(2), volume.dim(3)}; }
  friend bool operator==(const Case& a, const Case& b) = default;
};

std::string case_id_for(Index index);
Case generate_case(const GeneratorConfig& cfg, Index index);

// Phrase lists used by the report templates. Presence of a lexicon phrase in
// a report is equivalent to the corresponding region being nonempty.
const std::vector<std::string>& enhancement_lexicon();
const std::vector<std::string>& necrosis_lexicon();
const std::vector<std::string>& edema_lexicon();
// True when the phrase occurs as a contiguous word sequence of the text.
bool contains_phrase(const std::string& text, const std::string& phrase);
bool contains_any(const std::string& text, const std::vector<std::string>& phrases);

void save_case(const std::filesystem::path& dir, const Case& c);
Case load_case(const std::filesystem::path& dir);

struct Dataset {
  GeneratorConfig config;
  Vocabulary vocab;
  std::vector<Case> cases;
};

// Writes <root>/<case_id>/..., manifest.json and vocab.json.
void save_dataset(const std::filesystem::path& root, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& root);
Dataset generate_dataset(const GeneratorConfig& cfg);

}  // namespace textcsp::synth
