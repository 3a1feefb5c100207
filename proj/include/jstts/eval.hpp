#pragma once

// Synthesis, CER evaluation through an independent ASR, and the ablation grid.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jstts/corpus.hpp"
#include "jstts/losses.hpp"
#include "jstts/model.hpp"
#include "jstts/training.hpp"

namespace jstts {

struct DecodeResult {
  std::vector<int> tokens;
  double score = 0.0;  // summed log-probability of the chosen symbols
};

// Fills `out` (257 wide) with joint logits for frame t after emitting `prefix`.
using JointFn = std::function<void(int64_t t, std::span<const int> prefix, std::span<double> out)>;

// Frame-synchronous greedy transducer decoding: at each frame take the argmax
// symbol, advance on blank or after max_emit labels.
DecodeResult greedy_decode(int64_t frames, const JointFn& joint, int max_emit = 3);
DecodeResult greedy_decode_features(const Model& model, const Tensor& z, int max_emit = 3);
DecodeResult greedy_decode_signal(const Model& model, const Tensor& signal, int max_emit = 3);

struct SynthOptions {
  double guidance = 1.0;
  // Languages without TTS training fall back to the OOV embedding.
  bool oov_for_untrained_languages = true;
};

struct Synthesis {
  Tensor features;  // predicted Z, {T, d_feat}
  Tensor signal;    // {2T, d_sig}
  std::vector<int> durations;
  LangId lang;
  SpkId spk;
  bool lang_oov = false;
};

// Throws ValueError on empty text.
Synthesis synthesize(const std::string& text, const std::string& lang_name, const std::string& spk_name,
                     const Model& model, const IdRegistry& registry, const SynthOptions& opt = {});

struct LangEval {
  std::string lang;
  LangGroup group = LangGroup::kA;
  int utterances = 0;
  double cer_gt = 0.0;
  double cer_synth = 0.0;
  double cer_diff = 0.0;
  bool lang_oov = false;
};

struct EvalReport {
  std::string condition;
  uint64_t seed = 0;
  std::string checkpoint_id;
  std::vector<LangEval> langs;
  std::vector<std::string> notes;

  // Mean over languages of the group; synth selects cer_synth over cer_gt.
  double group_mean(LangGroup g, bool synth) const;
};

// gt_cache, when given, memoizes the evaluation ASR's groundtruth decodes by
// record id across calls with the same ASR.
EvalReport eval_condition(const Model& tts, const IdRegistry& registry, const Manifest& test, const CorpusWorld& world,
                          const Model& eval_asr, const SynthOptions& opt = {}, int max_emit = 3,
                          std::map<std::string, std::vector<int>>* gt_cache = nullptr);

// Cumulative counts of languages with cer_diff <= each threshold, followed by
// the count above the last threshold.
std::vector<int> cer_diff_histogram(const EvalReport& r, const std::vector<double>& thresholds = {0.01, 0.05, 0.10, 0.50});

// `lang<TAB>cer_gt<TAB>cer_synth<TAB>cer_diff` lines.
std::string report_tsv(const EvalReport& r);
std::string report_markdown(const EvalReport& r);
void write_report(const std::filesystem::path& dir, const std::string& stem, const EvalReport& r);

// ---- ablation ----------------------------------------------------------------

struct AblationRow {
  int row = 1;
  bool text_mlm_pretrain = false;
  bool aligned_text_mlm = false;
  bool pseudo_labeling = false;

  std::array<double, 3> kind_weights() const;
};

AblationRow ablation_row(int row);

struct AblationConfig {
  ModelConfig model;
  LossWeights losses;
  CurriculumConfig curriculum;
  int64_t eval_asr_steps = 3000;
  SynthOptions synth;
  std::vector<int> rows = {1, 2, 3, 4};
  std::vector<Condition> conditions = {Condition::kZero, Condition::k15m};
  std::filesystem::path run_dir;  // empty: keep everything in memory
  std::function<void(const std::string&)> log;
  // Sees every step of every stage; tag is "stage1", "stage2", "evalasr" or
  // the stage-3 cell tag such as "zero_row4".
  std::function<void(const std::string& tag, const StepResult&, int64_t step)> on_step;
};

struct AblationCell {
  bool ok = false;
  std::string error;
  EvalReport report;
  double cer_b = 0.0;  // mean synthesized Group-B CER
  StageSummary stage3;
};

struct AblationGrid {
  std::vector<int> rows;
  std::vector<Condition> conditions;
  std::map<std::pair<int, Condition>, AblationCell> cells;
  StageSummary stage1, stage2, eval_asr;

  const AblationCell* cell(int row, Condition c) const;
  // Zero and 15m: row 4 beats row 1; 15m row 4 beats Zero row 4.
  // Returns false when a needed cell is missing or failed.
  bool directional_ok(std::vector<std::string>* failures = nullptr) const;
};

AblationGrid run_ablation(const CorpusWorld& world, const AblationConfig& cfg);
std::string ablation_markdown(const AblationGrid& g);

}  // namespace jstts
