#pragma once

// Three-stage curriculum. Stage 1 pretrains S2F + shared encoder (BEST-RQ)
// and the text encoder (MLM); stage 2 trains the ASR head on Group-A paired
// data with S2F frozen; stage 3 interleaves supervised, unspoken-text and
// untranscribed-speech steps.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "jstts/checkpoint.hpp"
#include "jstts/corpus.hpp"
#include "jstts/losses.hpp"
#include "jstts/model.hpp"
#include "jstts/optim.hpp"

namespace jstts {

struct CurriculumConfig {
  int64_t stage1_steps = 2000;
  int64_t stage2_steps = 2000;
  int64_t stage3_steps = 1500;
  int batch_size = 8;
  std::array<double, 3> kind_weights = {1.0, 1.0, 1.0};  // paired, speech_only, text_only
  double cfg_dropout_prob = 0.1;
  uint64_t seed = 0;

  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  bool text_mlm_pretrain = true;
  int mlm_span = 1;
  double mlm_ratio = 0.15;
  int bestrq_span = 4;  // signal frames
  double bestrq_ratio = 0.3;
  double bestrq_noise_sd = 0.1;
  // weight of the S2F input-reconstruction term added to BEST-RQ
  double s2f_recon_weight = 20.0;
  // scales the RNN-T loss of unspoken-text steps
  double unspoken_text_weight = 1.0;
  int max_emissions_per_frame = 3;
  int64_t checkpoint_every = 250;
  // language whose paired data fits the pseudo-vocoder
  std::string vocoder_language = "lang_A0";

  void validate() const;
};

std::pair<LangId, SpkId> cfg_dropout(LangId lang, SpkId spk, double prob, Rng& rng);

struct PseudoLabel {
  std::vector<int> hypothesis;
  std::string source_id;
  double score = 0.0;  // greedy path log-score
};

// Per-step bookkeeping beyond the loss report.
struct StepResult {
  TrainStepReport report;
  std::array<double, kNumGroups> grad_norm{};  // before clipping
  int items = 0;    // items that contributed
  int skipped = 0;  // items dropped (alignment failure, empty hypothesis, ...)
  int align_checked = 0;
  int align_violations = 0;
  std::vector<int> langs_trained;  // non-OOV language ids fed to the TTS path

  double norm(Group g) const { return grad_norm[static_cast<size_t>(g)]; }
};

// Gradient scope of every step kind.
GroupSet step_scope(const std::string& kind);
// Groups with nonzero gradient must be exactly the scope.
bool scope_ok(const StepResult& r);

// Transcript source for untranscribed speech. Returning nullopt falls back to
// the model's own greedy decoding.
using PseudoLabelHook = std::function<std::optional<std::string>(const Utterance&)>;

class Trainer {
 public:
  Trainer(Model& model, IdRegistry registry, const CurriculumConfig& cfg, const LossWeights& weights);

  Model& model() { return model_; }
  const IdRegistry& registry() const { return registry_; }
  const CurriculumConfig& config() const { return cfg_; }
  const BestRqQuantizer& quantizer() const { return quantizer_; }

  // With update=false the step only computes losses and gradients.
  StepResult supervised_step(std::span<const Utterance* const> batch, int64_t step, bool update = true);
  StepResult unspoken_text_step(std::span<const Utterance* const> batch, int64_t step, bool update = true);
  StepResult untranscribed_speech_step(std::span<const Utterance* const> batch, int64_t step, bool update = true,
                                       const PseudoLabelHook& hook = {});
  StepResult bestrq_step(std::span<const Utterance* const> batch, int64_t step, bool update = true);
  StepResult mlm_step(std::span<const Utterance* const> batch, int64_t step, bool update = true);
  // Transducer training on paired data; trains S2F too when asked.
  StepResult asr_step(std::span<const Utterance* const> batch, int64_t step, bool train_s2f, bool update = true);

  PseudoLabel pseudo_label(const Utterance& u) const;

  void store(Checkpoint& ck) const;
  void load(const Checkpoint& ck);
  // Fresh Adam moments; every stage starts with these.
  void reset_optim() { optim_.clear(); }

 private:
  struct ItemLosses;
  ItemLosses tts_item(Binder& b, const Utterance& u, const std::vector<int>& labels, int64_t step, int64_t index, StepResult& res);
  void finish(StepResult& res, GroupSet scope, bool update);
  Rng item_rng(const char* stream, int64_t step, int64_t index) const;
  AdamState& optim(Group g);

  Model& model_;
  IdRegistry registry_;
  CurriculumConfig cfg_;
  LossWeights weights_;
  BestRqQuantizer quantizer_;
  std::map<Group, AdamState> optim_;
};

// ---- stage drivers ----------------------------------------------------------

// Where a stage persists progress. With an empty run_dir nothing is written.
struct StageIO {
  std::filesystem::path run_dir;
  // Stop (as if interrupted) once this many steps have run in this call.
  int64_t interrupt_after = -1;
  std::function<void(const StepResult&, int64_t step)> on_step;
};

struct StageSummary {
  int stage = 0;
  int64_t steps_run = 0;
  bool completed = false;
  std::map<std::string, int64_t> counters;  // per-kind step counts, audits
  std::vector<double> loss_curve;           // main loss per step
};

std::filesystem::path stage_checkpoint_path(const std::filesystem::path& run_dir, int stage);

// Language names by group, from the world.
std::set<std::string> group_languages(const CorpusWorld& world, LangGroup g);

StageSummary stage1_pretrain(Trainer& tr, const Manifest& train, const StageIO& io);
StageSummary stage2_asr(Trainer& tr, const Manifest& train, const CorpusWorld& world, const StageIO& io);
StageSummary stage3_joint(Trainer& tr, const Manifest& train, const CorpusWorld& world, Condition condition,
                          const StageIO& io, const PseudoLabelHook& hook = {});

// Fits the pseudo-vocoder on one language's paired data through the frozen S2F.
void fit_vocoder(Model& model, const Manifest& train, const std::string& language);

// Trains an independent evaluation ASR (S2F + shared + transducer) on paired data.
StageSummary train_eval_asr(Trainer& tr, const Manifest& data, int64_t steps, const StageIO& io);

// Reads `id<TAB>transcript` lines.
std::map<std::string, std::string> read_pseudo_labels(const std::filesystem::path& path);

}  // namespace jstts
