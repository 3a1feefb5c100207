#pragma once

// Procedural micro-languages standing in for found multilingual data.
//
// Every language belongs to a family. A family fixes a strong acoustic
// transform and a home script; members perturb the transform slightly and
// draw their alphabet from the family pool, which mixes family-script letters
// with Latin letters shared across families. A character's emission vector is
// global (shared by every language that writes it) up to a small
// per-language jitter, so acoustics transfer within a family but not across.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jstts/rng.hpp"
#include "jstts/tensor.hpp"
#include "jstts/textproc.hpp"

namespace jstts {

enum class LangGroup { kA, kB };
enum class UttKind { kPaired, kSpeechOnly, kTextOnly };
enum class Condition { kZero, k15m, kSupervised };

std::string to_string(LangGroup g);
std::string to_string(UttKind k);
std::string to_string(Condition c);
UttKind parse_utt_kind(const std::string& s);
Condition parse_condition(const std::string& s);

struct CorpusConfig {
  int d_sig = 16;
  int d_feat = 8;
  int n_group_a = 8;
  int n_group_b = 4;
  int speakers_per_language = 3;
  double noise_sd = 0.05;
  double member_transform_spread = 0.1;
  double emission_jitter = 0.1;
  int min_text_chars = 4;
  int max_text_chars = 8;
  // per-language pool sizes
  int paired_per_language = 300;
  int speech_only_per_language = 200;
  int text_only_per_language = 300;
  int test_per_language = 50;
  int eval_asr_per_language = 150;
  // paired Group-B utterances per language standing in for "15 minutes"
  int budget_15m = 20;
  uint64_t seed = 0;
};

struct MicroLanguageSpec {
  std::string name;
  LangGroup group = LangGroup::kA;
  int family = 0;
  std::u32string alphabet;
  std::vector<int> base_duration;        // signal frames per character, in [2, 6]
  std::vector<std::vector<double>> emission;  // per character, d_feat
  Tensor transform;                      // d_feat x d_feat
  Tensor text_transition;                // alphabet x alphabet Markov chain, zero diagonal

  int char_index(char32_t c) const;
  bool operator==(const MicroLanguageSpec&) const;
};

struct SpeakerSpec {
  std::string name;
  std::string home_language;
  std::vector<double> offset;  // d_sig, norm <= 1
  double tempo = 1.0;          // in [0.8, 1.25]
};

// Global pieces of the generative process shared by all languages.
struct CorpusWorld {
  CorpusConfig config;
  std::vector<MicroLanguageSpec> languages;
  std::vector<SpeakerSpec> speakers;
  Tensor signal_map;  // d_sig x d_feat, orthonormal columns

  const MicroLanguageSpec& language(const std::string& name) const;
  std::vector<const SpeakerSpec*> speakers_of(const std::string& lang) const;
};

struct Utterance {
  std::string id;
  UttKind kind = UttKind::kPaired;
  std::optional<std::string> text;
  std::optional<Tensor> signal;  // frames x d_sig
  std::string lang_name;
  std::optional<std::string> spk_name;   // label, absent for unlabeled data
  std::vector<int> reference_durations;  // per character, signal frames
};

struct Manifest {
  enum class Split { kTrain, kTest };
  Split split = Split::kTrain;
  std::vector<Utterance> records;

  size_t count(UttKind k) const;
  size_t count(UttKind k, const std::string& lang) const;
};

// Language generation: n_group_a + n_group_b specs, deterministic in the seed.
// Throws ValueError when emission separation cannot be met.
std::vector<MicroLanguageSpec> gen_languages(int n_group_a, int n_group_b, uint64_t seed, const CorpusConfig& cfg = {});
CorpusWorld gen_world(const CorpusConfig& cfg);

double condition_number(const Tensor& square);
double min_pairwise_emission_distance(const MicroLanguageSpec& lang);

// Renders text into noisy signal frames. Throws ValueError naming any
// character outside the language alphabet.
Utterance synth_utterance(const std::string& text, const MicroLanguageSpec& lang, const SpeakerSpec& spk,
                          const Tensor& signal_map, double noise_sd, Rng& rng);

std::string sample_text(const MicroLanguageSpec& lang, int min_chars, int max_chars, Rng& rng);

struct ManifestSet {
  Manifest train;
  Manifest test;
  Manifest eval_asr;
};

// Builds train/test/eval-ASR manifests for a data condition. The utterance
// pools are generated from the world seed and are identical across
// conditions; only which paired Group-B records enter train changes.
ManifestSet build_manifests(const CorpusWorld& world, Condition condition);

// Registry of every language and labeled speaker in a train manifest.
IdRegistry registry_from(const Manifest& train);

// True when the manifest holds no paired Group-B record.
bool audit_zero_condition(const Manifest& train, const CorpusWorld& world);

// ---- on-disk formats -------------------------------------------------------
// Signal file: little-endian int64 frames, int64 dim, then frames*dim float64.
void write_signal(const std::filesystem::path& path, const Tensor& frames);
Tensor read_signal(const std::filesystem::path& path);

// Manifest file: kind<TAB>lang<TAB>spk<TAB>text<TAB>signal_path per line.
// Signal paths are written relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const Manifest& m, const std::filesystem::path& signal_dir);
Manifest read_manifest(const std::filesystem::path& path, Manifest::Split split);

void write_world(const std::filesystem::path& path, const CorpusWorld& world);
CorpusWorld read_world(const std::filesystem::path& path);

// ---- batch mixing -----------------------------------------------------------

struct BatchRef {
  UttKind kind;
  std::vector<const Utterance*> items;
};

// Draws batches from a manifest. The kind is drawn with probability
// proportional to the weights among non-empty kinds; items are uniform within
// the kind. A batch depends only on (seed, step).
class BatchMixer {
 public:
  BatchMixer(const Manifest& m, uint64_t seed);
  // Restrict the pools, e.g. paired to a language subset.
  void set_pool(UttKind kind, std::vector<const Utterance*> items);

  BatchRef sample_batch(int64_t step, const std::array<double, 3>& kind_weights, int batch_size) const;
  const std::vector<const Utterance*>& pool(UttKind kind) const { return pools_[static_cast<int>(kind)]; }

 private:
  std::array<std::vector<const Utterance*>, 3> pools_;
  uint64_t seed_;
};

}  // namespace jstts
