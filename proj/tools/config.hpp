#pragma once

// Run configuration read from an INI-style file.
//
//   seed = 0
//   condition = zero          # zero | 15m | supervised
//   run_dir = runs/desk
//   [corpus]  [model]  [losses]  [curriculum]  [eval]
//
// Unknown sections and keys are rejected. A relative run_dir is resolved
// against $JSTTS_RUN_ROOT when set, else against the working directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "jstts/corpus.hpp"
#include "jstts/eval.hpp"
#include "jstts/losses.hpp"
#include "jstts/model.hpp"
#include "jstts/training.hpp"

namespace jstts::cli {

// Bad configuration or arguments that are well-formed but unusable; exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kRunRootEnv = "JSTTS_RUN_ROOT";

struct RunConfig {
  uint64_t seed = 0;
  Condition condition = Condition::kZero;
  std::filesystem::path run_dir;
  // Presets kept for reference set this to false; commands refuse them.
  bool runnable = true;

  CorpusConfig corpus;
  ModelConfig model;
  LossWeights losses;
  CurriculumConfig curriculum;
  std::optional<std::filesystem::path> pseudo_labels;  // [curriculum] pseudo_labels

  int64_t eval_asr_steps = 3000;
  SynthOptions synth;

  // Seeds and corpus dimensions propagated into the other sections.
  CorpusConfig corpus_config() const;
  ModelConfig model_config(const IdRegistry& reg) const;
  CurriculumConfig curriculum_config() const;
};

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace jstts::cli
