#pragma once

// Training objectives. The transducer routines work on a flattened lattice:
// logits are {T*(U+1), V} with row t*(U+1)+u holding node (t, u), matching
// the layout produced by outer_add.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jstts/autodiff.hpp"
#include "jstts/rng.hpp"
#include "jstts/textproc.hpp"

namespace jstts {

inline constexpr int kBlank = 256;
inline constexpr int kTransducerVocab = 257;

// -log P(labels | lattice) by log-space forward-backward. The gradient with
// respect to the logits is softmax times node occupancy minus the transition
// occupancy. Throws ValueError when T < 1 or the lattice shape disagrees.
Var rnnt_loss(const Var& logits, int64_t frames, std::span<const int> labels, int blank = kBlank);

// Log-space forward variables alone, for evaluation without a tape.
double rnnt_log_likelihood(const Tensor& logits, int64_t frames, std::span<const int> labels, int blank = kBlank);

struct ViterbiAlignment {
  std::vector<int> durations;  // per label, frames; may contain zeros
  double log_prob = 0.0;       // of the best path, terminal blank included
};

// Best monotonic path. Ties prefer blank. Frames consumed before the first
// emission count toward label 1, frames consumed after emitting label u
// toward label u. Empty for U = 0.
ViterbiAlignment rnnt_viterbi(const Tensor& logits, int64_t frames, std::span<const int> labels, int blank = kBlank);

// Makes every duration >= 1 while keeping the sum: each zero borrows one
// frame from the nearest label holding more than one (ties go right).
// Throws ValueError when the sum is smaller than the label count.
std::vector<int> repair_durations(std::vector<int> durations);

// Mean over refinements of the mean absolute error.
Var iterative_l1(const std::vector<Var>& predictions, const Var& target);

struct LossWeights {
  double w_feature = 1.0;
  double w_kl_max = 0.01;
  double w_dur = 0.1;
  double w_rnnt = 1.0;
  int64_t kl_start_step = 100;
  int64_t kl_end_step = 1000;

  void validate() const;
};

double kl_weight(int64_t step, const LossWeights& w);

// KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions.
Var kl_standard_normal(const Var& mu, const Var& logvar);

// Mean squared error between log(predicted) and log(target).
Var duration_loss(const Var& predicted, std::span<const int> target);

// Mean cross-entropy over the given rows.
Var masked_cross_entropy(const Var& logits, std::span<const int> positions, std::span<const int> targets);

// Frozen random-projection quantizer. Inputs are stacked signal frames
// (stack * d_sig wide), one per feature frame.
class BestRqQuantizer {
 public:
  BestRqQuantizer() = default;
  BestRqQuantizer(int input_dim, int code_dim, int codebook_size, uint64_t seed);

  int quantize_row(std::span<const double> x) const;
  std::vector<int> quantize(const Tensor& stacked) const;

  const Tensor& projection() const { return projection_; }  // input_dim x code_dim
  const Tensor& codebook() const { return codebook_; }      // size x code_dim, unit rows
  int codebook_size() const { return static_cast<int>(codebook_.rows()); }
  uint64_t checksum() const;

 private:
  Tensor projection_;
  Tensor codebook_;
};

// Pairs signal frames into rows of width 2*d; an odd tail is padded by
// repeating the last frame.
Tensor stack_frames(const Tensor& signal, int factor = 2);

struct BestRqMasking {
  Tensor masked_signal;
  std::vector<int> masked_frames;  // feature-rate positions whose input was touched
};

// Masks spans of signal frames with Gaussian noise. Throws ValueError for
// fewer than 4 frames or when every feature position ends up masked.
BestRqMasking bestrq_mask(const Tensor& signal, int span_len, double ratio, double noise_sd, Rng& rng);

// Cross-entropy of code predictions at masked positions only.
Var bestrq_loss(const Var& code_logits, std::span<const int> codes, std::span<const int> masked_frames);

// Cross-entropy of byte predictions at the masked slots; logits {n, 256}.
Var mlm_loss(const Var& byte_logits, const MaskedByteSeq& masked);

struct TrainStepReport {
  std::string kind;
  std::optional<double> l_feature, l_kl, l_dur, l_rnnt, l_bestrq, l_recon, l_mlm, l_sup;
};

// w_feature*l_feature + w_kl(step)*l_kl + w_dur*l_dur + w_rnnt*l_rnnt.
double assemble_sup(const TrainStepReport& r, const LossWeights& w, int64_t step);

}  // namespace jstts
