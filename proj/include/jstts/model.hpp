#pragma once

// The four-part network. Speech enters through S2F (frozen after
// pretraining) into a d_feat feature space that both the ASR path (shared
// encoder + transducer decoder) and the TTS path (text encoder, durations,
// feature decoder, VAE) operate on. A linear pseudo-vocoder maps features
// back to signal frames.

#include <array>
#include <cstdint>
#include <deque>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "jstts/autodiff.hpp"
#include "jstts/textproc.hpp"

namespace jstts {

enum class Group : uint8_t { kS2F, kShared, kRnnt, kText, kDuration, kDecoder, kVae, kVocoder };
inline constexpr int kNumGroups = 8;
inline constexpr std::array<Group, kNumGroups> kAllGroups = {Group::kS2F,  Group::kShared,   Group::kRnnt,
                                                             Group::kText, Group::kDuration, Group::kDecoder,
                                                             Group::kVae,  Group::kVocoder};
std::string group_name(Group g);
Group parse_group(const std::string& s);

class GroupSet {
 public:
  GroupSet() = default;
  GroupSet(std::initializer_list<Group> gs) {
    for (Group g : gs) insert(g);
  }
  void insert(Group g) { bits_ |= bit(g); }
  bool has(Group g) const { return (bits_ & bit(g)) != 0; }
  bool operator==(const GroupSet&) const = default;
  std::string str() const;

 private:
  static uint32_t bit(Group g) { return 1u << static_cast<int>(g); }
  uint32_t bits_ = 0;
};

struct ModelConfig {
  int d_sig = 16;
  int d_feat = 8;
  int hidden = 64;
  int joint = 32;
  int pred_embed = 32;
  int s2f_layers = 1;
  int shared_layers = 2;
  int text_layers = 2;
  int decoder_layers = 1;  // blocks per refinement
  int refinements = 2;     // K
  int vae_dim = 8;
  int id_embed = 8;
  int n_langs = 1;  // registry sizes, OOV included
  int n_spks = 1;
  int code_dim = 8;
  int codebook_size = 16;
  double cfg_dropout_prob = 0.1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Owns every parameter and remembers its group.
class ParamStore {
 public:
  Parameter& add(Group g, const std::string& name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> group(Group g);
  std::vector<Parameter*> all();
  Group group_of(const Parameter& p) const;
  size_t size() const { return params_.size(); }
  const std::deque<Parameter>& entries() const { return params_; }

  void zero_grad();
  uint64_t checksum(Group g) const;
  double grad_norm(Group g) const;

 private:
  std::deque<Parameter> params_;
  std::vector<Group> groups_;
};

// Puts parameters on a tape; only groups in `trainable` collect gradients.
class Binder {
 public:
  Binder(Tape& tape, GroupSet trainable) : tape_(tape), trainable_(trainable) {}
  Var operator()(Parameter& p, Group g) { return tape_.param(p, trainable_.has(g)); }
  Tape& tape() { return tape_; }
  const GroupSet& trainable() const { return trainable_; }

 private:
  Tape& tape_;
  GroupSet trainable_;
};

struct Linear {
  Parameter* w = nullptr;
  Parameter* b = nullptr;
  Group g = Group::kS2F;
  Var operator()(Binder& bind, const Var& x) const;
};

struct Norm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;
  Group g = Group::kS2F;
  Var operator()(Binder& bind, const Var& x) const;
};

// Pre-norm residual block: single-head self-attention, depthwise temporal
// convolution (kernel 3), feed-forward.
struct Block {
  Norm n_att, n_conv, n_ff;
  Linear q, k, v, o, ff1, ff2;
  Parameter* conv = nullptr;
  Group g = Group::kS2F;
  Var operator()(Binder& bind, const Var& x) const;
};

// Linear least-squares map from one feature frame (plus bias) to two signal
// frames. Fitted once and frozen.
class PseudoVocoder {
 public:
  PseudoVocoder() = default;
  explicit PseudoVocoder(Parameter* weights) : w_(weights) {}

  // Throws ValueError with fewer than 100 frame pairs or a rank-deficient
  // design, StateError when already frozen.
  void fit(const std::vector<Tensor>& features, const std::vector<Tensor>& signals);
  Tensor apply(const Tensor& features) const;
  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }
  // Mean squared residual of the last fit, per signal value.
  double fit_residual() const { return residual_; }

 private:
  Parameter* w_ = nullptr;  // {d_feat + 1, 2 * d_sig}
  bool frozen_ = false;
  double residual_ = 0.0;
};

struct Posterior {
  Var mu;
  Var logvar;
};

// Incremental prediction-network state for greedy decoding.
struct PredState {
  Tensor h;    // {1, hidden}
  Tensor out;  // {1, joint}, projected prediction output
};

class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  PseudoVocoder& vocoder() { return vocoder_; }
  const PseudoVocoder& vocoder() const { return vocoder_; }

  // Speech path. Signal {T_sig, d_sig} -> Z {ceil(T_sig/2), d_feat}.
  Var s2f(Binder& b, const Tensor& signal) const;
  Var shared(Binder& b, const Var& z) const;
  Var bestrq_logits(Binder& b, const Var& h) const;
  // Linear map from Z back to the stacked input frames {T, 2*d_sig}; trained
  // with S2F so the features stay linearly invertible.
  Var s2f_reconstruct(Binder& b, const Var& z) const;
  // Lattice logits {T*(U+1), 257}, row t*(U+1)+u.
  Var rnnt_logits(Binder& b, const Var& h, std::span<const int> labels) const;

  // Greedy transducer decoding without a tape.
  Tensor encoder_projection(const Tensor& h) const;  // {T, joint}
  PredState pred_start() const;
  PredState pred_next(const PredState& s, int token) const;
  void joint_logits(std::span<const double> enc_row, const PredState& s, std::span<double> out) const;

  // Text path.
  Var text_encode(Binder& b, std::span<const int> tokens) const;  // {U, hidden}
  Var mlm_logits(Binder& b, const Var& enc) const;                 // {U, 256}
  Var condition(Binder& b, const Var& enc, LangId lang, SpkId spk) const;
  Var durations(Binder& b, const Var& cond) const;  // {U, 1}, positive
  static Var upsample(const Var& cond, std::span<const int> durations);
  std::vector<Var> decode(Binder& b, const Var& upsampled, const Var& latent) const;
  Posterior vae_posterior(Binder& b, const Var& z) const;

  // Round half up with a floor of one frame.
  static std::vector<int> round_durations(const Tensor& predicted);

  // Languages whose embedding received TTS-path training.
  std::set<int>& tts_trained_langs() { return tts_langs_; }
  const std::set<int>& tts_trained_langs() const { return tts_langs_; }

 private:
  Linear linear(Group g, const std::string& name, int in, int out);
  Norm norm(Group g, const std::string& name, int dim);
  Block block(Group g, const std::string& name);
  Parameter& table(Group g, const std::string& name, int rows, int cols, double sd);

  ModelConfig cfg_;
  uint64_t seed_;
  ParamStore store_;

  Linear s2f_in_, s2f_out_, s2f_recon_;
  std::vector<Block> s2f_blocks_;
  Norm s2f_norm_;

  Linear shared_in_, bestrq_head_;
  std::vector<Block> shared_blocks_;
  Norm shared_norm_;

  Linear enc_proj_, pred_in_, pred_proj_, joint_out_;
  Parameter* pred_embed_ = nullptr;
  Parameter* pred_rec_ = nullptr;

  Parameter* tok_embed_ = nullptr;
  std::vector<Block> text_blocks_;
  Norm text_norm_;
  Linear mlm_head_;
  Parameter* lang_embed_ = nullptr;
  Parameter* spk_embed_ = nullptr;

  Linear dur_hidden_, dur_out_;

  Linear dec_in_;
  std::vector<std::vector<Block>> dec_blocks_;
  std::vector<Norm> dec_norms_;
  std::vector<Linear> dec_out_, dec_feedback_;

  Linear vae_hidden_, vae_out_;

  PseudoVocoder vocoder_;
  std::set<int> tts_langs_;
};

}  // namespace jstts
