#include "jstts/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "jstts/error.hpp"
#include "jstts/losses.hpp"
#include "jstts/rng.hpp"

namespace jstts {

namespace {

constexpr const char* kGroupNames[kNumGroups] = {"s2f",  "shared",  "rnnt", "text",
                                                 "duration", "decoder", "vae", "vocoder"};
constexpr int kSos = 256;

Tensor gaussian(const Shape& shape, double sd, uint64_t seed, const std::string& name) {
  Rng rng = Rng::derive(seed, {Rng::hash(name)});
  Tensor t(shape);
  for (double& v : t.values()) v = sd * rng.normal();
  return t;
}

// Plain x W + b on tensors, for tape-free decoding.
Tensor affine(const Tensor& x, const Parameter& w, const Parameter& b) {
  const int64_t m = x.rows(), k = x.cols(), n = w.value.cols();
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    double* oi = out.data() + i * n;
    std::copy_n(b.value.data(), n, oi);
    for (int64_t p = 0; p < k; ++p) {
      const double xv = x(i, p);
      const double* wp = w.value.data() + p * n;
      for (int64_t j = 0; j < n; ++j) oi[j] += xv * wp[j];
    }
  }
  return out;
}

Tensor sinusoid_positions(int64_t n, int64_t dim) {
  Tensor t({n, dim});
  for (int64_t p = 0; p < n; ++p)
    for (int64_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      t(p, i) = 0.5 * (i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq));
    }
  return t;
}

}  // namespace

std::string group_name(Group g) { return kGroupNames[static_cast<int>(g)]; }

Group parse_group(const std::string& s) {
  for (int i = 0; i < kNumGroups; ++i)
    if (s == kGroupNames[i]) return static_cast<Group>(i);
  throw ValueError("unknown parameter group '" + s + "'");
}

std::string GroupSet::str() const {
  std::string out;
  for (Group g : kAllGroups) {
    if (!has(g)) continue;
    if (!out.empty()) out += ",";
    out += group_name(g);
  }
  return "{" + out + "}";
}

void ModelConfig::validate() const {
  const std::pair<const char*, int> ints[] = {
      {"d_sig", d_sig},         {"d_feat", d_feat},           {"hidden", hidden},
      {"joint", joint},         {"pred_embed", pred_embed},   {"s2f_layers", s2f_layers},
      {"shared_layers", shared_layers}, {"text_layers", text_layers}, {"decoder_layers", decoder_layers},
      {"refinements", refinements},     {"vae_dim", vae_dim},         {"id_embed", id_embed},
      {"n_langs", n_langs},     {"n_spks", n_spks},           {"code_dim", code_dim},
      {"codebook_size", codebook_size}};
  for (const auto& [name, v] : ints) {
    if (v <= 0) throw ValueError(std::string("model.") + name + " must be positive, got " + std::to_string(v));
  }
  if (!(cfg_dropout_prob >= 0.0 && cfg_dropout_prob <= 1.0)) throw ValueError("model.cfg_dropout_prob must lie in [0, 1]");
}

// ---- ParamStore ---------------------------------------------------------------

Parameter& ParamStore::add(Group g, const std::string& name, Tensor init) {
  if (contains(name)) throw Error("duplicate parameter " + name);
  params_.emplace_back(name, std::move(init));
  groups_.push_back(g);
  return params_.back();
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

Parameter& ParamStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ValueError("no parameter named " + name);
}

const Parameter& ParamStore::get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }

std::vector<Parameter*> ParamStore::group(Group g) {
  std::vector<Parameter*> out;
  for (size_t i = 0; i < params_.size(); ++i)
    if (groups_[i] == g) out.push_back(&params_[i]);
  return out;
}

std::vector<Parameter*> ParamStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

Group ParamStore::group_of(const Parameter& p) const {
  for (size_t i = 0; i < params_.size(); ++i)
    if (&params_[i] == &p) return groups_[i];
  throw ValueError("parameter " + p.name + " is not in this store");
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

uint64_t ParamStore::checksum(Group g) const {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < params_.size(); ++i)
    if (groups_[i] == g) h = jstts::checksum(params_[i].value, h);
  return h;
}

double ParamStore::grad_norm(Group g) const {
  double s = 0.0;
  for (size_t i = 0; i < params_.size(); ++i)
    if (groups_[i] == g) s += params_[i].grad.squared_norm();
  return std::sqrt(s);
}

// ---- layers -------------------------------------------------------------------

Var Linear::operator()(Binder& bind, const Var& x) const {
  return add(matmul(x, bind(*w, g)), bind(*b, g));
}

Var Norm::operator()(Binder& bind, const Var& x) const { return layer_norm(x, bind(*gain, g), bind(*bias, g)); }

Var Block::operator()(Binder& bind, const Var& x) const {
  const double inv = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Var a = n_att(bind, x);
  Var att = softmax(scale(matmul_nt(q(bind, a), k(bind, a)), inv));
  Var h = add(x, o(bind, matmul(att, v(bind, a))));
  h = add(h, depthwise_conv1d(n_conv(bind, h), bind(*conv, g)));
  return add(h, ff2(bind, relu(ff1(bind, n_ff(bind, h)))));
}

// ---- pseudo-vocoder -----------------------------------------------------------------

void PseudoVocoder::fit(const std::vector<Tensor>& features, const std::vector<Tensor>& signals) {
  if (frozen_) throw StateError("pseudo-vocoder is frozen; refitting is not allowed");
  if (!w_) throw StateError("pseudo-vocoder has no weights attached");
  if (features.size() != signals.size()) throw ShapeError("vocoder fit: feature and signal lists differ in length");
  const int64_t df = w_->value.rows() - 1, out = w_->value.cols();
  int64_t n = 0;
  for (size_t i = 0; i < features.size(); ++i) {
    if (features[i].cols() != df) throw ShapeError("vocoder fit: feature width " + std::to_string(features[i].cols()));
    if (features[i].rows() != (signals[i].rows() + 1) / 2) throw ShapeError("vocoder fit: feature/signal length mismatch");
    n += features[i].rows();
  }
  if (n < 100) throw ValueError("vocoder fit: need at least 100 frame pairs, got " + std::to_string(n));
  Eigen::MatrixXd X(n, df + 1), Y(n, out);
  int64_t r = 0;
  for (size_t i = 0; i < features.size(); ++i) {
    const Tensor stacked = stack_frames(signals[i]);
    if (stacked.cols() != out) throw ShapeError("vocoder fit: signal width does not match the vocoder");
    for (int64_t t = 0; t < features[i].rows(); ++t, ++r) {
      for (int64_t j = 0; j < df; ++j) X(r, j) = features[i](t, j);
      X(r, df) = 1.0;
      for (int64_t j = 0; j < out; ++j) Y(r, j) = stacked(t, j);
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < df + 1) {
    throw ValueError("vocoder fit: design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                     std::to_string(df + 1) + ")");
  }
  Eigen::MatrixXd W = qr.solve(Y);
  for (int64_t i = 0; i <= df; ++i)
    for (int64_t j = 0; j < out; ++j) w_->value(i, j) = W(i, j);
  residual_ = (X * W - Y).squaredNorm() / static_cast<double>(Y.size());
  frozen_ = true;
}

Tensor PseudoVocoder::apply(const Tensor& features) const {
  if (!w_) throw StateError("pseudo-vocoder has no weights attached");
  const int64_t df = w_->value.rows() - 1, out = w_->value.cols();
  if (features.cols() != df) throw ShapeError("vocoder: feature width " + std::to_string(features.cols()));
  const int64_t T = features.rows();
  Tensor y({T, out});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < out; ++j) {
      double s = w_->value(df, j);
      for (int64_t i = 0; i < df; ++i) s += features(t, i) * w_->value(i, j);
      y(t, j) = s;
    }
  return y.reshaped({2 * T, out / 2});
}

// ---- model --------------------------------------------------------------------

Linear Model::linear(Group g, const std::string& name, int in, int out) {
  Linear l;
  l.g = g;
  l.w = &store_.add(g, name + ".w", gaussian({in, out}, std::sqrt(2.0 / (in + out)), seed_, name + ".w"));
  l.b = &store_.add(g, name + ".b", Tensor({1, out}));
  return l;
}

Norm Model::norm(Group g, const std::string& name, int dim) {
  Norm n;
  n.g = g;
  n.gain = &store_.add(g, name + ".gain", Tensor({1, dim}, 1.0));
  n.bias = &store_.add(g, name + ".bias", Tensor({1, dim}));
  return n;
}

Block Model::block(Group g, const std::string& name) {
  const int h = cfg_.hidden;
  Block b;
  b.g = g;
  b.n_att = norm(g, name + ".n_att", h);
  b.q = linear(g, name + ".q", h, h);
  b.k = linear(g, name + ".k", h, h);
  b.v = linear(g, name + ".v", h, h);
  b.o = linear(g, name + ".o", h, h);
  b.n_conv = norm(g, name + ".n_conv", h);
  b.conv = &store_.add(g, name + ".conv", gaussian({3, h}, std::sqrt(1.0 / 3.0), seed_, name + ".conv"));
  b.n_ff = norm(g, name + ".n_ff", h);
  b.ff1 = linear(g, name + ".ff1", h, 2 * h);
  b.ff2 = linear(g, name + ".ff2", 2 * h, h);
  return b;
}

Parameter& Model::table(Group g, const std::string& name, int rows, int cols, double sd) {
  return store_.add(g, name, gaussian({rows, cols}, sd, seed_, name));
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  const int h = cfg_.hidden;

  s2f_in_ = linear(Group::kS2F, "s2f.in", 2 * cfg_.d_sig, h);
  for (int i = 0; i < cfg_.s2f_layers; ++i) s2f_blocks_.push_back(block(Group::kS2F, "s2f.block" + std::to_string(i)));
  s2f_norm_ = norm(Group::kS2F, "s2f.norm", h);
  s2f_out_ = linear(Group::kS2F, "s2f.out", h, cfg_.d_feat);
  s2f_recon_ = linear(Group::kS2F, "s2f.recon", cfg_.d_feat, 2 * cfg_.d_sig);

  shared_in_ = linear(Group::kShared, "shared.in", cfg_.d_feat, h);
  for (int i = 0; i < cfg_.shared_layers; ++i)
    shared_blocks_.push_back(block(Group::kShared, "shared.block" + std::to_string(i)));
  shared_norm_ = norm(Group::kShared, "shared.norm", h);
  bestrq_head_ = linear(Group::kShared, "shared.bestrq_head", h, cfg_.codebook_size);

  enc_proj_ = linear(Group::kRnnt, "rnnt.enc_proj", h, cfg_.joint);
  pred_embed_ = &table(Group::kRnnt, "rnnt.pred_embed", kByteVocab + 1, cfg_.pred_embed, 1.0);
  pred_in_ = linear(Group::kRnnt, "rnnt.pred_in", cfg_.pred_embed, h);
  pred_rec_ = &table(Group::kRnnt, "rnnt.pred_rec", h, h, std::sqrt(1.0 / h));
  pred_proj_ = linear(Group::kRnnt, "rnnt.pred_proj", h, cfg_.joint);
  joint_out_ = linear(Group::kRnnt, "rnnt.out", cfg_.joint, kTransducerVocab);

  tok_embed_ = &table(Group::kText, "text.embed", kByteVocab + 1, h, 1.0);
  for (int i = 0; i < cfg_.text_layers; ++i) text_blocks_.push_back(block(Group::kText, "text.block" + std::to_string(i)));
  text_norm_ = norm(Group::kText, "text.norm", h);
  mlm_head_ = linear(Group::kText, "text.mlm_head", h, kByteVocab);
  lang_embed_ = &table(Group::kText, "text.lang_embed", cfg_.n_langs, cfg_.id_embed, 0.5);
  spk_embed_ = &table(Group::kText, "text.spk_embed", cfg_.n_spks, cfg_.id_embed, 0.5);

  const int cond = h + 2 * cfg_.id_embed;
  dur_hidden_ = linear(Group::kDuration, "duration.hidden", cond, h);
  dur_out_ = linear(Group::kDuration, "duration.out", h, 1);
  dur_out_.b->value[0] = std::log(1.5);

  dec_in_ = linear(Group::kDecoder, "decoder.in", cond + 1 + cfg_.vae_dim, h);
  for (int k = 0; k < cfg_.refinements; ++k) {
    const std::string p = "decoder.refine" + std::to_string(k);
    std::vector<Block> blocks;
    for (int i = 0; i < cfg_.decoder_layers; ++i) blocks.push_back(block(Group::kDecoder, p + ".block" + std::to_string(i)));
    dec_blocks_.push_back(std::move(blocks));
    dec_norms_.push_back(norm(Group::kDecoder, p + ".norm", h));
    dec_out_.push_back(linear(Group::kDecoder, p + ".out", h, cfg_.d_feat));
    if (k + 1 < cfg_.refinements) dec_feedback_.push_back(linear(Group::kDecoder, p + ".feedback", cfg_.d_feat, h));
  }

  vae_hidden_ = linear(Group::kVae, "vae.hidden", cfg_.d_feat, h);
  vae_out_ = linear(Group::kVae, "vae.out", h, 2 * cfg_.vae_dim);

  vocoder_ = PseudoVocoder(&store_.add(Group::kVocoder, "vocoder.w", Tensor({cfg_.d_feat + 1, 2 * cfg_.d_sig})));
}

Var Model::s2f(Binder& b, const Tensor& signal) const {
  if (signal.rows() < 1) throw ValueError("s2f: empty signal");
  if (signal.cols() != cfg_.d_sig) {
    throw ShapeError("s2f: signal width " + std::to_string(signal.cols()) + ", expected " + std::to_string(cfg_.d_sig));
  }
  Var x = s2f_in_(b, b.tape().constant(stack_frames(signal)));
  for (const Block& blk : s2f_blocks_) x = blk(b, x);
  return s2f_out_(b, s2f_norm_(b, x));
}

Var Model::shared(Binder& b, const Var& z) const {
  if (z.cols() != cfg_.d_feat) {
    throw ShapeError("shared encoder: feature width " + std::to_string(z.cols()) + ", expected " + std::to_string(cfg_.d_feat));
  }
  Var x = shared_in_(b, z);
  for (const Block& blk : shared_blocks_) x = blk(b, x);
  return shared_norm_(b, x);
}

Var Model::bestrq_logits(Binder& b, const Var& h) const { return bestrq_head_(b, h); }

Var Model::s2f_reconstruct(Binder& b, const Var& z) const { return s2f_recon_(b, z); }

Var Model::rnnt_logits(Binder& b, const Var& h, std::span<const int> labels) const {
  std::vector<int> inputs{kSos};
  for (int y : labels) {
    if (y < 0 || y >= kByteVocab) throw ValueError("rnnt: label " + std::to_string(y) + " is not a byte");
    inputs.push_back(y);
  }
  Var x = pred_in_(b, embedding(b(*pred_embed_, Group::kRnnt), inputs));
  Var rec = b(*pred_rec_, Group::kRnnt);
  std::vector<Var> states;
  Var state = tanh(slice_rows(x, 0, 1));
  states.push_back(state);
  for (int64_t u = 1; u < x.rows(); ++u) {
    state = tanh(add(slice_rows(x, u, 1), matmul(state, rec)));
    states.push_back(state);
  }
  Var pred = pred_proj_(b, concat_rows(states));
  Var enc = enc_proj_(b, h);
  return joint_out_(b, tanh(outer_add(enc, pred)));
}

Tensor Model::encoder_projection(const Tensor& h) const { return affine(h, *enc_proj_.w, *enc_proj_.b); }

PredState Model::pred_start() const {
  PredState s;
  s.h = Tensor({1, cfg_.hidden});
  return pred_next(s, kSos);
}

PredState Model::pred_next(const PredState& s, int token) const {
  Tensor e({1, cfg_.pred_embed});
  std::copy_n(pred_embed_->value.data() + token * cfg_.pred_embed, cfg_.pred_embed, e.data());
  Tensor x = affine(e, *pred_in_.w, *pred_in_.b);
  const bool first = token == kSos;
  const int64_t h = cfg_.hidden;
  PredState out;
  out.h = Tensor({1, h});
  for (int64_t j = 0; j < h; ++j) {
    double v = x[j];
    if (!first) {
      for (int64_t i = 0; i < h; ++i) v += s.h[i] * pred_rec_->value(i, j);
    }
    out.h[j] = std::tanh(v);
  }
  out.out = affine(out.h, *pred_proj_.w, *pred_proj_.b);
  return out;
}

void Model::joint_logits(std::span<const double> enc_row, const PredState& s, std::span<double> out) const {
  const int64_t J = cfg_.joint;
  std::vector<double> a(static_cast<size_t>(J));
  for (int64_t j = 0; j < J; ++j) a[j] = std::tanh(enc_row[j] + s.out[j]);
  const Tensor& W = joint_out_.w->value;
  for (int64_t k = 0; k < kTransducerVocab; ++k) out[k] = joint_out_.b->value[k];
  for (int64_t j = 0; j < J; ++j) {
    const double* wj = W.data() + j * kTransducerVocab;
    for (int64_t k = 0; k < kTransducerVocab; ++k) out[k] += a[j] * wj[k];
  }
}

Var Model::text_encode(Binder& b, std::span<const int> tokens) const {
  if (tokens.empty()) throw ValueError("text encoder: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || t > kMaskToken) throw ValueError("text encoder: token " + std::to_string(t) + " out of range");
  }
  const auto n = static_cast<int64_t>(tokens.size());
  Var x = add(embedding(b(*tok_embed_, Group::kText), tokens), b.tape().constant(sinusoid_positions(n, cfg_.hidden)));
  for (const Block& blk : text_blocks_) x = blk(b, x);
  return text_norm_(b, x);
}

Var Model::mlm_logits(Binder& b, const Var& enc) const { return mlm_head_(b, enc); }

Var Model::condition(Binder& b, const Var& enc, LangId lang, SpkId spk) const {
  if (lang.value < 0 || lang.value >= cfg_.n_langs) throw ValueError("language id " + std::to_string(lang.value) + " out of range");
  if (spk.value < 0 || spk.value >= cfg_.n_spks) throw ValueError("speaker id " + std::to_string(spk.value) + " out of range");
  const int l[] = {lang.value}, s[] = {spk.value};
  Var le = broadcast_rows(embedding(b(*lang_embed_, Group::kText), l), enc.rows());
  Var se = broadcast_rows(embedding(b(*spk_embed_, Group::kText), s), enc.rows());
  return concat_cols({enc, le, se});
}

Var Model::durations(Binder& b, const Var& cond) const {
  return exp(dur_out_(b, relu(dur_hidden_(b, cond))));
}

Var Model::upsample(const Var& cond, std::span<const int> durations) {
  if (static_cast<int64_t>(durations.size()) != cond.rows()) {
    throw ShapeError("upsample: " + std::to_string(durations.size()) + " durations for " + std::to_string(cond.rows()) +
                     " tokens");
  }
  int64_t total = 0;
  for (int d : durations) {
    if (d < 1) throw ValueError("upsample: durations must be at least 1, got " + std::to_string(d));
    total += d;
  }
  Tensor ramp({total, 1});
  int64_t r = 0;
  for (int d : durations)
    for (int i = 0; i < d; ++i, ++r) ramp[r] = d > 1 ? static_cast<double>(i) / (d - 1) : 0.0;
  return concat_cols({repeat_rows(cond, durations), cond.tape()->constant(std::move(ramp))});
}

std::vector<Var> Model::decode(Binder& b, const Var& upsampled, const Var& latent) const {
  if (latent.rows() != 1 || latent.cols() != cfg_.vae_dim) {
    throw ShapeError("decoder: latent " + shape_str(latent.shape()) + ", expected [1x" + std::to_string(cfg_.vae_dim) + "]");
  }
  Var h = dec_in_(b, concat_cols({upsampled, broadcast_rows(latent, upsampled.rows())}));
  std::vector<Var> outs;
  for (int k = 0; k < cfg_.refinements; ++k) {
    for (const Block& blk : dec_blocks_[k]) h = blk(b, h);
    Var out = dec_out_[k](b, dec_norms_[k](b, h));
    outs.push_back(out);
    if (k + 1 < cfg_.refinements) h = add(h, dec_feedback_[k](b, out));
  }
  return outs;
}

Posterior Model::vae_posterior(Binder& b, const Var& z) const {
  Var m = mean_rows(tanh(vae_hidden_(b, z)));
  Var o = vae_out_(b, m);
  return {slice_cols(o, 0, cfg_.vae_dim), slice_cols(o, cfg_.vae_dim, cfg_.vae_dim)};
}

std::vector<int> Model::round_durations(const Tensor& predicted) {
  std::vector<int> out;
  for (double v : predicted.values()) out.push_back(std::max(1, static_cast<int>(std::floor(v + 0.5))));
  return out;
}

}  // namespace jstts
