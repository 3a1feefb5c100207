#include "jstts/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "jstts/error.hpp"

namespace jstts {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Per-node log-probabilities of blank and of the next label.
struct Lattice {
  int64_t T = 0, U = 0, V = 0;
  std::vector<double> lse;      // per node
  std::vector<double> lp_blank;  // per node
  std::vector<double> lp_label;  // per node, -inf at u == U

  int64_t node(int64_t t, int64_t u) const { return t * (U + 1) + u; }
};

Lattice build_lattice(const Tensor& logits, int64_t frames, std::span<const int> labels, int blank, const char* op) {
  Lattice L;
  L.T = frames;
  L.U = static_cast<int64_t>(labels.size());
  if (frames < 1) throw ValueError(std::string(op) + ": need at least one frame, got " + std::to_string(frames));
  if (logits.rows() != frames * (L.U + 1)) {
    throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) + " do not match T=" +
                     std::to_string(frames) + ", U=" + std::to_string(L.U));
  }
  L.V = logits.cols();
  if (blank < 0 || blank >= L.V) throw ValueError(std::string(op) + ": blank index outside the vocabulary");
  for (int y : labels) {
    if (y < 0 || y >= L.V || y == blank) throw ValueError(std::string(op) + ": label " + std::to_string(y) + " invalid");
  }
  const int64_t n = logits.rows();
  L.lse.resize(static_cast<size_t>(n));
  L.lp_blank.resize(static_cast<size_t>(n));
  L.lp_label.assign(static_cast<size_t>(n), kNegInf);
  for (int64_t t = 0; t < L.T; ++t) {
    for (int64_t u = 0; u <= L.U; ++u) {
      const int64_t i = L.node(t, u);
      const double* row = logits.data() + i * L.V;
      const double mx = *std::max_element(row, row + L.V);
      double s = 0.0;
      for (int64_t k = 0; k < L.V; ++k) s += std::exp(row[k] - mx);
      const double lse = mx + std::log(s);
      L.lse[i] = lse;
      L.lp_blank[i] = row[blank] - lse;
      if (u < L.U) L.lp_label[i] = row[labels[static_cast<size_t>(u)]] - lse;
    }
  }
  return L;
}

std::vector<double> forward_vars(const Lattice& L) {
  std::vector<double> alpha(L.lse.size(), kNegInf);
  alpha[0] = 0.0;
  for (int64_t t = 0; t < L.T; ++t) {
    for (int64_t u = 0; u <= L.U; ++u) {
      if (t == 0 && u == 0) continue;
      double a = kNegInf;
      if (t > 0) a = alpha[L.node(t - 1, u)] + L.lp_blank[L.node(t - 1, u)];
      if (u > 0) a = log_add(a, alpha[L.node(t, u - 1)] + L.lp_label[L.node(t, u - 1)]);
      alpha[L.node(t, u)] = a;
    }
  }
  return alpha;
}

}  // namespace

double rnnt_log_likelihood(const Tensor& logits, int64_t frames, std::span<const int> labels, int blank) {
  const Lattice L = build_lattice(logits, frames, labels, blank, "rnnt_loss");
  const auto alpha = forward_vars(L);
  const int64_t last = L.node(L.T - 1, L.U);
  return alpha[last] + L.lp_blank[last];
}

Var rnnt_loss(const Var& logits, int64_t frames, std::span<const int> labels, int blank) {
  const Tensor& z = logits.value();
  Lattice L = build_lattice(z, frames, labels, blank, "rnnt_loss");
  const auto alpha = forward_vars(L);
  const int64_t T = L.T, U = L.U;
  std::vector<double> beta(alpha.size(), kNegInf);
  for (int64_t t = T - 1; t >= 0; --t) {
    for (int64_t u = U; u >= 0; --u) {
      const int64_t i = L.node(t, u);
      if (t == T - 1 && u == U) {
        beta[i] = L.lp_blank[i];
        continue;
      }
      double b = kNegInf;
      if (t < T - 1) b = L.lp_blank[i] + beta[L.node(t + 1, u)];
      if (u < U) b = log_add(b, L.lp_label[i] + beta[L.node(t, u + 1)]);
      beta[i] = b;
    }
  }
  const double log_p = beta[0];
  // d(-log P)/dz = softmax * node occupancy - transition occupancy; computed
  // eagerly because it needs the same lattice quantities as the loss.
  Tensor dz(z.shape());
  const int64_t V = L.V;
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t u = 0; u <= U; ++u) {
      const int64_t i = L.node(t, u);
      if (alpha[i] == kNegInf || beta[i] == kNegInf) continue;
      const double gamma = std::exp(alpha[i] + beta[i] - log_p);
      const double* row = z.data() + i * V;
      double* grow = dz.data() + i * V;
      for (int64_t k = 0; k < V; ++k) grow[k] = std::exp(row[k] - L.lse[i]) * gamma;
      if (t == T - 1 && u == U) {
        grow[blank] -= gamma;
      } else if (t < T - 1) {
        grow[blank] -= std::exp(alpha[i] + L.lp_blank[i] + beta[L.node(t + 1, u)] - log_p);
      }
      if (u < U) grow[labels[static_cast<size_t>(u)]] -= std::exp(alpha[i] + L.lp_label[i] + beta[L.node(t, u + 1)] - log_p);
    }
  }
  return logits.tape()->record("rnnt_loss", Tensor::scalar(-log_p), {logits},
                               [dz = std::move(dz)](const Tensor& g, std::span<Tensor* const> pg) {
                                 pg[0]->add_(dz, g.item());
                               });
}

ViterbiAlignment rnnt_viterbi(const Tensor& logits, int64_t frames, std::span<const int> labels, int blank) {
  const Lattice L = build_lattice(logits, frames, labels, blank, "rnnt_viterbi");
  const int64_t T = L.T, U = L.U;
  // best score from each node to the end, then a forward trace that takes the
  // frame advance whenever it is at least as good as emitting
  std::vector<double> best(L.lse.size(), kNegInf);
  for (int64_t t = T - 1; t >= 0; --t) {
    for (int64_t u = U; u >= 0; --u) {
      const int64_t i = L.node(t, u);
      if (t == T - 1 && u == U) {
        best[i] = L.lp_blank[i];
        continue;
      }
      const double via_blank = t < T - 1 ? L.lp_blank[i] + best[L.node(t + 1, u)] : kNegInf;
      const double via_label = u < U ? L.lp_label[i] + best[L.node(t, u + 1)] : kNegInf;
      best[i] = std::max(via_blank, via_label);
    }
  }
  ViterbiAlignment out;
  out.log_prob = best[0];
  if (U == 0) return out;
  std::vector<int> frames_at(static_cast<size_t>(U + 1), 0);
  int64_t t = 0, u = 0;
  while (!(t == T - 1 && u == U)) {
    const int64_t i = L.node(t, u);
    const double via_blank = t < T - 1 ? L.lp_blank[i] + best[L.node(t + 1, u)] : kNegInf;
    const double via_label = u < U ? L.lp_label[i] + best[L.node(t, u + 1)] : kNegInf;
    if (t < T - 1 && via_blank >= via_label) {
      ++frames_at[static_cast<size_t>(u)];
      ++t;
    } else {
      ++u;
    }
  }
  ++frames_at[static_cast<size_t>(U)];  // terminal blank
  out.durations.assign(frames_at.begin() + 1, frames_at.end());
  out.durations[0] += frames_at[0];
  return out;
}

std::vector<int> repair_durations(std::vector<int> d) {
  const auto n = static_cast<int64_t>(d.size());
  int64_t total = 0;
  for (int x : d) {
    if (x < 0) throw ValueError("repair_durations: negative duration");
    total += x;
  }
  if (total < n) {
    throw ValueError("repair_durations: " + std::to_string(total) + " frames cannot cover " + std::to_string(n) + " tokens");
  }
  for (int64_t i = 0; i < n; ++i) {
    if (d[i] > 0) continue;
    for (int64_t dist = 1; dist < n; ++dist) {
      if (i + dist < n && d[i + dist] > 1) {
        --d[i + dist];
        d[i] = 1;
        break;
      }
      if (i - dist >= 0 && d[i - dist] > 1) {
        --d[i - dist];
        d[i] = 1;
        break;
      }
    }
  }
  return d;
}

Var iterative_l1(const std::vector<Var>& predictions, const Var& target) {
  if (predictions.empty()) throw ValueError("iterative_l1: no predictions");
  Var total;
  for (const Var& p : predictions) {
    if (p.shape() != target.shape()) {
      throw ShapeError("iterative_l1: prediction " + shape_str(p.shape()) + " vs target " + shape_str(target.shape()));
    }
    Var m = mean(abs(sub(p, target)));
    total = total.valid() ? add(total, m) : m;
  }
  return scale(total, 1.0 / static_cast<double>(predictions.size()));
}

void LossWeights::validate() const {
  if (w_feature < 0 || w_kl_max < 0 || w_dur < 0 || w_rnnt < 0) throw ValueError("loss weights must be non-negative");
  if (kl_start_step >= kl_end_step) throw ValueError("kl_start_step must be smaller than kl_end_step");
}

double kl_weight(int64_t step, const LossWeights& w) {
  if (step < 0) throw ValueError("kl_weight: negative step");
  if (step <= w.kl_start_step) return 0.0;
  if (step >= w.kl_end_step) return w.w_kl_max;
  return w.w_kl_max * static_cast<double>(step - w.kl_start_step) / static_cast<double>(w.kl_end_step - w.kl_start_step);
}

Var kl_standard_normal(const Var& mu, const Var& logvar) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl: mean and log-variance shapes differ");
  Var terms = sub(add(exp(logvar), square(mu)), add_scalar(logvar, 1.0));
  return scale(sum(terms), 0.5);
}

Var duration_loss(const Var& predicted, std::span<const int> target) {
  if (predicted.value().numel() != static_cast<int64_t>(target.size())) {
    throw ShapeError("duration_loss: " + std::to_string(predicted.value().numel()) + " predictions vs " +
                     std::to_string(target.size()) + " targets");
  }
  Tensor lt(predicted.shape());
  for (size_t i = 0; i < target.size(); ++i) {
    if (target[i] <= 0) throw ValueError("duration_loss: target durations must be positive");
    lt[static_cast<int64_t>(i)] = std::log(static_cast<double>(target[i]));
  }
  return mean(square(sub(log(predicted), predicted.tape()->constant(std::move(lt)))));
}

Var masked_cross_entropy(const Var& logits, std::span<const int> positions, std::span<const int> targets) {
  if (positions.empty()) throw ValueError("cross-entropy: no positions selected");
  if (positions.size() != targets.size()) throw ShapeError("cross-entropy: positions and targets differ in length");
  const Tensor& z = logits.value();
  const int64_t c = z.cols();
  const double inv = 1.0 / static_cast<double>(positions.size());
  Tensor dz(z.shape());
  double loss = 0.0;
  for (size_t k = 0; k < positions.size(); ++k) {
    const int64_t r = positions[k];
    const int y = targets[k];
    if (r < 0 || r >= z.rows()) throw ShapeError("cross-entropy: position " + std::to_string(r) + " out of range");
    if (y < 0 || y >= c) throw ShapeError("cross-entropy: target " + std::to_string(y) + " out of range");
    const double* row = z.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    loss += (lse - row[y]) * inv;
    for (int64_t j = 0; j < c; ++j) dz(r, j) += std::exp(row[j] - lse) * inv;
    dz(r, y) -= inv;
  }
  return logits.tape()->record("cross_entropy", Tensor::scalar(loss), {logits},
                               [dz = std::move(dz)](const Tensor& g, std::span<Tensor* const> pg) {
                                 pg[0]->add_(dz, g.item());
                               });
}

BestRqQuantizer::BestRqQuantizer(int input_dim, int code_dim, int codebook_size, uint64_t seed)
    : projection_({input_dim, code_dim}), codebook_({codebook_size, code_dim}) {
  if (input_dim < 1 || code_dim < 1 || codebook_size < 2) throw ValueError("quantizer: bad dimensions");
  Rng rng = Rng::derive(seed, {Rng::hash("bestrq")});
  const double sd = std::sqrt(2.0 / (input_dim + code_dim));
  for (double& v : projection_.values()) v = sd * rng.normal();
  for (int i = 0; i < codebook_size; ++i) {
    double n = 0.0;
    for (int j = 0; j < code_dim; ++j) {
      codebook_(i, j) = rng.normal();
      n += codebook_(i, j) * codebook_(i, j);
    }
    for (int j = 0; j < code_dim; ++j) codebook_(i, j) /= std::sqrt(n);
  }
}

int BestRqQuantizer::quantize_row(std::span<const double> x) const {
  const int64_t in = projection_.rows(), d = projection_.cols();
  if (static_cast<int64_t>(x.size()) != in) throw ShapeError("quantizer: input width " + std::to_string(x.size()));
  std::vector<double> y(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < in; ++i)
    for (int64_t j = 0; j < d; ++j) y[j] += x[i] * projection_(i, j);
  double n = 0.0;
  for (double v : y) n += v * v;
  n = std::sqrt(n);
  if (n > 0) {
    for (double& v : y) v /= n;
  }
  int best = 0;
  double best_d = INFINITY;
  for (int64_t k = 0; k < codebook_.rows(); ++k) {
    double dist = 0.0;
    for (int64_t j = 0; j < d; ++j) dist += (y[j] - codebook_(k, j)) * (y[j] - codebook_(k, j));
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(k);
    }
  }
  return best;
}

std::vector<int> BestRqQuantizer::quantize(const Tensor& stacked) const {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(stacked.rows()));
  for (int64_t r = 0; r < stacked.rows(); ++r) out.push_back(quantize_row(stacked.row_span(r)));
  return out;
}

uint64_t BestRqQuantizer::checksum() const { return jstts::checksum(codebook_, jstts::checksum(projection_)); }

Tensor stack_frames(const Tensor& signal, int factor) {
  const int64_t T = signal.rows(), d = signal.cols();
  if (T < 1) throw ValueError("stack_frames: empty signal");
  const int64_t out_t = (T + factor - 1) / factor;
  Tensor out({out_t, d * factor});
  for (int64_t i = 0; i < out_t; ++i)
    for (int k = 0; k < factor; ++k) {
      const int64_t src = std::min(T - 1, i * factor + k);
      std::copy_n(signal.data() + src * d, d, out.data() + i * d * factor + k * d);
    }
  return out;
}

BestRqMasking bestrq_mask(const Tensor& signal, int span_len, double ratio, double noise_sd, Rng& rng) {
  const int64_t T = signal.rows();
  if (T < 4) throw ValueError("bestrq: need at least 4 signal frames, got " + std::to_string(T));
  BestRqMasking out;
  out.masked_signal = signal;
  std::set<int> feat;
  for (int p : span_mask_positions(static_cast<int>(T), span_len, ratio, rng)) {
    for (double& v : out.masked_signal.row_span(p)) v = noise_sd * rng.normal();
    feat.insert(p / 2);
  }
  out.masked_frames.assign(feat.begin(), feat.end());
  if (static_cast<int64_t>(out.masked_frames.size()) == (T + 1) / 2) {
    throw ValueError("bestrq: every feature frame is masked; nothing left to predict from");
  }
  return out;
}

Var bestrq_loss(const Var& code_logits, std::span<const int> codes, std::span<const int> masked_frames) {
  if (static_cast<int64_t>(codes.size()) != code_logits.rows()) {
    throw ShapeError("bestrq_loss: " + std::to_string(codes.size()) + " codes for " + shape_str(code_logits.shape()));
  }
  std::vector<int> targets;
  for (int p : masked_frames) targets.push_back(codes[static_cast<size_t>(p)]);
  return masked_cross_entropy(code_logits, masked_frames, targets);
}

Var mlm_loss(const Var& byte_logits, const MaskedByteSeq& masked) {
  if (masked.mask_positions.empty()) throw ValueError("mlm_loss: no masked positions");
  if (byte_logits.cols() != kByteVocab) throw ShapeError("mlm_loss: byte head must have 256 outputs");
  return masked_cross_entropy(byte_logits, masked.mask_positions, masked.originals);
}

double assemble_sup(const TrainStepReport& r, const LossWeights& w, int64_t step) {
  double s = 0.0;
  if (r.l_feature) s += w.w_feature * *r.l_feature;
  if (r.l_kl) s += kl_weight(step, w) * *r.l_kl;
  if (r.l_dur) s += w.w_dur * *r.l_dur;
  if (r.l_rnnt) s += w.w_rnnt * *r.l_rnnt;
  return s;
}

}  // namespace jstts
