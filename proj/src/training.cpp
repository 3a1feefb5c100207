#include "jstts/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "jstts/error.hpp"
#include "jstts/eval.hpp"

namespace jstts {

namespace fs = std::filesystem;

void CurriculumConfig::validate() const {
  if (stage1_steps <= 0 || stage2_steps <= 0 || stage3_steps <= 0) throw ValueError("curriculum: step counts must be positive");
  if (batch_size <= 0) throw ValueError("curriculum: batch_size must be positive");
  double total = 0.0;
  for (double w : kind_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValueError("curriculum: kind weights must be finite and non-negative");
    total += w;
  }
  if (total <= 0.0) throw ValueError("curriculum: kind weights sum to zero");
  if (!(cfg_dropout_prob >= 0.0 && cfg_dropout_prob <= 1.0)) throw ValueError("curriculum: cfg_dropout_prob outside [0, 1]");
  if (!(learning_rate > 0.0)) throw ValueError("curriculum: learning_rate must be positive");
  if (!(clip_norm > 0.0)) throw ValueError("curriculum: clip_norm must be positive");
  if (mlm_span <= 0 || bestrq_span <= 0) throw ValueError("curriculum: mask spans must be positive");
  if (!(mlm_ratio > 0.0 && mlm_ratio <= 1.0) || !(bestrq_ratio > 0.0 && bestrq_ratio < 1.0)) {
    throw ValueError("curriculum: mask ratios must be in (0, 1]");
  }
  if (!(s2f_recon_weight >= 0.0) || !std::isfinite(s2f_recon_weight)) {
    throw ValueError("curriculum: s2f_recon_weight must be finite and non-negative");
  }
  if (!(unspoken_text_weight > 0.0) || !std::isfinite(unspoken_text_weight)) {
    throw ValueError("curriculum: unspoken_text_weight must be finite and positive");
  }
  if (max_emissions_per_frame < 1) throw ValueError("curriculum: max_emissions_per_frame must be at least 1");
  if (checkpoint_every <= 0) throw ValueError("curriculum: checkpoint_every must be positive");
}

std::pair<LangId, SpkId> cfg_dropout(LangId lang, SpkId spk, double prob, Rng& rng) {
  // both draws always happen so the stream position does not depend on ids
  const bool drop_lang = rng.bernoulli(prob);
  const bool drop_spk = rng.bernoulli(prob);
  return {drop_lang ? LangId{kOovId} : lang, drop_spk ? SpkId{kOovId} : spk};
}

GroupSet step_scope(const std::string& kind) {
  if (kind == "paired") return {Group::kShared, Group::kRnnt, Group::kText, Group::kDuration, Group::kDecoder, Group::kVae};
  if (kind == "speech_only") return {Group::kText, Group::kDuration, Group::kDecoder, Group::kVae};
  if (kind == "text_only") return {Group::kText, Group::kDecoder};
  if (kind == "bestrq") return {Group::kS2F, Group::kShared};
  if (kind == "mlm") return {Group::kText};
  if (kind == "asr") return {Group::kShared, Group::kRnnt};
  if (kind == "asr_full") return {Group::kS2F, Group::kShared, Group::kRnnt};
  throw ValueError("unknown step kind '" + kind + "'");
}

bool scope_ok(const StepResult& r) {
  if (r.items == 0) return true;
  const GroupSet scope = step_scope(r.report.kind);
  for (Group g : kAllGroups) {
    if ((r.norm(g) != 0.0) != scope.has(g)) return false;
  }
  return true;
}

// ---- Trainer ------------------------------------------------------------------

struct Trainer::ItemLosses {
  Var total;
  double l_feature = 0, l_kl = 0, l_dur = 0, l_rnnt = 0;
  bool ok = false;
};

Trainer::Trainer(Model& model, IdRegistry registry, const CurriculumConfig& cfg, const LossWeights& weights)
    : model_(model), registry_(std::move(registry)), cfg_(cfg), weights_(weights) {
  cfg_.validate();
  weights_.validate();
  const ModelConfig& mc = model_.config();
  if (mc.n_langs != registry_.num_languages() || mc.n_spks != registry_.num_speakers()) {
    throw ValueError("trainer: model id tables do not match the registry");
  }
  quantizer_ = BestRqQuantizer(2 * mc.d_sig, mc.code_dim, mc.codebook_size, Rng::mix(cfg_.seed, Rng::hash("bestrq")));
}

Rng Trainer::item_rng(const char* stream, int64_t step, int64_t index) const {
  return Rng::derive(cfg_.seed, {Rng::hash(stream), static_cast<uint64_t>(step), static_cast<uint64_t>(index)});
}

AdamState& Trainer::optim(Group g) {
  auto it = optim_.find(g);
  if (it == optim_.end()) {
    AdamConfig ac;
    ac.learning_rate = cfg_.learning_rate;
    it = optim_.emplace(g, AdamState(model_.params().group(g), ac)).first;
  }
  return it->second;
}

void Trainer::finish(StepResult& res, GroupSet scope, bool update) {
  ParamStore& ps = model_.params();
  if (res.items > 0) {
    const double inv = 1.0 / res.items;
    for (Parameter* p : ps.all()) p->grad.scale_(inv);
  }
  for (Group g : kAllGroups) res.grad_norm[static_cast<size_t>(g)] = ps.grad_norm(g);
  if (!update || res.items == 0) return;
  std::vector<Parameter*> trainable;
  for (Group g : kAllGroups)
    if (scope.has(g)) {
      auto gp = ps.group(g);
      trainable.insert(trainable.end(), gp.begin(), gp.end());
    }
  clip_global_norm(trainable, cfg_.clip_norm);
  for (Group g : kAllGroups)
    if (scope.has(g)) adam_step(ps.group(g), optim(g), group_name(g));
  for (int l : res.langs_trained) model_.tts_trained_langs().insert(l);
}

namespace {

bool finite(double v) { return std::isfinite(v); }

double mean_of(double sum, int n) { return n > 0 ? sum / n : 0.0; }

}  // namespace

Trainer::ItemLosses Trainer::tts_item(Binder& b, const Utterance& u, const std::vector<int>& labels, int64_t step,
                                      int64_t index, StepResult& res) {
  ItemLosses out;
  Rng rng = item_rng("tts", step, index);
  auto [lang, spk] = registry_.lookup_ids(u.lang_name, u.spk_name.value_or(""));
  std::tie(lang, spk) = cfg_dropout(lang, spk, cfg_.cfg_dropout_prob, rng);
  Tape& tape = b.tape();

  Var z = tape.constant(model_.s2f(b, *u.signal).value());
  const int64_t T = z.rows();
  const auto U = static_cast<int64_t>(labels.size());
  Var lattice = model_.rnnt_logits(b, model_.shared(b, z), labels);
  Var l_rnnt = rnnt_loss(lattice, T, labels);
  if (!finite(l_rnnt.item())) return out;

  ViterbiAlignment al = rnnt_viterbi(lattice.value(), T, labels);
  int64_t sum = 0;
  for (int d : al.durations) sum += d;
  ++res.align_checked;
  if (sum != T || static_cast<int64_t>(al.durations.size()) != U) ++res.align_violations;
  // every token needs a frame of its own
  if (T < U) return out;
  const std::vector<int> durs = repair_durations(al.durations);

  Var cond = model_.condition(b, model_.text_encode(b, labels), lang, spk);
  Var l_dur = duration_loss(model_.durations(b, stop_gradient(cond)), durs);

  Posterior post = model_.vae_posterior(b, z);
  Tensor eps({1, model_.config().vae_dim});
  for (double& v : eps.values()) v = rng.normal();
  Var latent = add(post.mu, mul(exp(scale(post.logvar, 0.5)), tape.constant(eps)));
  Var l_kl = kl_standard_normal(post.mu, post.logvar);

  Var l_feat = iterative_l1(model_.decode(b, Model::upsample(cond, durs), latent), z);

  const double wkl = kl_weight(step, weights_);
  out.total = add(add(scale(l_feat, weights_.w_feature), scale(l_kl, wkl)),
                  add(scale(l_dur, weights_.w_dur), scale(l_rnnt, weights_.w_rnnt)));
  out.l_feature = l_feat.item();
  out.l_kl = l_kl.item();
  out.l_dur = l_dur.item();
  out.l_rnnt = l_rnnt.item();
  out.ok = finite(out.total.item());
  if (out.ok && lang.value != kOovId) res.langs_trained.push_back(lang.value);
  return out;
}

namespace {

void fill_sup(StepResult& res, double f, double k, double d, double r, const LossWeights& w, int64_t step) {
  if (res.items == 0) return;
  res.report.l_feature = mean_of(f, res.items);
  res.report.l_kl = mean_of(k, res.items);
  res.report.l_dur = mean_of(d, res.items);
  res.report.l_rnnt = mean_of(r, res.items);
  res.report.l_sup = assemble_sup(res.report, w, step);
}

}  // namespace

StepResult Trainer::supervised_step(std::span<const Utterance* const> batch, int64_t step, bool update) {
  StepResult res;
  res.report.kind = "paired";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double f = 0, k = 0, d = 0, r = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    if (!u.text || !u.signal) throw ValueError("supervised_step: record " + u.id + " is not paired");
    const std::vector<int> labels = tokenize(*u.text).tokens;
    Tape tape;
    Binder b(tape, scope);
    ItemLosses il = labels.empty() ? ItemLosses{} : tts_item(b, u, labels, step, static_cast<int64_t>(i), res);
    if (!il.ok) {
      ++res.skipped;
      continue;
    }
    tape.backward(il.total);
    ++res.items;
    f += il.l_feature, k += il.l_kl, d += il.l_dur, r += il.l_rnnt;
  }
  fill_sup(res, f, k, d, r, weights_, step);
  finish(res, scope, update);
  return res;
}

PseudoLabel Trainer::pseudo_label(const Utterance& u) const {
  if (!u.signal) throw ValueError("pseudo_label: record " + u.id + " has no signal");
  DecodeResult dr = greedy_decode_signal(model_, *u.signal, cfg_.max_emissions_per_frame);
  return {std::move(dr.tokens), u.id, dr.score};
}

StepResult Trainer::untranscribed_speech_step(std::span<const Utterance* const> batch, int64_t step, bool update,
                                              const PseudoLabelHook& hook) {
  StepResult res;
  res.report.kind = "speech_only";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double f = 0, k = 0, d = 0, r = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    if (!u.signal) throw ValueError("untranscribed_speech_step: record " + u.id + " has no signal");
    std::optional<std::string> given = hook ? hook(u) : std::nullopt;
    const std::vector<int> labels = given ? tokenize(*given).tokens : pseudo_label(u).hypothesis;
    if (labels.empty()) {
      ++res.skipped;
      continue;
    }
    Tape tape;
    // F2T parameters sit on the tape as constants, so the pseudo-label path
    // cannot push gradient into the shared encoder or transducer.
    Binder b(tape, scope);
    ItemLosses il = tts_item(b, u, labels, step, static_cast<int64_t>(i), res);
    if (!il.ok) {
      ++res.skipped;
      continue;
    }
    tape.backward(il.total);
    ++res.items;
    f += il.l_feature, k += il.l_kl, d += il.l_dur, r += il.l_rnnt;
  }
  fill_sup(res, f, k, d, r, weights_, step);
  finish(res, scope, update);
  return res;
}

StepResult Trainer::unspoken_text_step(std::span<const Utterance* const> batch, int64_t step, bool update) {
  StepResult res;
  res.report.kind = "text_only";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double r = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    if (!u.text) throw ValueError("unspoken_text_step: record " + u.id + " has no text");
    const ByteSeq x = tokenize(*u.text);
    if (x.tokens.empty()) {
      ++res.skipped;
      continue;
    }
    Rng rng = item_rng("text", step, static_cast<int64_t>(i));
    LangId lang = cfg_dropout(registry_.language(u.lang_name), SpkId{kOovId}, cfg_.cfg_dropout_prob, rng).first;
    const MaskedByteSeq m = mask_spans(x, cfg_.mlm_span, cfg_.mlm_ratio, rng);
    Tensor eps({1, model_.config().vae_dim});
    for (double& v : eps.values()) v = rng.normal();

    Tape tape;
    Binder b(tape, scope);
    Var cond = model_.condition(b, model_.text_encode(b, m.tokens), lang, SpkId{kOovId});
    const std::vector<int> durs = Model::round_durations(model_.durations(b, cond).value());
    Var zm = model_.decode(b, Model::upsample(cond, durs), tape.constant(eps)).back();
    Var lattice = model_.rnnt_logits(b, model_.shared(b, zm), x.tokens);
    Var l_rnnt = rnnt_loss(lattice, zm.rows(), x.tokens);
    if (!finite(l_rnnt.item())) {
      ++res.skipped;
      continue;
    }
    tape.backward(scale(l_rnnt, weights_.w_rnnt * cfg_.unspoken_text_weight));
    ++res.items;
    r += l_rnnt.item();
    if (lang.value != kOovId) res.langs_trained.push_back(lang.value);
  }
  if (res.items > 0) res.report.l_rnnt = mean_of(r, res.items);
  finish(res, scope, update);
  return res;
}

StepResult Trainer::bestrq_step(std::span<const Utterance* const> batch, int64_t step, bool update) {
  StepResult res;
  res.report.kind = "bestrq";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double l = 0, lr = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    if (!u.signal) throw ValueError("bestrq_step: record " + u.id + " has no signal");
    Rng rng = item_rng("bestrq", step, static_cast<int64_t>(i));
    BestRqMasking mk;
    try {
      mk = bestrq_mask(*u.signal, cfg_.bestrq_span, cfg_.bestrq_ratio, cfg_.bestrq_noise_sd, rng);
    } catch (const ValueError&) {
      ++res.skipped;
      continue;
    }
    const std::vector<int> codes = quantizer_.quantize(stack_frames(*u.signal));
    Tape tape;
    Binder b(tape, scope);
    Var z = model_.s2f(b, mk.masked_signal);
    Var loss = bestrq_loss(model_.bestrq_logits(b, model_.shared(b, z)), codes, mk.masked_frames);
    // reconstruct what S2F saw, so the input stays linearly recoverable from Z
    Var err = sub(model_.s2f_reconstruct(b, z), tape.constant(stack_frames(mk.masked_signal)));
    Var recon = mean(square(err));
    tape.backward(add(loss, scale(recon, cfg_.s2f_recon_weight)));
    ++res.items;
    l += loss.item();
    lr += recon.item();
  }
  if (res.items > 0) {
    res.report.l_bestrq = mean_of(l, res.items);
    res.report.l_recon = mean_of(lr, res.items);
  }
  finish(res, scope, update);
  return res;
}

StepResult Trainer::mlm_step(std::span<const Utterance* const> batch, int64_t step, bool update) {
  StepResult res;
  res.report.kind = "mlm";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double l = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    if (!u.text) throw ValueError("mlm_step: record " + u.id + " has no text");
    const ByteSeq x = tokenize(*u.text);
    if (x.tokens.empty()) {
      ++res.skipped;
      continue;
    }
    Rng rng = item_rng("mlm", step, static_cast<int64_t>(i));
    const MaskedByteSeq m = mask_spans(x, cfg_.mlm_span, cfg_.mlm_ratio, rng);
    Tape tape;
    Binder b(tape, scope);
    Var loss = mlm_loss(model_.mlm_logits(b, model_.text_encode(b, m.tokens)), m);
    tape.backward(loss);
    ++res.items;
    l += loss.item();
  }
  if (res.items > 0) res.report.l_mlm = mean_of(l, res.items);
  finish(res, scope, update);
  return res;
}

StepResult Trainer::asr_step(std::span<const Utterance* const> batch, int64_t step, bool train_s2f, bool update) {
  StepResult res;
  res.report.kind = train_s2f ? "asr_full" : "asr";
  const GroupSet scope = step_scope(res.report.kind);
  model_.params().zero_grad();
  double l = 0;
  for (const Utterance* up : batch) {
    const Utterance& u = *up;
    if (!u.text || !u.signal) throw ValueError("asr_step: record " + u.id + " is not paired");
    const std::vector<int> labels = tokenize(*u.text).tokens;
    Tape tape;
    Binder b(tape, scope);
    Var z = model_.s2f(b, *u.signal);
    Var lattice = model_.rnnt_logits(b, model_.shared(b, z), labels);
    Var loss = rnnt_loss(lattice, z.rows(), labels);
    if (labels.empty() || !finite(loss.item())) {
      ++res.skipped;
      continue;
    }
    ViterbiAlignment al = rnnt_viterbi(lattice.value(), z.rows(), labels);
    int64_t sum = 0;
    for (int d : al.durations) sum += d;
    ++res.align_checked;
    if (sum != z.rows() || al.durations.size() != labels.size()) ++res.align_violations;
    tape.backward(loss);
    ++res.items;
    l += loss.item();
  }
  (void)step;
  if (res.items > 0) res.report.l_rnnt = mean_of(l, res.items);
  finish(res, scope, update);
  return res;
}

void Trainer::store(Checkpoint& ck) const {
  ck.registry = registry_;
  store_model(ck, model_);
  for (const auto& [g, st] : optim_) store_optim(ck, "adam." + group_name(g), model_.params().group(g), st);
  ck.meta["bestrq_quantizer"] = std::to_string(quantizer_.checksum());
  ck.meta["seed"] = std::to_string(cfg_.seed);
}

void Trainer::load(const Checkpoint& ck) {
  if (!(ck.registry == registry_)) throw ValueError("checkpoint registry does not match the trainer registry");
  load_model(ck, model_);
  optim_.clear();
  for (Group g : kAllGroups) {
    AdamConfig ac;
    ac.learning_rate = cfg_.learning_rate;
    AdamState st(model_.params().group(g), ac);
    if (load_optim(ck, "adam." + group_name(g), model_.params().group(g), st)) optim_.emplace(g, std::move(st));
  }
}

// ---- stage drivers ------------------------------------------------------------

fs::path stage_checkpoint_path(const fs::path& run_dir, int stage) {
  return run_dir / ("stage" + std::to_string(stage) + ".ckpt");
}

std::set<std::string> group_languages(const CorpusWorld& world, LangGroup g) {
  std::set<std::string> out;
  for (const auto& l : world.languages)
    if (l.group == g) out.insert(l.name);
  return out;
}

namespace {

std::string fmt_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string metrics_line(int64_t step, const StepResult& r) {
  std::string s = std::to_string(step) + "\t" + r.report.kind + "\t";
  std::vector<std::pair<const char*, std::optional<double>>> fields = {
      {"l_feature", r.report.l_feature}, {"l_kl", r.report.l_kl},         {"l_dur", r.report.l_dur},
      {"l_rnnt", r.report.l_rnnt},       {"l_bestrq", r.report.l_bestrq},
      {"l_recon", r.report.l_recon},     {"l_mlm", r.report.l_mlm},
      {"l_sup", r.report.l_sup}};
  bool first = true;
  for (const auto& [name, v] : fields) {
    if (!v) continue;
    s += (first ? "" : ",") + std::string(name) + "=" + fmt_value(*v);
    first = false;
  }
  s += std::string(first ? "" : ",") + "items=" + std::to_string(r.items) + ",skipped=" + std::to_string(r.skipped);
  return s;
}

double main_loss(const StepResult& r) {
  const auto& p = r.report;
  if (p.l_sup) return *p.l_sup;
  if (p.l_rnnt) return *p.l_rnnt;
  if (p.l_bestrq) return *p.l_bestrq;
  if (p.l_mlm) return *p.l_mlm;
  return 0.0;
}

// Keeps only log lines up to and including `step`.
void truncate_metrics(const fs::path& path, int64_t step) {
  if (!fs::exists(path)) return;
  std::ifstream is(path);
  std::string line, kept;
  while (std::getline(is, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    if (std::stoll(line.substr(0, tab)) <= step) kept += line + "\n";
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  os << kept;
}

void count(StageSummary& s, const StepResult& r) {
  s.counters["steps." + r.report.kind] += 1;
  s.counters["items." + r.report.kind] += r.items;
  s.counters["skipped." + r.report.kind] += r.skipped;
  s.counters["align_checked"] += r.align_checked;
  s.counters["align_violations"] += r.align_violations;
  if (!scope_ok(r)) s.counters["scope_violations"] += 1;
}

// Shared stage loop: resume from a partial checkpoint, run steps, persist.
// `body` runs one step and returns its results.
StageSummary run_stage(Trainer& tr, const std::string& name, int stage, int64_t total, const StageIO& io,
                       const std::function<std::vector<StepResult>(int64_t)>& body,
                       const std::function<void()>& before_final = {}) {
  StageSummary sum;
  sum.stage = stage;
  const bool persist = !io.run_dir.empty();
  const fs::path final_path = io.run_dir / (name + ".ckpt");
  const fs::path partial_path = io.run_dir / (name + ".partial.ckpt");
  const fs::path metrics_path = io.run_dir / (name + ".metrics.tsv");

  int64_t start = 0;
  tr.reset_optim();
  if (persist) {
    fs::create_directories(io.run_dir);
    if (fs::exists(final_path)) {
      tr.load(read_checkpoint(final_path));
      sum.completed = true;
      return sum;
    }
    if (fs::exists(partial_path)) {
      Checkpoint ck = read_checkpoint(partial_path);
      tr.load(ck);
      start = ck.step;
      truncate_metrics(metrics_path, start - 1);
    } else {
      std::ofstream(metrics_path, std::ios::trunc);
    }
  }
  std::ofstream log;
  if (persist) log.open(metrics_path, std::ios::app);

  auto save = [&](const fs::path& p, int64_t step) {
    Checkpoint ck;
    ck.stage = stage;
    ck.step = step;
    tr.store(ck);
    write_checkpoint(p, ck);
  };

  for (int64_t step = start; step < total; ++step) {
    if (io.interrupt_after >= 0 && sum.steps_run >= io.interrupt_after) return sum;
    for (const StepResult& r : body(step)) {
      for (Group g : kAllGroups) {
        if (!std::isfinite(r.norm(g))) throw StateError(name + ": non-finite gradient at step " + std::to_string(step));
      }
      if (!std::isfinite(main_loss(r))) throw StateError(name + ": non-finite loss at step " + std::to_string(step));
      count(sum, r);
      sum.loss_curve.push_back(main_loss(r));
      if (persist) log << metrics_line(step, r) << "\n";
      if (io.on_step) io.on_step(r, step);
    }
    ++sum.steps_run;
    if (persist && (step + 1) % tr.config().checkpoint_every == 0 && step + 1 < total) {
      log.flush();
      save(partial_path, step + 1);
    }
  }
  if (before_final) before_final();
  if (persist) {
    log.flush();
    save(final_path, total);
    fs::remove(partial_path);
  }
  sum.completed = true;
  return sum;
}

std::vector<const Utterance*> select(const Manifest& m, const std::function<bool(const Utterance&)>& keep) {
  std::vector<const Utterance*> out;
  for (const auto& u : m.records)
    if (keep(u)) out.push_back(&u);
  return out;
}

uint64_t mixer_seed(const CurriculumConfig& c, const char* tag) { return Rng::mix(c.seed, Rng::hash(tag)); }

}  // namespace

StageSummary stage1_pretrain(Trainer& tr, const Manifest& train, const StageIO& io) {
  auto speech = select(train, [](const Utterance& u) { return u.signal.has_value(); });
  auto text = select(train, [](const Utterance& u) { return u.text.has_value(); });
  if (speech.empty()) throw ValueError("stage 1: no speech in the training manifest");
  if (text.empty() && tr.config().text_mlm_pretrain) throw ValueError("stage 1: no text in the training manifest");
  BatchMixer sm(train, mixer_seed(tr.config(), "stage1.speech")), tm(train, mixer_seed(tr.config(), "stage1.text"));
  sm.set_pool(UttKind::kSpeechOnly, speech);
  tm.set_pool(UttKind::kTextOnly, text);
  const int bs = tr.config().batch_size;
  const std::string lang0 = tr.config().vocoder_language;
  return run_stage(
      tr, "stage1", 1, tr.config().stage1_steps, io,
      [&](int64_t step) {
        std::vector<StepResult> out;
        out.push_back(tr.bestrq_step(sm.sample_batch(step, {0, 1, 0}, bs).items, step));
        if (tr.config().text_mlm_pretrain) out.push_back(tr.mlm_step(tm.sample_batch(step, {0, 0, 1}, bs).items, step));
        return out;
      },
      [&] { fit_vocoder(tr.model(), train, lang0); });
}

StageSummary stage2_asr(Trainer& tr, const Manifest& train, const CorpusWorld& world, const StageIO& io) {
  const auto group_a = group_languages(world, LangGroup::kA);
  auto paired = select(train, [&](const Utterance& u) {
    return u.kind == UttKind::kPaired && group_a.count(u.lang_name) != 0;
  });
  if (paired.empty()) throw ValueError("stage 2: no Group-A paired data in the training manifest");
  BatchMixer mx(train, mixer_seed(tr.config(), "stage2"));
  mx.set_pool(UttKind::kPaired, paired);
  const int bs = tr.config().batch_size;
  return run_stage(tr, "stage2", 2, tr.config().stage2_steps, io, [&](int64_t step) {
    return std::vector<StepResult>{tr.asr_step(mx.sample_batch(step, {1, 0, 0}, bs).items, step, false)};
  });
}

StageSummary stage3_joint(Trainer& tr, const Manifest& train, const CorpusWorld& world, Condition condition,
                          const StageIO& io, const PseudoLabelHook& hook) {
  const auto group_b = group_languages(world, LangGroup::kB);
  BatchMixer mx(train, mixer_seed(tr.config(), "stage3"));
  const int bs = tr.config().batch_size;
  const auto weights = tr.config().kind_weights;
  StageSummary s = run_stage(tr, "stage3", 3, tr.config().stage3_steps, io, [&](int64_t step) {
    BatchRef br = mx.sample_batch(step, weights, bs);
    StepResult r;
    switch (br.kind) {
      case UttKind::kPaired: {
        if (condition == Condition::kZero) {
          for (const Utterance* u : br.items) {
            if (group_b.count(u->lang_name)) throw StateError("Zero condition: Group-B record " + u->id + " reached supervised training");
          }
        }
        r = tr.supervised_step(br.items, step);
        break;
      }
      case UttKind::kSpeechOnly:
        r = tr.untranscribed_speech_step(br.items, step, true, hook);
        break;
      case UttKind::kTextOnly:
        r = tr.unspoken_text_step(br.items, step);
        break;
    }
    return std::vector<StepResult>{r};
  });
  return s;
}

void fit_vocoder(Model& model, const Manifest& train, const std::string& language) {
  std::vector<Tensor> feats, sigs;
  for (const auto& u : train.records) {
    if (u.kind != UttKind::kPaired || u.lang_name != language || !u.signal) continue;
    Tape tape;
    Binder b(tape, {});
    feats.push_back(model.s2f(b, *u.signal).value());
    sigs.push_back(*u.signal);
  }
  if (feats.empty()) throw ValueError("vocoder fit: no paired data for language " + language);
  model.vocoder().fit(feats, sigs);
}

StageSummary train_eval_asr(Trainer& tr, const Manifest& data, int64_t steps, const StageIO& io) {
  auto paired = select(data, [](const Utterance& u) { return u.text.has_value() && u.signal.has_value(); });
  if (paired.empty()) throw ValueError("eval ASR: no paired data");
  BatchMixer mx(data, mixer_seed(tr.config(), "evalasr"));
  mx.set_pool(UttKind::kPaired, paired);
  const int bs = tr.config().batch_size;
  return run_stage(tr, "evalasr", 0, steps, io, [&](int64_t step) {
    return std::vector<StepResult>{tr.asr_step(mx.sample_batch(step, {1, 0, 0}, bs).items, step, true)};
  });
}

std::map<std::string, std::string> read_pseudo_labels(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw StateError("cannot open pseudo-label file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ValueError(path.string() + ":" + std::to_string(n) + ": expected id<TAB>transcript");
    }
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

}  // namespace jstts
