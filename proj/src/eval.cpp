#include "jstts/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "jstts/error.hpp"

namespace jstts {

namespace fs = std::filesystem;

DecodeResult greedy_decode(int64_t frames, const JointFn& joint, int max_emit) {
  if (max_emit < 1) throw ValueError("greedy_decode: max_emit must be at least 1");
  DecodeResult out;
  std::vector<double> row(kTransducerVocab);
  for (int64_t t = 0; t < frames; ++t) {
    for (int emitted = 0; emitted < max_emit; ++emitted) {
      joint(t, out.tokens, row);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      double mx = row[static_cast<size_t>(best)], z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      out.score += -std::log(z);
      if (best == kBlank) break;
      out.tokens.push_back(best);
    }
  }
  return out;
}

DecodeResult greedy_decode_features(const Model& model, const Tensor& z, int max_emit) {
  Tape tape;
  Binder b(tape, {});
  const Tensor enc = model.encoder_projection(model.shared(b, tape.constant(z)).value());
  PredState state = model.pred_start();
  size_t known = 0;
  return greedy_decode(
      enc.rows(),
      [&](int64_t t, std::span<const int> prefix, std::span<double> out) {
        // greedy decoding only ever appends, so one step catches up
        if (prefix.size() > known) {
          state = model.pred_next(state, prefix.back());
          known = prefix.size();
        }
        model.joint_logits(enc.row_span(t), state, out);
      },
      max_emit);
}

DecodeResult greedy_decode_signal(const Model& model, const Tensor& signal, int max_emit) {
  Tape tape;
  Binder b(tape, {});
  return greedy_decode_features(model, model.s2f(b, signal).value(), max_emit);
}

Synthesis synthesize(const std::string& text, const std::string& lang_name, const std::string& spk_name,
                     const Model& model, const IdRegistry& registry, const SynthOptions& opt) {
  if (text.empty()) throw ValueError("synthesize: empty text");
  if (!model.vocoder().frozen()) throw StateError("synthesize: the pseudo-vocoder has not been fitted");
  Synthesis s;
  std::tie(s.lang, s.spk) = registry.lookup_ids(lang_name, spk_name);
  if (opt.oov_for_untrained_languages && s.lang.value != kOovId && !model.tts_trained_langs().count(s.lang.value)) {
    s.lang = LangId{kOovId};
  }
  s.lang_oov = s.lang.value == kOovId;

  const std::vector<int> tokens = tokenize(text).tokens;
  Tape tape;
  Binder b(tape, {});
  Var enc = model.text_encode(b, tokens);
  Var cond = model.condition(b, enc, s.lang, s.spk);
  s.durations = Model::round_durations(model.durations(b, cond).value());
  // prior mean
  Var latent = tape.constant(Tensor({1, model.config().vae_dim}));
  s.features = model.decode(b, Model::upsample(cond, s.durations), latent).back().value();
  if (opt.guidance != 1.0) {
    Var uncond = model.condition(b, enc, LangId{kOovId}, SpkId{kOovId});
    const Tensor zu = model.decode(b, Model::upsample(uncond, s.durations), latent).back().value();
    for (int64_t i = 0; i < zu.numel(); ++i) s.features[i] = zu[i] + opt.guidance * (s.features[i] - zu[i]);
  }
  s.signal = model.vocoder().apply(s.features);
  return s;
}

double EvalReport::group_mean(LangGroup g, bool synth) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& l : langs) {
    if (l.group != g) continue;
    sum += synth ? l.cer_synth : l.cer_gt;
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

EvalReport eval_condition(const Model& tts, const IdRegistry& registry, const Manifest& test, const CorpusWorld& world,
                          const Model& eval_asr, const SynthOptions& opt, int max_emit,
                          std::map<std::string, std::vector<int>>* gt_cache) {
  if (&tts == &eval_asr) throw ValueError("eval: the evaluation ASR must be a separate model");
  struct Acc {
    size_t ref = 0, gt = 0, synth = 0;
    int n = 0;
    bool oov = false;
  };
  std::map<std::string, Acc> acc;
  EvalReport rep;
  for (const auto& u : test.records) {
    if (!u.text || !u.signal) throw ValueError("eval: test record " + u.id + " is not paired");
    const std::u32string ref = utf8_decode(*u.text);
    std::vector<int> gt_tokens;
    if (gt_cache && gt_cache->count(u.id)) {
      gt_tokens = gt_cache->at(u.id);
    } else {
      gt_tokens = greedy_decode_signal(eval_asr, *u.signal, max_emit).tokens;
      if (gt_cache) (*gt_cache)[u.id] = gt_tokens;
    }
    const Synthesis syn = synthesize(*u.text, u.lang_name, u.spk_name.value_or(""), tts, registry, opt);
    const std::vector<int> syn_tokens = greedy_decode_signal(eval_asr, syn.signal, max_emit).tokens;
    Acc& a = acc[u.lang_name];
    a.ref += ref.size();
    a.gt += levenshtein(ref, utf8_decode(detokenize(gt_tokens)));
    a.synth += levenshtein(ref, utf8_decode(detokenize(syn_tokens)));
    ++a.n;
    a.oov = a.oov || syn.lang_oov;
  }
  for (const auto& [name, a] : acc) {
    LangEval le;
    le.lang = name;
    le.group = world.language(name).group;
    le.utterances = a.n;
    le.cer_gt = static_cast<double>(a.gt) / static_cast<double>(a.ref);
    le.cer_synth = static_cast<double>(a.synth) / static_cast<double>(a.ref);
    le.cer_diff = le.cer_synth - le.cer_gt;
    le.lang_oov = a.oov;
    if (!registry.has_language(name)) rep.notes.push_back(name + ": not in the registry, synthesized with the OOV id");
    else if (a.oov) rep.notes.push_back(name + ": no TTS training for this language, synthesized with the OOV id");
    rep.langs.push_back(le);
  }
  return rep;
}

std::vector<int> cer_diff_histogram(const EvalReport& r, const std::vector<double>& thresholds) {
  for (size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > thresholds[i - 1])) throw ValueError("histogram thresholds must be increasing");
  }
  std::vector<int> counts(thresholds.size() + 1, 0);
  for (const auto& l : r.langs) {
    for (size_t i = 0; i < thresholds.size(); ++i)
      if (l.cer_diff <= thresholds[i]) ++counts[i];
    if (thresholds.empty() || l.cer_diff > thresholds.back()) ++counts.back();
  }
  return counts;
}

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::string report_tsv(const EvalReport& r) {
  std::string s;
  for (const auto& l : r.langs) s += l.lang + "\t" + fmt(l.cer_gt) + "\t" + fmt(l.cer_synth) + "\t" + fmt(l.cer_diff) + "\n";
  return s;
}

std::string report_markdown(const EvalReport& r) {
  std::string s = "# Evaluation";
  if (!r.condition.empty()) s += " (" + r.condition + ")";
  s += "\n\n";
  if (!r.checkpoint_id.empty()) s += "checkpoint: " + r.checkpoint_id + ", seed " + std::to_string(r.seed) + "\n\n";
  s += "| language | group | utts | CER gt | CER synth | CER diff |\n|---|---|---|---|---|---|\n";
  for (const auto& l : r.langs) {
    s += "| " + l.lang + (l.lang_oov ? " (OOV)" : "") + " | " + to_string(l.group) + " | " + std::to_string(l.utterances) +
         " | " + fmt(l.cer_gt, "%.4f") + " | " + fmt(l.cer_synth, "%.4f") + " | " + fmt(l.cer_diff, "%+.4f") + " |\n";
  }
  s += "\n| group | mean CER gt | mean CER synth |\n|---|---|---|\n";
  for (LangGroup g : {LangGroup::kA, LangGroup::kB}) {
    s += "| " + to_string(g) + " | " + fmt(r.group_mean(g, false), "%.4f") + " | " + fmt(r.group_mean(g, true), "%.4f") + " |\n";
  }
  const std::vector<double> th = {0.01, 0.05, 0.10, 0.50};
  const auto h = cer_diff_histogram(r, th);
  s += "\n| CER diff | <= 1% | <= 5% | <= 10% | <= 50% | > 50% |\n|---|---|---|---|---|---|\n| languages |";
  for (int c : h) s += " " + std::to_string(c) + " |";
  s += "\n";
  if (!r.notes.empty()) {
    s += "\nNotes:\n";
    for (const auto& n : r.notes) s += "- " + n + "\n";
  }
  return s;
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r) {
  fs::create_directories(dir);
  std::ofstream(dir / (stem + ".tsv"), std::ios::trunc) << report_tsv(r);
  std::ofstream(dir / (stem + ".md"), std::ios::trunc) << report_markdown(r);
}

// ---- ablation -------------------------------------------------------------------

std::array<double, 3> AblationRow::kind_weights() const {
  return {1.0, pseudo_labeling ? 1.0 : 0.0, aligned_text_mlm ? 1.0 : 0.0};
}

AblationRow ablation_row(int row) {
  if (row < 1 || row > 4) throw ValueError("ablation rows are 1..4, got " + std::to_string(row));
  AblationRow r;
  r.row = row;
  r.text_mlm_pretrain = row >= 2;
  r.aligned_text_mlm = row >= 3;
  r.pseudo_labeling = row >= 4;
  return r;
}

const AblationCell* AblationGrid::cell(int row, Condition c) const {
  auto it = cells.find({row, c});
  return it == cells.end() ? nullptr : &it->second;
}

bool AblationGrid::directional_ok(std::vector<std::string>* failures) const {
  bool ok = true;
  auto fail = [&](const std::string& m) {
    ok = false;
    if (failures) failures->push_back(m);
  };
  auto get = [&](int row, Condition c) -> const AblationCell* {
    const AblationCell* x = cell(row, c);
    if (!x || !x->ok) {
      fail("row " + std::to_string(row) + " " + to_string(c) + " is missing or failed");
      return nullptr;
    }
    return x;
  };
  for (Condition c : {Condition::kZero, Condition::k15m}) {
    const AblationCell* r1 = get(1, c);
    const AblationCell* r4 = get(4, c);
    if (r1 && r4 && !(r4->cer_b < r1->cer_b)) {
      fail(to_string(c) + ": row 4 CER " + fmt(r4->cer_b, "%.4f") + " is not below row 1 CER " + fmt(r1->cer_b, "%.4f"));
    }
  }
  const AblationCell* z4 = cell(4, Condition::kZero);
  const AblationCell* f4 = cell(4, Condition::k15m);
  if (z4 && f4 && z4->ok && f4->ok && !(f4->cer_b < z4->cer_b)) {
    fail("row 4: 15m CER " + fmt(f4->cer_b, "%.4f") + " is not below Zero CER " + fmt(z4->cer_b, "%.4f"));
  }
  return ok;
}

namespace {

StageIO stage_io(const AblationConfig& cfg, const std::string& sub, const std::string& tag) {
  StageIO io;
  if (!cfg.run_dir.empty()) io.run_dir = cfg.run_dir / sub;
  if (cfg.on_step) io.on_step = [&cfg, tag](const StepResult& r, int64_t step) { cfg.on_step(tag, r, step); };
  return io;
}

void say(const AblationConfig& cfg, const std::string& m) {
  if (cfg.log) cfg.log(m);
}

}  // namespace

AblationGrid run_ablation(const CorpusWorld& world, const AblationConfig& cfg) {
  AblationGrid grid;
  grid.rows = cfg.rows;
  grid.conditions = cfg.conditions;
  for (int r : cfg.rows) ablation_row(r);

  std::map<Condition, ManifestSet> data;
  for (Condition c : cfg.conditions) data.emplace(c, build_manifests(world, c));
  const ManifestSet& any = data.begin()->second;
  const IdRegistry registry = registry_from(any.train);
  for (const auto& [c, m] : data) {
    if (!(registry_from(m.train) == registry)) throw StateError("ablation: registries differ across conditions");
  }
  ModelConfig mc = cfg.model;
  mc.n_langs = registry.num_languages();
  mc.n_spks = registry.num_speakers();
  const uint64_t seed = cfg.curriculum.seed;

  // Stages 1 and 2 do not depend on the row or on Group-B paired data, so
  // they run once. MLM pretraining touches only the text group; rows without
  // it start stage 3 from freshly initialized text parameters.
  Checkpoint pretrained;
  {
    Model model(mc, seed);
    CurriculumConfig cc = cfg.curriculum;
    cc.text_mlm_pretrain = true;
    Trainer tr(model, registry, cc, cfg.losses);
    say(cfg, "stage 1");
    grid.stage1 = stage1_pretrain(tr, any.train, stage_io(cfg, "pretrain", "stage1"));
    say(cfg, "stage 2");
    grid.stage2 = stage2_asr(tr, any.train, world, stage_io(cfg, "pretrain", "stage2"));
    pretrained.stage = 2;
    tr.reset_optim();
    tr.store(pretrained);
  }

  Model eval_asr(mc, Rng::mix(seed, Rng::hash("evalasr")));
  {
    CurriculumConfig cc = cfg.curriculum;
    cc.seed = Rng::mix(seed, Rng::hash("evalasr"));
    Trainer tr(eval_asr, registry, cc, cfg.losses);
    say(cfg, "evaluation ASR");
    grid.eval_asr = train_eval_asr(tr, any.eval_asr, cfg.eval_asr_steps, stage_io(cfg, "evalasr", "evalasr"));
  }
  std::map<std::string, std::vector<int>> gt_cache;

  for (Condition c : cfg.conditions) {
    for (int r : cfg.rows) {
      const AblationRow row = ablation_row(r);
      const std::string tag = to_string(c) + "_row" + std::to_string(r);
      AblationCell& cell = grid.cells[{r, c}];
      try {
        say(cfg, "stage 3 " + tag);
        Model model(mc, seed);
        CurriculumConfig cc = cfg.curriculum;
        cc.kind_weights = row.kind_weights();
        Trainer tr(model, registry, cc, cfg.losses);
        tr.load(pretrained);
        if (!row.text_mlm_pretrain) {
          Model fresh(mc, seed);
          auto dst = model.params().group(Group::kText);
          auto src = fresh.params().group(Group::kText);
          for (size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
        }
        cell.stage3 = stage3_joint(tr, data.at(c).train, world, c, stage_io(cfg, tag, tag));
        cell.report = eval_condition(model, registry, data.at(c).test, world, eval_asr, cfg.synth,
                                     cc.max_emissions_per_frame, &gt_cache);
        cell.report.condition = to_string(c);
        cell.report.seed = seed;
        cell.report.checkpoint_id = tag;
        cell.cer_b = cell.report.group_mean(LangGroup::kB, true);
        cell.ok = true;
        if (!cfg.run_dir.empty()) write_report(cfg.run_dir / "reports", tag, cell.report);
        say(cfg, tag + ": Group-B CER " + fmt(cell.cer_b, "%.4f"));
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
        say(cfg, tag + " failed: " + cell.error);
      }
    }
  }
  if (!cfg.run_dir.empty()) std::ofstream(cfg.run_dir / "ablation.md", std::ios::trunc) << ablation_markdown(grid);
  return grid;
}

std::string ablation_markdown(const AblationGrid& g) {
  std::string s = "# Ablation (mean Group-B CER of synthesized speech)\n\n| Model |";
  for (Condition c : g.conditions) s += " " + to_string(c) + " |";
  s += "\n|---|";
  for (size_t i = 0; i < g.conditions.size(); ++i) s += "---|";
  s += "\n";
  const char* names[] = {"", "(1) supervised only", "(2) + Text MLM pretraining", "(3) + Aligned text MLM",
                         "(4) + Pseudo labeling"};
  for (int r : g.rows) {
    s += std::string("| ") + names[r] + " |";
    for (Condition c : g.conditions) {
      const AblationCell* x = g.cell(r, c);
      s += " " + (x && x->ok ? fmt(100.0 * x->cer_b, "%.2f") : std::string("FAILED")) + " |";
    }
    s += "\n";
  }
  std::vector<std::string> why;
  const bool ok = g.directional_ok(&why);
  s += "\nDirectional checks: " + std::string(ok ? "pass" : "FAIL") + "\n";
  for (const auto& w : why) s += "- " + w + "\n";
  return s;
}

}  // namespace jstts
