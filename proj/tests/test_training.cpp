#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "jstts/error.hpp"
#include "jstts/training.hpp"

using namespace jstts;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  CorpusWorld world;
  ManifestSet zero, m15;
  IdRegistry registry;
  ModelConfig mc;
};

const Fixture& fx() {
  static const Fixture f = [] {
    Fixture x;
    CorpusConfig c;
    c.n_group_a = 2;
    c.n_group_b = 1;
    c.paired_per_language = 30;
    c.speech_only_per_language = 20;
    c.text_only_per_language = 20;
    c.test_per_language = 5;
    c.eval_asr_per_language = 10;
    c.budget_15m = 5;
    c.seed = 3;
    x.world = gen_world(c);
    x.zero = build_manifests(x.world, Condition::kZero);
    x.m15 = build_manifests(x.world, Condition::k15m);
    x.registry = registry_from(x.zero.train);
    x.mc.hidden = 16;
    x.mc.joint = 8;
    x.mc.pred_embed = 8;
    x.mc.shared_layers = 1;
    x.mc.text_layers = 1;
    x.mc.n_langs = x.registry.num_languages();
    x.mc.n_spks = x.registry.num_speakers();
    return x;
  }();
  return f;
}

CurriculumConfig tiny_curriculum() {
  CurriculumConfig c;
  c.stage1_steps = 6;
  c.stage2_steps = 4;
  c.stage3_steps = 6;
  c.batch_size = 3;
  c.checkpoint_every = 2;
  return c;
}

std::vector<const Utterance*> take(const Manifest& m, UttKind k, size_t n, const std::string& lang = "") {
  std::vector<const Utterance*> out;
  for (const auto& u : m.records) {
    if (u.kind == k && (lang.empty() || u.lang_name == lang) && out.size() < n) out.push_back(&u);
  }
  return out;
}

std::map<Group, uint64_t> checksums(const Model& m) {
  std::map<Group, uint64_t> out;
  for (Group g : kAllGroups) out[g] = m.params().checksum(g);
  return out;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("jstts_train_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cfg dropout") {
  Rng rng(1);
  const LangId l{3};
  const SpkId s{2};
  for (int i = 0; i < 100; ++i) {
    auto [a, b] = cfg_dropout(l, s, 0.0, rng);
    CHECK(a == l);
    CHECK(b == s);
    auto [c, d] = cfg_dropout(l, s, 1.0, rng);
    CHECK(c.value == 0);
    CHECK(d.value == 0);
  }
  int dl = 0, ds = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto [a, b] = cfg_dropout(l, s, 0.1, rng);
    dl += a.value == 0;
    ds += b.value == 0;
  }
  CHECK(std::abs(dl / double(n) - 0.1) <= 0.005);
  CHECK(std::abs(ds / double(n) - 0.1) <= 0.005);
}

TEST_CASE("curriculum config validation") {
  CurriculumConfig c;
  CHECK_NOTHROW(c.validate());
  c.stage2_steps = 0;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = {};
  c.kind_weights = {0, 0, 0};
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = {};
  c.cfg_dropout_prob = 1.5;
  CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("supervised step: assembly, scope and alignment") {
  const auto& f = fx();
  Model m(f.mc, 1);
  LossWeights w;
  Trainer tr(m, f.registry, tiny_curriculum(), w);
  auto batch = take(f.zero.train, UttKind::kPaired, 4);
  for (int64_t step : {0, 500, 5000}) {
    StepResult r = tr.supervised_step(batch, step, false);
    REQUIRE(r.items == 4);
    CHECK(r.report.l_sup.has_value());
    const double expect = w.w_feature * *r.report.l_feature + kl_weight(step, w) * *r.report.l_kl +
                          w.w_dur * *r.report.l_dur + w.w_rnnt * *r.report.l_rnnt;
    CHECK(std::abs(*r.report.l_sup - expect) <= 1e-12);
    CHECK(r.norm(Group::kS2F) == 0.0);
    CHECK(r.norm(Group::kVocoder) == 0.0);
    CHECK(scope_ok(r));
    CHECK(r.align_checked == 4);
    CHECK(r.align_violations == 0);
  }
  // before the KL ramp the KL term is absent from l_sup
  StepResult r = tr.supervised_step(batch, 0, false);
  CHECK(*r.report.l_kl > 0.0);
  CHECK(*r.report.l_sup ==
        doctest::Approx(*r.report.l_feature + w.w_dur * *r.report.l_dur + w.w_rnnt * *r.report.l_rnnt).epsilon(1e-14));
}

TEST_CASE("untranscribed speech step blocks gradient into the ASR path") {
  const auto& f = fx();
  Model m(f.mc, 2);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  auto batch = take(f.zero.train, UttKind::kSpeechOnly, 4);
  const PseudoLabelHook hook = [](const Utterance&) { return std::optional<std::string>("abcd"); };
  StepResult r = tr.untranscribed_speech_step(batch, 7, false, hook);
  REQUIRE(r.items == 4);
  CHECK(r.norm(Group::kShared) == 0.0);
  CHECK(r.norm(Group::kRnnt) == 0.0);
  CHECK(r.norm(Group::kS2F) == 0.0);
  CHECK(r.norm(Group::kDecoder) > 0.0);
  CHECK(r.norm(Group::kText) > 0.0);
  CHECK(scope_ok(r));
  CHECK(r.report.l_rnnt.has_value());

  // an empty hypothesis is skipped
  const PseudoLabelHook empty = [](const Utterance&) { return std::optional<std::string>(""); };
  StepResult e = tr.untranscribed_speech_step(batch, 7, false, empty);
  CHECK(e.items == 0);
  CHECK(e.skipped == 4);
  CHECK_FALSE(e.report.l_sup.has_value());
}

TEST_CASE("untranscribed step with oracle transcripts equals the supervised step") {
  const auto& f = fx();
  Model m(f.mc, 3);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  auto batch = take(f.zero.train, UttKind::kPaired, 5);
  const PseudoLabelHook oracle = [](const Utterance& u) { return u.text; };
  for (int64_t step : {3, 400, 2000}) {
    StepResult a = tr.supervised_step(batch, step, false);
    StepResult b = tr.untranscribed_speech_step(batch, step, false, oracle);
    REQUIRE(a.items == b.items);
    CHECK(std::abs(*a.report.l_sup - *b.report.l_sup) <= 1e-9);
    CHECK(std::abs(*a.report.l_feature - *b.report.l_feature) <= 1e-9);
    CHECK(std::abs(*a.report.l_kl - *b.report.l_kl) <= 1e-9);
    CHECK(std::abs(*a.report.l_dur - *b.report.l_dur) <= 1e-9);
    CHECK(std::abs(*a.report.l_rnnt - *b.report.l_rnnt) <= 1e-9);
  }
}

TEST_CASE("pseudo labels come from the model's own decoder") {
  const auto& f = fx();
  Model m(f.mc, 4);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  const Utterance& u = *take(f.zero.train, UttKind::kSpeechOnly, 1)[0];
  PseudoLabel a = tr.pseudo_label(u), b = tr.pseudo_label(u);
  CHECK(a.hypothesis == b.hypothesis);
  CHECK(a.source_id == u.id);
  CHECK(std::isfinite(a.score));
  const Utterance& t = *take(f.zero.train, UttKind::kTextOnly, 1)[0];
  CHECK_THROWS_AS(tr.pseudo_label(t), ValueError);
}

TEST_CASE("unspoken text step trains the TTS front through the ASR path") {
  const auto& f = fx();
  Model m(f.mc, 5);
  CurriculumConfig c = tiny_curriculum();
  c.cfg_dropout_prob = 0.0;
  Trainer tr(m, f.registry, c, LossWeights{});
  auto batch = take(f.zero.train, UttKind::kTextOnly, 4);
  StepResult r = tr.unspoken_text_step(batch, 0, false);
  REQUIRE(r.items == 4);
  CHECK(r.norm(Group::kText) > 0.0);
  CHECK(r.norm(Group::kDecoder) > 0.0);
  CHECK(r.norm(Group::kShared) == 0.0);
  CHECK(r.norm(Group::kRnnt) == 0.0);
  CHECK(r.norm(Group::kDuration) == 0.0);
  CHECK(scope_ok(r));
  // only the OOV speaker row sees gradient
  const Parameter& spk = m.params().get("text.spk_embed");
  for (int64_t i = 0; i < spk.grad.rows(); ++i) {
    double s = 0;
    for (int64_t j = 0; j < spk.grad.cols(); ++j) s += std::abs(spk.grad(i, j));
    CHECK((s > 0.0) == (i == 0));
  }

  CurriculumConfig full = c;
  full.mlm_ratio = 1.0;
  Model m2(f.mc, 6);
  Trainer t2(m2, f.registry, full, LossWeights{});
  for (int64_t step = 0; step < 5; ++step) {
    StepResult x = t2.unspoken_text_step(batch, step, false);
    REQUIRE(x.report.l_rnnt.has_value());
    CHECK(std::isfinite(*x.report.l_rnnt));
  }
}

TEST_CASE("unspoken text weight scales the gradient, not the reported loss") {
  const auto& f = fx();
  auto batch = take(f.zero.train, UttKind::kTextOnly, 3);
  CurriculumConfig one = tiny_curriculum(), quarter = tiny_curriculum();
  quarter.unspoken_text_weight = 0.25;
  Model m(f.mc, 5);
  Trainer t1(m, f.registry, one, LossWeights{});
  Trainer tq(m, f.registry, quarter, LossWeights{});
  const StepResult a = t1.unspoken_text_step(batch, 2, false);
  const StepResult b = tq.unspoken_text_step(batch, 2, false);
  REQUIRE(a.items == 3);
  CHECK(*a.report.l_rnnt == *b.report.l_rnnt);
  for (Group g : {Group::kText, Group::kDecoder}) {
    CHECK(a.norm(g) > 0.0);
    CHECK(b.norm(g) == doctest::Approx(0.25 * a.norm(g)).epsilon(1e-9));
  }

  CurriculumConfig bad = tiny_curriculum();
  bad.unspoken_text_weight = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("pretraining and ASR steps stay in scope") {
  const auto& f = fx();
  Model m(f.mc, 7);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  auto speech = take(f.zero.train, UttKind::kSpeechOnly, 3);
  auto text = take(f.zero.train, UttKind::kTextOnly, 3);
  auto paired = take(f.zero.train, UttKind::kPaired, 3);
  StepResult a = tr.bestrq_step(speech, 0, false);
  CHECK(a.items == 3);
  CHECK(scope_ok(a));
  StepResult b = tr.mlm_step(text, 0, false);
  CHECK(b.items == 3);
  CHECK(scope_ok(b));
  StepResult c = tr.asr_step(paired, 0, false, false);
  CHECK(scope_ok(c));
  CHECK(c.align_violations == 0);
  StepResult d = tr.asr_step(paired, 0, true, false);
  CHECK(scope_ok(d));
  CHECK(d.norm(Group::kS2F) > 0.0);
  CHECK_THROWS_AS(tr.supervised_step(text, 0, false), ValueError);
  CHECK_THROWS_AS(step_scope("nonsense"), ValueError);
}

TEST_CASE("BEST-RQ step carries an S2F reconstruction term") {
  const auto& f = fx();
  auto speech = take(f.zero.train, UttKind::kSpeechOnly, 3);
  CurriculumConfig off = tiny_curriculum(), on = tiny_curriculum();
  off.s2f_recon_weight = 0.0;
  on.s2f_recon_weight = 20.0;
  Model m(f.mc, 7);
  Trainer t_off(m, f.registry, off, LossWeights{});
  Trainer t_on(m, f.registry, on, LossWeights{});
  const StepResult a = t_off.bestrq_step(speech, 4, false);
  const StepResult b = t_on.bestrq_step(speech, 4, false);
  REQUIRE(a.report.l_recon.has_value());
  CHECK(*a.report.l_bestrq == *b.report.l_bestrq);
  CHECK(*a.report.l_recon == *b.report.l_recon);
  CHECK(*b.report.l_recon > 0.0);
  // the head reads Z only, so the shared encoder never sees the term
  CHECK(a.norm(Group::kShared) == b.norm(Group::kShared));
  CHECK(a.norm(Group::kS2F) != b.norm(Group::kS2F));
  CHECK(scope_ok(b));

  // fitting one batch drives the reconstruction error down
  Model m2(f.mc, 7);
  Trainer tr(m2, f.registry, on, LossWeights{});
  const double first = *tr.bestrq_step(speech, 0).report.l_recon;
  double last = first;
  for (int i = 0; i < 30; ++i) last = *tr.bestrq_step(speech, 0).report.l_recon;
  CHECK(last < 0.5 * first);

  CurriculumConfig bad = tiny_curriculum();
  bad.s2f_recon_weight = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("an update changes exactly the step's groups") {
  const auto& f = fx();
  Model m(f.mc, 8);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  auto before = checksums(m);
  tr.supervised_step(take(f.zero.train, UttKind::kPaired, 2), 0);
  auto after = checksums(m);
  for (Group g : kAllGroups) CHECK((before[g] != after[g]) == step_scope("paired").has(g));
}

TEST_CASE("curriculum stages keep their scope and frozen parts") {
  const auto& f = fx();
  Model m(f.mc, 9);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  StageIO io;
  auto c0 = checksums(m);
  StageSummary s1 = stage1_pretrain(tr, f.zero.train, io);
  CHECK(s1.completed);
  CHECK(s1.counters.at("steps.bestrq") == 6);
  CHECK(s1.counters.at("steps.mlm") == 6);
  CHECK(s1.counters.count("scope_violations") == 0);
  CHECK(m.vocoder().frozen());
  auto c1 = checksums(m);
  CHECK(c1[Group::kText] != c0[Group::kText]);
  CHECK(c1[Group::kS2F] != c0[Group::kS2F]);
  CHECK(c1[Group::kDuration] == c0[Group::kDuration]);
  CHECK(c1[Group::kDecoder] == c0[Group::kDecoder]);
  CHECK(c1[Group::kRnnt] == c0[Group::kRnnt]);

  StageSummary s2 = stage2_asr(tr, f.zero.train, f.world, io);
  auto c2 = checksums(m);
  CHECK(s2.counters.count("scope_violations") == 0);
  CHECK(c2[Group::kS2F] == c1[Group::kS2F]);
  CHECK(c2[Group::kText] == c1[Group::kText]);
  CHECK(c2[Group::kVocoder] == c1[Group::kVocoder]);
  CHECK(c2[Group::kRnnt] != c1[Group::kRnnt]);

  StageSummary s3 = stage3_joint(tr, f.zero.train, f.world, Condition::kZero, io);
  auto c3 = checksums(m);
  CHECK(s3.counters.count("scope_violations") == 0);
  CHECK(s3.counters.at("align_violations") == 0);
  CHECK(c3[Group::kS2F] == c1[Group::kS2F]);
  CHECK(c3[Group::kVocoder] == c1[Group::kVocoder]);
  CHECK_FALSE(m.tts_trained_langs().empty());
}

TEST_CASE("stage 3 with supervised-only weights runs only supervised steps") {
  const auto& f = fx();
  Model m(f.mc, 10);
  CurriculumConfig c = tiny_curriculum();
  c.kind_weights = {1, 0, 0};
  Trainer tr(m, f.registry, c, LossWeights{});
  StageSummary s = stage3_joint(tr, f.m15.train, f.world, Condition::k15m, {});
  CHECK(s.counters.at("steps.paired") == c.stage3_steps);
  CHECK(s.counters.count("steps.text_only") == 0);
  CHECK(s.counters.count("steps.speech_only") == 0);
}

TEST_CASE("Zero-condition audit rejects Group-B paired data") {
  const auto& f = fx();
  CHECK(audit_zero_condition(f.zero.train, f.world));
  CHECK_FALSE(audit_zero_condition(f.m15.train, f.world));
  Model m(f.mc, 11);
  CurriculumConfig c = tiny_curriculum();
  c.kind_weights = {1, 0, 0};
  c.stage3_steps = 40;
  Trainer tr(m, f.registry, c, LossWeights{});
  // feeding the 15m manifest while claiming Zero trips the audit
  CHECK_THROWS_AS(stage3_joint(tr, f.m15.train, f.world, Condition::kZero, {}), StateError);
}

TEST_CASE("stage errors") {
  const auto& f = fx();
  Model m(f.mc, 12);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  Manifest empty;
  CHECK_THROWS_AS(stage1_pretrain(tr, empty, {}), ValueError);
  CHECK_THROWS_AS(stage2_asr(tr, empty, f.world, {}), ValueError);
  ModelConfig bad = f.mc;
  bad.n_langs += 1;
  Model m2(bad, 1);
  CHECK_THROWS_AS(Trainer(m2, f.registry, tiny_curriculum(), LossWeights{}), ValueError);
}

TEST_CASE("interrupted stage resumes bit-for-bit") {
  const auto& f = fx();
  auto run = [&](const fs::path& dir, bool interrupt) {
    Model m(f.mc, 13);
    Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
    StageIO io;
    io.run_dir = dir;
    if (interrupt) {
      io.interrupt_after = 3;
      StageSummary s = stage1_pretrain(tr, f.zero.train, io);
      CHECK_FALSE(s.completed);
      CHECK(fs::exists(dir / "stage1.partial.ckpt"));
      io.interrupt_after = -1;
      Model fresh(f.mc, 13);
      Trainer t2(fresh, f.registry, tiny_curriculum(), LossWeights{});
      StageSummary r = stage1_pretrain(t2, f.zero.train, io);
      CHECK(r.completed);
      CHECK(r.steps_run == 4);  // resumed from the step-2 checkpoint
      return checksums(fresh);
    }
    stage1_pretrain(tr, f.zero.train, io);
    return checksums(m);
  };
  const fs::path a = scratch_dir("resume_a"), b = scratch_dir("resume_b");
  CHECK(run(a, false) == run(b, true));
  CHECK(slurp(a / "stage1.ckpt") == slurp(b / "stage1.ckpt"));
  CHECK(slurp(a / "stage1.metrics.tsv") == slurp(b / "stage1.metrics.tsv"));
  CHECK_FALSE(fs::exists(b / "stage1.partial.ckpt"));

  // a finished stage is loaded, not rerun
  Model m(f.mc, 99);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  StageIO io;
  io.run_dir = a;
  StageSummary s = stage1_pretrain(tr, f.zero.train, io);
  CHECK(s.steps_run == 0);
  CHECK(checksums(m) == run(scratch_dir("resume_c"), false));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(scratch_dir("resume_c"));
}

TEST_CASE("metrics log format") {
  const auto& f = fx();
  Model m(f.mc, 14);
  Trainer tr(m, f.registry, tiny_curriculum(), LossWeights{});
  const fs::path dir = scratch_dir("metrics");
  StageIO io;
  io.run_dir = dir;
  stage1_pretrain(tr, f.zero.train, io);
  std::ifstream is(dir / "stage1.metrics.tsv");
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    const auto t1 = line.find('\t'), t2 = line.find('\t', t1 + 1);
    REQUIRE(t2 != std::string::npos);
    CHECK(std::stoll(line.substr(0, t1)) == n / 2);
    const std::string kind = line.substr(t1 + 1, t2 - t1 - 1);
    CHECK((kind == "bestrq" || kind == "mlm"));
    CHECK(line.find("l_" + std::string(kind == "bestrq" ? "bestrq" : "mlm") + "=") != std::string::npos);
    ++n;
  }
  CHECK(n == 12);
  fs::remove_all(dir);
}

TEST_CASE("pseudo-label file") {
  const fs::path p = fs::temp_directory_path() / "jstts_labels.tsv";
  {
    std::ofstream os(p);
    os << "a1\thello\n\nb2\twith\ttab\n";
  }
  auto m = read_pseudo_labels(p);
  CHECK(m.size() == 2);
  CHECK(m.at("a1") == "hello");
  CHECK(m.at("b2") == "with\ttab");
  {
    std::ofstream os(p);
    os << "no tab here\n";
  }
  CHECK_THROWS_AS(read_pseudo_labels(p), ValueError);
  fs::remove(p);
}
