#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "jstts/corpus.hpp"
#include "jstts/error.hpp"

using namespace jstts;
namespace fs = std::filesystem;

namespace {

CorpusConfig small_config() {
  CorpusConfig c;
  c.n_group_a = 4;
  c.n_group_b = 2;
  c.paired_per_language = 40;
  c.speech_only_per_language = 10;
  c.text_only_per_language = 10;
  c.test_per_language = 50;
  c.eval_asr_per_language = 10;
  c.budget_15m = 20;
  c.seed = 3;
  return c;
}

const CorpusWorld& small_world() {
  static const CorpusWorld w = gen_world(small_config());
  return w;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("jstts_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("gen_languages count contract and determinism") {
  auto a = gen_languages(8, 4, 7);
  REQUIRE(a.size() == 12);
  int n_a = 0, n_b = 0;
  for (const auto& l : a) (l.group == LangGroup::kA ? n_a : n_b)++;
  CHECK(n_a == 8);
  CHECK(n_b == 4);
  auto b = gen_languages(8, 4, 7);
  CHECK(a == b);
  auto c = gen_languages(8, 4, 8);
  CHECK_FALSE(a == c);
  CHECK_THROWS_AS(gen_languages(0, 4, 7), ValueError);
}

TEST_CASE("language invariants hold") {
  for (uint64_t seed : {0u, 7u, 11u}) {
    for (const auto& l : gen_languages(8, 4, seed)) {
      CHECK(l.alphabet.size() >= 8);
      CHECK(l.alphabet.size() <= 24);
      std::set<char32_t> uniq(l.alphabet.begin(), l.alphabet.end());
      CHECK(uniq.size() == l.alphabet.size());
      for (int d : l.base_duration) {
        CHECK(d >= 2);
        CHECK(d <= 6);
      }
      CHECK(condition_number(l.transform) < 100.0);

      // exhaustive pairwise check, independent of the library helper
      double best = INFINITY;
      for (size_t i = 0; i < l.emission.size(); ++i)
        for (size_t j = 0; j < i; ++j) {
          double s = 0;
          for (size_t k = 0; k < l.emission[i].size(); ++k) s += std::pow(l.emission[i][k] - l.emission[j][k], 2);
          best = std::min(best, std::sqrt(s));
        }
      CHECK(best > 0.5);
      for (int64_t i = 0; i < l.text_transition.rows(); ++i) CHECK(l.text_transition(i, i) == 0.0);
    }
  }
}

TEST_CASE("group B alphabets are covered by their family's group A") {
  auto langs = gen_languages(8, 4, 5);
  for (const auto& b : langs) {
    if (b.group != LangGroup::kB) continue;
    std::set<char32_t> cover;
    for (const auto& a : langs)
      if (a.group == LangGroup::kA && a.family == b.family) cover.insert(a.alphabet.begin(), a.alphabet.end());
    for (char32_t c : b.alphabet) CHECK(cover.count(c) == 1);
  }
}

TEST_CASE("world speakers respect bounds") {
  const auto& w = small_world();
  CHECK(w.speakers.size() == w.languages.size() * 3);
  for (const auto& s : w.speakers) {
    double n = 0;
    for (double x : s.offset) n += x * x;
    CHECK(std::sqrt(n) <= 1.0);
    CHECK(s.tempo >= 0.8);
    CHECK(s.tempo <= 1.25);
  }
}

TEST_CASE("noise-free single character gives identical frames") {
  const auto& w = small_world();
  MicroLanguageSpec lang = w.languages[0];
  lang.base_duration[0] = 3;
  SpeakerSpec spk = *w.speakers_of(lang.name)[0];
  spk.tempo = 1.0;
  Rng rng(1);
  const std::string text = utf8_encode(lang.alphabet[0]);
  Utterance u = synth_utterance(text, lang, spk, w.signal_map, 0.0, rng);
  REQUIRE(u.signal->rows() == 3);
  for (int64_t f = 1; f < 3; ++f)
    for (int64_t d = 0; d < u.signal->cols(); ++d) CHECK((*u.signal)(f, d) == (*u.signal)(0, d));
  CHECK(u.reference_durations == std::vector<int>{3});
}

TEST_CASE("reference durations sum to the frame count") {
  const auto& w = small_world();
  Rng rng(2);
  for (const auto& lang : w.languages) {
    const auto& spk = *w.speakers_of(lang.name)[1];
    const std::string text = sample_text(lang, 4, 8, rng);
    Utterance u = synth_utterance(text, lang, spk, w.signal_map, 0.05, rng);
    int sum = 0;
    for (int d : u.reference_durations) {
      CHECK(d >= 1);
      sum += d;
    }
    CHECK(sum == u.signal->rows());
  }
}

TEST_CASE("feature frames cover every byte token at the fastest tempo") {
  const auto& w = small_world();
  Rng rng(3);
  for (const auto& lang : w.languages) {
    SpeakerSpec fast = *w.speakers_of(lang.name)[0];
    fast.tempo = 0.8;
    for (int rep = 0; rep < 20; ++rep) {
      const std::string text = sample_text(lang, 4, 12, rng);
      Utterance u = synth_utterance(text, lang, fast, w.signal_map, 0.0, rng);
      CHECK((u.signal->rows() + 1) / 2 >= static_cast<int64_t>(text.size()));
    }
  }
}

TEST_CASE("synth rejects characters outside the alphabet") {
  const auto& w = small_world();
  Rng rng(0);
  const auto& lang = w.languages[0];
  try {
    synth_utterance("\xE2\x98\x83", lang, *w.speakers_of(lang.name)[0], w.signal_map, 0.0, rng);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("\xE2\x98\x83") != std::string::npos);
  }
}

TEST_CASE("noise has the right mean across seeds") {
  const auto& w = small_world();
  const auto& lang = w.languages[1];
  const auto& spk = *w.speakers_of(lang.name)[0];
  const std::string text = utf8_encode(lang.alphabet.substr(0, 2));
  Rng clean_rng(0);
  Tensor clean = *synth_utterance(text, lang, spk, w.signal_map, 0.0, clean_rng).signal;
  const double sd = 0.05;

  auto mean_of = [&](uint64_t base) {
    Tensor acc = Tensor::zeros_like(clean);
    for (int i = 0; i < 100; ++i) {
      Rng rng(base + static_cast<uint64_t>(i));
      acc.add_(*synth_utterance(text, lang, spk, w.signal_map, sd, rng).signal, 0.01);
    }
    return acc;
  };
  Tensor m1 = mean_of(1000), m2 = mean_of(5000);
  const double tol = 3 * sd / std::sqrt(100.0);
  int outside = 0;
  for (int64_t i = 0; i < clean.numel(); ++i) {
    if (std::abs(m1[i] - clean[i]) > tol) ++outside;
    if (std::abs(m2[i] - clean[i]) > tol) ++outside;
  }
  // 3 sd bounds: a handful of excursions out of hundreds of entries is expected
  CHECK(outside <= clean.numel() * 2 / 100 + 1);

  Rng r1(1), r2(2);
  Tensor a = *synth_utterance(text, lang, spk, w.signal_map, sd, r1).signal;
  Tensor b = *synth_utterance(text, lang, spk, w.signal_map, sd, r2).signal;
  CHECK(a.values() != b.values());
}

TEST_CASE("signal map is exactly invertible on noise-free frames") {
  const auto& w = small_world();
  Rng rng(4);
  const auto& lang = w.languages[2];
  const auto& spk = *w.speakers_of(lang.name)[0];
  Utterance u = synth_utterance(sample_text(lang, 6, 6, rng), lang, spk, w.signal_map, 0.0, rng);
  const Tensor& s = *u.signal;
  Eigen::MatrixXd G(w.signal_map.rows(), w.signal_map.cols());
  for (int64_t i = 0; i < G.rows(); ++i)
    for (int64_t j = 0; j < G.cols(); ++j) G(i, j) = w.signal_map(i, j);
  double worst = 0;
  for (int64_t f = 0; f < s.rows(); ++f) {
    Eigen::VectorXd y(s.cols());
    for (int64_t d = 0; d < s.cols(); ++d) y(d) = s(f, d) - spk.offset[static_cast<size_t>(d)];
    Eigen::VectorXd z = G.colPivHouseholderQr().solve(y);
    worst = std::max(worst, (G * z - y).norm());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("manifest conditions") {
  const auto& w = small_world();
  auto zero = build_manifests(w, Condition::kZero);
  auto m15 = build_manifests(w, Condition::k15m);
  auto sup = build_manifests(w, Condition::kSupervised);
  CHECK(audit_zero_condition(zero.train, w));
  CHECK_FALSE(audit_zero_condition(m15.train, w));
  for (const auto& l : w.languages) {
    const bool b = l.group == LangGroup::kB;
    CHECK(zero.train.count(UttKind::kPaired, l.name) == (b ? 0u : 40u));
    CHECK(m15.train.count(UttKind::kPaired, l.name) == (b ? 20u : 40u));
    CHECK(sup.train.count(UttKind::kPaired, l.name) == 40u);
    CHECK(zero.train.count(UttKind::kSpeechOnly, l.name) == 10u);
    CHECK(zero.train.count(UttKind::kTextOnly, l.name) == 10u);
    CHECK(zero.test.count(UttKind::kPaired, l.name) == 50u);
  }
  for (const auto& u : zero.train.records) {
    if (u.kind == UttKind::kPaired) CHECK((u.text && u.signal));
    if (u.kind == UttKind::kSpeechOnly) CHECK((!u.text && u.signal));
    if (u.kind == UttKind::kTextOnly) CHECK((u.text && !u.signal));
    if (u.spk_name) {
      CHECK(u.kind == UttKind::kPaired);
      CHECK(w.language(u.lang_name).group == LangGroup::kA);
    }
  }
  std::set<std::string> train_ids, train_texts;
  for (const auto& u : sup.train.records) {
    train_ids.insert(u.id);
    if (u.text) train_texts.insert(u.lang_name + "|" + *u.text);
  }
  for (const auto& u : sup.test.records) {
    CHECK(train_ids.count(u.id) == 0);
    CHECK(train_texts.count(u.lang_name + "|" + *u.text) == 0);
  }
  for (const auto& u : sup.eval_asr.records) CHECK(train_ids.count(u.id) == 0);

  CorpusConfig big = small_config();
  big.budget_15m = 41;
  CorpusWorld w2 = w;
  w2.config = big;
  CHECK_THROWS_AS(build_manifests(w2, Condition::k15m), ValueError);
  w2.config.budget_15m = 0;
  CHECK_THROWS_AS(build_manifests(w2, Condition::kZero), ValueError);
}

TEST_CASE("registry covers every train language") {
  const auto& w = small_world();
  auto m = build_manifests(w, Condition::kZero);
  IdRegistry reg = registry_from(m.train);
  for (const auto& l : w.languages) CHECK(reg.has_language(l.name));
}

TEST_CASE("manifests and world round trip byte-identically") {
  const auto& w = small_world();
  fs::path d1 = scratch_dir("corpus1"), d2 = scratch_dir("corpus2");
  auto a = build_manifests(w, Condition::k15m);
  auto b = build_manifests(gen_world(small_config()), Condition::k15m);
  write_manifest(d1 / "train.tsv", a.train, d1 / "signals");
  write_manifest(d2 / "train.tsv", b.train, d2 / "signals");
  CHECK(slurp(d1 / "train.tsv") == slurp(d2 / "train.tsv"));
  write_world(d1 / "world.json", w);
  write_world(d2 / "world.json", gen_world(small_config()));
  CHECK(slurp(d1 / "world.json") == slurp(d2 / "world.json"));

  CorpusWorld back = read_world(d1 / "world.json");
  REQUIRE(back.languages.size() == w.languages.size());
  for (size_t i = 0; i < w.languages.size(); ++i) CHECK(back.languages[i] == w.languages[i]);
  CHECK(back.signal_map.values() == w.signal_map.values());

  Manifest m = read_manifest(d1 / "train.tsv", Manifest::Split::kTrain);
  REQUIRE(m.records.size() == a.train.records.size());
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(m.records[i].kind == a.train.records[i].kind);
    CHECK(m.records[i].text == a.train.records[i].text);
    CHECK(m.records[i].spk_name == a.train.records[i].spk_name);
    if (a.train.records[i].signal) CHECK(m.records[i].signal->values() == a.train.records[i].signal->values());
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("malformed manifest lines are rejected") {
  fs::path d = scratch_dir("badmanifest");
  {
    std::ofstream os(d / "m.tsv");
    os << "paired\tlang_A0\t\tabc\n";
  }
  CHECK_THROWS_AS(read_manifest(d / "m.tsv", Manifest::Split::kTrain), ValueError);
  {
    std::ofstream os(d / "m.tsv");
    os << "bogus\tlang_A0\t\tabc\t\n";
  }
  CHECK_THROWS_AS(read_manifest(d / "m.tsv", Manifest::Split::kTrain), ValueError);
  fs::remove_all(d);
}

TEST_CASE("batch mixer kinds") {
  const auto& w = small_world();
  auto m = build_manifests(w, Condition::kZero);
  BatchMixer mix(m.train, 9);
  for (int64_t s = 0; s < 200; ++s) CHECK(mix.sample_batch(s, {1, 0, 0}, 4).kind == UttKind::kPaired);

  std::array<int, 3> counts{};
  const int n = 30000;
  for (int64_t s = 0; s < n; ++s) counts[static_cast<int>(mix.sample_batch(s, {1, 1, 1}, 1).kind)]++;
  for (int c : counts) CHECK(std::abs(c / double(n) - 1.0 / 3.0) < 0.02);

  BatchMixer no_text(m.train, 9);
  no_text.set_pool(UttKind::kTextOnly, {});
  for (int64_t s = 0; s < 500; ++s) CHECK(no_text.sample_batch(s, {1, 0, 1}, 2).kind == UttKind::kPaired);

  // deterministic in (seed, step)
  auto b1 = mix.sample_batch(17, {1, 1, 1}, 8);
  auto b2 = BatchMixer(m.train, 9).sample_batch(17, {1, 1, 1}, 8);
  CHECK(b1.kind == b2.kind);
  CHECK(b1.items == b2.items);

  CHECK_THROWS_AS(mix.sample_batch(0, {0, 0, 0}, 1), ValueError);
  CHECK_THROWS_AS(mix.sample_batch(0, {-1, 1, 1}, 1), ValueError);
  Manifest empty;
  CHECK_THROWS_AS(BatchMixer(empty, 1).sample_batch(0, {1, 1, 1}, 1), ValueError);
}
