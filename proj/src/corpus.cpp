#include "jstts/corpus.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "jstts/error.hpp"

namespace jstts {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(LangGroup g) { return g == LangGroup::kA ? "A" : "B"; }

std::string to_string(UttKind k) {
  switch (k) {
    case UttKind::kPaired: return "paired";
    case UttKind::kSpeechOnly: return "speech_only";
    case UttKind::kTextOnly: return "text_only";
  }
  return "?";
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::kZero: return "zero";
    case Condition::k15m: return "15m";
    case Condition::kSupervised: return "supervised";
  }
  return "?";
}

UttKind parse_utt_kind(const std::string& s) {
  if (s == "paired") return UttKind::kPaired;
  if (s == "speech_only") return UttKind::kSpeechOnly;
  if (s == "text_only") return UttKind::kTextOnly;
  throw ValueError("unknown record kind '" + s + "'");
}

Condition parse_condition(const std::string& s) {
  if (s == "zero") return Condition::kZero;
  if (s == "15m") return Condition::k15m;
  if (s == "supervised") return Condition::kSupervised;
  throw ValueError("unknown condition '" + s + "' (expected zero, 15m or supervised)");
}

int MicroLanguageSpec::char_index(char32_t c) const {
  auto pos = alphabet.find(c);
  return pos == std::u32string::npos ? -1 : static_cast<int>(pos);
}

bool MicroLanguageSpec::operator==(const MicroLanguageSpec& o) const {
  return name == o.name && group == o.group && family == o.family && alphabet == o.alphabet &&
         base_duration == o.base_duration && emission == o.emission && transform.values() == o.transform.values() &&
         text_transition.values() == o.text_transition.values();
}

const MicroLanguageSpec& CorpusWorld::language(const std::string& name) const {
  for (const auto& l : languages) {
    if (l.name == name) return l;
  }
  throw ValueError("unknown language '" + name + "'");
}

std::vector<const SpeakerSpec*> CorpusWorld::speakers_of(const std::string& lang) const {
  std::vector<const SpeakerSpec*> out;
  for (const auto& s : speakers) {
    if (s.home_language == lang) out.push_back(&s);
  }
  return out;
}

size_t Manifest::count(UttKind k) const {
  return static_cast<size_t>(std::count_if(records.begin(), records.end(), [k](const Utterance& u) { return u.kind == k; }));
}

size_t Manifest::count(UttKind k, const std::string& lang) const {
  return static_cast<size_t>(std::count_if(records.begin(), records.end(), [&](const Utterance& u) {
    return u.kind == k && u.lang_name == lang;
  }));
}

namespace {

std::u32string char_range(char32_t first, char32_t last, std::u32string_view skip = {}) {
  std::u32string s;
  for (char32_t c = first; c <= last; ++c) {
    if (skip.find(c) == std::u32string_view::npos) s.push_back(c);
  }
  return s;
}

// Home scripts for families, cycled when there are more families than scripts.
const std::vector<std::u32string>& home_scripts() {
  static const std::vector<std::u32string> scripts = {
      char_range(0x00E0, 0x00FF, U"\u00F7"),  // Latin-1 letters
      char_range(0x03B1, 0x03C9, U"\u03C2"),  // Greek
      char_range(0x0430, 0x044F),             // Cyrillic
      char_range(0x0561, 0x0586),             // Armenian
      char_range(0x05D0, 0x05EA),             // Hebrew
  };
  return scripts;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
}

template <typename T>
std::vector<T> pick(std::vector<T> pool, size_t n, Rng& rng) {
  shuffle(pool, rng);
  pool.resize(std::min(n, pool.size()));
  return pool;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (int64_t i = 0; i < t.rows(); ++i)
    for (int64_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({m.rows(), m.cols()});
  for (int64_t i = 0; i < m.rows(); ++i)
    for (int64_t j = 0; j < m.cols(); ++j) t(i, j) = m(i, j);
  return t;
}

Eigen::MatrixXd gaussian(int r, int c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

Eigen::MatrixXd orthonormal_columns(int r, int c, Rng& rng) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(r, c, rng));
  return qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
}

std::vector<double> canonical_emission(char32_t c, int d, uint64_t seed) {
  Rng rng = Rng::derive(seed, {Rng::hash("emission"), static_cast<uint64_t>(c)});
  std::vector<double> v(static_cast<size_t>(d));
  for (double& x : v) x = rng.normal();
  return v;
}

// Shortest base duration for a character. Multi-byte characters need
// enough signal frames that every byte token still gets a feature frame
// at the slowest tempo.
int min_duration(char32_t c) { return std::min(6, 2 * static_cast<int>(utf8_encode(c).size()) + 1); }

int canonical_duration(char32_t c, uint64_t seed) {
  Rng rng = Rng::derive(seed, {Rng::hash("duration"), static_cast<uint64_t>(c)});
  const int lo = min_duration(c);
  return lo + static_cast<int>(rng.uniform_int(7 - lo));
}

MicroLanguageSpec make_language(const std::string& name, LangGroup group, int family, const std::u32string& alphabet,
                                const Eigen::MatrixXd& family_transform, const CorpusConfig& cfg, uint64_t seed,
                                Rng& rng) {
  MicroLanguageSpec l;
  l.name = name;
  l.group = group;
  l.family = family;
  l.alphabet = alphabet;
  const int d = cfg.d_feat;
  for (char32_t c : alphabet) {
    int dur = canonical_duration(c, seed);
    if (rng.bernoulli(0.3)) dur = std::clamp(dur + (rng.bernoulli(0.5) ? 1 : -1), min_duration(c), 6);
    l.base_duration.push_back(dur);
    std::vector<double> e = canonical_emission(c, d, seed);
    for (double& x : e) x += cfg.emission_jitter * rng.normal();
    l.emission.push_back(std::move(e));
  }
  Eigen::MatrixXd pert = Eigen::MatrixXd::Identity(d, d) + cfg.member_transform_spread * gaussian(d, d, rng) / std::sqrt(d);
  l.transform = from_eigen(family_transform * pert);
  const auto n = static_cast<int64_t>(alphabet.size());
  l.text_transition = Tensor({n, n});
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double u = std::max(rng.uniform(), 1e-12);
      l.text_transition(i, j) = std::pow(-std::log(u), 2.0);
      s += l.text_transition(i, j);
    }
    for (int64_t j = 0; j < n; ++j) l.text_transition(i, j) /= s;
  }
  return l;
}

}  // namespace

double condition_number(const Tensor& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  const auto& s = svd.singularValues();
  if (s(s.size() - 1) <= 0.0) return INFINITY;
  return s(0) / s(s.size() - 1);
}

double min_pairwise_emission_distance(const MicroLanguageSpec& lang) {
  double best = INFINITY;
  for (size_t i = 0; i < lang.emission.size(); ++i)
    for (size_t j = i + 1; j < lang.emission.size(); ++j) {
      double s = 0.0;
      for (size_t k = 0; k < lang.emission[i].size(); ++k) {
        const double diff = lang.emission[i][k] - lang.emission[j][k];
        s += diff * diff;
      }
      best = std::min(best, std::sqrt(s));
    }
  return best;
}

std::vector<MicroLanguageSpec> gen_languages(int n_group_a, int n_group_b, uint64_t seed, const CorpusConfig& cfg) {
  if (n_group_a < 1 || n_group_b < 1) throw ValueError("gen_languages: group counts must be >= 1");
  Rng rng = Rng::derive(seed, {Rng::hash("languages")});
  const int n_families = std::max(1, std::min(n_group_b, static_cast<int>(home_scripts().size())));
  const int d = cfg.d_feat;

  // Latin letters shared between families.
  std::vector<char32_t> latin;
  for (char32_t c = U'a'; c <= U'z'; ++c) latin.push_back(c);
  latin = pick(latin, 12, rng);

  struct Family {
    Eigen::MatrixXd transform;
    std::vector<char32_t> pool;
  };
  std::vector<Family> fams;
  for (int f = 0; f < n_families; ++f) {
    Family fam;
    Eigen::VectorXd scales(d);
    for (int i = 0; i < d; ++i) scales(i) = std::exp(std::log(0.8) + rng.uniform() * (std::log(1.25) - std::log(0.8)));
    fam.transform = orthonormal_columns(d, d, rng) * scales.asDiagonal();
    const std::u32string& script = home_scripts()[static_cast<size_t>(f) % home_scripts().size()];
    fam.pool = pick(latin, 8, rng);
    auto home = pick(std::vector<char32_t>(script.begin(), script.end()), 10, rng);
    fam.pool.insert(fam.pool.end(), home.begin(), home.end());
    fams.push_back(std::move(fam));
  }

  constexpr size_t kAlphabetSize = 12;
  constexpr int kMaxRetries = 200;
  auto build = [&](const std::string& name, LangGroup group, int family, const std::vector<char32_t>& pool) {
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
      auto chars = pick(pool, kAlphabetSize, rng);
      std::sort(chars.begin(), chars.end());
      MicroLanguageSpec l = make_language(name, group, family, std::u32string(chars.begin(), chars.end()),
                                          fams[static_cast<size_t>(family)].transform, cfg, seed, rng);
      if (min_pairwise_emission_distance(l) > 0.5 && condition_number(l.transform) < 100.0) return l;
    }
    throw ValueError("gen_languages: could not separate emissions for " + name);
  };

  std::vector<MicroLanguageSpec> out;
  std::vector<std::set<char32_t>> family_cover(static_cast<size_t>(n_families));
  for (int i = 0; i < n_group_a; ++i) {
    const int f = i % n_families;
    out.push_back(build("lang_A" + std::to_string(i), LangGroup::kA, f, fams[static_cast<size_t>(f)].pool));
    family_cover[static_cast<size_t>(f)].insert(out.back().alphabet.begin(), out.back().alphabet.end());
  }
  for (int i = 0; i < n_group_b; ++i) {
    const int f = i % n_families;
    const auto& cover = family_cover[static_cast<size_t>(f)];
    // Group-B alphabets stay inside what the family's Group-A members write.
    std::vector<char32_t> pool = cover.size() >= kAlphabetSize ? std::vector<char32_t>(cover.begin(), cover.end())
                                                              : fams[static_cast<size_t>(f)].pool;
    out.push_back(build("lang_B" + std::to_string(i), LangGroup::kB, f, pool));
  }
  return out;
}

CorpusWorld gen_world(const CorpusConfig& cfg) {
  CorpusWorld w;
  w.config = cfg;
  w.languages = gen_languages(cfg.n_group_a, cfg.n_group_b, cfg.seed, cfg);
  Rng rng = Rng::derive(cfg.seed, {Rng::hash("world")});
  w.signal_map = from_eigen(orthonormal_columns(cfg.d_sig, cfg.d_feat, rng));
  for (const auto& l : w.languages) {
    for (int s = 0; s < cfg.speakers_per_language; ++s) {
      SpeakerSpec sp;
      sp.name = l.name + "_spk" + std::to_string(s);
      sp.home_language = l.name;
      std::vector<double> dir(static_cast<size_t>(cfg.d_sig));
      double norm = 0.0;
      for (double& x : dir) {
        x = rng.normal();
        norm += x * x;
      }
      const double target = 0.05 + 0.45 * rng.uniform();
      for (double& x : dir) x *= target / std::sqrt(norm);
      sp.offset = std::move(dir);
      sp.tempo = std::exp(std::log(0.8) + rng.uniform() * (std::log(1.25) - std::log(0.8)));
      w.speakers.push_back(std::move(sp));
    }
  }
  return w;
}

Utterance synth_utterance(const std::string& text, const MicroLanguageSpec& lang, const SpeakerSpec& spk,
                          const Tensor& signal_map, double noise_sd, Rng& rng) {
  const std::u32string cps = utf8_decode(text);
  const int64_t d_sig = signal_map.rows(), d_feat = signal_map.cols();
  std::vector<int> idx;
  for (char32_t c : cps) {
    const int i = lang.char_index(c);
    if (i < 0) throw ValueError("synth_utterance: character '" + utf8_encode(c) + "' is not in the alphabet of " + lang.name);
    idx.push_back(i);
  }
  Utterance u;
  u.kind = UttKind::kPaired;
  u.text = text;
  u.lang_name = lang.name;
  int64_t total = 0;
  for (int i : idx) {
    const int frames = std::max(1, static_cast<int>(std::floor(lang.base_duration[static_cast<size_t>(i)] * spk.tempo + 0.5)));
    u.reference_durations.push_back(frames);
    total += frames;
  }
  Tensor sig({total, d_sig});
  int64_t row = 0;
  std::vector<double> feat(static_cast<size_t>(d_feat));
  for (size_t k = 0; k < idx.size(); ++k) {
    const auto& e = lang.emission[static_cast<size_t>(idx[k])];
    for (int64_t a = 0; a < d_feat; ++a) {
      double s = 0.0;
      for (int64_t b = 0; b < d_feat; ++b) s += lang.transform(a, b) * e[static_cast<size_t>(b)];
      feat[static_cast<size_t>(a)] = s;
    }
    for (int f = 0; f < u.reference_durations[k]; ++f, ++row) {
      for (int64_t a = 0; a < d_sig; ++a) {
        double s = spk.offset[static_cast<size_t>(a)];
        for (int64_t b = 0; b < d_feat; ++b) s += signal_map(a, b) * feat[static_cast<size_t>(b)];
        sig(row, a) = s + (noise_sd > 0.0 ? noise_sd * rng.normal() : 0.0);
      }
    }
  }
  u.signal = std::move(sig);
  return u;
}

std::string sample_text(const MicroLanguageSpec& lang, int min_chars, int max_chars, Rng& rng) {
  const int n = min_chars + static_cast<int>(rng.uniform_int(max_chars - min_chars + 1));
  const auto a = static_cast<int64_t>(lang.alphabet.size());
  std::u32string s;
  int64_t cur = rng.uniform_int(a);
  s.push_back(lang.alphabet[static_cast<size_t>(cur)]);
  for (int i = 1; i < n; ++i) {
    double u = rng.uniform();
    int64_t next = a - 1;
    for (int64_t j = 0; j < a; ++j) {
      u -= lang.text_transition(cur, j);
      if (u < 0.0) {
        next = j;
        break;
      }
    }
    if (next == cur) next = (cur + 1) % a;  // rounding guard; the chain has no self loops
    cur = next;
    s.push_back(lang.alphabet[static_cast<size_t>(cur)]);
  }
  return utf8_encode(s);
}

namespace {

struct LanguagePools {
  std::vector<Utterance> paired, speech_only, text_only, test, eval_asr;
};

LanguagePools generate_pools(const CorpusWorld& w, size_t lang_index) {
  const CorpusConfig& cfg = w.config;
  const MicroLanguageSpec& lang = w.languages[lang_index];
  const auto speakers = w.speakers_of(lang.name);
  if (speakers.empty()) throw ValueError("corpus: language " + lang.name + " has no speakers");
  std::set<std::string> used;
  LanguagePools p;
  auto make = [&](const char* pool, int count, UttKind kind, auto&& label) {
    std::vector<Utterance> out;
    Rng rng = Rng::derive(cfg.seed, {Rng::hash("pool"), lang_index, Rng::hash(pool)});
    for (int i = 0; i < count; ++i) {
      std::string text;
      do {
        text = sample_text(lang, cfg.min_text_chars, cfg.max_text_chars, rng);
      } while (!used.insert(text).second);
      const SpeakerSpec& spk = *speakers[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(speakers.size())))];
      char id[96];
      std::snprintf(id, sizeof id, "%s_%s_%04d", lang.name.c_str(), pool, i);
      Utterance u;
      if (kind == UttKind::kTextOnly) {
        u.text = text;
        u.lang_name = lang.name;
      } else {
        u = synth_utterance(text, lang, spk, w.signal_map, cfg.noise_sd, rng);
        if (kind == UttKind::kSpeechOnly) u.text.reset();
      }
      u.id = id;
      u.kind = kind;
      if (label(i)) u.spk_name = spk.name;
      out.push_back(std::move(u));
    }
    return out;
  };
  const bool group_a = lang.group == LangGroup::kA;
  auto never = [](int) { return false; };
  p.test = make("test", cfg.test_per_language, UttKind::kPaired, [&](int) { return group_a; });
  p.eval_asr = make("evalasr", cfg.eval_asr_per_language, UttKind::kPaired, never);
  p.paired = make("paired", cfg.paired_per_language, UttKind::kPaired, [&](int i) { return group_a && i % 2 == 0; });
  p.speech_only = make("speech", cfg.speech_only_per_language, UttKind::kSpeechOnly, never);
  p.text_only = make("text", cfg.text_only_per_language, UttKind::kTextOnly, never);
  return p;
}

}  // namespace

ManifestSet build_manifests(const CorpusWorld& w, Condition condition) {
  const CorpusConfig& cfg = w.config;
  if (cfg.budget_15m <= 0 || cfg.paired_per_language <= 0) throw ValueError("build_manifests: budgets must be positive");
  if (condition == Condition::k15m && cfg.budget_15m > cfg.paired_per_language) {
    throw ValueError("build_manifests: 15m budget " + std::to_string(cfg.budget_15m) + " exceeds the paired pool of " +
                     std::to_string(cfg.paired_per_language));
  }
  ManifestSet out;
  out.train.split = Manifest::Split::kTrain;
  out.test.split = Manifest::Split::kTest;
  out.eval_asr.split = Manifest::Split::kTest;
  for (size_t li = 0; li < w.languages.size(); ++li) {
    LanguagePools p = generate_pools(w, li);
    const bool group_b = w.languages[li].group == LangGroup::kB;
    size_t n_paired = p.paired.size();
    if (group_b) {
      n_paired = condition == Condition::kZero ? 0 : condition == Condition::k15m ? static_cast<size_t>(cfg.budget_15m) : n_paired;
    }
    for (size_t i = 0; i < n_paired; ++i) out.train.records.push_back(std::move(p.paired[i]));
    for (auto& u : p.speech_only) out.train.records.push_back(std::move(u));
    for (auto& u : p.text_only) out.train.records.push_back(std::move(u));
    for (auto& u : p.test) out.test.records.push_back(std::move(u));
    for (auto& u : p.eval_asr) out.eval_asr.records.push_back(std::move(u));
  }
  return out;
}

IdRegistry registry_from(const Manifest& train) {
  IdRegistry reg;
  std::set<std::string> langs, spks;
  for (const auto& u : train.records) {
    langs.insert(u.lang_name);
    if (u.spk_name) spks.insert(*u.spk_name);
  }
  for (const auto& l : langs) reg.add_language(l);
  for (const auto& s : spks) reg.add_speaker(s);
  return reg;
}

bool audit_zero_condition(const Manifest& train, const CorpusWorld& w) {
  for (const auto& u : train.records) {
    if (u.kind == UttKind::kPaired && w.language(u.lang_name).group == LangGroup::kB) return false;
  }
  return true;
}

// ---- I/O ----------------------------------------------------------------------

namespace {

void put_i64(std::ostream& os, int64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

int64_t get_i64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ValueError("signal file: truncated header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return static_cast<int64_t>(v);
}

void put_f64(std::ostream& os, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_i64(os, static_cast<int64_t>(bits));
}

double get_f64(std::istream& is) {
  const auto bits = static_cast<uint64_t>(get_i64(is));
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_signal(const fs::path& path, const Tensor& frames) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write " + path.string());
  put_i64(os, frames.rows());
  put_i64(os, frames.cols());
  for (double v : frames.values()) put_f64(os, v);
}

Tensor read_signal(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot read " + path.string());
  const int64_t frames = get_i64(is);
  const int64_t dim = get_i64(is);
  if (frames < 0 || dim <= 0) throw ValueError("signal file " + path.string() + ": bad header");
  Tensor t({frames, dim});
  for (double& v : t.values()) v = get_f64(is);
  return t;
}

void write_manifest(const fs::path& path, const Manifest& m, const fs::path& signal_dir) {
  const fs::path base = path.parent_path();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write " + path.string());
  for (const auto& u : m.records) {
    std::string sig_rel;
    if (u.signal) {
      const fs::path sig = signal_dir / u.lang_name / (u.id + ".sig");
      fs::create_directories(sig.parent_path());
      write_signal(sig, *u.signal);
      sig_rel = fs::relative(sig, base).generic_string();
    }
    os << to_string(u.kind) << '\t' << u.lang_name << '\t' << u.spk_name.value_or("") << '\t' << u.text.value_or("")
       << '\t' << sig_rel << '\n';
  }
}

Manifest read_manifest(const fs::path& path, Manifest::Split split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot read manifest " + path.string());
  Manifest m;
  m.split = split;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 5) {
      throw ValueError(path.string() + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields, got " +
                       std::to_string(f.size()));
    }
    Utterance u;
    u.kind = parse_utt_kind(f[0]);
    u.lang_name = f[1];
    if (!f[2].empty()) u.spk_name = f[2];
    if (!f[3].empty()) u.text = f[3];
    if (!f[4].empty()) {
      u.signal = read_signal(path.parent_path() / f[4]);
      u.id = fs::path(f[4]).stem().string();
    } else {
      u.id = u.lang_name + "_line" + std::to_string(lineno);
    }
    if (u.kind == UttKind::kPaired && (!u.text || !u.signal)) {
      throw ValueError(path.string() + ":" + std::to_string(lineno) + ": paired record needs text and signal");
    }
    if (u.kind == UttKind::kSpeechOnly && (u.text || !u.signal)) {
      throw ValueError(path.string() + ":" + std::to_string(lineno) + ": speech_only record must have only a signal");
    }
    if (u.kind == UttKind::kTextOnly && (!u.text || u.signal)) {
      throw ValueError(path.string() + ":" + std::to_string(lineno) + ": text_only record must have only text");
    }
    m.records.push_back(std::move(u));
  }
  return m;
}

namespace {

json tensor_json(const Tensor& t) { return json{{"shape", t.shape()}, {"values", t.values()}}; }

Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

}  // namespace

void write_world(const fs::path& path, const CorpusWorld& w) {
  const CorpusConfig& c = w.config;
  json j;
  j["config"] = {{"d_sig", c.d_sig},
                 {"d_feat", c.d_feat},
                 {"n_group_a", c.n_group_a},
                 {"n_group_b", c.n_group_b},
                 {"speakers_per_language", c.speakers_per_language},
                 {"noise_sd", c.noise_sd},
                 {"member_transform_spread", c.member_transform_spread},
                 {"emission_jitter", c.emission_jitter},
                 {"min_text_chars", c.min_text_chars},
                 {"max_text_chars", c.max_text_chars},
                 {"paired_per_language", c.paired_per_language},
                 {"speech_only_per_language", c.speech_only_per_language},
                 {"text_only_per_language", c.text_only_per_language},
                 {"test_per_language", c.test_per_language},
                 {"eval_asr_per_language", c.eval_asr_per_language},
                 {"budget_15m", c.budget_15m},
                 {"seed", c.seed}};
  j["signal_map"] = tensor_json(w.signal_map);
  for (const auto& l : w.languages) {
    j["languages"].push_back({{"name", l.name},
                              {"group", to_string(l.group)},
                              {"family", l.family},
                              {"alphabet", utf8_encode(l.alphabet)},
                              {"base_duration", l.base_duration},
                              {"emission", l.emission},
                              {"transform", tensor_json(l.transform)},
                              {"text_transition", tensor_json(l.text_transition)}});
  }
  for (const auto& s : w.speakers) {
    j["speakers"].push_back(
        {{"name", s.name}, {"home_language", s.home_language}, {"offset", s.offset}, {"tempo", s.tempo}});
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write " + path.string());
  os << j.dump(1) << '\n';
}

CorpusWorld read_world(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot read " + path.string());
  json j = json::parse(is);
  CorpusWorld w;
  const json& c = j.at("config");
  CorpusConfig& cfg = w.config;
  cfg.d_sig = c.at("d_sig");
  cfg.d_feat = c.at("d_feat");
  cfg.n_group_a = c.at("n_group_a");
  cfg.n_group_b = c.at("n_group_b");
  cfg.speakers_per_language = c.at("speakers_per_language");
  cfg.noise_sd = c.at("noise_sd");
  cfg.member_transform_spread = c.at("member_transform_spread");
  cfg.emission_jitter = c.at("emission_jitter");
  cfg.min_text_chars = c.at("min_text_chars");
  cfg.max_text_chars = c.at("max_text_chars");
  cfg.paired_per_language = c.at("paired_per_language");
  cfg.speech_only_per_language = c.at("speech_only_per_language");
  cfg.text_only_per_language = c.at("text_only_per_language");
  cfg.test_per_language = c.at("test_per_language");
  cfg.eval_asr_per_language = c.at("eval_asr_per_language");
  cfg.budget_15m = c.at("budget_15m");
  cfg.seed = c.at("seed");
  w.signal_map = tensor_from_json(j.at("signal_map"));
  for (const auto& lj : j.at("languages")) {
    MicroLanguageSpec l;
    l.name = lj.at("name");
    l.group = lj.at("group") == "A" ? LangGroup::kA : LangGroup::kB;
    l.family = lj.at("family");
    l.alphabet = utf8_decode(lj.at("alphabet").get<std::string>());
    l.base_duration = lj.at("base_duration").get<std::vector<int>>();
    l.emission = lj.at("emission").get<std::vector<std::vector<double>>>();
    l.transform = tensor_from_json(lj.at("transform"));
    l.text_transition = tensor_from_json(lj.at("text_transition"));
    w.languages.push_back(std::move(l));
  }
  for (const auto& sj : j.at("speakers")) {
    SpeakerSpec s;
    s.name = sj.at("name");
    s.home_language = sj.at("home_language");
    s.offset = sj.at("offset").get<std::vector<double>>();
    s.tempo = sj.at("tempo");
    w.speakers.push_back(std::move(s));
  }
  return w;
}

// ---- batch mixer ----------------------------------------------------------------

BatchMixer::BatchMixer(const Manifest& m, uint64_t seed) : seed_(seed) {
  for (const auto& u : m.records) pools_[static_cast<int>(u.kind)].push_back(&u);
}

void BatchMixer::set_pool(UttKind kind, std::vector<const Utterance*> items) { pools_[static_cast<int>(kind)] = std::move(items); }

BatchRef BatchMixer::sample_batch(int64_t step, const std::array<double, 3>& kind_weights, int batch_size) const {
  for (double w : kind_weights) {
    if (w < 0.0 || !std::isfinite(w)) throw ValueError("sample_batch: kind weights must be non-negative");
  }
  if (kind_weights[0] + kind_weights[1] + kind_weights[2] <= 0.0) throw ValueError("sample_batch: all kind weights are zero");
  std::array<double, 3> w{};
  double total = 0.0;
  bool any = false;
  for (int k = 0; k < 3; ++k) {
    if (!pools_[k].empty()) {
      any = true;
      w[k] = kind_weights[k];
      total += w[k];
    }
  }
  if (!any) throw ValueError("sample_batch: every record pool is empty");
  if (total <= 0.0) {
    for (int k = 0; k < 3; ++k) w[k] = pools_[k].empty() ? 0.0 : 1.0;
    total = w[0] + w[1] + w[2];
  }
  Rng rng = Rng::derive(seed_, {Rng::hash("batch"), static_cast<uint64_t>(step)});
  double u = rng.uniform() * total;
  int kind = 0;
  for (int k = 0; k < 3; ++k) {
    if (w[k] <= 0.0) continue;
    kind = k;
    if (u < w[k]) break;
    u -= w[k];
  }
  BatchRef b;
  b.kind = static_cast<UttKind>(kind);
  const auto& pool = pools_[kind];
  for (int i = 0; i < batch_size; ++i) b.items.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);
  return b;
}

}  // namespace jstts
