#include "config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace jstts::cli {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

using Setter = std::function<void(const std::string&)>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* what) {
  throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as " + what);
}

template <class T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const auto s = trim(v);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad_value(key, v, what);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) bad_value(key, v, "a number");
  return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad_value(key, v, "a boolean");
}

// Table of "section.key" -> setter.
class Binder {
 public:
  void add(const std::string& k, int& r) { m_[k] = [k, &r](const std::string& v) { r = parse_number<int>(k, v, "an integer"); }; }
  void add(const std::string& k, int64_t& r) {
    m_[k] = [k, &r](const std::string& v) { r = parse_number<int64_t>(k, v, "an integer"); };
  }
  void add(const std::string& k, uint64_t& r) {
    m_[k] = [k, &r](const std::string& v) { r = parse_number<uint64_t>(k, v, "a non-negative integer"); };
  }
  void add(const std::string& k, double& r) { m_[k] = [k, &r](const std::string& v) { r = parse_double(k, v); }; }
  void add(const std::string& k, bool& r) { m_[k] = [k, &r](const std::string& v) { r = parse_bool(k, v); }; }
  void add(const std::string& k, std::string& r) { m_[k] = [&r](const std::string& v) { r = trim(v); }; }
  void add(const std::string& k, std::array<double, 3>& r) {
    m_[k] = [k, &r](const std::string& v) {
      std::stringstream ss(v);
      std::string part;
      size_t i = 0;
      while (std::getline(ss, part, ',')) {
        if (i == 3) bad_value(k, v, "three comma-separated numbers");
        r[i++] = parse_double(k, part);
      }
      if (i != 3) bad_value(k, v, "three comma-separated numbers");
    };
  }
  void add(const std::string& k, Setter s) { m_[k] = std::move(s); }

  bool knows_section(const std::string& s) const {
    const auto it = m_.lower_bound(s + ".");
    return it != m_.end() && it->first.rfind(s + ".", 0) == 0;
  }
  void set(const std::string& k, const std::string& v) const {
    const auto it = m_.find(k);
    if (it == m_.end()) throw ConfigError("unknown config key '" + k + "'");
    it->second(v);
  }

 private:
  std::map<std::string, Setter> m_;
};

void bind_all(Binder& b, RunConfig& c, const fs::path& base_dir) {
  b.add("seed", c.seed);
  b.add("condition", [&c](const std::string& v) {
    try {
      c.condition = parse_condition(trim(v));
    } catch (const std::exception&) {
      throw ConfigError("config key 'condition': expected zero, 15m or supervised, got '" + trim(v) + "'");
    }
  });
  b.add("run_dir", [&c](const std::string& v) { c.run_dir = trim(v); });
  b.add("runnable", c.runnable);

  CorpusConfig& k = c.corpus;
  b.add("corpus.d_sig", k.d_sig);
  b.add("corpus.d_feat", k.d_feat);
  b.add("corpus.n_group_a", k.n_group_a);
  b.add("corpus.n_group_b", k.n_group_b);
  b.add("corpus.speakers_per_language", k.speakers_per_language);
  b.add("corpus.noise_sd", k.noise_sd);
  b.add("corpus.member_transform_spread", k.member_transform_spread);
  b.add("corpus.emission_jitter", k.emission_jitter);
  b.add("corpus.min_text_chars", k.min_text_chars);
  b.add("corpus.max_text_chars", k.max_text_chars);
  b.add("corpus.paired_per_language", k.paired_per_language);
  b.add("corpus.speech_only_per_language", k.speech_only_per_language);
  b.add("corpus.text_only_per_language", k.text_only_per_language);
  b.add("corpus.test_per_language", k.test_per_language);
  b.add("corpus.eval_asr_per_language", k.eval_asr_per_language);
  b.add("corpus.budget_15m", k.budget_15m);

  ModelConfig& m = c.model;
  b.add("model.hidden", m.hidden);
  b.add("model.joint", m.joint);
  b.add("model.pred_embed", m.pred_embed);
  b.add("model.s2f_layers", m.s2f_layers);
  b.add("model.shared_layers", m.shared_layers);
  b.add("model.text_layers", m.text_layers);
  b.add("model.decoder_layers", m.decoder_layers);
  b.add("model.refinements", m.refinements);
  b.add("model.vae_dim", m.vae_dim);
  b.add("model.id_embed", m.id_embed);
  b.add("model.code_dim", m.code_dim);
  b.add("model.codebook_size", m.codebook_size);

  LossWeights& l = c.losses;
  b.add("losses.w_feature", l.w_feature);
  b.add("losses.w_kl_max", l.w_kl_max);
  b.add("losses.w_dur", l.w_dur);
  b.add("losses.w_rnnt", l.w_rnnt);
  b.add("losses.kl_start_step", l.kl_start_step);
  b.add("losses.kl_end_step", l.kl_end_step);

  CurriculumConfig& u = c.curriculum;
  b.add("curriculum.stage1_steps", u.stage1_steps);
  b.add("curriculum.stage2_steps", u.stage2_steps);
  b.add("curriculum.stage3_steps", u.stage3_steps);
  b.add("curriculum.batch_size", u.batch_size);
  b.add("curriculum.kind_weights", u.kind_weights);
  b.add("curriculum.cfg_dropout_prob", u.cfg_dropout_prob);
  b.add("curriculum.learning_rate", u.learning_rate);
  b.add("curriculum.clip_norm", u.clip_norm);
  b.add("curriculum.text_mlm_pretrain", u.text_mlm_pretrain);
  b.add("curriculum.mlm_span", u.mlm_span);
  b.add("curriculum.mlm_ratio", u.mlm_ratio);
  b.add("curriculum.bestrq_span", u.bestrq_span);
  b.add("curriculum.bestrq_ratio", u.bestrq_ratio);
  b.add("curriculum.bestrq_noise_sd", u.bestrq_noise_sd);
  b.add("curriculum.s2f_recon_weight", u.s2f_recon_weight);
  b.add("curriculum.unspoken_text_weight", u.unspoken_text_weight);
  b.add("curriculum.max_emissions_per_frame", u.max_emissions_per_frame);
  b.add("curriculum.checkpoint_every", u.checkpoint_every);
  b.add("curriculum.vocoder_language", u.vocoder_language);
  b.add("curriculum.pseudo_labels", [&c, base_dir](const std::string& v) {
    fs::path p = trim(v);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    c.pseudo_labels = p;
  });

  b.add("eval.eval_asr_steps", c.eval_asr_steps);
  b.add("eval.guidance", c.synth.guidance);
  b.add("eval.oov_for_untrained_languages", c.synth.oov_for_untrained_languages);
}

void validate(const RunConfig& c) {
  if (c.run_dir.empty()) throw ConfigError("config key 'run_dir' is required");
  const CorpusConfig& k = c.corpus;
  const std::pair<const char*, int> positive[] = {
      {"corpus.d_sig", k.d_sig},
      {"corpus.d_feat", k.d_feat},
      {"corpus.n_group_a", k.n_group_a},
      {"corpus.speakers_per_language", k.speakers_per_language},
      {"corpus.min_text_chars", k.min_text_chars},
      {"corpus.paired_per_language", k.paired_per_language},
      {"corpus.test_per_language", k.test_per_language},
      {"corpus.eval_asr_per_language", k.eval_asr_per_language}};
  for (const auto& [name, v] : positive) {
    if (v <= 0) throw ConfigError(std::string("config key '") + name + "' must be positive");
  }
  const std::pair<const char*, int> non_negative[] = {{"corpus.n_group_b", k.n_group_b},
                                                      {"corpus.speech_only_per_language", k.speech_only_per_language},
                                                      {"corpus.text_only_per_language", k.text_only_per_language},
                                                      {"corpus.budget_15m", k.budget_15m}};
  for (const auto& [name, v] : non_negative) {
    if (v < 0) throw ConfigError(std::string("config key '") + name + "' must be non-negative");
  }
  if (k.max_text_chars < k.min_text_chars) throw ConfigError("config key 'corpus.max_text_chars' is below min_text_chars");
  if (k.budget_15m > k.paired_per_language) throw ConfigError("config key 'corpus.budget_15m' exceeds paired_per_language");
  if (!(k.noise_sd >= 0.0)) throw ConfigError("config key 'corpus.noise_sd' must be non-negative");
  if (c.eval_asr_steps <= 0) throw ConfigError("config key 'eval.eval_asr_steps' must be positive");
  if (!std::isfinite(c.synth.guidance)) throw ConfigError("config key 'eval.guidance' must be finite");
  if (c.pseudo_labels && !fs::exists(*c.pseudo_labels)) {
    throw ConfigError("config key 'curriculum.pseudo_labels': file not found: " + c.pseudo_labels->string());
  }
  try {
    c.losses.validate();
    c.curriculum.validate();
    ModelConfig mc = c.model;
    mc.d_sig = k.d_sig;
    mc.d_feat = k.d_feat;
    mc.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

CorpusConfig RunConfig::corpus_config() const {
  CorpusConfig c = corpus;
  c.seed = seed;
  return c;
}

ModelConfig RunConfig::model_config(const IdRegistry& reg) const {
  ModelConfig m = model;
  m.d_sig = corpus.d_sig;
  m.d_feat = corpus.d_feat;
  m.n_langs = reg.num_languages();
  m.n_spks = reg.num_speakers();
  m.cfg_dropout_prob = curriculum.cfg_dropout_prob;
  return m;
}

CurriculumConfig RunConfig::curriculum_config() const {
  CurriculumConfig c = curriculum;
  c.seed = seed;
  return c;
}

RunConfig parse_run_config(const std::string& text, const fs::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config syntax: line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  Binder b;
  bind_all(b, c, base_dir);
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      if (node.data().empty() && b.knows_section(name)) continue;  // empty section
      b.set(name, node.data());
      continue;
    }
    if (!b.knows_section(name)) throw ConfigError("unknown config section [" + name + "]");
    for (const auto& [key, leaf] : node) b.set(name + "." + key, leaf.data());
  }
  if (!c.run_dir.empty() && c.run_dir.is_relative()) {
    if (const char* root = std::getenv(kRunRootEnv); root && *root) {
      c.run_dir = fs::path(root) / c.run_dir;
    } else if (!base_dir.empty()) {
      c.run_dir = base_dir / c.run_dir;
    }
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), fs::current_path());
}

}  // namespace jstts::cli
