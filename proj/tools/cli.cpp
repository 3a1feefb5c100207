#include "cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <ostream>
#include <set>

#include "config.hpp"
#include "jstts/checkpoint.hpp"
#include "jstts/error.hpp"
#include "jstts/eval.hpp"

namespace jstts::cli {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- run directory lock -------------------------------------------------------

char g_lock_path[4096] = {0};

extern "C" void on_interrupt(int sig) {
  if (g_lock_path[0]) ::unlink(g_lock_path);
  ::_exit(128 + sig);
}

// One writer per run directory. Checkpoints are written atomically, so an
// interrupted command only needs its lock removed.
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    fs::create_directories(run_dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) {
        throw StateError("run directory " + run_dir.string() + " is locked by another command (remove " +
                         path_.string() + " if it is stale)");
      }
      throw StateError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
    std::snprintf(g_lock_path, sizeof g_lock_path, "%s", path_.c_str());
    prev_int_ = std::signal(SIGINT, on_interrupt);
    prev_term_ = std::signal(SIGTERM, on_interrupt);
  }
  ~RunLock() {
    std::signal(SIGINT, prev_int_);
    std::signal(SIGTERM, prev_term_);
    g_lock_path[0] = 0;
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  void (*prev_int_)(int) = SIG_DFL;
  void (*prev_term_)(int) = SIG_DFL;
};

// ---- run directory layout -----------------------------------------------------

fs::path corpus_dir(const RunConfig& c) { return c.run_dir / "corpus"; }
fs::path train_dir(const RunConfig& c) { return c.run_dir / "train"; }
fs::path evalasr_dir(const RunConfig& c) { return c.run_dir / "evalasr"; }

RunConfig load_config(const std::string& path) {
  RunConfig c = load_run_config(path);
  if (!c.runnable) throw ConfigError(path + " is a reference preset and is not runnable at desk scale");
  return c;
}

struct CorpusOnDisk {
  CorpusWorld world;
  Manifest train, test, eval_asr;
};

CorpusOnDisk load_corpus(const RunConfig& c) {
  const fs::path dir = corpus_dir(c);
  if (!fs::exists(dir / "world.json")) {
    throw ConfigError("no corpus in " + dir.string() + "; run `jstts gen-corpus <config>` first");
  }
  CorpusOnDisk d;
  d.world = read_world(dir / "world.json");
  const CorpusConfig& w = d.world.config;
  if (w.seed != c.seed || w.n_group_a != c.corpus.n_group_a || w.n_group_b != c.corpus.n_group_b) {
    throw ConfigError("the corpus in " + dir.string() + " was generated from a different config; rerun gen-corpus --force");
  }
  d.train = read_manifest(dir / "train.tsv", Manifest::Split::kTrain);
  d.test = read_manifest(dir / "test.tsv", Manifest::Split::kTest);
  d.eval_asr = read_manifest(dir / "evalasr.tsv", Manifest::Split::kTrain);
  return d;
}

struct LoadedModel {
  Checkpoint ck;
  std::unique_ptr<Model> model;
};

LoadedModel load_checkpoint_model(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  LoadedModel m;
  m.ck = read_checkpoint(path);
  m.model = std::make_unique<Model>(m.ck.model_config, 0);
  load_model(m.ck, *m.model);
  return m;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

// ---- commands -----------------------------------------------------------------

int cmd_gen_corpus(const std::string& config_path, bool force, std::ostream& out) {
  const RunConfig c = load_config(config_path);
  if (fs::exists(c.run_dir)) {
    bool empty = true;
    for (const auto& e : fs::directory_iterator(c.run_dir)) empty = empty && e.path().filename() == ".lock";
    if (!empty && !force) {
      throw ConfigError("run directory " + c.run_dir.string() + " is not empty; pass --force to overwrite it");
    }
  }
  RunLock lock(c.run_dir);
  for (const auto& e : fs::directory_iterator(c.run_dir)) {
    if (e.path().filename() != ".lock") fs::remove_all(e.path());
  }
  const CorpusWorld world = gen_world(c.corpus_config());
  const ManifestSet ms = build_manifests(world, c.condition);
  const fs::path dir = corpus_dir(c);
  fs::create_directories(dir);
  write_world(dir / "world.json", world);
  write_manifest(dir / "train.tsv", ms.train, dir / "signals" / "train");
  write_manifest(dir / "test.tsv", ms.test, dir / "signals" / "test");
  write_manifest(dir / "evalasr.tsv", ms.eval_asr, dir / "signals" / "evalasr");
  fs::copy_file(config_path, c.run_dir / "config.ini", fs::copy_options::overwrite_existing);

  int na = 0, nb = 0;
  for (const auto& l : world.languages) (l.group == LangGroup::kA ? na : nb) += 1;
  out << "languages: group A " << na << ", group B " << nb << "\n";
  out << "train (" << to_string(c.condition) << "): paired " << ms.train.count(UttKind::kPaired) << ", speech_only "
      << ms.train.count(UttKind::kSpeechOnly) << ", text_only " << ms.train.count(UttKind::kTextOnly) << "\n";
  out << "test: " << ms.test.records.size() << ", evalasr: " << ms.eval_asr.records.size() << "\n";
  out << "written to " << dir.string() << "\n";
  return kExitOk;
}

void print_stage(std::ostream& out, const std::string& name, const StageSummary& s) {
  if (s.steps_run == 0 && s.completed) {
    out << name << ": already complete\n";
    return;
  }
  out << name << ": " << s.steps_run << " steps";
  for (const auto& [k, v] : s.counters) out << ", " << k << "=" << v;
  if (!s.loss_curve.empty()) {
    const size_t n = std::min<size_t>(50, s.loss_curve.size());
    double m = 0.0;
    for (size_t i = s.loss_curve.size() - n; i < s.loss_curve.size(); ++i) m += s.loss_curve[i];
    char buf[64];
    std::snprintf(buf, sizeof buf, ", final loss %.4f", m / static_cast<double>(n));
    out << buf;
  }
  out << "\n";
}

int cmd_train(const std::string& config_path, int stage, bool all, bool eval_asr, std::ostream& out) {
  if (stage == 0 && !all && !eval_asr) throw UsageError("train: give --stage N, --all or --eval-asr");
  if (stage != 0 && all) throw UsageError("train: --stage and --all are exclusive");
  const RunConfig c = load_config(config_path);
  const CorpusOnDisk data = load_corpus(c);
  RunLock lock(c.run_dir);
  const IdRegistry registry = registry_from(data.train);
  const ModelConfig mc = c.model_config(registry);

  std::vector<int> stages;
  if (all) stages = {1, 2, 3};
  else if (stage != 0) stages = {stage};

  if (!stages.empty()) {
    Model model(mc, c.seed);
    Trainer tr(model, registry, c.curriculum_config(), c.losses);
    std::map<std::string, std::string> pseudo;
    if (c.pseudo_labels) pseudo = read_pseudo_labels(*c.pseudo_labels);
    PseudoLabelHook hook;
    if (!pseudo.empty()) {
      hook = [&pseudo](const Utterance& u) -> std::optional<std::string> {
        auto it = pseudo.find(u.id);
        if (it == pseudo.end()) return std::nullopt;
        return it->second;
      };
    }
    StageIO io;
    io.run_dir = train_dir(c);
    for (size_t i = 0; i < stages.size(); ++i) {
      const int s = stages[i];
      if (s > 1 && i == 0) {
        const fs::path prev = stage_checkpoint_path(io.run_dir, s - 1);
        if (!fs::exists(prev)) {
          throw ConfigError("stage " + std::to_string(s) + " needs " + prev.string() + "; run `jstts train " +
                            config_path + " --stage " + std::to_string(s - 1) + "` first");
        }
        tr.load(read_checkpoint(prev));
      }
      StageSummary sum;
      if (s == 1) sum = stage1_pretrain(tr, data.train, io);
      else if (s == 2) sum = stage2_asr(tr, data.train, data.world, io);
      else sum = stage3_joint(tr, data.train, data.world, c.condition, io, hook);
      print_stage(out, "stage " + std::to_string(s), sum);
      out << "checkpoint: " << stage_checkpoint_path(io.run_dir, s).string() << "\n";
    }
  }
  if (eval_asr) {
    const uint64_t seed = Rng::mix(c.seed, Rng::hash("evalasr"));
    Model model(mc, seed);
    CurriculumConfig cc = c.curriculum_config();
    cc.seed = seed;
    Trainer tr(model, registry, cc, c.losses);
    StageIO io;
    io.run_dir = evalasr_dir(c);
    print_stage(out, "evaluation ASR", train_eval_asr(tr, data.eval_asr, c.eval_asr_steps, io));
    out << "checkpoint: " << (io.run_dir / "evalasr.ckpt").string() << "\n";
  }
  return kExitOk;
}

struct SynthArgs {
  std::string checkpoint, text, lang, spk, out;
  double guidance = 1.0;
  bool no_oov_fallback = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  if (a.text.empty()) throw UsageError("synth: --text must not be empty");
  const LoadedModel m = load_checkpoint_model(a.checkpoint);
  if (!m.ck.registry.has_language(a.lang)) {
    err << "warning: unknown language '" << a.lang << "', synthesizing with the OOV language id\n";
  }
  if (!a.spk.empty() && m.ck.registry.speaker(a.spk).value == kOovId) {
    err << "warning: unknown speaker '" << a.spk << "', synthesizing with the OOV speaker id\n";
  }
  SynthOptions opt;
  opt.guidance = a.guidance;
  opt.oov_for_untrained_languages = !a.no_oov_fallback;
  const Synthesis s = synthesize(a.text, a.lang, a.spk, *m.model, m.ck.registry, opt);
  const fs::path dst = a.out;
  if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
  write_signal(dst, s.signal);
  out << "durations: " << join(s.durations) << "\n";
  out << "feature frames: " << s.features.rows() << "\n";
  out << "signal frames: " << s.signal.rows() << "\n";
  if (s.lang_oov) out << "language id: OOV\n";
  out << "written to " << dst.string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, manifest, eval_asr, world, out, condition;
  double guidance = 1.0;
  bool no_oov_fallback = false;
  int max_emit = 3;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const LoadedModel tts = load_checkpoint_model(a.checkpoint);
  const LoadedModel asr = load_checkpoint_model(a.eval_asr);
  if (!(tts.ck.registry == asr.ck.registry)) {
    throw ConfigError("registry mismatch between " + a.checkpoint + " and " + a.eval_asr);
  }
  const ModelConfig &x = tts.ck.model_config, &y = asr.ck.model_config;
  if (x.d_sig != y.d_sig || x.d_feat != y.d_feat) {
    throw ConfigError("feature dimensions differ between " + a.checkpoint + " and " + a.eval_asr);
  }
  if (!fs::exists(a.manifest)) throw ConfigError("manifest not found: " + a.manifest);
  const fs::path world_path = a.world.empty() ? fs::path(a.manifest).parent_path() / "world.json" : fs::path(a.world);
  if (!fs::exists(world_path)) throw ConfigError("world file not found: " + world_path.string() + " (use --world)");
  const CorpusWorld world = read_world(world_path);
  const Manifest test = read_manifest(a.manifest, Manifest::Split::kTest);

  std::set<std::string> present;
  for (const auto& u : test.records)
    if (u.text && u.signal) present.insert(u.lang_name);
  std::string missing;
  for (const auto& l : world.languages)
    if (!present.count(l.name)) missing += (missing.empty() ? "" : ", ") + l.name;
  if (!missing.empty()) throw ConfigError("test manifest has no paired records for: " + missing);

  SynthOptions opt;
  opt.guidance = a.guidance;
  opt.oov_for_untrained_languages = !a.no_oov_fallback;
  EvalReport r = eval_condition(*tts.model, tts.ck.registry, test, world, *asr.model, opt, a.max_emit);
  r.condition = a.condition;
  if (auto it = tts.ck.meta.find("seed"); it != tts.ck.meta.end()) r.seed = std::stoull(it->second);
  const std::string stem = fs::path(a.checkpoint).stem().string();
  r.checkpoint_id = stem;

  const fs::path dir = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "eval" : fs::path(a.out);
  write_report(dir, stem, r);
  const std::vector<double> thresholds = {0.01, 0.05, 0.10, 0.50};
  const std::vector<int> hist = cer_diff_histogram(r, thresholds);
  {
    std::ofstream h(dir / (stem + ".hist.tsv"), std::ios::trunc);
    for (size_t i = 0; i < thresholds.size(); ++i) h << "<=" << thresholds[i] << "\t" << hist[i] << "\n";
    h << ">" << thresholds.back() << "\t" << hist.back() << "\n";
  }
  for (LangGroup g : {LangGroup::kA, LangGroup::kB}) {
    out << "group " << to_string(g) << ": groundtruth CER " << pct(r.group_mean(g, false)) << ", synthesized CER "
        << pct(r.group_mean(g, true)) << "\n";
  }
  for (const auto& n : r.notes) out << "note: " << n << "\n";
  out << "report: " << (dir / (stem + ".tsv")).string() << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, std::vector<int> rows, std::ostream& out) {
  if (rows.empty()) rows = {1, 2, 3, 4};
  for (int r : rows) {
    if (r < 1 || r > 4) throw UsageError("ablate: rows must be in 1..4, got " + std::to_string(r));
  }
  const RunConfig c = load_config(config_path);
  const CorpusOnDisk data = load_corpus(c);
  RunLock lock(c.run_dir);

  AblationConfig ac;
  ac.model = c.model_config(registry_from(data.train));
  ac.losses = c.losses;
  ac.curriculum = c.curriculum_config();
  ac.eval_asr_steps = c.eval_asr_steps;
  ac.synth = c.synth;
  ac.rows = rows;
  ac.conditions = {Condition::kZero, Condition::k15m};
  ac.run_dir = c.run_dir / "ablation";
  ac.log = [&out](const std::string& m) { out << m << "\n" << std::flush; };
  const AblationGrid g = run_ablation(data.world, ac);
  out << "\n" << ablation_markdown(g);

  bool any_failed = false;
  for (const auto& [k, cell] : g.cells) any_failed = any_failed || !cell.ok;
  const std::set<int> have(rows.begin(), rows.end());
  if (have.count(1) && have.count(4)) {
    if (!g.directional_ok()) return kExitAcceptance;
  } else {
    out << "directional checks need rows 1 and 4; skipped\n";
  }
  return any_failed ? kExitRuntime : kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint speech-text TTS toolkit on synthetic micro-languages", "jstts"};
  app.require_subcommand(1);

  std::string config;
  bool force = false;
  auto* gen = app.add_subcommand("gen-corpus", "Generate languages, utterances and manifests into the run directory");
  gen->add_option("config", config, "Run config file")->required();
  gen->add_flag("--force", force, "Overwrite a non-empty run directory");

  int stage = 0;
  bool all = false, eval_asr = false;
  auto* train = app.add_subcommand("train", "Run curriculum stages; checkpoints go to <run_dir>/train");
  train->add_option("config", config, "Run config file")->required();
  auto* stage_opt = train->add_option("--stage", stage, "Stage to run (1, 2 or 3)")->check(CLI::Range(1, 3));
  train->add_flag("--all", all, "Run stages 1 to 3")->excludes(stage_opt);
  train->add_flag("--eval-asr", eval_asr, "Train the evaluation ASR into <run_dir>/evalasr");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Synthesize one utterance to a signal file");
  synth->add_option("--checkpoint", sa.checkpoint, "TTS checkpoint (stage 3)")->required();
  synth->add_option("--text", sa.text, "Text to speak")->required();
  synth->add_option("--lang", sa.lang, "Language name")->required();
  synth->add_option("--spk", sa.spk, "Speaker name (OOV when empty or unknown)");
  synth->add_option("--guidance", sa.guidance, "Classifier-free guidance weight")->capture_default_str();
  synth->add_flag("--no-oov-fallback", sa.no_oov_fallback, "Use the language id even without TTS training");
  synth->add_option("--out", sa.out, "Output signal file")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score synthesized speech with an evaluation ASR");
  eval->add_option("--checkpoint", ea.checkpoint, "TTS checkpoint")->required();
  eval->add_option("--manifest", ea.manifest, "Test manifest")->required();
  eval->add_option("--eval-asr", ea.eval_asr, "Evaluation ASR checkpoint")->required();
  eval->add_option("--world", ea.world, "Corpus world file (default: world.json next to the manifest)");
  eval->add_option("--out", ea.out, "Report directory (default: eval/ next to the checkpoint)");
  eval->add_option("--condition", ea.condition, "Condition label recorded in the report");
  eval->add_option("--guidance", ea.guidance, "Classifier-free guidance weight")->capture_default_str();
  eval->add_flag("--no-oov-fallback", ea.no_oov_fallback, "Use language ids even without TTS training");
  eval->add_option("--max-emit", ea.max_emit, "Labels per frame in greedy decoding")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  std::vector<int> rows;
  auto* ablate = app.add_subcommand("ablate", "Run the ablation grid (rows x {zero, 15m})");
  ablate->add_option("config", config, "Run config file")->required();
  ablate->add_option("--rows", rows, "Subset of rows, e.g. 1,4")->delimiter(',');

  std::vector<const char*> argv{"jstts"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(config, force, out);
    if (train->parsed()) return cmd_train(config, stage, all, eval_asr, out);
    if (synth->parsed()) return cmd_synth(sa, out, err);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (ablate->parsed()) return cmd_ablate(config, rows, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ValueError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace jstts::cli
