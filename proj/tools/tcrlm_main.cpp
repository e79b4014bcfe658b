// tcrlm — train / inspect / fine-tune TCR sequence language models.
//
// Every artifact-producing command takes --out <run-dir> and lays out:
//   config.resolved   fully resolved configuration (written first)
//   checkpoint.tcrg   model weights (train / rl-finetune)
//   metrics/*.csv     tabular results
//   meta.txt          timestamps, command line, thread count (only file
//                     allowed to differ between identical runs)
// Artifacts are written to a temp name and renamed, so a failed command
// never leaves a partial file. Errors print a single line
//   error: <Category>: <detail>
// and exit nonzero.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tcrlm/analysis.hpp"
#include "tcrlm/classify.hpp"
#include "tcrlm/error.hpp"
#include "tcrlm/lm.hpp"
#include "tcrlm/mock_scorer.hpp"
#include "tcrlm/model.hpp"
#include "tcrlm/rl.hpp"
#include "tcrlm/rng.hpp"
#include "tcrlm/seqcore.hpp"
#include "tcrlm/threading.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tcrlm;

namespace {

// ---------- formatting / file helpers ----------

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string single_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) fail("Io", "cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) fail("Io", "write failure on " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    fail("Io", "cannot move " + tmp.string() + " to " + path.string() + ": " +
                   ec.message());
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------- configuration ----------

json default_config() {
  return json{
      {"model",
       {{"d_model", 32},
        {"n_heads", 8},
        {"n_layers", 6},
        {"d_ff", 128},
        {"max_len", 32}}},
      {"train",
       {{"batch", 64},
        {"epochs", 3},
        {"lr", 1e-3},
        {"seed", 1},
        {"clip_norm", 1.0},
        {"report_every", 1}}},
      {"sample",
       {{"n", 1000}, {"max_len", 0}, {"temperature", 1.0}, {"seed", 1}}},
      {"compare", {{"min_count", 2}}},
      {"classifier",
       {{"hidden1", 256},
        {"hidden2", 64},
        {"epochs", 30},
        {"batch", 64},
        {"lr", 1e-3},
        {"seed", 1},
        {"folds", 5}}},
      {"ppo",
       {{"clip_eps", 0.2},
        {"batch", 256},
        {"epochs", 4},
        {"minibatch", 64},
        {"actor_lr", 1e-4},
        {"critic_lr", 5e-3},
        {"entropy_coef", 0.01},
        {"kl_coef", 0.0},
        {"iterations", 200},
        {"seed", 1},
        {"binding_threshold", 0.5},
        {"eval_samples", 1000},
        {"normalize_advantages", true},
        {"clip_norm", 1.0},
        {"sample_max_len", 0},
        {"motif_k", 3}}},
      {"overlap", {{"trials", 100}, {"n", 10000}, {"seed", 1}}}};
}

void merge_config(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object())
    fail("ConfigError", "'" + (prefix.empty() ? "<root>" : prefix) +
                            "' must be an object");
  for (const auto& [key, val] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) fail("ConfigError", "unknown key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, val, path);
    } else if (slot.is_boolean()) {
      if (!val.is_boolean())
        fail("ConfigError", "'" + path + "' must be a boolean");
      slot = val;
    } else if (slot.is_number()) {
      if (!val.is_number())
        fail("ConfigError", "'" + path + "' must be a number");
      slot = val;
    } else {
      if (!val.is_string())
        fail("ConfigError", "'" + path + "' must be a string");
      slot = val;
    }
  }
}

// Environment overrides: key a.b_c — variable TCRLM_A_B_C.
void apply_env(json& node, const std::string& prefix) {
  for (auto& [key, val] : node.items()) {
    std::string name = prefix;
    name += '_';
    for (char c : key) name += char(std::toupper(static_cast<unsigned char>(c)));
    if (val.is_object()) {
      apply_env(val, name);
      continue;
    }
    const char* raw = std::getenv(name.c_str());
    if (!raw) continue;
    const std::string text = raw;
    try {
      if (val.is_boolean()) {
        if (text == "1" || text == "true")
          val = true;
        else if (text == "0" || text == "false")
          val = false;
        else
          throw std::invalid_argument("not a boolean");
      } else if (val.is_number_integer()) {
        val = std::stoll(text);
      } else if (val.is_number_float()) {
        val = std::stod(text);
      } else {
        val = text;
      }
    } catch (const std::exception&) {
      fail("ConfigError", name + "='" + text + "' is not a valid value");
    }
  }
}

json resolve_config(const std::string& config_path) {
  json cfg = default_config();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) fail("Io", "cannot open config " + config_path);
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded())
      fail("ConfigError", config_path + " is not valid JSON");
    merge_config(cfg, user, "");
  }
  apply_env(cfg, "TCRLM");
  return cfg;
}

model::ModelConfig model_config_from(const json& cfg) {
  const json& m = cfg.at("model");
  model::ModelConfig mc;
  mc.d_model = m.at("d_model").get<int>();
  mc.n_heads = m.at("n_heads").get<int>();
  mc.n_layers = m.at("n_layers").get<int>();
  mc.d_ff = m.at("d_ff").get<int>();
  mc.max_len = m.at("max_len").get<int>();
  mc.validate();
  return mc;
}

lm::TrainRunConfig train_config_from(const json& cfg) {
  const json& t = cfg.at("train");
  lm::TrainRunConfig tc;
  tc.batch = t.at("batch").get<int>();
  tc.epochs = t.at("epochs").get<int>();
  tc.lr = t.at("lr").get<double>();
  tc.seed = t.at("seed").get<std::uint64_t>();
  tc.clip_norm = t.at("clip_norm").get<double>();
  tc.report_every = t.at("report_every").get<int>();
  return tc;
}

rl::PpoConfig ppo_config_from(const json& cfg) {
  const json& p = cfg.at("ppo");
  rl::PpoConfig pc;
  pc.clip_eps = p.at("clip_eps").get<double>();
  pc.batch = p.at("batch").get<int>();
  pc.epochs = p.at("epochs").get<int>();
  pc.minibatch = p.at("minibatch").get<int>();
  pc.actor_lr = p.at("actor_lr").get<double>();
  pc.critic_lr = p.at("critic_lr").get<double>();
  pc.entropy_coef = p.at("entropy_coef").get<double>();
  pc.kl_coef = p.at("kl_coef").get<double>();
  pc.iterations = p.at("iterations").get<int>();
  pc.seed = p.at("seed").get<std::uint64_t>();
  pc.binding_threshold = p.at("binding_threshold").get<double>();
  pc.eval_samples = p.at("eval_samples").get<int>();
  pc.normalize_advantages = p.at("normalize_advantages").get<bool>();
  pc.clip_norm = p.at("clip_norm").get<double>();
  pc.sample_max_len = p.at("sample_max_len").get<int>();
  pc.validate();
  return pc;
}

classify::ClassifierConfig classifier_config_from(const json& cfg) {
  const json& c = cfg.at("classifier");
  classify::ClassifierConfig cc;
  cc.hidden1 = c.at("hidden1").get<int>();
  cc.hidden2 = c.at("hidden2").get<int>();
  cc.epochs = c.at("epochs").get<int>();
  cc.batch = c.at("batch").get<int>();
  cc.lr = c.at("lr").get<double>();
  cc.seed = c.at("seed").get<std::uint64_t>();
  return cc;
}

// ---------- run-directory plumbing ----------

struct RunDir {
  fs::path root;
  std::string start_time;
  std::string command_line;

  // config.resolved is the first artifact of every run.
  void open(const json& cfg) {
    fs::create_directories(root);
    fs::create_directories(root / "metrics");
    write_text_atomic(root / "config.resolved", cfg.dump(2) + "\n");
  }

  void close(int threads) {
    std::ostringstream meta;
    meta << "started: " << start_time << "\n"
         << "finished: " << now_utc() << "\n"
         << "command: " << command_line << "\n"
         << "threads: " << threads << "\n";
    write_text_atomic(root / "meta.txt", meta.str());
  }
};

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

// ---------- per-command flag plumbing ----------

// Flags that override resolved-config keys. Registered per command; applied
// only when the user actually passed them (so config-file values survive).
struct Overrides {
  std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> entries;

  void add_int(CLI::App* cmd, const std::string& flag, int& slot,
               const std::string& key, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, slot, help);
    entries.emplace_back(opt, [&slot, key](json& cfg) {
      cfg[json::json_pointer(key)] = slot;
    });
  }
  void add_u64(CLI::App* cmd, const std::string& flag, std::uint64_t& slot,
               const std::string& key, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, slot, help);
    entries.emplace_back(opt, [&slot, key](json& cfg) {
      cfg[json::json_pointer(key)] = slot;
    });
  }
  void add_double(CLI::App* cmd, const std::string& flag, double& slot,
                  const std::string& key, const std::string& help) {
    CLI::Option* opt = cmd->add_option(flag, slot, help);
    entries.emplace_back(opt, [&slot, key](json& cfg) {
      cfg[json::json_pointer(key)] = slot;
    });
  }
  void add_bool(CLI::App* cmd, const std::string& flag, bool& slot,
                const std::string& key, const std::string& help) {
    CLI::Option* opt = cmd->add_flag(flag, slot, help);
    entries.emplace_back(opt, [&slot, key](json& cfg) {
      cfg[json::json_pointer(key)] = slot;
    });
  }

  void apply(json& cfg) const {
    for (const auto& [opt, fn] : entries)
      if (opt->count() > 0) fn(cfg);
  }
};

// ---------- small shared loaders ----------

std::vector<seq::TcrSequence> known_set_from_file(const std::string& path) {
  const seq::Repertoire rep = seq::load_repertoire(path);
  std::vector<seq::TcrSequence> out;
  out.reserve(rep.entries.size());
  for (const auto& [s, c] : rep.entries) out.push_back(s);
  return out;
}

struct FeatureFile {
  std::vector<seq::TcrSequence> seqs;
  classify::FeatureMatrix matrix;
};

FeatureFile load_feature_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("Io", "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail("ParseError", path + ": empty file");
  std::int64_t cols = std::count(line.begin(), line.end(), ',');
  if (cols <= 0) fail("ParseError", path + ": header has no feature columns");

  FeatureFile f;
  f.matrix.cols = cols;
  std::int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    if (!std::getline(ss, cell, ',') || cell.empty())
      fail("ParseError", "line " + std::to_string(line_no) + ": no sequence");
    f.seqs.push_back(cell);
    std::int64_t got = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        f.matrix.values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail("ParseError", "line " + std::to_string(line_no) +
                               ": bad number '" + cell + "'");
      }
      ++got;
    }
    if (got != cols) {
      fail("ParseError", "line " + std::to_string(line_no) + ": expected " +
                             std::to_string(cols) + " features, got " +
                             std::to_string(got));
    }
    ++f.matrix.rows;
  }
  if (in.bad()) fail("Io", "read failure on " + path);
  if (f.matrix.rows == 0) fail("ParseError", path + ": no feature rows");
  return f;
}

// ---------- commands ----------

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  int threads = 0;
  bool threads_set = false;
};

int run_cli(int argc, char** argv) {
  CLI::App app{
      "TCR sequence language model: training, exact sequence probabilities, "
      "generation, repertoire analytics, LM-feature classification, and "
      "PPO fine-tuning against a peptide-binding reward."};
  app.require_subcommand(1);

  // Shared state filled by whichever subcommand runs.
  CommonArgs common;
  Overrides ov;

  auto add_common = [&](CLI::App* cmd, bool needs_out) {
    cmd->add_option("--config", common.config_path,
                    "JSON config file (documented key tree; unknown keys "
                    "are errors)");
    CLI::Option* th = cmd->add_option(
        "--threads", common.threads,
        "Worker thread cap, 0 = hardware (never affects results)");
    th->each([&](const std::string&) { common.threads_set = true; });
    if (needs_out) {
      cmd->add_option("--out", common.out_dir, "Run directory for artifacts")
          ->required();
    }
  };

  // --- train ---
  auto* c_train = app.add_subcommand(
      "train", "Train a model on a repertoire file; writes checkpoint.tcrg "
               "and metrics/loss.csv");
  std::string train_corpus;
  c_train->add_option("--corpus", train_corpus, "Repertoire file")->required();
  add_common(c_train, true);
  struct {
    int d_model, n_heads, n_layers, d_ff, max_len;
    int batch, epochs, report_every;
    double lr, clip_norm;
    std::uint64_t seed;
  } tf{};
  ov.add_int(c_train, "--d-model", tf.d_model, "/model/d_model", "Embedding width");
  ov.add_int(c_train, "--n-heads", tf.n_heads, "/model/n_heads", "Attention heads");
  ov.add_int(c_train, "--n-layers", tf.n_layers, "/model/n_layers", "Decoder blocks");
  ov.add_int(c_train, "--d-ff", tf.d_ff, "/model/d_ff", "Feed-forward width");
  ov.add_int(c_train, "--max-len", tf.max_len, "/model/max_len",
             "Token positions incl. SOS/EOS");
  ov.add_int(c_train, "--batch", tf.batch, "/train/batch", "Batch size");
  ov.add_int(c_train, "--epochs", tf.epochs, "/train/epochs", "Epochs");
  ov.add_double(c_train, "--lr", tf.lr, "/train/lr", "Adam learning rate");
  ov.add_double(c_train, "--clip-norm", tf.clip_norm, "/train/clip_norm",
                "Global gradient-norm cap");
  ov.add_int(c_train, "--report-every", tf.report_every, "/train/report_every",
             "Steps between loss-trace points");
  ov.add_u64(c_train, "--seed", tf.seed, "/train/seed", "Training seed");

  // --- logprob ---
  auto* c_logprob = app.add_subcommand(
      "logprob", "Exact per-sequence log-probabilities (nats); writes "
                 "metrics/logprob.csv");
  std::string lp_checkpoint, lp_input;
  c_logprob->add_option("--checkpoint", lp_checkpoint, "Model checkpoint")
      ->required();
  c_logprob->add_option("--input", lp_input, "Repertoire file of sequences")
      ->required();
  add_common(c_logprob, true);

  // --- sample ---
  auto* c_sample = app.add_subcommand(
      "sample", "Generate sequences; writes samples.txt");
  std::string sm_checkpoint;
  c_sample->add_option("--checkpoint", sm_checkpoint, "Model checkpoint")
      ->required();
  add_common(c_sample, true);
  struct {
    int n, max_len;
    double temperature;
    std::uint64_t seed;
  } sf{};
  ov.add_int(c_sample, "--n", sf.n, "/sample/n", "Number of sequences");
  ov.add_int(c_sample, "--max-len", sf.max_len, "/sample/max_len",
             "Token-position cap (0 = model max)");
  ov.add_double(c_sample, "--temperature", sf.temperature,
                "/sample/temperature", "Softmax temperature");
  ov.add_u64(c_sample, "--seed", sf.seed, "/sample/seed", "Sampling seed");

  // --- compare ---
  auto* c_compare = app.add_subcommand(
      "compare", "Model-vs-data concordance on a held-out repertoire; writes "
                 "metrics/scatter.csv and metrics/summary.csv");
  std::string cp_checkpoint, cp_test;
  c_compare->add_option("--checkpoint", cp_checkpoint, "Model checkpoint")
      ->required();
  c_compare->add_option("--test", cp_test, "Held-out repertoire file")
      ->required();
  add_common(c_compare, true);
  int cp_min_count = 0;
  ov.add_int(c_compare, "--min-count", cp_min_count, "/compare/min_count",
             "Observation-count filter for the correlation");

  // --- divmatrix ---
  auto* c_divmatrix = app.add_subcommand(
      "divmatrix", "Pairwise model divergence matrix; writes "
                   "metrics/divergence.csv");
  std::vector<std::string> dm_checkpoints, dm_evals, dm_labels;
  c_divmatrix
      ->add_option("--checkpoints", dm_checkpoints, "Model checkpoints")
      ->required()
      ->expected(-1);
  c_divmatrix->add_option("--evals", dm_evals, "Eval repertoires (one per model)")
      ->required()
      ->expected(-1);
  c_divmatrix->add_option("--labels", dm_labels, "Row/column labels")
      ->expected(-1);
  add_common(c_divmatrix, true);

  // --- features ---
  auto* c_features = app.add_subcommand(
      "features", "Transformer hidden-state features per sequence; writes "
                  "metrics/features.csv");
  std::string ft_checkpoint, ft_input;
  c_features->add_option("--checkpoint", ft_checkpoint, "Model checkpoint")
      ->required();
  c_features->add_option("--input", ft_input, "Repertoire file of sequences")
      ->required();
  add_common(c_features, true);

  // --- classify ---
  auto* c_classify = app.add_subcommand(
      "classify", "Stratified k-fold CV of the LM-feature classifier; writes "
                  "metrics/cv.csv");
  std::string cl_checkpoint, cl_data, cl_features, cl_labels;
  c_classify->add_option("--checkpoint", cl_checkpoint,
                         "Model checkpoint (features computed in-process)");
  c_classify->add_option("--data", cl_data,
                         "Labeled sequences: sequence<TAB>0|1");
  c_classify->add_option("--features", cl_features,
                         "Precomputed metrics/features.csv");
  c_classify->add_option("--labels", cl_labels,
                         "Labels for --features rows: sequence<TAB>0|1");
  add_common(c_classify, true);
  struct {
    int hidden1, hidden2, epochs, batch, folds;
    double lr;
    std::uint64_t seed;
  } cf{};
  ov.add_int(c_classify, "--hidden1", cf.hidden1, "/classifier/hidden1",
             "First hidden width");
  ov.add_int(c_classify, "--hidden2", cf.hidden2, "/classifier/hidden2",
             "Second hidden width");
  ov.add_int(c_classify, "--epochs", cf.epochs, "/classifier/epochs", "Epochs");
  ov.add_int(c_classify, "--batch", cf.batch, "/classifier/batch", "Batch size");
  ov.add_double(c_classify, "--lr", cf.lr, "/classifier/lr", "Learning rate");
  ov.add_u64(c_classify, "--seed", cf.seed, "/classifier/seed",
             "Shuffle/init seed");
  ov.add_int(c_classify, "--folds", cf.folds, "/classifier/folds", "CV folds");

  // --- rl-finetune ---
  auto* c_rl = app.add_subcommand(
      "rl-finetune", "PPO fine-tune against a peptide-binding reward; writes "
                     "checkpoint.tcrg and metrics/rl_trace.csv");
  std::string rl_checkpoint, rl_peptide, rl_host;
  int rl_port = 0;
  bool rl_motif = false;
  c_rl->add_option("--checkpoint", rl_checkpoint, "Initial actor checkpoint")
      ->required();
  c_rl->add_option("--peptide", rl_peptide, "Target peptide")->required();
  c_rl->add_flag("--motif", rl_motif,
                 "Use the built-in motif reward instead of a remote scorer");
  c_rl->add_option("--scorer-host", rl_host, "Remote scorer host");
  c_rl->add_option("--scorer-port", rl_port, "Remote scorer port");
  add_common(c_rl, true);
  struct {
    double clip_eps, actor_lr, critic_lr, entropy_coef, kl_coef, threshold,
        clip_norm;
    int batch, epochs, minibatch, iterations, eval_samples, sample_max_len,
        motif_k;
    std::uint64_t seed;
    bool norm_adv;
  } rf{};
  ov.add_double(c_rl, "--clip-eps", rf.clip_eps, "/ppo/clip_eps",
                "PPO clip epsilon");
  ov.add_int(c_rl, "--batch", rf.batch, "/ppo/batch", "Rollout batch |D_k|");
  ov.add_int(c_rl, "--epochs", rf.epochs, "/ppo/epochs",
             "Update epochs per batch");
  ov.add_int(c_rl, "--minibatch", rf.minibatch, "/ppo/minibatch",
             "Minibatch size");
  ov.add_double(c_rl, "--actor-lr", rf.actor_lr, "/ppo/actor_lr", "Actor lr");
  ov.add_double(c_rl, "--critic-lr", rf.critic_lr, "/ppo/critic_lr",
                "Critic lr");
  ov.add_double(c_rl, "--entropy-coef", rf.entropy_coef, "/ppo/entropy_coef",
                "Entropy bonus coefficient");
  ov.add_double(c_rl, "--kl-coef", rf.kl_coef, "/ppo/kl_coef",
                "Reference-KL coefficient (0 = off)");
  ov.add_int(c_rl, "--iterations", rf.iterations, "/ppo/iterations",
             "PPO iterations");
  ov.add_u64(c_rl, "--seed", rf.seed, "/ppo/seed", "Run seed");
  ov.add_double(c_rl, "--binding-threshold", rf.threshold,
                "/ppo/binding_threshold", "Binding threshold");
  ov.add_int(c_rl, "--eval-samples", rf.eval_samples, "/ppo/eval_samples",
             "Fresh samples per iteration for binding_pct");
  ov.add_bool(c_rl, "--normalize-advantages,!--no-normalize-advantages",
              rf.norm_adv, "/ppo/normalize_advantages",
              "Batch-normalize advantages");
  ov.add_double(c_rl, "--clip-norm", rf.clip_norm, "/ppo/clip_norm",
                "Global gradient-norm cap");
  ov.add_int(c_rl, "--sample-max-len", rf.sample_max_len,
             "/ppo/sample_max_len", "Rollout token cap (0 = model max)");
  ov.add_int(c_rl, "--motif-k", rf.motif_k, "/ppo/motif_k",
             "Motif length for --motif");

  // --- overlap ---
  auto* c_overlap = app.add_subcommand(
      "overlap", "Overlap of generated sequences with a known set; writes "
                 "metrics/overlap.csv");
  std::string olp_checkpoint, olp_generated, olp_known;
  c_overlap->add_option("--checkpoint", olp_checkpoint,
                        "Sample per trial from this checkpoint");
  c_overlap->add_option("--generated", olp_generated,
                        "Pre-generated samples.txt (single trial)");
  c_overlap->add_option("--known", olp_known, "Known-set repertoire file")
      ->required();
  add_common(c_overlap, true);
  struct {
    int trials, n;
    std::uint64_t seed;
  } of{};
  ov.add_int(c_overlap, "--trials", of.trials, "/overlap/trials",
             "Sampling trials");
  ov.add_int(c_overlap, "--n", of.n, "/overlap/n", "Samples per trial");
  ov.add_u64(c_overlap, "--seed", of.seed, "/overlap/seed", "Base seed");

  // --- mock-scorer ---
  auto* c_mock = app.add_subcommand(
      "mock-scorer", "Serve the /score wire protocol (blocking)");
  mock::MockScorerConfig mock_cfg;
  mock_cfg.port = 8787;
  c_mock->add_option("--host", mock_cfg.host, "Bind address");
  c_mock->add_option("--port", mock_cfg.port, "Port (0 = pick free)");
  c_mock->add_option("--mode", mock_cfg.mode, "constant | motif");
  c_mock->add_option("--constant", mock_cfg.constant,
                     "Score for constant mode");
  c_mock->add_option("--motif-k", mock_cfg.motif_k, "Motif length");
  c_mock->add_option("--fault", mock_cfg.fault,
                     "Fault injection: shape | range | http500 | slow");
  c_mock->add_option("--fault-every", mock_cfg.fault_every,
                     "Fault on every Nth request");
  c_mock->add_option("--slow-s", mock_cfg.slow_s,
                     "Delay for the slow fault, seconds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // help text
    std::cerr << "error: UsageError: " << single_line(e.what()) << "\n";
    return 2;
  }

  // Resolution: defaults < config file < TCRLM_* env < explicit flags.
  json cfg = resolve_config(common.config_path);
  ov.apply(cfg);
  if (const char* th = std::getenv("TCRLM_THREADS"); th && !common.threads_set) {
    try {
      common.threads = std::stoi(th);
    } catch (const std::exception&) {
      fail("ConfigError", std::string("TCRLM_THREADS='") + th + "'");
    }
  }
  num::set_max_threads(common.threads);

  RunDir run;
  run.root = common.out_dir;
  run.start_time = now_utc();
  run.command_line = join_args(argc, argv);

  // ---------------- train ----------------
  if (c_train->parsed()) {
    run.open(cfg);
    const seq::Repertoire corpus = seq::load_repertoire(train_corpus);
    const model::ModelConfig mc = model_config_from(cfg);
    const lm::TrainRunConfig tc = train_config_from(cfg);
    const model::TransformerParams init = model::init_params(mc, tc.seed);
    auto [params, trace] = lm::train(corpus, tc, init);

    model::save_checkpoint(params, (run.root / "checkpoint.tcrg").string());
    std::string csv = "step,nll_per_token\n";
    for (const auto& [step, nll] : trace.points)
      csv += std::to_string(step) + "," + g17(nll) + "\n";
    write_text_atomic(run.root / "metrics" / "loss.csv", csv);
    run.close(num::max_threads());
    if (!trace.points.empty())
      std::cout << "final_nll_per_token=" << g17(trace.points.back().second)
                << "\n";
    std::cout << "checkpoint=" << (run.root / "checkpoint.tcrg").string()
              << "\n";
    return 0;
  }

  // ---------------- logprob ----------------
  if (c_logprob->parsed()) {
    run.open(cfg);
    const model::TransformerParams params = model::load_checkpoint(lp_checkpoint);
    const seq::Repertoire rep = seq::load_repertoire(lp_input);
    std::vector<seq::TcrSequence> seqs;
    seqs.reserve(rep.entries.size());
    for (const auto& [s, c] : rep.entries) seqs.push_back(s);
    const std::vector<double> lp = lm::log_prob_batch(params, seqs);

    std::string csv = "sequence,count,log_prob\n";
    double total_nats = 0.0, total_tokens = 0.0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      csv += seqs[i] + "," + std::to_string(rep.entries[i].second) + "," +
             g17(lp[i]) + "\n";
      total_nats += lp[i];
      total_tokens += double(seqs[i].size()) + 1.0;  // + EOS
    }
    write_text_atomic(run.root / "metrics" / "logprob.csv", csv);
    run.close(num::max_threads());
    std::cout << "mean_log_prob_per_token=" << g17(total_nats / total_tokens)
              << "\n";
    return 0;
  }

  // ---------------- sample ----------------
  if (c_sample->parsed()) {
    run.open(cfg);
    const model::TransformerParams params = model::load_checkpoint(sm_checkpoint);
    const json& s = cfg.at("sample");
    const int n = s.at("n").get<int>();
    int max_len = s.at("max_len").get<int>();
    if (max_len == 0) max_len = params.config.max_len;
    const double temperature = s.at("temperature").get<double>();
    const auto seed = s.at("seed").get<std::uint64_t>();

    const auto samples = lm::sample(params, n, max_len, seed, temperature);
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", model::file_crc32(sm_checkpoint));
    lm::save_samples(samples, (run.root / "samples.txt").string(), seed,
                     temperature, crc);
    run.close(num::max_threads());
    std::int64_t terminated = 0;
    for (const auto& smp : samples) terminated += smp.terminated ? 1 : 0;
    std::cout << "samples=" << samples.size() << " terminated=" << terminated
              << "\n";
    return 0;
  }

  // ---------------- compare ----------------
  if (c_compare->parsed()) {
    run.open(cfg);
    const model::TransformerParams params = model::load_checkpoint(cp_checkpoint);
    const seq::Repertoire test = seq::load_repertoire(cp_test);
    const auto report = analysis::compare_model_to_repertoire(
        params, test, cfg.at("compare").at("min_count").get<int>());

    std::string scatter = "sequence,count,p_data,p_infer\n";
    for (const auto& [s, c, pd, pi] : report.scatter)
      scatter += s + "," + std::to_string(c) + "," + g17(pd) + "," + g17(pi) + "\n";
    write_text_atomic(run.root / "metrics" / "scatter.csv", scatter);
    write_text_atomic(run.root / "metrics" / "summary.csv",
                      "pearson_log10,d_js,n_correlated\n" +
                          g17(report.pearson_log10) + "," + g17(report.d_js) +
                          "," + std::to_string(report.n_correlated) + "\n");
    run.close(num::max_threads());
    std::cout << "pearson_log10=" << g17(report.pearson_log10)
              << " d_js=" << g17(report.d_js) << "\n";
    return 0;
  }

  // ---------------- divmatrix ----------------
  if (c_divmatrix->parsed()) {
    if (dm_evals.size() != dm_checkpoints.size())
      fail("ConfigError", "--evals must match --checkpoints in count");
    if (!dm_labels.empty() && dm_labels.size() != dm_checkpoints.size())
      fail("ConfigError", "--labels must match --checkpoints in count");
    run.open(cfg);
    std::vector<model::TransformerParams> models;
    std::vector<seq::Repertoire> evals;
    std::vector<std::string> labels = dm_labels;
    for (std::size_t i = 0; i < dm_checkpoints.size(); ++i) {
      models.push_back(model::load_checkpoint(dm_checkpoints[i]));
      evals.push_back(seq::load_repertoire(dm_evals[i]));
      if (dm_labels.empty())
        labels.push_back(fs::path(dm_checkpoints[i]).stem().string());
    }
    const auto matrix = analysis::divergence_matrix(models, evals, labels);

    std::string csv;
    for (const auto& l : matrix.labels) csv += "," + l;
    csv += "\n";
    const std::size_t n = matrix.labels.size();
    for (std::size_t i = 0; i < n; ++i) {
      csv += matrix.labels[i];
      for (std::size_t j = 0; j < n; ++j) csv += "," + g17(matrix.at(i, j));
      csv += "\n";
    }
    write_text_atomic(run.root / "metrics" / "divergence.csv", csv);
    run.close(num::max_threads());
    std::cout << "models=" << n << "\n";
    return 0;
  }

  // ---------------- features ----------------
  if (c_features->parsed()) {
    run.open(cfg);
    const model::TransformerParams params = model::load_checkpoint(ft_checkpoint);
    const seq::Repertoire rep = seq::load_repertoire(ft_input);
    std::vector<seq::TcrSequence> seqs;
    for (const auto& [s, c] : rep.entries) seqs.push_back(s);
    const auto f = classify::extract_features(params, seqs);

    std::string csv = "sequence";
    for (std::int64_t j = 0; j < f.cols; ++j) csv += ",f" + std::to_string(j);
    csv += "\n";
    for (std::int64_t r = 0; r < f.rows; ++r) {
      csv += seqs[std::size_t(r)];
      const auto row = f.row(r);
      for (std::int64_t j = 0; j < f.cols; ++j)
        csv += "," + g17(row[std::size_t(j)]);
      csv += "\n";
    }
    write_text_atomic(run.root / "metrics" / "features.csv", csv);
    run.close(num::max_threads());
    std::cout << "rows=" << f.rows << " cols=" << f.cols << "\n";
    return 0;
  }

  // ---------------- classify ----------------
  if (c_classify->parsed()) {
    const bool from_features = !cl_features.empty();
    if (from_features == !cl_checkpoint.empty())
      fail("ConfigError", "pass exactly one of --features or --checkpoint");
    run.open(cfg);

    classify::FeatureMatrix x;
    std::vector<int> labels;
    if (from_features) {
      if (cl_labels.empty())
        fail("ConfigError", "--features requires --labels");
      FeatureFile f = load_feature_csv(cl_features);
      const auto rows = classify::load_labeled(cl_labels);
      std::map<seq::TcrSequence, int> label_of(rows.begin(), rows.end());
      labels.reserve(f.seqs.size());
      for (const auto& s : f.seqs) {
        const auto it = label_of.find(s);
        if (it == label_of.end())
          fail("ParseError", "no label for sequence '" + s + "'");
        labels.push_back(it->second);
      }
      x = std::move(f.matrix);
    } else {
      if (cl_data.empty())
        fail("ConfigError", "--checkpoint requires --data");
      const model::TransformerParams params =
          model::load_checkpoint(cl_checkpoint);
      const auto rows = classify::load_labeled(cl_data);
      std::vector<seq::TcrSequence> seqs;
      for (const auto& [s, y] : rows) {
        seqs.push_back(s);
        labels.push_back(y);
      }
      x = classify::extract_features(params, seqs);
    }

    const int folds = cfg.at("classifier").at("folds").get<int>();
    const auto cc = classifier_config_from(cfg);
    const auto report = classify::kfold_cv(x, labels, folds, cc);

    std::string csv = "fold,auc\n";
    for (std::size_t i = 0; i < report.fold_aucs.size(); ++i)
      csv += std::to_string(i) + "," + g17(report.fold_aucs[i]) + "\n";
    write_text_atomic(run.root / "metrics" / "cv.csv", csv);
    write_text_atomic(run.root / "metrics" / "cv_summary.csv",
                      "mean_auc,std_auc\n" + g17(report.mean_auc) + "," +
                          g17(report.std_auc) + "\n");
    run.close(num::max_threads());
    std::cout << "mean_auc=" << g17(report.mean_auc)
              << " std_auc=" << g17(report.std_auc) << "\n";
    return 0;
  }

  // ---------------- rl-finetune ----------------
  if (c_rl->parsed()) {
    const bool remote = !rl_host.empty() || rl_port != 0;
    if (rl_motif == remote)
      fail("ConfigError",
           "pass exactly one of --motif or --scorer-host/--scorer-port");
    run.open(cfg);
    const model::TransformerParams initial = model::load_checkpoint(rl_checkpoint);
    const rl::PpoConfig pc = ppo_config_from(cfg);
    const rl::Peptide peptide{rl_peptide};

    std::unique_ptr<rl::RewardScorer> scorer;
    if (rl_motif) {
      scorer = std::make_unique<rl::MotifReward>(
          peptide, cfg.at("ppo").at("motif_k").get<int>());
    } else {
      if (rl_host.empty() || rl_port == 0)
        fail("ConfigError", "remote scorer needs both --scorer-host and "
                            "--scorer-port");
      scorer = std::make_unique<rl::RemoteScorer>(rl_host, rl_port);
    }

    auto [tuned, trace] = rl::rl_finetune(initial, *scorer, peptide, pc);
    model::save_checkpoint(tuned, (run.root / "checkpoint.tcrg").string());
    rl::save_trace_csv(trace, (run.root / "metrics" / "rl_trace.csv").string());
    run.close(num::max_threads());
    if (!trace.records.empty()) {
      std::cout << "final_binding_pct=" << g17(trace.records.back().binding_pct)
                << " final_mean_reward=" << g17(trace.records.back().mean_reward)
                << "\n";
    }
    return 0;
  }

  // ---------------- overlap ----------------
  if (c_overlap->parsed()) {
    const bool from_file = !olp_generated.empty();
    if (from_file == !olp_checkpoint.empty())
      fail("ConfigError", "pass exactly one of --generated or --checkpoint");
    run.open(cfg);
    const auto known_list = known_set_from_file(olp_known);
    const std::unordered_set<seq::TcrSequence> known(known_list.begin(),
                                                     known_list.end());

    std::string csv = "trial,seed,overlap\n";
    if (from_file) {
      const auto samples = lm::load_samples(olp_generated);
      std::vector<seq::TcrSequence> gen;
      for (const auto& s : samples)
        if (s.terminated) gen.push_back(s.sequence);
      csv += "0,0," + g17(analysis::overlap_fraction(gen, known)) + "\n";
      write_text_atomic(run.root / "metrics" / "overlap.csv", csv);
      run.close(num::max_threads());
      std::cout << "overlap=" << g17(analysis::overlap_fraction(gen, known))
                << "\n";
      return 0;
    }

    const model::TransformerParams params = model::load_checkpoint(olp_checkpoint);
    const json& o = cfg.at("overlap");
    const int trials = o.at("trials").get<int>();
    const int n = o.at("n").get<int>();
    const auto seed = o.at("seed").get<std::uint64_t>();
    if (trials <= 0 || n <= 0)
      fail("ConfigError", "overlap trials and n must be positive");
    double mean_overlap = 0.0;
    for (int t = 0; t < trials; ++t) {
      const auto trial_seed = num::mix_seed(seed, std::uint64_t(t));
      const auto samples =
          lm::sample(params, n, params.config.max_len, trial_seed, 1.0);
      std::vector<seq::TcrSequence> gen;
      gen.reserve(samples.size());
      for (const auto& s : samples)
        if (s.terminated) gen.push_back(s.sequence);
      const double ov_frac = analysis::overlap_fraction(gen, known);
      mean_overlap += ov_frac;
      csv += std::to_string(t) + "," + std::to_string(trial_seed) + "," +
             g17(ov_frac) + "\n";
    }
    write_text_atomic(run.root / "metrics" / "overlap.csv", csv);
    run.close(num::max_threads());
    std::cout << "mean_overlap=" << g17(mean_overlap / trials) << "\n";
    return 0;
  }

  // ---------------- mock-scorer ----------------
  if (c_mock->parsed()) {
    mock::MockScorer server(mock_cfg);
    server.run_blocking();
    return 0;
  }

  fail("UnknownCommand", "no subcommand matched");
}

}  // namespace

int main(int argc, char** argv) {
  static const std::set<std::string> kCommands = {
      "train",    "logprob",  "sample",      "compare", "divmatrix",
      "features", "classify", "rl-finetune", "overlap", "mock-scorer"};
  if (argc >= 2 && argv[1][0] != '-' && !kCommands.count(argv[1])) {
    std::cerr << "error: UnknownCommand: '" << argv[1] << "'\n";
    return 2;
  }
  try {
    return run_cli(argc, argv);
  } catch (const tcrlm::Error& e) {
    std::cerr << "error: " << single_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << single_line(e.what()) << "\n";
    return 1;
  }
}
