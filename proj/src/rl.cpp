#include "tcrlm/rl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "tcrlm/error.hpp"
#include "tcrlm/rng.hpp"

namespace tcrlm::rl {

void validate_peptide(const Peptide& p) {
  if (p.residues.empty()) fail("InvalidConfig", "peptide is empty");
  for (std::size_t i = 0; i < p.residues.size(); ++i) {
    if (seq::residue_to_id(p.residues[i]) < 0) {
      fail("InvalidResidue", std::string("'") + p.residues[i] +
                                 "' at position " + std::to_string(i) +
                                 " of peptide");
    }
  }
}

std::string peptide_motif(const std::string& peptide, int k) {
  Peptide p{peptide};
  validate_peptide(p);
  if (k <= 0 || k > static_cast<int>(peptide.size())) {
    fail("InvalidConfig", "motif length " + std::to_string(k) +
                              " does not fit peptide of length " +
                              std::to_string(peptide.size()));
  }
  return peptide.substr((peptide.size() - static_cast<std::size_t>(k)) / 2,
                        static_cast<std::size_t>(k));
}

double motif_score(const std::string& motif, const seq::TcrSequence& tcr) {
  const std::size_t k = motif.size();
  if (k == 0) fail("InvalidConfig", "empty motif");
  if (tcr.size() < k) return 0.0;
  int best = 0;
  for (std::size_t start = 0; start + k <= tcr.size(); ++start) {
    int hits = 0;
    for (std::size_t i = 0; i < k; ++i)
      if (tcr[start + i] == motif[i]) ++hits;
    best = std::max(best, hits);
  }
  return static_cast<double>(best) / static_cast<double>(k);
}

MotifReward::MotifReward(const Peptide& peptide, int k)
    : motif_(peptide_motif(peptide.residues, k)) {}

std::vector<double> MotifReward::score(const Peptide&,
                                       std::span<const seq::TcrSequence> tcrs) {
  std::vector<double> out;
  out.reserve(tcrs.size());
  for (const auto& t : tcrs) out.push_back(motif_score(motif_, t));
  return out;
}

// ---------- remote scorer ----------

RemoteScorer::RemoteScorer(std::string host, int port)
    : host_(std::move(host)), port_(port) {
  if (port_ <= 0 || port_ > 65535)
    fail("InvalidConfig", "port " + std::to_string(port_));
}

namespace {

std::vector<double> parse_scores(const std::string& body, std::size_t expect) {
  const nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) fail("BadResponse", "shape: body is not valid JSON");
  if (!j.is_object() || !j.contains("scores") || !j["scores"].is_array())
    fail("BadResponse", "shape: missing \"scores\" array");
  const auto& arr = j["scores"];
  if (arr.size() != expect) {
    fail("BadResponse", "shape: expected " + std::to_string(expect) +
                            " scores, got " + std::to_string(arr.size()));
  }
  std::vector<double> out;
  out.reserve(expect);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number())
      fail("BadResponse", "shape: score " + std::to_string(i) + " not a number");
    const double v = arr[i].get<double>();
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      fail("BadResponse", "range: score " + std::to_string(v) + " at index " +
                              std::to_string(i));
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::vector<double> RemoteScorer::score(const Peptide& peptide,
                                        std::span<const seq::TcrSequence> tcrs) {
  validate_peptide(peptide);
  if (tcrs.empty()) return {};
  if (tcrs.size() > 1024)
    fail("InvalidConfig", "batch of " + std::to_string(tcrs.size()) +
                              " exceeds the 1024-sequence wire limit");

  nlohmann::json req;
  req["peptide"] = peptide.residues;
  req["tcrs"] = std::vector<std::string>(tcrs.begin(), tcrs.end());
  const std::string body = req.dump();

  std::string last_category = "Unreachable";
  std::string last_detail = "no attempt made";
  for (int attempt = 0; attempt <= retries; ++attempt) {
    if (attempt > 0) {
      const double wait_s = backoff_base_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
    }
    httplib::Client cli(host_, port_);
    const auto sec = static_cast<time_t>(timeout_s);
    const auto usec =
        static_cast<time_t>((timeout_s - static_cast<double>(sec)) * 1e6);
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);

    auto res = cli.Post("/score", body, "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                             err == httplib::Error::Read ||
                             err == httplib::Error::Write;
      last_category = timed_out ? "Timeout" : "Unreachable";
      last_detail = std::string("POST /score failed: ") + httplib::to_string(err);
      continue;  // transient: retry
    }
    if (res->status == 200) return parse_scores(res->body, tcrs.size());
    if (res->status >= 500) {
      last_category = "BadResponse";
      last_detail = "http status " + std::to_string(res->status);
      continue;  // transient server error: retry
    }
    fail("BadResponse", "http status " + std::to_string(res->status));
  }
  fail(last_category, last_detail + " after " + std::to_string(retries + 1) +
                          " attempts");
}

// ---------- critic ----------

std::vector<num::Tensor> CriticParams::all() const {
  std::vector<num::Tensor> out = trunk.all();
  out.push_back(vw);
  out.push_back(vb);
  return out;
}

CriticParams init_critic(const model::ModelConfig& cfg, std::uint64_t seed) {
  CriticParams c;
  c.trunk = model::init_params(cfg, seed);
  num::Rng gen(num::mix_seed(seed, 0x76616C7565ull));  // value-head draws
  std::vector<double> w(static_cast<std::size_t>(cfg.d_model));
  for (auto& e : w) e = gen.normal(0.0, 0.02);
  c.vw = num::Tensor::from({cfg.d_model, 1}, std::move(w), /*requires_grad=*/true);
  c.vb = num::Tensor::zeros({1}, /*requires_grad=*/true);
  return c;
}

CriticParams clone_critic(const CriticParams& c) {
  CriticParams out;
  out.trunk = model::clone_params(c.trunk);
  auto copy_leaf = [](const num::Tensor& t) {
    return num::Tensor::from(
        t.shape(), std::vector<double>(t.values().begin(), t.values().end()),
        /*requires_grad=*/true);
  };
  out.vw = copy_leaf(c.vw);
  out.vb = copy_leaf(c.vb);
  return out;
}

num::Tensor critic_values(const CriticParams& critic,
                          std::span<const seq::TcrSequence> seqs) {
  const model::TokenBatch batch = model::make_batch(seqs, /*append_eos=*/true);
  const num::Tensor hidden = model::hidden_features(critic.trunk, batch);
  std::vector<int> eos_rows(seqs.size());
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    eos_rows[r] =
        static_cast<int>(r) * batch.len + 1 + static_cast<int>(seqs[r].size());
  }
  const num::Tensor pooled = num::embedding_lookup(hidden, eos_rows);
  return num::add_row_bias(num::matmul(pooled, critic.vw), critic.vb);
}

// ---------- scalar PPO pieces ----------

double g_clip(double eps, double advantage) {
  return advantage >= 0.0 ? (1.0 + eps) * advantage : (1.0 - eps) * advantage;
}

double clipped_objective(double ratio, double advantage, double eps) {
  if (!(ratio > 0.0))
    fail("NonPositiveRatio", "ratio " + std::to_string(ratio));
  return std::min(ratio * advantage, g_clip(eps, advantage));
}

std::vector<double> advantage(std::span<const double> reward,
                              std::span<const double> value) {
  if (reward.size() != value.size())
    fail("LengthMismatch", "reward: " + std::to_string(reward.size()) +
                               ", value: " + std::to_string(value.size()));
  std::vector<double> out(reward.size());
  for (std::size_t i = 0; i < reward.size(); ++i) out[i] = reward[i] - value[i];
  return out;
}

double binding_percentage(std::span<const double> scores, double threshold) {
  if (scores.empty()) fail("EmptyScores", "no scores");
  std::int64_t n = 0;
  for (double s : scores)
    if (s > threshold) ++n;
  return static_cast<double>(n) / static_cast<double>(scores.size());
}

void PpoConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    fail("InvalidConfig", "clip_eps must be in (0,1)");
  if (batch <= 0 || epochs <= 0 || minibatch <= 0 || iterations < 0 ||
      eval_samples <= 0)
    fail("InvalidConfig", "batch/epochs/minibatch/eval_samples must be positive");
  if (minibatch > batch) fail("InvalidConfig", "minibatch exceeds batch");
  if (!(actor_lr > 0.0) || !(critic_lr > 0.0))
    fail("InvalidConfig", "learning rates must be positive");
  if (entropy_coef < 0.0 || kl_coef < 0.0)
    fail("InvalidConfig", "entropy/kl coefficients must be >= 0");
  if (!(binding_threshold >= 0.0 && binding_threshold <= 1.0))
    fail("InvalidConfig", "binding_threshold must be in [0,1]");
  if (!(clip_norm > 0.0)) fail("InvalidConfig", "clip_norm must be positive");
  if (sample_max_len != 0 && sample_max_len < 3)
    fail("InvalidConfig", "sample_max_len must be 0 or >= 3");
}

// ---------- the iteration ----------

namespace {

// Purpose tags for per-iteration seed derivation.
constexpr std::uint64_t kSeedCollect = 0x11;
constexpr std::uint64_t kSeedEval = 0x22;
constexpr std::uint64_t kSeedPerm = 0x33;

void check_scores(std::span<const double> scores, std::size_t expect) {
  if (scores.size() != expect) {
    fail("BadResponse", "shape: scorer returned " +
                            std::to_string(scores.size()) + " scores for " +
                            std::to_string(expect) + " sequences");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i]) || scores[i] < 0.0 || scores[i] > 1.0) {
      fail("BadResponse", "range: score " + std::to_string(scores[i]) +
                              " at index " + std::to_string(i));
    }
  }
}

double vec_mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

IterationStats ppo_iteration(model::TransformerParams& actor,
                             CriticParams& critic, num::AdamState& actor_opt,
                             num::AdamState& critic_opt, RewardScorer& scorer,
                             const Peptide& peptide, const PpoConfig& cfg,
                             int iteration,
                             const model::TransformerParams* reference) {
  cfg.validate();
  validate_peptide(peptide);
  if (!(actor.config == critic.trunk.config))
    fail("InvalidConfig", "actor and critic configs differ");
  const int max_len =
      cfg.sample_max_len > 0 ? cfg.sample_max_len : actor.config.max_len;
  const auto iter_tag = static_cast<std::uint64_t>(iteration);

  IterationStats stats;
  stats.iteration = iteration;

  // (1) Collect |D_k| terminated sequences, resampling as needed.
  std::vector<seq::TcrSequence> dk;
  dk.reserve(static_cast<std::size_t>(cfg.batch));
  std::int64_t drawn = 0, terminated = 0;
  for (std::uint64_t wave = 0; static_cast<int>(dk.size()) < cfg.batch; ++wave) {
    if (wave >= 200) {
      fail("NonTermination", "could not collect " + std::to_string(cfg.batch) +
                                 " terminated samples in 200 waves");
    }
    const int need = cfg.batch - static_cast<int>(dk.size());
    const auto samples =
        lm::sample(actor, need, max_len,
                   num::mix_seed(cfg.seed, iter_tag, kSeedCollect + wave), 1.0);
    for (const auto& s : samples) {
      ++drawn;
      if (s.terminated) {
        ++terminated;
        if (static_cast<int>(dk.size()) < cfg.batch) dk.push_back(s.sequence);
      }
    }
    if (drawn >= cfg.batch &&
        static_cast<double>(terminated) < 0.1 * static_cast<double>(drawn)) {
      fail("NonTermination", "more than 90% of rollouts hit the length cap");
    }
  }
  stats.termination_rate =
      static_cast<double>(terminated) / static_cast<double>(drawn);

  // (2) All scorer traffic happens before any update, so a scorer failure
  // leaves the params untouched. D_k itself is scored exactly once.
  const std::vector<double> rewards = scorer.score(peptide, dk);
  check_scores(rewards, dk.size());
  stats.mean_reward = vec_mean(rewards);

  {
    // Fresh-sample binding of the policy entering this iteration.
    const auto eval = lm::sample(actor, cfg.eval_samples, max_len,
                                 num::mix_seed(cfg.seed, iter_tag, kSeedEval),
                                 1.0);
    std::vector<seq::TcrSequence> eval_seqs;
    eval_seqs.reserve(eval.size());
    for (const auto& s : eval)
      if (s.terminated) eval_seqs.push_back(s.sequence);
    if (eval_seqs.empty())
      fail("NonTermination", "no terminated sequences in the evaluation draw");
    const std::vector<double> eval_scores = scorer.score(peptide, eval_seqs);
    check_scores(eval_scores, eval_seqs.size());
    stats.binding_pct =
        100.0 * binding_percentage(eval_scores, cfg.binding_threshold);
  }

  // (3) Freeze the behavior policy's log-probs and the iteration-start
  // critic values; advantages stay fixed through the epochs.
  const std::vector<double> logp_old = lm::log_prob_batch(actor, dk);
  std::vector<double> v_old(dk.size());
  {
    num::NoGradGuard ng;
    const num::Tensor v = critic_values(critic, dk);
    std::copy(v.values().begin(), v.values().end(), v_old.begin());
  }
  const std::vector<double> adv_raw = advantage(rewards, v_old);
  stats.mean_advantage = vec_mean(adv_raw);

  std::vector<double> adv = adv_raw;
  if (cfg.normalize_advantages) {
    const double m = vec_mean(adv);
    double var = 0.0;
    for (double a : adv) var += (a - m) * (a - m);
    const double sd = std::sqrt(var / static_cast<double>(adv.size()));
    for (double& a : adv) a = (a - m) / (sd + 1e-8);
  }

  std::vector<double> logp_ref;
  const bool use_kl = cfg.kl_coef > 0.0 && reference != nullptr;
  if (use_kl) logp_ref = lm::log_prob_batch(*reference, dk);

  // (4) Clipped-objective ascent / MSE descent over minibatches.
  std::vector<num::Tensor> actor_params = actor.all();
  std::vector<num::Tensor> critic_params = critic.all();
  num::AdamConfig actor_adam;
  actor_adam.lr = cfg.actor_lr;
  num::AdamConfig critic_adam;
  critic_adam.lr = cfg.critic_lr;

  num::Rng perm(num::mix_seed(cfg.seed, iter_tag, kSeedPerm));
  std::vector<std::size_t> order(dk.size());
  std::iota(order.begin(), order.end(), 0);

  std::int64_t clip_hits = 0, clip_total = 0, n_steps = 0;
  double actor_loss_acc = 0.0, critic_loss_acc = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[perm.uniform_int(i + 1)]);
    for (int base = 0; base < cfg.batch; base += cfg.minibatch) {
      const int b = std::min(cfg.minibatch, cfg.batch - base);
      std::vector<seq::TcrSequence> mb_seqs(static_cast<std::size_t>(b));
      std::vector<double> mb_adv(b), mb_logp_old(b), mb_reward(b), mb_g(b),
          mb_ref(use_kl ? b : 0);
      for (int r = 0; r < b; ++r) {
        const std::size_t src = order[static_cast<std::size_t>(base + r)];
        mb_seqs[static_cast<std::size_t>(r)] = dk[src];
        mb_adv[static_cast<std::size_t>(r)] = adv[src];
        mb_logp_old[static_cast<std::size_t>(r)] = logp_old[src];
        mb_reward[static_cast<std::size_t>(r)] = rewards[src];
        mb_g[static_cast<std::size_t>(r)] = g_clip(cfg.clip_eps, adv[src]);
        if (use_kl) mb_ref[static_cast<std::size_t>(r)] = logp_ref[src];
      }

      // Actor: L = −mean(min(ratio·Â, g)) − entropy_coef·H [+ KL penalty].
      num::zero_grads(actor_params);
      lm::PolicyEval ev = lm::policy_eval(actor, mb_seqs);
      const num::Tensor ratio =
          num::exp_elem(num::sub(ev.seq_logp, num::Tensor::from({b}, mb_logp_old)));
      const num::Tensor surrogate = num::min_elem(
          num::mul(ratio, num::Tensor::from({b}, mb_adv)),
          num::Tensor::from({b}, mb_g));
      num::Tensor actor_loss = num::scale(num::mean(surrogate), -1.0);
      if (cfg.entropy_coef != 0.0) {
        actor_loss = num::sub(
            actor_loss,
            num::scale(num::row_entropy_mean(ev.logits, ev.mask), cfg.entropy_coef));
      }
      if (use_kl) {
        const num::Tensor d =
            num::sub(ev.seq_logp, num::Tensor::from({b}, mb_ref));
        actor_loss = num::add(
            actor_loss, num::scale(num::mean(num::mul(d, d)), 0.5 * cfg.kl_coef));
      }
      num::backward(actor_loss);
      num::clip_grad_norm(actor_params, cfg.clip_norm);
      num::adam_step(actor_params, actor_opt, actor_adam);
      actor_loss_acc += actor_loss.item();

      for (int r = 0; r < b; ++r) {
        const double ra = ratio.values()[static_cast<std::size_t>(r)] *
                          mb_adv[static_cast<std::size_t>(r)];
        if (ra > mb_g[static_cast<std::size_t>(r)]) ++clip_hits;
        ++clip_total;
      }

      // Critic: mean squared error against the raw rewards.
      num::zero_grads(critic_params);
      const num::Tensor v = critic_values(critic, mb_seqs);
      const num::Tensor diff =
          num::sub(v, num::Tensor::from({b, 1}, mb_reward));
      const num::Tensor critic_loss = num::mean(num::mul(diff, diff));
      num::backward(critic_loss);
      num::clip_grad_norm(critic_params, cfg.clip_norm);
      num::adam_step(critic_params, critic_opt, critic_adam);
      critic_loss_acc += critic_loss.item();
      ++n_steps;
    }
  }

  stats.clip_fraction = clip_total == 0
                            ? 0.0
                            : static_cast<double>(clip_hits) /
                                  static_cast<double>(clip_total);
  stats.actor_loss = actor_loss_acc / static_cast<double>(n_steps);
  stats.critic_loss = critic_loss_acc / static_cast<double>(n_steps);
  return stats;
}

std::pair<model::TransformerParams, RlTrace> rl_finetune(
    const model::TransformerParams& initial, RewardScorer& scorer,
    const Peptide& peptide, const PpoConfig& cfg) {
  cfg.validate();
  validate_peptide(peptide);

  model::TransformerParams actor = model::clone_params(initial);
  CriticParams critic =
      init_critic(actor.config, num::mix_seed(cfg.seed, 0x637269ull));
  std::vector<num::Tensor> actor_params = actor.all();
  std::vector<num::Tensor> critic_params = critic.all();
  num::AdamState actor_opt = num::AdamState::init(actor_params);
  num::AdamState critic_opt = num::AdamState::init(critic_params);

  model::TransformerParams reference;
  const bool use_kl = cfg.kl_coef > 0.0;
  if (use_kl) reference = model::clone_params(initial);

  RlTrace trace;
  trace.records.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 1; it <= cfg.iterations; ++it) {
    trace.records.push_back(ppo_iteration(actor, critic, actor_opt, critic_opt,
                                          scorer, peptide, cfg, it,
                                          use_kl ? &reference : nullptr));
  }
  return {std::move(actor), std::move(trace)};
}

void save_trace_csv(const RlTrace& trace, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail("Io", "cannot open " + tmp + " for writing");
    out << "iteration,mean_reward,binding_pct,clip_fraction,actor_loss,"
           "critic_loss\n";
    char buf[512];
    for (const auto& r : trace.records) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    r.iteration, r.mean_reward, r.binding_pct, r.clip_fraction,
                    r.actor_loss, r.critic_loss);
      out << buf;
    }
    out.flush();
    if (!out) fail("Io", "write failure on " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail("Io", "cannot move " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace tcrlm::rl
