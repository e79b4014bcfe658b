#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tcrlm/lm.hpp"
#include "tcrlm/model.hpp"
#include "tcrlm/optim.hpp"
#include "tcrlm/seqcore.hpp"

namespace tcrlm::rl {

struct Peptide {
  std::string residues;
};

// Throws InvalidResidue / EmptyCorpus for malformed peptides.
void validate_peptide(const Peptide& p);

// Any scorer mapping (peptide, TCR batch) -> one value in [0,1] per TCR.
class RewardScorer {
 public:
  virtual ~RewardScorer() = default;
  virtual std::vector<double> score(const Peptide& peptide,
                                    std::span<const seq::TcrSequence> tcrs) = 0;
};

// The middle k residues of the peptide; the synthetic binding rule used by
// MotifReward and the bundled mock scorer.
std::string peptide_motif(const std::string& peptide, int k = 3);

// Best length-k window match fraction; 0 when the sequence is shorter
// than the motif.
double motif_score(const std::string& motif, const seq::TcrSequence& tcr);

class MotifReward : public RewardScorer {
 public:
  MotifReward(const Peptide& peptide, int k = 3);
  explicit MotifReward(std::string motif) : motif_(std::move(motif)) {}

  const std::string& motif() const { return motif_; }
  std::vector<double> score(const Peptide&,
                            std::span<const seq::TcrSequence> tcrs) override;

 private:
  std::string motif_;
};

// HTTP client for the /score wire protocol. Retries transient failures
// (connection, timeout, 5xx) with exponential backoff; malformed responses
// fail immediately.
class RemoteScorer : public RewardScorer {
 public:
  RemoteScorer(std::string host, int port);

  std::vector<double> score(const Peptide& peptide,
                            std::span<const seq::TcrSequence> tcrs) override;

  double timeout_s = 30.0;
  int retries = 3;            // additional attempts after the first
  double backoff_base_s = 0.5;

 private:
  std::string host_;
  int port_ = 0;
};

// Same trunk architecture as the actor; scalar value read at the hidden
// state of the EOS position.
struct CriticParams {
  model::TransformerParams trunk;
  num::Tensor vw;  // [d_model, 1]
  num::Tensor vb;  // [1]

  std::vector<num::Tensor> all() const;
};

CriticParams init_critic(const model::ModelConfig& cfg, std::uint64_t seed);
CriticParams clone_critic(const CriticParams& c);

// Values V(x) for a batch, tape-connected (wrap in NoGradGuard to skip).
num::Tensor critic_values(const CriticParams& critic,
                          std::span<const seq::TcrSequence> seqs);

// min(ratio·A, g(eps,A)), g(eps,A) = (1+eps)A for A >= 0 else (1-eps)A.
double clipped_objective(double ratio, double advantage, double eps);
double g_clip(double eps, double advantage);

// Elementwise reward - value.
std::vector<double> advantage(std::span<const double> reward,
                              std::span<const double> value);

// Strict inequality: |{s > threshold}| / n.
double binding_percentage(std::span<const double> scores, double threshold);

struct PpoConfig {
  double clip_eps = 0.2;
  int batch = 256;        // |D_k|
  int epochs = 4;         // update passes per collected batch
  int minibatch = 64;
  double actor_lr = 1e-4;
  double critic_lr = 5e-3;
  double entropy_coef = 0.01;
  double kl_coef = 0.0;   // reference-KL regularizer, 0 = off
  int iterations = 200;
  std::uint64_t seed = 1;
  double binding_threshold = 0.5;
  int eval_samples = 1000;  // fresh samples per iteration for binding_pct
  bool normalize_advantages = true;
  double clip_norm = 1.0;
  // Token-position cap for rollouts (residue cap + 2, as in generation);
  // 0 = the model's max_len.
  int sample_max_len = 0;

  void validate() const;  // InvalidConfig
};

struct IterationStats {
  int iteration = 0;        // 1-based
  double mean_reward = 0.0;
  double binding_pct = 0.0;  // of the policy entering this iteration
  double mean_advantage = 0.0;
  double clip_fraction = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double termination_rate = 0.0;
};

struct RlTrace {
  std::vector<IterationStats> records;
};

// One PPO iteration (Eq.-10-style clipped ascent + critic MSE descent).
// All scorer traffic happens before any parameter update, so a scorer
// failure leaves actor/critic untouched. `reference` enables the optional
// KL regularizer when kl_coef > 0 (pass nullptr otherwise).
IterationStats ppo_iteration(model::TransformerParams& actor,
                             CriticParams& critic, num::AdamState& actor_opt,
                             num::AdamState& critic_opt, RewardScorer& scorer,
                             const Peptide& peptide, const PpoConfig& cfg,
                             int iteration,
                             const model::TransformerParams* reference = nullptr);

// Full fine-tune loop: clones the initial actor, builds a fresh critic and
// optimizer states, runs cfg.iterations. Deterministic per seed with a
// deterministic scorer.
std::pair<model::TransformerParams, RlTrace> rl_finetune(
    const model::TransformerParams& initial, RewardScorer& scorer,
    const Peptide& peptide, const PpoConfig& cfg);

void save_trace_csv(const RlTrace& trace, const std::string& path);

}  // namespace tcrlm::rl
