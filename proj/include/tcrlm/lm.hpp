#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcrlm/model.hpp"
#include "tcrlm/seqcore.hpp"

namespace tcrlm::lm {

struct TrainRunConfig {
  int batch = 64;
  int epochs = 3;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  int report_every = 1;  // steps between LossTrace points
};

// (global step, mean NLL per masked token in nats)
struct LossTrace {
  std::vector<std::pair<std::int64_t, double>> points;
};

// Teacher-forcing view of a batch: inputs are [SOS, residues...], targets
// the residues shifted left with EOS appended, mask 1 on real positions.
struct TeacherBatch {
  model::TokenBatch input;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  std::int64_t n_masked = 0;
};

TeacherBatch make_teacher_batch(std::span<const seq::TcrSequence> seqs,
                                const model::ModelConfig& cfg);

// Per-sequence log p(seq)+log p(EOS|seq) as a tape-connected [B] tensor,
// with the logits it came from (for entropy terms).
struct PolicyEval {
  num::Tensor seq_logp;
  num::Tensor logits;
  std::vector<std::uint8_t> mask;
};

PolicyEval policy_eval(const model::TransformerParams& p,
                       std::span<const seq::TcrSequence> seqs);

// Minimizes the summed NLL (teacher forcing, PAD-masked; the EOS prediction
// is part of the loss) with Adam + global-norm clipping. Batch slots are
// drawn with probability proportional to repertoire counts. The returned
// params are a fresh copy; `init` is untouched.
std::pair<model::TransformerParams, LossTrace> train(
    const seq::Repertoire& corpus, const TrainRunConfig& cfg,
    const model::TransformerParams& init);

// log p(seq) + log p(EOS | seq) in nats, via one teacher-forced pass.
double log_prob(const model::TransformerParams& p, const seq::TcrSequence& s);
std::vector<double> log_prob_batch(const model::TransformerParams& p,
                                   std::span<const seq::TcrSequence> seqs);

struct Sample {
  seq::TcrSequence sequence;
  bool terminated = false;  // false: hit the length cap before EOS
};

// Autoregressive draws over the 21-symbol support. Each sample index gets
// its own RNG stream derived from (seed, index), so results are identical
// under any batching or thread count. Caps at max_len−2 residues.
std::vector<Sample> sample(const model::TransformerParams& p, int n,
                           int max_len, std::uint64_t seed,
                           double temperature = 1.0);

struct Enumeration {
  std::map<seq::TcrSequence, double> probs;  // includes the empty sequence
  // Mass escaping the enumeration: branches to residues outside the
  // restricted alphabet plus continuations beyond max_len. The law of total
  // probability makes Σ probs + truncation_mass = 1.
  double truncation_mass = 0.0;
};

// Exact p(x) for every sequence over `alphabet` up to max_len residues,
// by a batched walk of the prefix tree.
Enumeration enumerate_probabilities(const model::TransformerParams& p,
                                    const std::string& alphabet, int max_len);

// Sample file: '#' header lines (seed, temperature, checkpoint id), one
// sequence per line, non-terminated samples prefixed '!'.
void save_samples(const std::vector<Sample>& samples, const std::string& path,
                  std::uint64_t seed, double temperature,
                  const std::string& checkpoint_id);
std::vector<Sample> load_samples(const std::string& path);

}  // namespace tcrlm::lm
