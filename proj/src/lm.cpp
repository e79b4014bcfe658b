#include "tcrlm/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tcrlm/optim.hpp"
#include "tcrlm/rng.hpp"

namespace tcrlm::lm {

using model::TokenBatch;
using model::TransformerParams;
using num::Tensor;

namespace {

constexpr int kInferChunk = 2048;  // rows per inference forward

// Draws indices with probability proportional to counts, via binary search
// on the cumulative mass.
class WeightedSampler {
 public:
  explicit WeightedSampler(const seq::Repertoire& rep) {
    cum_.reserve(rep.entries.size());
    double acc = 0.0;
    for (const auto& [s, c] : rep.entries) {
      acc += double(c);
      cum_.push_back(acc);
    }
    total_ = acc;
  }

  std::size_t draw(num::Rng& rng) const {
    double u = rng.uniform() * total_;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
    if (it == cum_.end()) --it;
    return std::size_t(it - cum_.begin());
  }

 private:
  std::vector<double> cum_;
  double total_ = 0.0;
};

}  // namespace

TeacherBatch make_teacher_batch(std::span<const seq::TcrSequence> seqs,
                                const model::ModelConfig& cfg) {
  for (const auto& s : seqs) {
    if (int(s.size()) > cfg.max_len - 2) {
      fail("SequenceTooLong", "'" + s + "' has " + std::to_string(s.size()) +
                                  " residues; max_len " +
                                  std::to_string(cfg.max_len) + " allows " +
                                  std::to_string(cfg.max_len - 2));
    }
  }
  TeacherBatch tb;
  tb.input = model::make_batch(seqs, /*append_eos=*/false);
  int B = tb.input.batch, L = tb.input.len;
  tb.targets.assign(std::size_t(B) * L, seq::kPad);
  tb.mask.assign(std::size_t(B) * L, 0);
  for (int r = 0; r < B; ++r) {
    const auto& s = seqs[std::size_t(r)];
    int* tgt = tb.targets.data() + std::size_t(r) * L;
    std::uint8_t* m = tb.mask.data() + std::size_t(r) * L;
    for (std::size_t i = 0; i < s.size(); ++i) {
      tgt[i] = seq::residue_to_id(s[i]);
      m[i] = 1;
    }
    tgt[s.size()] = seq::kEos;
    m[s.size()] = 1;
    tb.n_masked += std::int64_t(s.size()) + 1;
  }
  return tb;
}

PolicyEval policy_eval(const model::TransformerParams& p,
                       std::span<const seq::TcrSequence> seqs) {
  const TeacherBatch tb = make_teacher_batch(seqs, p.config);
  PolicyEval ev;
  ev.logits = model::forward(p, tb.input);
  ev.mask = tb.mask;
  num::Tensor per_pos = num::log_prob_positions(ev.logits, tb.targets, tb.mask);
  ev.seq_logp = num::segment_sum(per_pos, tb.input.batch, tb.input.len);
  return ev;
}

std::pair<TransformerParams, LossTrace> train(const seq::Repertoire& corpus,
                                              const TrainRunConfig& cfg,
                                              const TransformerParams& init) {
  if (corpus.entries.empty()) fail("EmptyCorpus", "training corpus is empty");
  if (cfg.batch <= 0 || cfg.epochs < 0 || cfg.lr <= 0.0 || cfg.report_every <= 0) {
    fail("InvalidConfig", "batch/lr/report_every must be positive, epochs >= 0");
  }
  const auto& mc = init.config;
  for (const auto& [s, c] : corpus.entries) {
    if (int(s.size()) > mc.max_len - 2) {
      fail("SequenceTooLong", "'" + s + "' needs " + std::to_string(s.size() + 2) +
                                  " positions, max_len=" +
                                  std::to_string(mc.max_len));
    }
  }

  TransformerParams params = model::clone_params(init);
  LossTrace trace;
  if (cfg.epochs == 0) return {std::move(params), std::move(trace)};

  std::vector<Tensor> flat = params.all();
  num::AdamState state = num::AdamState::init(flat);
  num::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};

  WeightedSampler sampler(corpus);
  num::Rng rng(cfg.seed);

  std::int64_t steps_per_epoch =
      (corpus.total_count() + cfg.batch - 1) / cfg.batch;
  steps_per_epoch = std::max<std::int64_t>(steps_per_epoch, 1);
  std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  std::vector<seq::TcrSequence> batch_seqs(std::size_t(cfg.batch));
  for (std::int64_t step = 0; step < total_steps; ++step) {
    for (auto& s : batch_seqs) {
      s = corpus.entries[sampler.draw(rng)].first;
    }
    TeacherBatch tb = make_teacher_batch(batch_seqs, mc);
    num::zero_grads(flat);
    Tensor logits = model::forward(params, tb.input);
    Tensor loss = num::cross_entropy(logits, tb.targets, tb.mask);
    num::backward(loss);
    num::clip_grad_norm(flat, cfg.clip_norm);
    num::adam_step(flat, state, adam);
    if (step % cfg.report_every == 0 || step + 1 == total_steps) {
      trace.points.emplace_back(step, loss.item() / double(tb.n_masked));
    }
  }
  return {std::move(params), std::move(trace)};
}

std::vector<double> log_prob_batch(const TransformerParams& p,
                                   std::span<const seq::TcrSequence> seqs) {
  const auto& mc = p.config;
  std::vector<double> out(seqs.size());
  num::NoGradGuard ng;
  for (std::size_t base = 0; base < seqs.size(); base += kInferChunk) {
    std::size_t chunk = std::min<std::size_t>(kInferChunk, seqs.size() - base);
    std::span<const seq::TcrSequence> part(seqs.data() + base, chunk);
    for (const auto& s : part) {
      seq::validate_sequence(s);
      if (int(s.size()) > mc.max_len - 2) {
        fail("TooLong", "'" + s + "' has " + std::to_string(s.size()) +
                            " residues; limit is " +
                            std::to_string(mc.max_len - 2));
      }
    }
    TeacherBatch tb = make_teacher_batch(part, mc);
    Tensor logits = model::forward(p, tb.input);
    auto lv = logits.values();
    int L = tb.input.len, V = mc.vocab;
    for (std::size_t r = 0; r < chunk; ++r) {
      double lp = 0.0;
      for (int i = 0; i < L; ++i) {
        std::size_t row = (r * std::size_t(L) + std::size_t(i));
        if (!tb.mask[row]) break;
        const double* z = lv.data() + row * std::size_t(V);
        double mx = z[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(z[c] - mx);
        lp += z[tb.targets[row]] - mx - std::log(sum);
      }
      out[base + r] = lp;
    }
  }
  return out;
}

double log_prob(const TransformerParams& p, const seq::TcrSequence& s) {
  return log_prob_batch(p, std::span<const seq::TcrSequence>(&s, 1))[0];
}

std::vector<Sample> sample(const TransformerParams& p, int n, int max_len,
                           std::uint64_t seed, double temperature) {
  if (n < 1) fail("InvalidConfig", "sample: n must be >= 1");
  const auto& mc = p.config;
  if (max_len < 3 || max_len > mc.max_len) {
    fail("InvalidConfig", "sample: max_len " + std::to_string(max_len) +
                              " outside [3," + std::to_string(mc.max_len) + "]");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail("InvalidConfig", "sample: temperature must be positive");
  }
  int max_residues = max_len - 2;

  std::vector<Sample> out(static_cast<std::size_t>(n));
  num::NoGradGuard ng;

  for (int base = 0; base < n; base += kInferChunk) {
    int chunk = std::min(kInferChunk, n - base);
    // Per-row state; rows drop out of the working batch as they finish.
    std::vector<std::string> residues(static_cast<std::size_t>(chunk));
    std::vector<num::Rng> streams;
    streams.reserve(std::size_t(chunk));
    for (int i = 0; i < chunk; ++i) {
      streams.push_back(num::Rng::stream(seed, std::uint64_t(base + i)));
    }
    std::vector<int> active(static_cast<std::size_t>(chunk));
    for (int i = 0; i < chunk; ++i) active[std::size_t(i)] = i;

    for (int t = 0; t <= max_residues && !active.empty(); ++t) {
      int B = int(active.size());
      int L = t + 1;  // [SOS] + t residues so far
      TokenBatch tb;
      tb.batch = B;
      tb.len = L;
      tb.ids.assign(std::size_t(B) * L, seq::kPad);
      for (int r = 0; r < B; ++r) {
        int* row = tb.ids.data() + std::size_t(r) * L;
        row[0] = seq::kSos;
        const std::string& res = residues[std::size_t(active[std::size_t(r)])];
        for (int i = 0; i < t; ++i) row[1 + i] = seq::residue_to_id(res[std::size_t(i)]);
      }
      Tensor hidden = model::hidden_features(p, tb);
      // Only the last position of each row feeds the next-token draw.
      std::vector<int> last(static_cast<std::size_t>(B));
      for (int r = 0; r < B; ++r) last[std::size_t(r)] = r * L + (L - 1);
      Tensor logits = model::project_logits(p, num::embedding_lookup(hidden, last));
      auto lv = logits.values();
      int V = mc.vocab;

      std::vector<int> still_active;
      still_active.reserve(active.size());
      std::vector<double> probs(static_cast<std::size_t>(V));
      for (int r = 0; r < B; ++r) {
        int idx = active[std::size_t(r)];
        const double* z = lv.data() + std::size_t(r) * V;
        double mx = -1e300;
        for (int c = 0; c < V; ++c) mx = std::max(mx, z[c] / temperature);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) {
          probs[std::size_t(c)] = std::exp(z[c] / temperature - mx);
          sum += probs[std::size_t(c)];
        }
        (void)sum;  // categorical() renormalizes internally
        std::size_t tok = streams[std::size_t(idx)].categorical(probs);
        if (int(tok) == seq::kEos) {
          out[std::size_t(base + idx)] = {residues[std::size_t(idx)], true};
        } else if (t == max_residues) {
          // Length cap reached; the draw above consumed one stream value so
          // identical prefixes keep identical streams regardless of the cap.
          out[std::size_t(base + idx)] = {residues[std::size_t(idx)], false};
        } else {
          residues[std::size_t(idx)].push_back(seq::id_to_residue(int(tok)));
          still_active.push_back(idx);
        }
      }
      active.swap(still_active);
    }
  }
  return out;
}

Enumeration enumerate_probabilities(const TransformerParams& p,
                                    const std::string& alphabet, int max_len) {
  if (alphabet.empty()) fail("InvalidConfig", "enumeration alphabet is empty");
  std::vector<char> letters;
  for (char c : alphabet) {
    if (seq::residue_to_id(c) < 0) {
      fail("InvalidResidue", std::string("'") + c + "' in alphabet");
    }
    if (std::find(letters.begin(), letters.end(), c) == letters.end()) {
      letters.push_back(c);
    }
  }
  std::sort(letters.begin(), letters.end());
  const auto& mc = p.config;
  if (max_len < 0 || max_len > mc.max_len - 2) {
    fail("InvalidConfig", "enumeration max_len " + std::to_string(max_len) +
                              " outside [0," + std::to_string(mc.max_len - 2) + "]");
  }
  double nodes = 0.0, layer = 1.0;
  for (int l = 0; l <= max_len; ++l) {
    nodes += layer;
    layer *= double(letters.size());
  }
  if (nodes > 1e6) {
    fail("EnumerationTooLarge", std::to_string(std::int64_t(nodes)) +
                                    " prefixes exceed the 1e6 budget");
  }

  Enumeration result;
  num::NoGradGuard ng;

  std::vector<bool> in_alphabet(seq::kVocabSize, false);
  for (char c : letters) in_alphabet[std::size_t(seq::residue_to_id(c))] = true;

  // Level-order walk; each level is one batched forward over equal-length
  // prefixes (chunked to bound memory).
  std::vector<std::pair<std::string, double>> frontier{{"", 1.0}};
  for (int depth = 0; depth <= max_len && !frontier.empty(); ++depth) {
    std::vector<std::pair<std::string, double>> next;
    for (std::size_t base = 0; base < frontier.size(); base += kInferChunk) {
      std::size_t chunk = std::min<std::size_t>(kInferChunk, frontier.size() - base);
      int L = depth + 1;
      TokenBatch tb;
      tb.batch = int(chunk);
      tb.len = L;
      tb.ids.assign(chunk * std::size_t(L), seq::kPad);
      for (std::size_t r = 0; r < chunk; ++r) {
        int* row = tb.ids.data() + r * std::size_t(L);
        row[0] = seq::kSos;
        const std::string& pre = frontier[base + r].first;
        for (int i = 0; i < depth; ++i) {
          row[1 + i] = seq::residue_to_id(pre[std::size_t(i)]);
        }
      }
      Tensor hidden = model::hidden_features(p, tb);
      std::vector<int> last(chunk);
      for (std::size_t r = 0; r < chunk; ++r) last[r] = int(r) * L + (L - 1);
      Tensor logits = model::project_logits(p, num::embedding_lookup(hidden, last));
      auto lv = logits.values();
      int V = mc.vocab;
      for (std::size_t r = 0; r < chunk; ++r) {
        const auto& [prefix, pmass] = frontier[base + r];
        const double* z = lv.data() + r * std::size_t(V);
        double mx = z[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, z[c]);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(z[c] - mx);
        double inv = 1.0 / sum;
        auto prob_of = [&](int c) { return std::exp(z[c] - mx) * inv; };

        result.probs[prefix] = pmass * prob_of(seq::kEos);
        if (depth == max_len) {
          // Any continuation would exceed the cap.
          result.truncation_mass += pmass * (1.0 - prob_of(seq::kEos));
          continue;
        }
        for (int c = seq::kFirstResidue; c < V; ++c) {
          double q = pmass * prob_of(c);
          if (in_alphabet[std::size_t(c)]) {
            next.emplace_back(prefix + seq::id_to_residue(c), q);
          } else {
            result.truncation_mass += q;
          }
        }
      }
    }
    frontier.swap(next);
  }
  return result;
}

void save_samples(const std::vector<Sample>& samples, const std::string& path,
                  std::uint64_t seed, double temperature,
                  const std::string& checkpoint_id) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("Io", "cannot write " + path);
  char tbuf[64];
  std::snprintf(tbuf, sizeof(tbuf), "%.17g", temperature);
  out << "# seed: " << seed << "\n";
  out << "# temperature: " << tbuf << "\n";
  out << "# checkpoint: " << checkpoint_id << "\n";
  for (const auto& s : samples) {
    if (!s.terminated) out << '!';
    out << s.sequence << '\n';
  }
  if (!out.flush()) fail("Io", "write failure on " + path);
}

std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("Io", "cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // a blank line is the empty sequence (EOS drawn first), not a separator
    if (!line.empty() && line[0] == '#') continue;
    Sample s;
    s.terminated = line.empty() || line[0] != '!';
    s.sequence = s.terminated ? line : line.substr(1);
    try {
      seq::validate_sequence(s.sequence);
    } catch (const Error& e) {
      fail("ParseError", "line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  if (in.bad()) fail("Io", "read failure on " + path);
  return out;
}

}  // namespace tcrlm::lm
