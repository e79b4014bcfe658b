#pragma once

#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "tcrlm/model.hpp"
#include "tcrlm/seqcore.hpp"

namespace tcrlm::analysis {

struct EmpiricalDistribution {
  // Support is sorted lexicographically so that any two distributions built
  // over the same sequences align index-by-index (and divergence sums run
  // in one canonical order).
  std::vector<seq::TcrSequence> support;
  std::vector<double> probs;
  std::int64_t total_observations = 0;
};

EmpiricalDistribution empirical_distribution(const seq::Repertoire& rep);

// Sample Pearson correlation. Throws LengthMismatch / ZeroVariance.
double pearson(std::span<const double> xs, std::span<const double> ys);

// Jensen-Shannon divergence, base-2 logs (range [0,1]); M = ½(p+q);
// zero-probability terms contribute exactly 0.
double js_divergence(std::span<const double> p, std::span<const double> q);

// Model probabilities renormalized over the test support (log-sum-exp),
// then JS against the empirical distribution.
double model_vs_data_divergence(const model::TransformerParams& params,
                                const seq::Repertoire& test);

struct DivergenceMatrix {
  std::vector<std::string> labels;
  std::vector<double> values;  // n×n row-major

  double at(std::size_t i, std::size_t j) const {
    return values[i * labels.size() + j];
  }
};

// Entry (i,j): JS between model i and model j probability vectors, each
// renormalized over the union of eval sets i and j. Entries are computed
// once for i<j and mirrored, so the matrix is symmetric bit-for-bit.
DivergenceMatrix divergence_matrix(
    std::span<const model::TransformerParams> models,
    std::span<const seq::Repertoire> eval_sets,
    std::span<const std::string> labels);

// Multiset numerator: every generated entry counts, duplicates included.
double overlap_fraction(std::span<const seq::TcrSequence> generated,
                        const std::unordered_set<seq::TcrSequence>& known);

// §4.1-style concordance of one checkpoint against a held-out repertoire.
struct CompareReport {
  double pearson_log10 = 0.0;  // over sequences with count >= min_count
  double d_js = 0.0;           // model-vs-data, renormalized support
  std::int64_t n_correlated = 0;
  // Scatter rows for every support sequence: (sequence, count, P_data, P_infer).
  std::vector<std::tuple<seq::TcrSequence, std::int64_t, double, double>> scatter;
};

CompareReport compare_model_to_repertoire(const model::TransformerParams& params,
                                          const seq::Repertoire& test,
                                          std::int64_t min_count = 2);

}  // namespace tcrlm::analysis
