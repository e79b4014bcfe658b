#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tcrlm/model.hpp"
#include "tcrlm/seqcore.hpp"
#include "tcrlm/tensor.hpp"

namespace tcrlm::classify {

// Dense feature rows: one row per sequence, q = max_len * d_model columns
// (the transformer's final hidden states, positions concatenated in order;
// rows shorter than max_len are padded before encoding so every row has the
// same width).
struct FeatureMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> values;  // row-major

  std::span<const double> row(std::int64_t r) const {
    return {values.data() + r * cols, static_cast<std::size_t>(cols)};
  }
};

FeatureMatrix extract_features(const model::TransformerParams& params,
                               std::span<const seq::TcrSequence> seqs);

struct ClassifierConfig {
  int hidden1 = 256;
  int hidden2 = 64;
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 1;
};

// Two-class MLP head: q -> hidden1 -> hidden2 -> 2, ReLU between layers,
// softmax cross-entropy loss.
struct ClassifierParams {
  num::Tensor w1, b1, w2, b2, w3, b3;
  std::vector<num::Tensor> all() { return {w1, b1, w2, b2, w3, b3}; }
};

ClassifierParams train_classifier(const FeatureMatrix& x,
                                  std::span<const int> labels,
                                  const ClassifierConfig& cfg);

// Probability of class 1 per row.
std::vector<double> predict(const ClassifierParams& params,
                            const FeatureMatrix& x);

// Mann-Whitney AUC with average ranks on ties.
double auc(std::span<const double> scores, std::span<const int> labels);

struct CvReport {
  double mean_auc = 0.0;
  double std_auc = 0.0;  // population std over folds
  std::vector<double> fold_aucs;
};

// Stratified k-fold: per-class index lists are shuffled once (seeded), then
// dealt round-robin into folds, so partitions are deterministic.
CvReport kfold_cv(const FeatureMatrix& x, std::span<const int> labels, int k,
                  const ClassifierConfig& cfg);

// "sequence<TAB>label" per line, label 0 or 1; same comment/blank rules as
// repertoire files.
std::vector<std::pair<seq::TcrSequence, int>> load_labeled(
    const std::string& path);
void save_labeled(const std::string& path,
                  std::span<const std::pair<seq::TcrSequence, int>> rows);

}  // namespace tcrlm::classify
