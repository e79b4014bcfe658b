#include "tcrlm/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "tcrlm/error.hpp"
#include "tcrlm/optim.hpp"
#include "tcrlm/rng.hpp"

namespace tcrlm::classify {

namespace {
constexpr std::int64_t kChunk = 256;
}

FeatureMatrix extract_features(const model::TransformerParams& params,
                               std::span<const seq::TcrSequence> seqs) {
  if (seqs.empty()) fail("EmptyCorpus", "no sequences to encode");
  const auto& cfg = params.config;
  num::NoGradGuard ng;

  FeatureMatrix f;
  f.rows = static_cast<std::int64_t>(seqs.size());
  f.cols = static_cast<std::int64_t>(cfg.max_len) * cfg.d_model;
  f.values.assign(f.rows * f.cols, 0.0);

  for (std::int64_t base = 0; base < f.rows; base += kChunk) {
    const std::int64_t b = std::min(kChunk, f.rows - base);
    std::vector<seq::TcrSequence> part(seqs.begin() + base,
                                       seqs.begin() + base + b);
    // Pad every row to max_len so feature columns mean the same position
    // regardless of batch composition.
    const model::TokenBatch batch =
        model::make_batch(part, /*append_eos=*/true, cfg.max_len);
    const num::Tensor hidden = model::hidden_features(params, batch);
    const double* h = hidden.values().data();
    for (std::int64_t r = 0; r < b; ++r)
      std::memcpy(f.values.data() + (base + r) * f.cols,
                  h + r * f.cols, sizeof(double) * f.cols);
  }
  return f;
}

namespace {

num::Tensor gather_rows(const FeatureMatrix& x, std::span<const std::int64_t> idx) {
  std::vector<double> v(idx.size() * x.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(v.data() + r * x.cols, x.values.data() + idx[r] * x.cols,
                sizeof(double) * x.cols);
  return num::Tensor::from(
      {static_cast<int>(idx.size()), static_cast<int>(x.cols)}, std::move(v));
}

num::Tensor mlp_logits(const ClassifierParams& p, const num::Tensor& x) {
  num::Tensor h1 = num::relu(num::add_row_bias(num::matmul(x, p.w1), p.b1));
  num::Tensor h2 = num::relu(num::add_row_bias(num::matmul(h1, p.w2), p.b2));
  return num::add_row_bias(num::matmul(h2, p.w3), p.b3);
}

void check_labels(std::span<const int> labels, std::int64_t rows) {
  if (static_cast<std::int64_t>(labels.size()) != rows)
    fail("LengthMismatch", "labels: " + std::to_string(labels.size()) +
                               ", rows: " + std::to_string(rows));
  std::int64_t n0 = 0, n1 = 0;
  for (int y : labels) {
    if (y == 0)
      ++n0;
    else if (y == 1)
      ++n1;
    else
      fail("DegenerateLabels", "label must be 0 or 1, got " + std::to_string(y));
  }
  if (n0 == 0 || n1 == 0) fail("DegenerateLabels", "both classes required");
}

}  // namespace

ClassifierParams train_classifier(const FeatureMatrix& x,
                                  std::span<const int> labels,
                                  const ClassifierConfig& cfg) {
  check_labels(labels, x.rows);
  if (cfg.hidden1 <= 0 || cfg.hidden2 <= 0 || cfg.epochs < 0 || cfg.batch <= 0 ||
      !(cfg.lr > 0.0))
    fail("InvalidConfig", "classifier hyperparameters must be positive");

  num::Rng gen(cfg.seed);
  auto init = [&](int r, int c) {
    std::vector<double> v(static_cast<std::size_t>(r) * static_cast<std::size_t>(c));
    for (auto& e : v) e = gen.normal(0.0, 0.02);
    return num::Tensor::from({r, c}, std::move(v), /*requires_grad=*/true);
  };
  auto zeros_param = [&](int c) {
    return num::Tensor::zeros({c}, /*requires_grad=*/true);
  };

  ClassifierParams p;
  p.w1 = init(static_cast<int>(x.cols), cfg.hidden1);
  p.b1 = zeros_param(cfg.hidden1);
  p.w2 = init(cfg.hidden1, cfg.hidden2);
  p.b2 = zeros_param(cfg.hidden2);
  p.w3 = init(cfg.hidden2, 2);
  p.b3 = zeros_param(2);

  std::vector<num::Tensor> params = p.all();
  num::AdamConfig adam;
  adam.lr = cfg.lr;
  num::AdamState state = num::AdamState::init(params);

  std::vector<std::int64_t> order(x.rows);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::int64_t i = x.rows - 1; i > 0; --i)
      std::swap(order[i], order[gen.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    for (std::int64_t base = 0; base < x.rows; base += cfg.batch) {
      const std::int64_t b = std::min<std::int64_t>(cfg.batch, x.rows - base);
      std::span<const std::int64_t> idx(order.data() + base,
                                        static_cast<std::size_t>(b));
      num::Tensor xb = gather_rows(x, idx);
      std::vector<int> yb(static_cast<std::size_t>(b));
      std::vector<std::uint8_t> mb(static_cast<std::size_t>(b), 1);
      for (std::int64_t r = 0; r < b; ++r) yb[static_cast<std::size_t>(r)] = labels[idx[r]];

      num::zero_grads(params);
      num::Tensor logits = mlp_logits(p, xb);
      num::Tensor loss = num::scale(
          num::sum(num::log_prob_positions(logits, yb, mb)),
          -1.0 / static_cast<double>(b));
      num::backward(loss);
      num::adam_step(params, state, adam);
    }
  }
  return p;
}

std::vector<double> predict(const ClassifierParams& params,
                            const FeatureMatrix& x) {
  if (params.w1.shape()[0] != x.cols)
    fail("ShapeMismatch", "classifier expects " +
                              std::to_string(params.w1.shape()[0]) +
                              " features, matrix has " + std::to_string(x.cols));
  num::NoGradGuard ng;
  std::vector<double> out;
  out.reserve(x.rows);
  for (std::int64_t base = 0; base < x.rows; base += kChunk) {
    const std::int64_t b = std::min(kChunk, x.rows - base);
    std::vector<std::int64_t> idx(b);
    std::iota(idx.begin(), idx.end(), base);
    num::Tensor logits = mlp_logits(params, gather_rows(x, idx));
    num::Tensor probs = num::row_softmax(logits);
    for (std::int64_t r = 0; r < b; ++r) out.push_back(probs.values()[r * 2 + 1]);
  }
  return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    fail("LengthMismatch", "scores: " + std::to_string(scores.size()) +
                               ", labels: " + std::to_string(labels.size()));
  std::int64_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y == 1)
      ++n_pos;
    else if (y == 0)
      ++n_neg;
    else
      fail("DegenerateLabels", "label must be 0 or 1, got " + std::to_string(y));
  }
  if (n_pos == 0 || n_neg == 0) fail("SingleClass", "AUC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks across tie groups, then Mann-Whitney U from the positive
  // rank sum.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

CvReport kfold_cv(const FeatureMatrix& x, std::span<const int> labels, int k,
                  const ClassifierConfig& cfg) {
  check_labels(labels, x.rows);
  if (k < 2) fail("InvalidConfig", "k must be >= 2, got " + std::to_string(k));

  std::vector<std::int64_t> by_class[2];
  for (std::int64_t i = 0; i < x.rows; ++i)
    by_class[labels[i]].push_back(i);
  for (int c = 0; c < 2; ++c)
    if (static_cast<int>(by_class[c].size()) < k)
      fail("TooFewPerClass", "class " + std::to_string(c) + " has " +
                                 std::to_string(by_class[c].size()) +
                                 " examples, need >= " + std::to_string(k));

  num::Rng gen(cfg.seed);
  std::vector<int> fold_of(x.rows, 0);
  for (int c = 0; c < 2; ++c) {
    auto& idx = by_class[c];
    for (std::int64_t i = static_cast<std::int64_t>(idx.size()) - 1; i > 0; --i)
      std::swap(idx[i], idx[gen.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    for (std::size_t i = 0; i < idx.size(); ++i)
      fold_of[idx[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  }

  CvReport report;
  for (int f = 0; f < k; ++f) {
    std::vector<std::int64_t> train_idx, test_idx;
    for (std::int64_t i = 0; i < x.rows; ++i)
      (fold_of[i] == f ? test_idx : train_idx).push_back(i);

    FeatureMatrix xt;
    xt.rows = static_cast<std::int64_t>(train_idx.size());
    xt.cols = x.cols;
    xt.values.resize(xt.rows * xt.cols);
    std::vector<int> yt(train_idx.size());
    for (std::size_t r = 0; r < train_idx.size(); ++r) {
      std::memcpy(xt.values.data() + static_cast<std::int64_t>(r) * x.cols,
                  x.values.data() + train_idx[r] * x.cols,
                  sizeof(double) * x.cols);
      yt[r] = labels[train_idx[r]];
    }

    ClassifierConfig fold_cfg = cfg;
    fold_cfg.seed = num::mix_seed(cfg.seed, static_cast<std::uint64_t>(f) + 1);
    ClassifierParams p = train_classifier(xt, yt, fold_cfg);

    FeatureMatrix xv;
    xv.rows = static_cast<std::int64_t>(test_idx.size());
    xv.cols = x.cols;
    xv.values.resize(xv.rows * xv.cols);
    std::vector<int> yv(test_idx.size());
    for (std::size_t r = 0; r < test_idx.size(); ++r) {
      std::memcpy(xv.values.data() + static_cast<std::int64_t>(r) * x.cols,
                  x.values.data() + test_idx[r] * x.cols,
                  sizeof(double) * x.cols);
      yv[r] = labels[test_idx[r]];
    }
    report.fold_aucs.push_back(auc(predict(p, xv), yv));
  }

  double mean = 0.0;
  for (double a : report.fold_aucs) mean += a;
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (double a : report.fold_aucs) var += (a - mean) * (a - mean);
  report.mean_auc = mean;
  report.std_auc = std::sqrt(var / static_cast<double>(k));
  return report;
}

std::vector<std::pair<seq::TcrSequence, int>> load_labeled(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("Io", "cannot open " + path);
  std::vector<std::pair<seq::TcrSequence, int>> rows;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto where = "line " + std::to_string(line_no);
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      fail("ParseError", where + ": expected sequence<TAB>label");
    const std::string s = line.substr(0, tab);
    const std::string lab = line.substr(tab + 1);
    if (s.empty()) fail("ParseError", where + ": empty sequence");
    for (char ch : s)
      if (seq::residue_to_id(ch) < 0)
        fail("ParseError", where + ": invalid residue '" + std::string(1, ch) + "'");
    if (lab != "0" && lab != "1")
      fail("ParseError", where + ": label must be 0 or 1, got '" + lab + "'");
    rows.emplace_back(s, lab == "1" ? 1 : 0);
  }
  if (in.bad()) fail("Io", "read failure on " + path);
  return rows;
}

void save_labeled(const std::string& path,
                  std::span<const std::pair<seq::TcrSequence, int>> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("Io", "cannot open " + path + " for writing");
  for (const auto& [s, y] : rows) out << s << '\t' << y << '\n';
  out.flush();
  if (!out) fail("Io", "write failure on " + path);
}

}  // namespace tcrlm::classify
