#include "tcrlm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tcrlm/error.hpp"
#include "tcrlm/lm.hpp"

namespace tcrlm::analysis {

EmpiricalDistribution empirical_distribution(const seq::Repertoire& rep) {
  if (rep.entries.empty()) fail("EmptyCorpus", "repertoire has no sequences");
  std::map<seq::TcrSequence, std::int64_t> counts;
  std::int64_t total = 0;
  for (const auto& [s, c] : rep.entries) {
    counts[s] += c;
    total += c;
  }
  EmpiricalDistribution d;
  d.total_observations = total;
  d.support.reserve(counts.size());
  d.probs.reserve(counts.size());
  for (const auto& [s, c] : counts) {
    d.support.push_back(s);
    d.probs.push_back(static_cast<double>(c) / static_cast<double>(total));
  }
  return d;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    fail("LengthMismatch", "pearson inputs differ: " + std::to_string(xs.size()) +
                               " vs " + std::to_string(ys.size()));
  const std::size_t n = xs.size();
  if (n < 2) fail("ZeroVariance", "need at least 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) fail("ZeroVariance", "an input is constant");
  return sxy / std::sqrt(sxx * syy);
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    fail("LengthMismatch", "distributions differ: " + std::to_string(p.size()) +
                               " vs " + std::to_string(q.size()));
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0))
      fail("NegativeEntry", "p[" + std::to_string(i) + "] = " + std::to_string(p[i]));
    if (!(q[i] >= 0.0))
      fail("NegativeEntry", "q[" + std::to_string(i) + "] = " + std::to_string(q[i]));
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-9)
    fail("NotNormalized", "p sums to " + std::to_string(sp));
  if (std::abs(sq - 1.0) > 1e-9)
    fail("NotNormalized", "q sums to " + std::to_string(sq));
  // canonical operand order: swapped arguments run the identical float
  // expression sequence, so symmetry is exact by construction
  if (std::lexicographical_compare(q.begin(), q.end(), p.begin(), p.end()))
    std::swap(p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return acc;
}

namespace {

// exp(lp - logsumexp(lp)): normalized probabilities that survive even when
// every raw exp(lp) would underflow.
std::vector<double> renormalize_log(const std::vector<double>& lp) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : lp) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : lp) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) out[i] = std::exp(lp[i] - lz);
  return out;
}

}  // namespace

double model_vs_data_divergence(const model::TransformerParams& params,
                                const seq::Repertoire& test) {
  const EmpiricalDistribution emp = empirical_distribution(test);
  const std::vector<double> lp = lm::log_prob_batch(params, emp.support);
  const std::vector<double> model_p = renormalize_log(lp);
  return js_divergence(model_p, emp.probs);
}

DivergenceMatrix divergence_matrix(
    std::span<const model::TransformerParams> models,
    std::span<const seq::Repertoire> eval_sets,
    std::span<const std::string> labels) {
  const std::size_t n = models.size();
  if (n == 0) fail("EmptyCorpus", "no models");
  if (eval_sets.size() != n || labels.size() != n)
    fail("LengthMismatch", "models/eval_sets/labels must align");

  // Global support union, sorted; each model is scored on it once and pairs
  // renormalize over their own sub-union.
  std::map<seq::TcrSequence, std::size_t> index;
  std::vector<std::vector<std::size_t>> members(n);  // per eval set, global ids
  {
    std::vector<EmpiricalDistribution> dists;
    dists.reserve(n);
    for (const auto& r : eval_sets) dists.push_back(empirical_distribution(r));
    for (const auto& d : dists)
      for (const auto& s : d.support) index.emplace(s, 0);
    std::size_t k = 0;
    for (auto& [s, id] : index) id = k++;
    for (std::size_t i = 0; i < n; ++i)
      for (const auto& s : dists[i].support)
        members[i].push_back(index.at(s));
  }
  std::vector<seq::TcrSequence> all_seqs(index.size());
  for (const auto& [s, id] : index) all_seqs[id] = s;

  std::vector<std::vector<double>> lp(n);
  for (std::size_t i = 0; i < n; ++i)
    lp[i] = lm::log_prob_batch(models[i], all_seqs);

  DivergenceMatrix m;
  m.labels.assign(labels.begin(), labels.end());
  m.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      std::vector<std::size_t> ids;
      ids.reserve(members[i].size() + members[j].size());
      ids.insert(ids.end(), members[i].begin(), members[i].end());
      ids.insert(ids.end(), members[j].begin(), members[j].end());
      std::sort(ids.begin(), ids.end());
      ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
      std::vector<double> li(ids.size()), lj(ids.size());
      for (std::size_t k = 0; k < ids.size(); ++k) {
        li[k] = lp[i][ids[k]];
        lj[k] = lp[j][ids[k]];
      }
      const double d = js_divergence(renormalize_log(li), renormalize_log(lj));
      m.values[i * n + j] = d;
      m.values[j * n + i] = d;
    }
  }
  return m;
}

double overlap_fraction(std::span<const seq::TcrSequence> generated,
                        const std::unordered_set<seq::TcrSequence>& known) {
  if (generated.empty()) fail("EmptyGenerated", "no generated sequences");
  if (known.empty()) fail("EmptyCorpus", "known set is empty");
  std::int64_t hits = 0;
  for (const auto& s : generated)
    if (known.count(s)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(generated.size());
}

CompareReport compare_model_to_repertoire(const model::TransformerParams& params,
                                          const seq::Repertoire& test,
                                          std::int64_t min_count) {
  const EmpiricalDistribution emp = empirical_distribution(test);
  std::map<seq::TcrSequence, std::int64_t> counts;
  for (const auto& [s, c] : test.entries) counts[s] += c;

  const std::vector<double> lp = lm::log_prob_batch(params, emp.support);
  const std::vector<double> model_p = renormalize_log(lp);

  CompareReport rep;
  rep.d_js = js_divergence(model_p, emp.probs);

  constexpr double kLn10 = 2.302585092994046;
  std::vector<double> xs, ys;
  rep.scatter.reserve(emp.support.size());
  for (std::size_t i = 0; i < emp.support.size(); ++i) {
    const std::int64_t c = counts.at(emp.support[i]);
    const double p_infer = std::exp(lp[i]);
    rep.scatter.emplace_back(emp.support[i], c, emp.probs[i], p_infer);
    if (c >= min_count) {
      xs.push_back(std::log10(emp.probs[i]));
      ys.push_back(lp[i] / kLn10);  // log10 of the raw model probability
    }
  }
  rep.n_correlated = static_cast<std::int64_t>(xs.size());
  rep.pearson_log10 = pearson(xs, ys);
  return rep;
}

}  // namespace tcrlm::analysis
