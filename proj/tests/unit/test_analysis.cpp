#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <unordered_set>

#include "support/test_util.hpp"
#include "tcrlm/analysis.hpp"
#include "tcrlm/lm.hpp"
#include "tcrlm/model.hpp"
#include "tcrlm/rng.hpp"

using namespace tcrlm;
using testutil::category_of;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 16;
  cfg.max_len = 10;
  return cfg;
}

std::vector<double> random_dist(num::Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& x : p) {
    x = rng.uniform() + 1e-3;
    total += x;
  }
  for (auto& x : p) x /= total;
  // force exact normalization within the validator's tolerance
  return p;
}

}  // namespace

TEST_CASE("empirical distribution: counts to probabilities, sorted support") {
  const auto rep = seq::Repertoire::from_sequences(
      {{"GG", 2}, {"AC", 1}, {"CA", 1}});
  const auto d = analysis::empirical_distribution(rep);
  REQUIRE(d.support.size() == 3);
  CHECK(d.support[0] == "AC");  // lexicographic order
  CHECK(d.support[1] == "CA");
  CHECK(d.support[2] == "GG");
  CHECK(d.probs[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(d.probs[2] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(d.total_observations == 4);
  CHECK(category_of([] {
          analysis::empirical_distribution(seq::Repertoire{});
        }) == "EmptyCorpus");
}

TEST_CASE("pearson: exact small cases and input validation") {
  CHECK(analysis::pearson(std::vector<double>{1, 2, 3},
                          std::vector<double>{2, 4, 6}) == 1.0);
  CHECK(analysis::pearson(std::vector<double>{1, 2, 3},
                          std::vector<double>{3, 2, 1}) == -1.0);
  // hand derivation: dx=(-1.5,-.5,.5,1.5), dy=(-1.5,.5,-.5,1.5),
  // cov=4, var_x=var_y=5, r = 4/5
  CHECK(analysis::pearson(std::vector<double>{1, 2, 3, 4},
                          std::vector<double>{1, 3, 2, 4}) ==
        doctest::Approx(0.8).epsilon(1e-15));

  CHECK(category_of([] {
          analysis::pearson(std::vector<double>{1, 2},
                            std::vector<double>{1, 2, 3});
        }) == "LengthMismatch");
  CHECK(category_of([] {
          analysis::pearson(std::vector<double>{1}, std::vector<double>{1});
        }) == "ZeroVariance");
  CHECK(category_of([] {
          analysis::pearson(std::vector<double>{2, 2, 2},
                            std::vector<double>{1, 2, 3});
        }) == "ZeroVariance");
}

TEST_CASE("pearson is invariant under positive affine maps") {
  num::Rng rng(31);
  std::vector<double> x(40), y(40), xs(40), ys(40);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    y[i] = 0.7 * x[i] + rng.normal();
    xs[i] = 3.0 * x[i] + 11.0;
    ys[i] = 0.25 * y[i] - 2.0;
  }
  const double r = analysis::pearson(x, y);
  CHECK(analysis::pearson(xs, ys) == doctest::Approx(r).epsilon(1e-12));
  for (auto& v : xs) v = -v;  // one negative scale flips the sign
  CHECK(analysis::pearson(xs, ys) == doctest::Approx(-r).epsilon(1e-12));
}

TEST_CASE("JS divergence: closed forms, symmetry, bounds, validation") {
  SUBCASE("identical distributions give exactly zero") {
    const std::vector<double> p{0.2, 0.3, 0.5};
    CHECK(analysis::js_divergence(p, p) == 0.0);
  }

  SUBCASE("disjoint point masses give exactly one bit") {
    const std::vector<double> p{1.0, 0.0};
    const std::vector<double> q{0.0, 1.0};
    CHECK(analysis::js_divergence(p, q) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("hand-derived asymmetric case") {
    // M = (0.75, 0.25); KL(p||M) = log2(4/3); KL(q||M) =
    // 0.5 log2(2/3) + 0.5 log2(2) -> JS = 0.31127812445913283
    const double d = analysis::js_divergence(std::vector<double>{1.0, 0.0},
                                             std::vector<double>{0.5, 0.5});
    CHECK(d == doctest::Approx(0.31127812445913283).epsilon(1e-12));
    CHECK(std::abs(d - 0.3113) < 1e-4);
  }

  SUBCASE("symmetry is bit-exact on 1000 random pairs") {
    num::Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
      const auto p = random_dist(rng, 1 + trial % 16);
      const auto q = random_dist(rng, 1 + trial % 16);
      const double a = analysis::js_divergence(p, q);
      const double b = analysis::js_divergence(q, p);
      CHECK(a == b);
      CHECK(a >= 0.0);
      CHECK(a <= 1.0 + 1e-12);
    }
  }

  SUBCASE("validation") {
    CHECK(category_of([] {
            analysis::js_divergence(std::vector<double>{1.0},
                                    std::vector<double>{0.5, 0.5});
          }) == "LengthMismatch");
    CHECK(category_of([] {
            analysis::js_divergence(std::vector<double>{1.5, -0.5},
                                    std::vector<double>{0.5, 0.5});
          }) == "NegativeEntry");
    CHECK(category_of([] {
            analysis::js_divergence(std::vector<double>{0.4, 0.4},
                                    std::vector<double>{0.5, 0.5});
          }) == "NotNormalized");
  }
}

TEST_CASE("model_vs_data divergence: single-point support is exactly zero") {
  const auto p = model::init_params(tiny_config(), 3);
  const auto rep = seq::Repertoire::from_sequences({{"ACY", 5}});
  // renormalized over a one-sequence support, both sides are the point mass
  CHECK(analysis::model_vs_data_divergence(p, rep) == 0.0);
}

TEST_CASE("divergence matrix: zero diagonal, bit-exact symmetry, self-vs-self") {
  const auto a = model::init_params(tiny_config(), 1);
  const auto b = model::init_params(tiny_config(), 2);
  const std::vector<model::TransformerParams> models{a, b};
  const std::vector<seq::Repertoire> evals{
      seq::Repertoire::from_sequences({{"ACY", 3}, {"GG", 1}, {"WAC", 2}}),
      seq::Repertoire::from_sequences({{"FFY", 2}, {"GG", 2}, {"ACY", 1}})};
  const std::vector<std::string> labels{"alpha", "beta"};
  const auto m = analysis::divergence_matrix(models, evals, labels);
  REQUIRE(m.labels.size() == 2);
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.at(1, 1) == 0.0);
  CHECK(m.at(0, 1) == m.at(1, 0));
  CHECK(m.at(0, 1) > 0.0);
  CHECK(m.at(0, 1) <= 1.0);

  // identical models on identical eval sets diverge by exactly zero
  const std::vector<model::TransformerParams> twins{a, a};
  const std::vector<seq::Repertoire> same{evals[0], evals[0]};
  const auto z = analysis::divergence_matrix(twins, same, labels);
  CHECK(z.at(0, 1) == 0.0);

  CHECK(category_of([&] {
          analysis::divergence_matrix(models, same,
                                      std::vector<std::string>{"x"});
        }) == "LengthMismatch");
  CHECK(category_of([&] {
          analysis::divergence_matrix({}, {}, {});
        }) == "EmptyCorpus");
}

TEST_CASE("overlap fraction") {
  const std::unordered_set<seq::TcrSequence> known{"AC", "GG"};
  const std::vector<seq::TcrSequence> gen{"AC", "AC", "WW", "YY"};
  CHECK(analysis::overlap_fraction(gen, known) == doctest::Approx(0.5));
  CHECK(category_of([&] {
          analysis::overlap_fraction(std::vector<seq::TcrSequence>{}, known);
        }) == "EmptyGenerated");
  CHECK(category_of([&] {
          analysis::overlap_fraction(gen, {});
        }) == "EmptyCorpus");
}

TEST_CASE("model-vs-repertoire concordance report") {
  const auto p = model::init_params(tiny_config(), 5);
  const auto rep = seq::Repertoire::from_sequences(
      {{"ACY", 8}, {"GG", 4}, {"WAC", 2}, {"FY", 1}, {"DD", 1}});
  const auto report = analysis::compare_model_to_repertoire(p, rep, 2);

  // scatter covers the whole support; correlation only rows with count >= 2
  CHECK(report.scatter.size() == 5);
  CHECK(report.n_correlated == 3);
  CHECK(report.d_js >= 0.0);
  CHECK(report.d_js <= 1.0);

  // the reported correlation equals a direct computation on log10 values
  std::vector<double> lx, ly;
  for (const auto& [s, count, p_data, p_infer] : report.scatter) {
    CHECK(p_data == doctest::Approx(double(count) / 16.0).epsilon(1e-15));
    CHECK(p_infer == doctest::Approx(std::exp(lm::log_prob(p, s))).epsilon(1e-12));
    if (count >= 2) {
      lx.push_back(std::log10(p_data));
      ly.push_back(std::log10(p_infer));
    }
  }
  CHECK(report.pearson_log10 ==
        doctest::Approx(analysis::pearson(lx, ly)).epsilon(1e-12));

  // min_count high enough to leave < 2 rows is an error
  CHECK(category_of([&] {
          analysis::compare_model_to_repertoire(p, rep, 100);
        }) == "ZeroVariance");
}
