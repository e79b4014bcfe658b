#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "support/test_util.hpp"
#include "tcrlm/optim.hpp"
#include "tcrlm/rng.hpp"
#include "tcrlm/tensor.hpp"
#include "tcrlm/threading.hpp"

using namespace tcrlm;
using num::Tensor;
using testutil::category_of;

namespace {

Tensor make_rand(num::Shape shape, num::Rng& rng, bool requires_grad,
                 double scl = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(num::numel(shape)));
  for (auto& x : v) x = scl * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("construction, shape bookkeeping, and basic errors") {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.ndim() == 2);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.size() == 6);
  CHECK(!t.requires_grad());
  CHECK(Tensor::zeros({4}).values()[3] == 0.0);
  CHECK(Tensor::full({2}, 7.0).values()[1] == 7.0);
  CHECK(Tensor::scalar(2.5).size() == 1);

  CHECK(category_of([] { Tensor::from({2, 2}, {1, 2, 3}); }) ==
        "ShapeMismatch");
  CHECK(category_of([] {
          Tensor::from({2}, {1.0, std::nan("")});
        }) == "NonFiniteValue");
}

TEST_CASE("closed-form forward values") {
  SUBCASE("matmul 2x2 hand case") {
    // [1 2; 3 4]·[5 6; 7 8] = [19 22; 43 50]
    auto c = num::matmul(Tensor::from({2, 2}, {1, 2, 3, 4}),
                         Tensor::from({2, 2}, {5, 6, 7, 8}));
    const std::vector<double> want{19, 22, 43, 50};
    for (int i = 0; i < 4; ++i)
      CHECK(c.values()[std::size_t(i)] == want[std::size_t(i)]);
    CHECK(category_of([] {
            num::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
          }) == "ShapeMismatch");
  }

  SUBCASE("row_softmax([ln 2, 0]) = [2/3, 1/3]") {
    auto s = num::row_softmax(Tensor::from({1, 2}, {std::log(2.0), 0.0}));
    CHECK(s.values()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(s.values()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  }

  SUBCASE("row_softmax is shift invariant and handles huge negatives") {
    auto a = num::row_softmax(Tensor::from({1, 3}, {1.0, 2.0, 3.0}));
    auto b = num::row_softmax(Tensor::from({1, 3}, {1001.0, 1002.0, 1003.0}));
    for (int i = 0; i < 3; ++i)
      CHECK(a.values()[std::size_t(i)] ==
            doctest::Approx(b.values()[std::size_t(i)]).epsilon(1e-14));
    // -1e9 relative to the max underflows to an exact zero probability
    auto m = num::row_softmax(Tensor::from({1, 2}, {0.0, -1e9}));
    CHECK(m.values()[0] == 1.0);
    CHECK(m.values()[1] == 0.0);
  }

  SUBCASE("layer_norm hand case: gain 1 offset 0 on [1,3]") {
    // mean 2, var 2/3 (population): normalized = (x-2)/sqrt(2/3+eps)
    auto y = num::layer_norm(Tensor::from({1, 3}, {1, 2, 3}),
                             Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5);
    const double denom = std::sqrt(2.0 / 3.0 + 1e-5);
    CHECK(y.values()[0] == doctest::Approx(-1.0 / denom).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(y.values()[2] == doctest::Approx(1.0 / denom).epsilon(1e-12));
  }

  SUBCASE("cross_entropy on uniform logits = (#masked)·ln C") {
    auto logits = Tensor::zeros({4, 21});
    const std::vector<int> targets{0, 5, 20, 7};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1};
    auto ce = num::cross_entropy(logits, targets, mask);
    CHECK(ce.values()[0] == doctest::Approx(3.0 * std::log(21.0)).epsilon(1e-14));
  }

  SUBCASE("log_prob_positions zeroes masked-off rows") {
    auto logits = Tensor::from({2, 3}, {std::log(2.0), 0.0, 0.0,  //
                                        0.0, 0.0, 0.0});
    const std::vector<int> targets{0, 1};
    const std::vector<std::uint8_t> mask{1, 0};
    auto lp = num::log_prob_positions(logits, targets, mask);
    CHECK(lp.values()[0] == doctest::Approx(std::log(0.5)).epsilon(1e-14));
    CHECK(lp.values()[1] == 0.0);
  }

  SUBCASE("segment_sum folds contiguous runs") {
    auto x = Tensor::from({6}, {1, 2, 3, 4, 5, 6});
    auto s = num::segment_sum(x, 2, 3);
    CHECK(s.values()[0] == 6.0);
    CHECK(s.values()[1] == 15.0);
  }

  SUBCASE("row_entropy_mean of uniform rows = ln C") {
    auto logits = Tensor::zeros({3, 7});
    const std::vector<std::uint8_t> mask{1, 0, 1};
    auto h = num::row_entropy_mean(logits, mask);
    CHECK(h.values()[0] == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }

  SUBCASE("min_elem picks elementwise minima") {
    auto m = num::min_elem(Tensor::from({3}, {1, 5, 2}),
                           Tensor::from({3}, {3, 4, 2}));
    CHECK(m.values()[0] == 1.0);
    CHECK(m.values()[1] == 4.0);
    CHECK(m.values()[2] == 2.0);
  }

  SUBCASE("concat/slice round trip") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from({2, 1}, {9, 8});
    auto cat = num::concat(a, b, 1);
    CHECK(cat.dim(1) == 3);
    auto back = num::slice(cat, 1, 0, 2);
    for (int i = 0; i < 4; ++i)
      CHECK(back.values()[std::size_t(i)] == a.values()[std::size_t(i)]);
    CHECK(num::slice(cat, 1, 2, 1).values()[1] == 8.0);
  }

  SUBCASE("ops reject non-finite results") {
    CHECK(category_of([] { num::exp_elem(Tensor::from({1}, {1e4})); }) ==
          "NonFiniteValue");
  }
}

TEST_CASE("hand-derived adjoints and the shared-subexpression case") {
  SUBCASE("d/dx sum(x*x + x) = 2x + 1 when x feeds two consumers") {
    auto x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    auto loss = num::sum(num::add(num::mul(x, x), x));
    num::backward(loss);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(x.grad()[i] ==
            doctest::Approx(2.0 * x.values()[i] + 1.0).epsilon(1e-14));
  }

  SUBCASE("matmul adjoints: dA = G·Bᵀ, dB = Aᵀ·G with G = 1") {
    auto a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    auto b = Tensor::from({2, 2}, {5, 6, 7, 8}, true);
    num::backward(num::sum(num::matmul(a, b)));
    // row sums of B: 11, 15; column sums of A: 4, 6
    CHECK(a.grad()[0] == 11.0);
    CHECK(a.grad()[1] == 15.0);
    CHECK(a.grad()[2] == 11.0);
    CHECK(a.grad()[3] == 15.0);
    CHECK(b.grad()[0] == 4.0);
    CHECK(b.grad()[1] == 4.0);
    CHECK(b.grad()[2] == 6.0);
    CHECK(b.grad()[3] == 6.0);
  }

  SUBCASE("min_elem ties route gradient to the first argument") {
    auto a = Tensor::from({2}, {1.0, 3.0}, true);
    auto b = Tensor::from({2}, {1.0, 2.0}, true);
    num::backward(num::sum(num::min_elem(a, b)));
    CHECK(a.grad()[0] == 1.0);  // tie -> a
    CHECK(b.grad()[0] == 0.0);
    CHECK(a.grad()[1] == 0.0);
    CHECK(b.grad()[1] == 1.0);
  }

  SUBCASE("embedding_lookup scatter-add accumulates duplicate ids") {
    auto table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    const std::vector<int> ids{1, 1, 0};
    num::backward(num::sum(num::embedding_lookup(table, ids)));
    CHECK(table.grad()[0] == 1.0);
    CHECK(table.grad()[2] == 2.0);  // row 1 gathered twice
    CHECK(table.grad()[4] == 0.0);
  }
}

TEST_CASE("finite differences agree with every op's analytic gradient") {
  num::Rng rng(2024);
  auto check = [](const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x) {
    const auto report = num::grad_check(f, x, 1e-3, 1e-4);
    CAPTURE(report.max_rel_error);
    CHECK(report.pass);
    CHECK(report.n_checked > 0);
  };

  auto x23 = make_rand({2, 3}, rng, true);
  auto y23 = make_rand({2, 3}, rng, false);
  check([&](const Tensor& t) { return num::sum(num::add(t, y23)); }, x23);
  check([&](const Tensor& t) { return num::sum(num::sub(y23, t)); }, x23);
  check([&](const Tensor& t) { return num::sum(num::mul(t, y23)); }, x23);
  check([&](const Tensor& t) { return num::mean(num::scale(t, -1.7)); }, x23);
  check([&](const Tensor& t) { return num::sum(num::add_scalar(t, 3.0)); },
        x23);
  check([&](const Tensor& t) { return num::sum(num::exp_elem(t)); }, x23);
  check([&](const Tensor& t) { return num::sum(num::min_elem(t, y23)); }, x23);
  check([&](const Tensor& t) { return num::sum(num::row_softmax(t)); }, x23);
  check([&](const Tensor& t) {
    return num::sum(num::mul(num::row_softmax(t), y23));
  }, x23);

  // relu: keep evaluation away from the kink
  auto xr = Tensor::from({2, 2}, {0.5, -0.7, 1.3, -2.0}, true);
  check([&](const Tensor& t) { return num::sum(num::relu(t)); }, xr);

  auto a23 = make_rand({2, 3}, rng, true);
  auto b34 = make_rand({3, 4}, rng, false);
  check([&](const Tensor& t) { return num::sum(num::matmul(t, b34)); }, a23);
  auto a_fixed = make_rand({2, 3}, rng, false);
  check([&](const Tensor& t) { return num::sum(num::matmul(a_fixed, t)); },
        b34);

  auto bias = make_rand({3}, rng, true);
  check([&](const Tensor& t) { return num::sum(num::add_row_bias(x23, t)); },
        bias);

  auto gain = make_rand({3}, rng, true, 0.5);
  auto offset = make_rand({3}, rng, true, 0.5);
  check([&](const Tensor& t) {
    return num::sum(num::layer_norm(t, gain, offset));
  }, x23);
  check([&](const Tensor& t) {
    return num::sum(num::mul(num::layer_norm(x23, gain, t), y23));
  }, offset);
  check([&](const Tensor& t) {
    return num::sum(num::mul(num::layer_norm(x23, t, offset), y23));
  }, gain);

  check([&](const Tensor& t) { return num::sum(num::concat(t, y23, 0)); },
        x23);
  check([&](const Tensor& t) { return num::sum(num::slice(t, 1, 1, 2)); },
        x23);

  auto table = make_rand({5, 3}, rng, true);
  const std::vector<int> ids{4, 0, 4, 2};
  check([&](const Tensor& t) {
    return num::sum(num::embedding_lookup(t, ids));
  }, table);

  // fused attention: batch 2, len 3, 2 heads over d=4
  auto q = make_rand({6, 4}, rng, true, 0.7);
  auto k = make_rand({6, 4}, rng, false, 0.7);
  auto v = make_rand({6, 4}, rng, false, 0.7);
  auto w = make_rand({6, 4}, rng, false);
  auto att_loss = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
    return num::sum(num::mul(num::causal_attention(qq, kk, vv, 2, 3, 2), w));
  };
  check([&](const Tensor& t) { return att_loss(t, k, v); }, q);
  check([&](const Tensor& t) { return att_loss(q, t, v); }, k);
  check([&](const Tensor& t) { return att_loss(q, k, t); }, v);

  const std::vector<int> targets{1, 0, 2, 1};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  auto logits = make_rand({4, 3}, rng, true);
  check([&](const Tensor& t) {
    return num::sum(num::log_prob_positions(t, targets, mask));
  }, logits);
  check([&](const Tensor& t) {
    return num::cross_entropy(t, targets, mask);
  }, logits);
  check([&](const Tensor& t) { return num::row_entropy_mean(t, mask); },
        logits);
  auto flat = make_rand({6}, rng, true);
  check([&](const Tensor& t) {
    return num::sum(num::mul(num::segment_sum(t, 2, 3),
                             Tensor::from({2}, {1.0, -2.0})));
  }, flat);
}

TEST_CASE("the finite-difference harness detects a corrupted adjoint") {
  // FD on f(x) = sum(x*x) resolves 2x to ~1e-9; a 5% corruption of the
  // analytic gradient is orders of magnitude outside the 1e-4 tolerance.
  auto x = Tensor::from({3}, {1.0, -2.0, 0.5});
  for (std::size_t i = 0; i < 3; ++i) {
    auto probe = [&](double delta) {
      auto v = std::vector<double>(x.values().begin(), x.values().end());
      v[i] += delta;
      double s = 0.0;
      for (double e : v) s += e * e;
      return s;
    };
    const double fd = (probe(1e-3) - probe(-1e-3)) / 2e-3;
    const double analytic = 2.0 * x.values()[i];
    const double corrupted = analytic * 1.05;
    CHECK(std::abs(fd - analytic) < 1e-6);
    CHECK(std::abs(fd - corrupted) / std::abs(corrupted) > 1e-4);
  }
}

TEST_CASE("tape semantics") {
  SUBCASE("backward twice on the same tape throws TapeConsumed") {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    auto loss = num::sum(num::mul(x, x));
    num::backward(loss);
    CHECK(category_of([&] { num::backward(loss); }) == "TapeConsumed");
  }

  SUBCASE("backward requires a scalar") {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK(category_of([&] { num::backward(num::mul(x, x)); }) == "NotScalar");
  }

  SUBCASE("NoGradGuard suppresses recording") {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK(num::grad_enabled());
    {
      num::NoGradGuard guard;
      CHECK(!num::grad_enabled());
      auto y = num::sum(num::mul(x, x));
      CHECK(!y.requires_grad());
      CHECK(category_of([&] { num::backward(y); }) == "TapeConsumed");
    }
    CHECK(num::grad_enabled());
  }

  SUBCASE("grads accumulate across backward calls until zero_grad") {
    auto x = Tensor::from({1}, {3.0}, true);
    num::backward(num::sum(num::mul(x, x)));
    CHECK(x.grad()[0] == 6.0);
    num::backward(num::sum(num::mul(x, x)));
    CHECK(x.grad()[0] == 12.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
}

TEST_CASE("results are bitwise identical under any thread cap") {
  num::Rng rng(77);
  auto a = make_rand({64, 48}, rng, false);
  auto b = make_rand({48, 32}, rng, false);
  auto q = make_rand({64, 32}, rng, false);

  num::set_max_threads(1);
  const auto c1 = num::matmul(a, b);
  const auto s1 = num::row_softmax(c1);
  const auto t1 = num::causal_attention(q, q, q, 4, 16, 4);
  num::set_max_threads(4);
  const auto c4 = num::matmul(a, b);
  const auto s4 = num::row_softmax(c4);
  const auto t4 = num::causal_attention(q, q, q, 4, 16, 4);
  num::set_max_threads(0);

  for (std::size_t i = 0; i < std::size_t(c1.size()); ++i)
    CHECK(c1.values()[i] == c4.values()[i]);
  for (std::size_t i = 0; i < std::size_t(s1.size()); ++i)
    CHECK(s1.values()[i] == s4.values()[i]);
  for (std::size_t i = 0; i < std::size_t(t1.size()); ++i)
    CHECK(t1.values()[i] == t4.values()[i]);
}

TEST_CASE("Adam, gradient norms, clipping") {
  SUBCASE("first steps match an independent reimplementation") {
    const num::AdamConfig cfg{0.1, 0.9, 0.999, 1e-8};
    auto p = Tensor::from({2}, {1.0, -1.0}, true);
    std::vector<Tensor> params{p};
    auto state = num::AdamState::init(params);

    // reference trace computed with plain doubles
    double ref[2] = {1.0, -1.0};
    double m[2] = {0, 0}, v[2] = {0, 0};
    const double g[2] = {0.5, -2.0};
    for (int step = 1; step <= 3; ++step) {
      p.zero_grad();
      auto gbuf = p.grad_mut();
      gbuf[0] = g[0];
      gbuf[1] = g[1];
      num::adam_step(params, state, cfg);
      for (int i = 0; i < 2; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mhat = m[i] / (1.0 - std::pow(0.9, step));
        const double vhat = v[i] / (1.0 - std::pow(0.999, step));
        ref[i] -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(p.values()[std::size_t(i)] ==
              doctest::Approx(ref[i]).epsilon(1e-15));
      }
    }
  }

  SUBCASE("constant gradient drives steps of about -lr·sign(g)") {
    const num::AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
    auto p = Tensor::from({1}, {0.0}, true);
    std::vector<Tensor> params{p};
    auto state = num::AdamState::init(params);
    double prev = 0.0;
    for (int step = 0; step < 200; ++step) {
      p.zero_grad();
      p.grad_mut()[0] = 3.7;  // constant positive gradient
      num::adam_step(params, state, cfg);
      if (step >= 50) {
        CHECK(prev - p.values()[0] == doctest::Approx(0.01).epsilon(1e-3));
      }
      prev = p.values()[0];
    }
  }

  SUBCASE("grad_global_norm and clip_grad_norm (3-4-5 triangle)") {
    auto a = Tensor::from({1}, {0.0}, true);
    auto b = Tensor::from({1}, {0.0}, true);
    std::vector<Tensor> params{a, b};
    a.grad_mut()[0] = 3.0;
    b.grad_mut()[0] = 4.0;
    CHECK(num::grad_global_norm(params) == doctest::Approx(5.0).epsilon(1e-15));
    const double pre = num::clip_grad_norm(params, 1.0);
    CHECK(pre == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-15));
    // under the cap: untouched
    num::clip_grad_norm(params, 10.0);
    CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
    num::zero_grads(params);
    CHECK(a.grad()[0] == 0.0);
    CHECK(b.grad()[0] == 0.0);
  }
}

TEST_CASE("random source: determinism, bounds, moments") {
  SUBCASE("same seed, same stream; different seeds differ") {
    num::Rng a(42), b(42), c(43);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 64; ++i) {
      const auto x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
      all_equal = all_equal && (x == y);
      any_diff = any_diff || (x != z);
    }
    CHECK(all_equal);
    CHECK(any_diff);
  }

  SUBCASE("indexed streams are mutually distinct") {
    auto s0 = num::Rng::stream(7, 0);
    auto s1 = num::Rng::stream(7, 1);
    int diff = 0;
    for (int i = 0; i < 16; ++i) diff += s0.next_u64() != s1.next_u64();
    CHECK(diff > 12);
  }

  SUBCASE("mix_seed separates by tag and is reproducible") {
    CHECK(num::mix_seed(1, 2) == num::mix_seed(1, 2));
    CHECK(num::mix_seed(1, 2) != num::mix_seed(1, 3));
    CHECK(num::mix_seed(1, 2, 3) != num::mix_seed(1, 3, 2));
  }

  SUBCASE("uniform in [0,1), uniform_int in [0,n)") {
    num::Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
      const double u = rng.uniform();
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
      CHECK(rng.uniform_int(7) < 7);
    }
    CHECK(category_of([&] { rng.uniform_int(0); }) == "InvalidConfig");
  }

  SUBCASE("normal moments within 4 sigma over 10k draws") {
    num::Rng rng(11);
    double s = 0, s2 = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      const double x = rng.normal();
      s += x;
      s2 += x * x;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::abs(mean) < 4.0 / std::sqrt(double(n)));
    CHECK(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / double(n)));
  }

  SUBCASE("categorical follows the weights (binomial 4 sigma)") {
    num::Rng rng(13);
    const std::vector<double> w{2.0, 1.0, 1.0};
    int counts[3] = {0, 0, 0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) counts[rng.categorical(w)]++;
    const double p0 = 0.5;
    const double sd = std::sqrt(n * p0 * (1 - p0));
    CHECK(std::abs(counts[0] - n * p0) < 4.0 * sd);
    CHECK(counts[1] + counts[2] == n - counts[0]);
  }

  SUBCASE("categorical skips zero weights and validates input") {
    num::Rng rng(17);
    const std::vector<double> w{0.0, 1.0, 0.0};
    for (int i = 0; i < 50; ++i) CHECK(rng.categorical(w) == 1);
    CHECK(category_of([&] {
            rng.categorical(std::vector<double>{1.0, -0.5});
          }) == "NegativeEntry");
    CHECK(category_of([&] {
            rng.categorical(std::vector<double>{0.0, 0.0});
          }) == "NegativeEntry");
  }
}
