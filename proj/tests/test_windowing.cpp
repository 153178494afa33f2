#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "adaptime/windowing.hpp"
#include "support.hpp"

using namespace adaptime;
using adaptime::testing::random_tensor;

namespace {

using Assignment = std::vector<std::size_t>;

std::vector<double> random_precisions(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::lognormal_distribution<double> spread(0.0, 1.5);
  std::vector<double> p(n);
  for (double& v : p) v = spread(rng);
  return p;
}

// Oracle: exact window masses by direct summation per window.
std::vector<double> window_mass(const WindowPlan& plan, std::span<const double> p) {
  std::vector<double> mass(plan.num_windows, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) mass[plan.assignment[i]] += p[i];
  return mass;
}

void check_plan_invariants(const WindowPlan& plan, std::size_t n) {
  REQUIRE(plan.assignment.size() == n);
  REQUIRE(plan.occupied.size() == plan.num_windows);
  std::vector<bool> seen(plan.num_windows, false);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(plan.assignment[i] < plan.num_windows);
    if (i > 0) CHECK(plan.assignment[i] >= plan.assignment[i - 1]);
    seen[plan.assignment[i]] = true;
  }
  CHECK(seen == plan.occupied);
}

}  // namespace

TEST_CASE("cumulative precision: prefix sums") {
  const std::vector<double> p{1, 2, 3};
  CHECK(cumulative_precision(p).cumulative == std::vector<double>{1, 3, 6});
  const std::vector<double> c(7, 0.25);
  const PrecisionSequence ps = cumulative_precision(c);
  for (std::size_t k = 0; k < c.size(); ++k) CHECK(ps.cumulative[k] == 0.25 * static_cast<double>(k + 1));
}

TEST_CASE("cumulative precision: compensated total is exact where naive summation is not") {
  const std::vector<double> p{1e16, 1, 1, 1, 1};
  CHECK(cumulative_precision(p).total() == 1e16 + 4);
}

TEST_CASE("cumulative precision: 10^4 random values vs sorted-ascending long-double oracle") {
  const std::vector<double> p = random_precisions(10'000, 1);
  std::vector<double> sorted = p;
  std::sort(sorted.begin(), sorted.end());
  long double oracle = 0.0L;
  for (double v : sorted) oracle += v;
  const PrecisionSequence ps = cumulative_precision(p);
  CHECK(std::abs(ps.total() - static_cast<double>(oracle)) / static_cast<double>(oracle) < 1e-9);
  for (std::size_t i = 1; i < ps.cumulative.size(); ++i) CHECK(ps.cumulative[i] > ps.cumulative[i - 1]);
}

TEST_CASE("cumulative precision: non-positive or non-finite values are numeric errors") {
  for (double bad : {0.0, -1.0, std::nan(""), HUGE_VAL}) {
    const std::vector<double> p{1.0, bad};
    try {
      cumulative_precision(p);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kNumeric);
    }
  }
}

TEST_CASE("log-domain cumulative precision survives overflow with an unchanged plan") {
  const std::vector<double> p = random_precisions(40, 2);
  std::vector<double> logs;
  for (double v : p) logs.push_back(std::log(v));
  const WindowPlan plain = equiprecise_plan(cumulative_precision_from_log(logs), 7);
  std::vector<double> shifted = logs;
  for (double& v : shifted) v += 2000.0;
  const PrecisionSequence big = cumulative_precision_from_log(shifted);
  CHECK(std::isfinite(big.total()));
  CHECK(equiprecise_plan(big, 7) == plain);
}

TEST_CASE("equiprecise plan: hand-evaluated boundary rule") {
  const std::vector<double> ones(6, 1.0);
  CHECK(equiprecise_plan(cumulative_precision(ones), 3).assignment == Assignment{0, 0, 1, 1, 2, 2});
  const std::vector<double> heavy{4, 1, 1, 1, 1};
  const WindowPlan plan = equiprecise_plan(cumulative_precision(heavy), 2);
  CHECK(plan.assignment == Assignment{0, 1, 1, 1, 1});
  CHECK(plan.members()[0] == std::vector<std::size_t>{0});
  const std::vector<double> any = random_precisions(9, 3);
  CHECK(equiprecise_plan(cumulative_precision(any), 1).assignment == Assignment(9, 0));
  CHECK_THROWS_AS(equiprecise_plan(PrecisionSequence{}, 3), Error);
  CHECK_THROWS_AS(equiprecise_plan(cumulative_precision(ones), 0), Error);
}

TEST_CASE("equiprecise plan: uniform precision reproduces the fixed-count plan exactly") {
  for (std::size_t n = 1; n <= 120; ++n) {
    for (std::size_t w : {1, 2, 3, 5, 7, 12, 48, 200}) {
      for (double c : {1.0, 0.1, 3.7e5, 1e-7}) {
        const std::vector<double> p(n, c);
        CHECK(equiprecise_plan(cumulative_precision(p), w) == fixed_count_plan(n, w));
      }
    }
  }
}

TEST_CASE("equiprecise plan: occupied windows hold P*/W +- max p over 1000 random sequences") {
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> length(1, 400);
  std::uniform_int_distribution<std::size_t> windows(1, 60);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const std::vector<double> p = random_precisions(length(rng), derive_seed({5, s}));
    const std::size_t w = windows(rng);
    const PrecisionSequence ps = cumulative_precision(p);
    const WindowPlan plan = equiprecise_plan(ps, w);
    check_plan_invariants(plan, p.size());
    const double target = ps.total() / static_cast<double>(w);
    const double slack = *std::max_element(p.begin(), p.end()) + 1e-9 * ps.total();
    const std::vector<double> mass = window_mass(plan, p);
    for (std::size_t k = 0; k < w; ++k) {
      if (!plan.occupied[k]) continue;
      CHECK(mass[k] <= target + slack);
      CHECK(mass[k] >= target - slack);
    }
  }
}

TEST_CASE("equiprecise plan: doubling a prefix never moves later events earlier") {
  for (std::uint64_t s = 0; s < 300; ++s) {
    std::vector<double> p = random_precisions(50, derive_seed({6, s}));
    const WindowPlan before = equiprecise_plan(cumulative_precision(p), 9);
    const std::size_t prefix = s % 50;
    for (std::size_t i = 0; i < prefix; ++i) p[i] *= 2.0;
    const WindowPlan after = equiprecise_plan(cumulative_precision(p), 9);
    for (std::size_t i = prefix; i < p.size(); ++i) CHECK(after.assignment[i] >= before.assignment[i]);
  }
}

TEST_CASE("equiprecise plan: reversing a non-uniform sequence changes the plan") {
  const std::vector<double> p{8, 1, 1, 1, 1, 1, 1, 2};
  std::vector<double> r(p.rbegin(), p.rend());
  CHECK(equiprecise_plan(cumulative_precision(p), 4) != equiprecise_plan(cumulative_precision(r), 4));
}

TEST_CASE("fixed-time plan: floor rule, clamping and errors") {
  const std::vector<double> t{1.5};
  CHECK(fixed_time_plan(t, 48.0, 48).assignment == Assignment{1});
  const std::vector<double> edge{0.0, 48.0};
  CHECK(fixed_time_plan(edge, 48.0, 48).assignment == Assignment{0, 47});
  const std::vector<double> decreasing{2.0, 1.0};
  CHECK_THROWS_AS(fixed_time_plan(decreasing, 48.0, 48), Error);
  const std::vector<double> outside{49.0};
  CHECK_THROWS_AS(fixed_time_plan(outside, 48.0, 48), Error);
}

TEST_CASE("fixed-time plan: per-window counts match brute-force binning") {
  Rng rng(7);
  std::uniform_real_distribution<double> u(0.0, 48.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> t(200);
    for (double& v : t) v = u(rng);
    std::sort(t.begin(), t.end());
    const WindowPlan plan = fixed_time_plan(t, 48.0, 12);
    check_plan_invariants(plan, t.size());
    for (std::size_t k = 0; k < 12; ++k) {
      const double lo = 4.0 * static_cast<double>(k);
      const auto expected = std::count_if(t.begin(), t.end(), [&](double x) { return x >= lo && x < lo + 4.0; });
      const auto actual = std::count(plan.assignment.begin(), plan.assignment.end(), k);
      CHECK(actual == expected);
    }
  }
}

TEST_CASE("fixed-count plan: examples and size balance") {
  CHECK(fixed_count_plan(6, 3).assignment == Assignment{0, 0, 1, 1, 2, 2});
  // floor(2 i / 5) for i = 0..4.
  CHECK(fixed_count_plan(5, 2).assignment == Assignment{0, 0, 0, 1, 1});
  const WindowPlan sparse = fixed_count_plan(3, 8);
  CHECK(std::count(sparse.occupied.begin(), sparse.occupied.end(), true) == 3);
  for (std::size_t n = 1; n < 100; ++n) {
    for (std::size_t w = 1; w < 20; ++w) {
      const WindowPlan plan = fixed_count_plan(n, w);
      check_plan_invariants(plan, n);
      std::vector<std::size_t> sizes;
      for (const auto& m : plan.members()) {
        if (!m.empty()) sizes.push_back(m.size());
      }
      CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    }
  }
}

TEST_CASE("aggregate: identity, duplicate pooling and masking") {
  const Tensor x = random_tensor({4, 3}, 9);
  Tape tape;
  const WindowPlan one_each = fixed_count_plan(4, 4);
  const Aggregate id = aggregate(tape.constant(x), one_each);
  CHECK(id.windows.value() == x);

  const Tensor twin = Tensor::matrix({{1.5, -2, 3}, {1.5, -2, 3}});
  const Aggregate pooled = aggregate(tape.constant(twin), fixed_count_plan(2, 1));
  CHECK(pooled.windows.value().values() == std::vector<double>{1.5, -2, 3});

  const Aggregate sparse = aggregate(tape.constant(x), fixed_count_plan(4, 6));
  for (std::size_t k = 0; k < 6; ++k) {
    if (sparse.occupied[k]) continue;
    for (std::size_t j = 0; j < 3; ++j) CHECK(sparse.windows.value()(k, j) == 0.0);
  }
  CHECK_THROWS_AS(aggregate(tape.constant(x), fixed_count_plan(5, 2)), Error);
}

TEST_CASE("aggregate: mean gradient is 1 / window size, empty windows pass none") {
  Parameter x("x", random_tensor({5, 2}, 10));
  const std::vector<double> p{4, 1, 1, 1, 1};
  const WindowPlan plan = equiprecise_plan(cumulative_precision(p), 2);
  Tape tape;
  tape.backward(sum(aggregate(bind(tape, x), plan).windows));
  CHECK(x.grad(0, 0) == 1.0);
  for (std::size_t i = 1; i < 5; ++i) CHECK(x.grad(i, 1) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("batched aggregation equals the per-sequence loop bit-for-bit") {
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> length(1, 30);
  const std::size_t w = 7;
  std::vector<WindowPlan> plans;
  std::vector<std::size_t> offsets;
  std::size_t rows = 0;
  for (int b = 0; b < 8; ++b) {
    const std::size_t n = length(rng);
    offsets.push_back(rows);
    rows += n;
    plans.push_back(b % 2 ? fixed_count_plan(n, w)
                          : equiprecise_plan(cumulative_precision(random_precisions(n, 12 + b)), w));
  }
  const Tensor x = random_tensor({rows, 4}, 13);
  for (PoolMode mode : {PoolMode::kMean, PoolMode::kSum}) {
    Tape tape;
    const Var all = tape.constant(x);
    const std::vector<Var> steps = aggregate_batch(all, plans, offsets, mode);
    REQUIRE(steps.size() == w);
    for (std::size_t b = 0; b < plans.size(); ++b) {
      const std::size_t n = plans[b].assignment.size();
      Tensor own(Shape{n, 4});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) own(i, j) = x(offsets[b] + i, j);
      }
      const Aggregate single = aggregate(tape.constant(own), plans[b], mode);
      for (std::size_t k = 0; k < w; ++k) {
        for (std::size_t j = 0; j < 4; ++j) CHECK(steps[k].value()(b, j) == single.windows.value()(k, j));
      }
    }
  }
}
