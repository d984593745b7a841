#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "adapt/common.hpp"
#include "adapt/numerics.hpp"
#include "adapt/rng.hpp"

using namespace adapt;

namespace {

ParamLayout two_segments() {
    return ParamLayout{{{"a", 0, 3}, {"b", 3, 2}}};
}

}  // namespace

TEST_CASE("param layout validates contiguity and lookup") {
    const ParamLayout layout = two_segments();
    CHECK(layout.total() == 5);
    CHECK(layout.segment("a").offset == 0);
    CHECK(layout.segment("b").offset == 3);
    CHECK(layout.has("b"));
    CHECK(!layout.has("c"));
    CHECK_THROWS_AS(layout.segment("c"), layout_error);

    CHECK_THROWS_AS(ParamLayout({{"a", 0, 3}, {"b", 2, 2}}), layout_error);  // overlap
    CHECK_THROWS_AS(ParamLayout({{"a", 0, 3}, {"b", 4, 2}}), layout_error);  // gap
    CHECK_THROWS_AS(ParamLayout({{"a", 1, 3}}), layout_error);               // offset start
}

TEST_CASE("param vector segment views and fill") {
    ParamVector v = ParamVector::zeros(two_segments());
    CHECK(v.values.size() == 5);
    v.fill_segment("b", 2.5);
    CHECK(v.values == std::vector<double>{0, 0, 0, 2.5, 2.5});
    v.segment("a")[1] = -1.0;
    CHECK(v.values[1] == -1.0);
    v.set_zero();
    CHECK(v.values == std::vector<double>(5, 0.0));
}

TEST_CASE("adam first step lands at the closed-form value") {
    // With zero moments, one step moves by lr * g / (|g| + eps * sqrt(1-b2)).
    // For g = 1, lr = 0.1 the update is 0.1 / (1 + 1e-8) below the start.
    ParamVector p = ParamVector::zeros(ParamLayout{{{"a", 0, 1}}});
    p.values[0] = 1.0;
    ParamVector g = ParamVector::zeros(p.layout);
    g.values[0] = 1.0;
    AdamState st = AdamState::init(1);
    adam_step(p, g, st, 0.1);
    CHECK(p.values[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(st.step_count == 1);
}

TEST_CASE("adam leaves exactly-zero-gradient coordinates untouched bitwise") {
    ParamVector p = ParamVector::zeros(ParamLayout{{{"a", 0, 4}}});
    p.values = {0.5, -0.25, 1e300, 3.0};
    ParamVector g = ParamVector::zeros(p.layout);
    g.values = {1.0, 0.0, 0.0, -2.0};
    const std::vector<double> before = p.values;
    AdamState st = AdamState::init(4);
    for (int i = 0; i < 7; ++i) adam_step(p, g, st, 0.01);
    CHECK(std::memcmp(&p.values[1], &before[1], sizeof(double)) == 0);
    CHECK(std::memcmp(&p.values[2], &before[2], sizeof(double)) == 0);
    CHECK(p.values[0] != before[0]);
    CHECK(p.values[3] != before[3]);
    CHECK(st.first_moment[1] == 0.0);
    CHECK(st.second_moment[2] == 0.0);
}

TEST_CASE("adam rejects shape mismatch and non-finite gradients") {
    ParamVector p = ParamVector::zeros(two_segments());
    ParamVector g = ParamVector::zeros(ParamLayout{{{"a", 0, 3}}});
    AdamState st = AdamState::init(p.values.size());
    CHECK_THROWS_AS(adam_step(p, g, st, 0.1), layout_error);

    ParamVector bad = ParamVector::zeros(two_segments());
    bad.values[4] = std::numeric_limits<double>::quiet_NaN();
    try {
        adam_step(p, bad, st, 0.1);
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        CHECK(std::string(e.what()).find("segment 'b'") != std::string::npos);
    }
}

TEST_CASE("cosine schedule endpoints, midpoint and monotonicity") {
    const LrSchedule sched{1e-2, 100, 1e-6};
    CHECK(cosine_lr(0, sched) == doctest::Approx(1e-2));
    CHECK(cosine_lr(100, sched) == doctest::Approx(1e-8));
    const double mid = cosine_lr(50, sched);
    CHECK(mid == doctest::Approx(0.5 * (1e-2 + 1e-8)));
    double prev = cosine_lr(0, sched);
    for (long s = 1; s <= 100; ++s) {
        const double cur = cosine_lr(s, sched);
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(cosine_lr(-1, sched), std::out_of_range);
    CHECK_THROWS_AS(cosine_lr(101, sched), std::out_of_range);
}

TEST_CASE("finite difference check accepts a correct quadratic gradient") {
    // f(x) = sum x_i^2, df = 2x.
    ParamVector p = ParamVector::zeros(two_segments());
    p.values = {0.3, -1.2, 0.7, 2.0, -0.4};
    ParamVector g = ParamVector::zeros(p.layout);
    for (std::size_t i = 0; i < 5; ++i) g.values[i] = 2.0 * p.values[i];
    const auto f = [](const ParamVector& v) {
        double s = 0;
        for (double x : v.values) s += x * x;
        return s;
    };
    const GradCheckReport rep = finite_diff_check(f, p, g);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-7);
    CHECK(rep.segments.size() == 2);
}

TEST_CASE("finite difference check flags a scaled gradient") {
    // Analytic gradient off by 10%: relative error |2x - 2.2x| / max(1, ...)
    // lands at 0.2/2.2 ~ 0.0909 for the largest coordinate.
    ParamVector p = ParamVector::zeros(ParamLayout{{{"a", 0, 1}}});
    p.values = {2.0};
    ParamVector g = ParamVector::zeros(p.layout);
    g.values = {2.2 * p.values[0]};
    const auto f = [](const ParamVector& v) { return v.values[0] * v.values[0]; };
    const GradCheckReport rep = finite_diff_check(f, p, g);
    CHECK(!rep.pass);
    CHECK(rep.max_rel_err == doctest::Approx(0.4 / 4.4).epsilon(1e-3));
}

TEST_CASE("finite difference check is vacuous on an empty layout") {
    ParamVector p = ParamVector::zeros(ParamLayout{});
    const GradCheckReport rep =
        finite_diff_check([](const ParamVector&) { return 0.0; }, p, p);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err == 0.0);
}

TEST_CASE("finite difference check rejects non-finite losses") {
    ParamVector p = ParamVector::zeros(ParamLayout{{{"a", 0, 1}}});
    const auto f = [](const ParamVector&) { return std::numeric_limits<double>::infinity(); };
    CHECK_THROWS_AS(finite_diff_check(f, p, p), numeric_error);
}

TEST_CASE("tie report keeps the smallest observed gap and distance") {
    TieReport tie;
    tie.observe_gap(0.5);
    tie.observe_gap(0.2);
    tie.observe_gap(0.9);
    tie.observe_distance(3.0);
    tie.observe_distance(1.5);
    CHECK(tie.selection_margin == 0.2);
    CHECK(tie.min_distance == 1.5);
}

TEST_CASE("named streams are deterministic and independent") {
    SplitRng a = SplitRng::stream(42, "cohort");
    SplitRng b = SplitRng::stream(42, "cohort");
    SplitRng c = SplitRng::stream(42, "shuffle-stage1");
    const std::uint64_t a0 = a.next();
    CHECK(a0 == b.next());
    CHECK(a.next() == b.next());
    CHECK(c.next() != a0);  // different names diverge immediately
    SplitRng d = SplitRng::stream(43, "cohort");
    CHECK(d.next() != a0);
}

TEST_CASE("uniform stays inside its bounds") {
    SplitRng rng = SplitRng::stream(7, "test");
    for (int i = 0; i < 2000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double v = rng.uniform(-2.0, 3.0);
        CHECK(v >= -2.0);
        CHECK(v < 3.0);
        const int k = rng.uniform_int(-1, 5);
        CHECK(k >= -1);
        CHECK(k <= 5);
    }
}

TEST_CASE("normal draws have roughly standard moments") {
    SplitRng rng = SplitRng::stream(11, "test");
    const int n = 20000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sumsq += x * x;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle always yields a permutation") {
    SplitRng rng = SplitRng::stream(3, "test");
    std::vector<int> v(40);
    for (int i = 0; i < 40; ++i) v[static_cast<std::size_t>(i)] = i;
    rng.shuffle(v);
    CHECK(std::set<int>(v.begin(), v.end()).size() == 40);
    bool moved = false;
    for (int i = 0; i < 40; ++i) moved |= v[static_cast<std::size_t>(i)] != i;
    CHECK(moved);
}

TEST_CASE("label helpers map both directions") {
    CHECK(class_index(0) == 0);
    CHECK(class_index(3) == 1);
    CHECK(class_index(5) == 3);
    CHECK_THROWS_AS(class_index(2), std::domain_error);
    CHECK(grade_slot(3) == 0);
    CHECK(grade_slot(5) == 2);
    CHECK_THROWS_AS(grade_slot(0), std::domain_error);
    CHECK(grade_of_slot(1) == 4);
}
