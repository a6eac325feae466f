#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "dilkit/drift.hpp"
#include "dilkit/rng.hpp"
#include "oracles.hpp"

using namespace dilkit;

TEST_CASE("batch mean weights") {
    SECTION("single row is the identity") {
        std::vector<double> w{0.2, 0.8, 0.0};
        CHECK(batch_mean_weights(w, 1, 3) == w);
    }
    SECTION("two one-hot rows average to half-half") {
        std::vector<double> w{1, 0, 0, 1};
        auto m = batch_mean_weights(w, 2, 2);
        CHECK(m[0] == 0.5);
        CHECK(m[1] == 0.5);
    }
    SECTION("random batch matches the column-mean oracle") {
        Rng rng(3);
        const int B = 7, N = 5;
        auto w = rng.normal_vec(B * N);
        auto m = batch_mean_weights(w, B, N);
        for (int j = 0; j < N; ++j) {
            double s = 0.0;
            for (int b = 0; b < B; ++b) s += w[b * N + j];
            CHECK(m[j] == Catch::Approx(s / B).margin(1e-15));
        }
    }
    SECTION("errors") {
        CHECK_THROWS_AS(batch_mean_weights({1.0}, 0, 1), ContractError);
        CHECK_THROWS_AS(batch_mean_weights({1.0, 2.0}, 1, 3), DimensionError);
    }
}

TEST_CASE("selection entropy") {
    CHECK(std::fabs(selection_entropy({1.0, 0.0, 0.0, 0.0})) < 1e-8);
    CHECK(std::fabs(selection_entropy({0.25, 0.25, 0.25, 0.25}) - std::log(4.0)) < 1e-8);
    CHECK(std::fabs(selection_entropy({0.5, 0.5, 0.0, 0.0}) - std::log(2.0)) < 1e-8);
}

TEST_CASE("usage sets and IoU") {
    CHECK(usage_set({0.0, 0.0, 0.0}, 0.01).empty());
    CHECK(usage_set({0.011, 0.009}, 0.01) == std::vector<int>{0});
    CHECK(usage_set({0.25, 0.25, 0.25, 0.25}, 0.01) == std::vector<int>{0, 1, 2, 3});

    CHECK(usage_iou({1, 2, 3}, {1, 2, 3}) == 1.0);
    CHECK(usage_iou({1, 2}, {3, 4}) == 0.0);
    CHECK(usage_iou({1, 2, 3}, {2, 3, 4}) == 0.5);
    CHECK(usage_iou({}, {}) == 1.0);
    CHECK(usage_iou({}, {1}) == 0.0);
}

TEST_CASE("drift score hand values") {
    SECTION("matching entropy and full IoU give exactly zero") {
        DriftMonitor mon;
        push_window(mon, 1.0, {0});
        push_window(mon, 3.0, {0});
        // H = Hbar = 2 exactly; IoU = 1 -> both terms vanish.
        CHECK(drift_score(2.0, mon, 1.0) == 0.0);
    }
    SECTION("disjoint usage clipped at eta gives 4.5") {
        DriftMonitor mon;
        push_window(mon, 2.0, {0});
        push_window(mon, 2.0, {0});
        // entropy term 0 (H == Hbar), IoU = 0 clipped to 0.1:
        // 0.5 * (1/0.1 - 1) = 4.5
        CHECK(drift_score(2.0, mon, 0.0) == 4.5);
    }
    SECTION("two-sigma entropy excursion gives 2.0 (eps = 0)") {
        DriftMonitor mon;
        mon.eps = 0.0;
        push_window(mon, 1.0, {0});
        push_window(mon, 3.0, {0});
        // Hbar = 2, population sigma = 1, H = Hbar + 2 sigma, IoU = 1.
        CHECK(drift_score(4.0, mon, 1.0) == 2.0);
    }
    SECTION("cold start scores zero") {
        DriftMonitor mon;
        CHECK(drift_score(5.0, mon, 0.0) == 0.0);
        push_window(mon, 1.0, {0});
        CHECK(drift_score(5.0, mon, 0.0) == 0.0);
    }
}

TEST_CASE("window push and eviction") {
    DriftMonitor mon;
    mon.window_cap = 4;
    push_window(mon, 1.0, {1});
    CHECK(mon.size() == 1);
    for (int i = 2; i <= 5; ++i) push_window(mon, static_cast<double>(i), {i});
    CHECK(mon.size() == 4);
    CHECK(mon.entropies.front() == 2.0);  // first entry evicted
    CHECK(mon.usage_sets.front() == std::vector<int>{2});
}

TEST_CASE("reference set equals a brute-force union, order independent") {
    Rng rng(11);
    std::vector<std::vector<int>> sets;
    for (int i = 0; i < 12; ++i) {
        std::set<int> s;
        const int k = 1 + static_cast<int>(rng.below(6));
        for (int j = 0; j < k; ++j) s.insert(static_cast<int>(rng.below(20)));
        sets.emplace_back(s.begin(), s.end());
    }
    std::set<int> brute;
    for (const auto& s : sets) brute.insert(s.begin(), s.end());
    const std::vector<int> want(brute.begin(), brute.end());

    DriftMonitor mon;
    for (const auto& s : sets) push_window(mon, 0.0, s);
    CHECK(mon.reference_set() == want);

    // push in a different order: same union
    DriftMonitor mon2;
    for (int i : rng.permutation(static_cast<int>(sets.size())))
        push_window(mon2, 0.0, sets[static_cast<std::size_t>(i)]);
    CHECK(mon2.reference_set() == want);
}

TEST_CASE("entropy moments depend on contents, not order") {
    Rng rng(13);
    std::vector<double> hs;
    for (int i = 0; i < 30; ++i) hs.push_back(rng.uniform(0.0, 3.0));
    DriftMonitor a, b;
    for (double h : hs) push_window(a, h, {});
    for (int i : rng.permutation(30)) push_window(b, hs[static_cast<std::size_t>(i)], {});
    CHECK(a.entropy_mean() == Catch::Approx(b.entropy_mean()).margin(1e-12));
    CHECK(a.entropy_std() == Catch::Approx(b.entropy_std()).margin(1e-12));
}

TEST_CASE("observe scores then pushes") {
    DriftMonitor mon;
    const double d1 = observe(mon, {0.5, 0.5, 0.0});
    CHECK(d1 == 0.0);  // cold start
    CHECK(mon.size() == 1);
    observe(mon, {0.5, 0.5, 0.0});
    const double d3 = observe(mon, {0.0, 0.0, 1.0});  // disjoint usage, entropy drop
    CHECK(d3 > 0.0);
    CHECK(mon.size() == 3);
}

TEST_CASE("drift score is non-negative over random streams") {
    Rng rng(17);
    DriftMonitor mon;
    for (int i = 0; i < 500; ++i) {
        std::vector<double> w = rng.normal_vec(8);
        for (auto& x : w) x = std::fabs(x);
        double s = 0.0;
        for (double x : w) s += x;
        for (auto& x : w) x /= s;
        const double d = observe(mon, w);
        CHECK(d >= 0.0);
    }
}

TEST_CASE("expansion size follows the drift-proportional rule") {
    CHECK(expansion_size(60, 2.0) == 24);
    CHECK(expansion_size(60, 0.1) == 10);   // floor(1.2) = 1 clamped up
    CHECK(expansion_size(60, 10.0) == 80);  // floor(120) clamped down
    CHECK_THROWS_AS(expansion_size(0, 1.0), ContractError);

    SECTION("monotone non-decreasing in mean drift, always within bounds") {
        int prev = 0;
        for (double d = 0.0; d <= 12.0; d += 0.05) {
            const int e = expansion_size(60, d);
            CHECK(e >= 10);
            CHECK(e <= 80);
            CHECK(e >= prev);
            prev = e;
        }
    }
}

TEST_CASE("expansion decision is inclusive at the threshold") {
    CHECK(should_expand(0.7, 0.7));
    CHECK_FALSE(should_expand(0.0, 0.7));
    CHECK(should_expand(5.0, 0.7));
}

TEST_CASE("drift report mean") {
    DriftReport rep;
    rep.scores = {{1.0, 2.0}, {3.0, 6.0}};
    rep.finalize();
    CHECK(rep.mean_drift == 3.0);
    DriftReport single;
    single.scores = {{2.5}};
    single.finalize();
    CHECK(single.mean_drift == 2.5);
}
