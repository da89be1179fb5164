#include <doctest.h>

#include <cmath>
#include <limits>

#include "cdr/cohort.hpp"
#include "cdr/gbt.hpp"
#include "cdr/rng.hpp"
#include "cdr/tensor.hpp"
#include "cdr/trainer.hpp"

using namespace cdr;

namespace {

double sse(const std::vector<double>& v) {
    if (v.empty()) {
        return 0.0;
    }
    double m = 0.0;
    for (double x : v) {
        m += x;
    }
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) {
        s += (x - m) * (x - m);
    }
    return s;
}

// Every (feature, observed value) pair as a "<= value" split, scored by the
// drop in summed squared error. Returns the partition it induces.
struct Brute {
    std::size_t feature = 0;
    double gain = -1.0;
    std::vector<bool> goes_left;
};

Brute brute_force(const std::vector<std::vector<double>>& X, const std::vector<double>& y) {
    const double parent = sse(y);
    Brute best;
    for (std::size_t f = 0; f < X.front().size(); ++f) {
        for (const auto& row : X) {
            const double t = row[f];
            std::vector<double> l, r;
            std::vector<bool> side;
            for (std::size_t i = 0; i < X.size(); ++i) {
                side.push_back(X[i][f] <= t);
                (X[i][f] <= t ? l : r).push_back(y[i]);
            }
            if (l.empty() || r.empty()) {
                continue;
            }
            const double gain = parent - sse(l) - sse(r);
            if (gain > best.gain + 1e-9) {
                best = {f, gain, side};
            }
        }
    }
    return best;
}

std::vector<std::vector<double>> random_matrix(Rng& rng, std::size_t n, std::size_t p) {
    std::vector<std::vector<double>> X(n, std::vector<double>(p));
    for (auto& row : X) {
        for (auto& v : row) {
            v = rng.normal();
        }
    }
    return X;
}

double train_mse(const BoostedModel& m, const std::vector<std::vector<double>>& X, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double e = m.predict(X[i]) - y[i];
        s += e * e;
    }
    return s / static_cast<double>(y.size());
}

}  // namespace

TEST_CASE("two points, one stump, exact fit") {
    const std::vector<std::vector<double>> X{{0.0}, {1.0}};
    const std::vector<double> y{0.0, 1.0};
    const auto m = fit_gbt(X, y, 1, 1.0, 1);
    REQUIRE(m.trees.size() == 1);
    CHECK(m.trees[0].nodes[0].threshold == doctest::Approx(0.5));
    CHECK(m.predict(X[0]) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(m.predict(X[1]) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(train_mse(m, X, y) < 1e-30);
}

TEST_CASE("constant target gives the base prediction only") {
    Rng rng(3);
    const auto X = random_matrix(rng, 40, 5);
    const std::vector<double> y(40, 7.25);
    const auto m = fit_gbt(X, y, 50, 0.1, 4);
    CHECK(m.trees.empty());
    for (const auto& x : random_matrix(rng, 10, 5)) {
        CHECK(m.predict(x) == 7.25);
    }
}

TEST_CASE("first split matches exhaustive search on random data") {
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        Rng rng(seed);
        const auto X = random_matrix(rng, 50, 4);
        std::vector<double> y;
        for (const auto& row : X) {
            y.push_back(std::sin(2.0 * row[1]) + 0.5 * row[3] + 0.3 * rng.normal());
        }
        const auto m = fit_gbt(X, y, 1, 0.1, 1);
        const auto brute = brute_force(X, y);
        REQUIRE(m.trees.size() == 1);
        const auto& root = m.trees[0].nodes[0];
        CHECK(static_cast<std::size_t>(root.feature) == brute.feature);
        for (std::size_t i = 0; i < X.size(); ++i) {
            CHECK((X[i][brute.feature] <= root.threshold) == brute.goes_left[i]);
        }
        std::vector<std::size_t> idx(X.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        CHECK(best_split(X, y, idx).gain == doctest::Approx(brute.gain).epsilon(1e-9));
    }
}

TEST_CASE("ties prefer the lower feature and then the lower threshold") {
    // Features 0 and 2 are identical copies; both thresholds split equally well.
    const std::vector<std::vector<double>> X{{0, 5, 0}, {1, 5, 1}, {2, 5, 2}, {3, 5, 3}};
    const std::vector<double> y{1, 0, 1, 0};
    const auto s = best_split(X, y, {0, 1, 2, 3});
    REQUIRE(s.found);
    CHECK(s.feature == 0);
    CHECK(s.threshold == 0.5);
}

TEST_CASE("zero trees or zero shrinkage predict the base") {
    Rng rng(9);
    const auto X = random_matrix(rng, 30, 3);
    std::vector<double> y;
    for (const auto& row : X) {
        y.push_back(row[0]);
    }
    BoostedModel empty;
    empty.base = 2.5;
    empty.n_features = 3;
    CHECK(empty.predict(X[0]) == 2.5);
    const auto m = fit_gbt(X, y, 5, 0.0, 3);
    for (const auto& x : X) {
        CHECK(m.predict(x) == m.base);
    }
}

TEST_CASE("prediction is base plus shrunk per-tree sum") {
    Rng rng(11);
    const auto X = random_matrix(rng, 60, 3);
    std::vector<double> y;
    for (const auto& row : X) {
        y.push_back(row[0] * row[1] + rng.normal());
    }
    const auto m = fit_gbt(X, y, 2, 0.3, 3);
    REQUIRE(m.trees.size() == 2);
    for (const auto& x : X) {
        const double t1 = m.trees[0].predict(x);
        const double t2 = m.trees[1].predict(x);
        CHECK(m.predict(x) == doctest::Approx(m.base + 0.3 * (t1 + t2)).epsilon(1e-14));
    }
}

TEST_CASE("training error never increases across rounds") {
    Rng rng(21);
    const auto X = random_matrix(rng, 120, 4);
    std::vector<double> y;
    for (const auto& row : X) {
        y.push_back(std::exp(0.5 * row[0]) - row[2] * row[3] + 0.5 * rng.normal());
    }
    const auto full = fit_gbt(X, y, 40, 0.2, 3);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= full.trees.size(); ++k) {
        BoostedModel partial = full;
        partial.trees.resize(k);
        const double e = train_mse(partial, X, y);
        CHECK(e <= prev + 1e-12);
        prev = e;
    }
    for (const auto& t : full.trees) {
        CHECK(t.depth() <= 3);
    }
}

TEST_CASE("json round trip preserves predictions") {
    Rng rng(5);
    const auto X = random_matrix(rng, 80, 4);
    std::vector<double> y;
    for (const auto& row : X) {
        y.push_back(row[0] - 2.0 * row[1]);
    }
    const auto m = fit_gbt(X, y, 10, 0.1, 2);
    const auto back = BoostedModel::from_json(nlohmann::json::parse(m.to_json().dump()));
    CHECK(back.to_json().dump() == m.to_json().dump());
    for (const auto& x : X) {
        CHECK(back.predict(x) == m.predict(x));
    }
    CHECK_THROWS_AS(m.predict(std::vector<double>(3)), ShapeError);
    auto broken = m.to_json();
    broken["trees"][0][0]["left"] = 999;
    CHECK_THROWS(BoostedModel::from_json(broken));
}

TEST_CASE("feature view has a fixed documented layout") {
    CohortConfig cfg;
    cfg.n_patients = 10;
    const auto cohort = generate(cfg);
    const auto x = features(cohort[0]);
    REQUIRE(x.size() == kNumFeatures);
    CHECK(x[0] == cohort[0].age_years);
    CHECK(x[1] == (cohort[0].menopause ? 1.0 : 0.0));
    CHECK(x[11] == cohort[0].channel_mean(Channel::resting_hr));
    CHECK(x[19] == cohort[0].prior_pasc_score);
    CHECK(feature_names()[19] == "prior_pasc_score");
}

TEST_CASE("boosting beats the mean predictor on the default cohort") {
    RunConfig cfg;
    cfg.seeds = {42};
    const auto res = run_baselines(cfg);
    const double gbt = res.gbt_test.rows[0].rmse;
    const double mean = res.mean_test.rows[0].rmse;
    CHECK(gbt <= 0.8 * mean);
    CHECK(res.gbt_test.model == "gbt_baseline");
    CHECK(res.mean_ood.evaluation == "test_ood");
}
