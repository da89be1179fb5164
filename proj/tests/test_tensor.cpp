#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

#include "cdr/gradcheck.hpp"
#include "cdr/ops.hpp"
#include "cdr/rng.hpp"

using namespace cdr;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
    }
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Contract the op output with fixed random weights so that every output
// element contributes a distinct amount to the scalar.
Tensor contract(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

struct OpCase {
    std::string name;
    // Builds (params, loss) for one random trial.
    std::function<std::pair<std::vector<Tensor>, std::function<Tensor()>>(Rng&)> make;
};

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.index(hi - lo + 1));
}

std::vector<OpCase> op_cases() {
    std::vector<OpCase> cases;
    auto unary_case = [&](std::string name, std::function<Tensor(const Tensor&)> f, double lo, double hi) {
        cases.push_back({name, [f, lo, hi](Rng& rng) {
                             const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
                             Tensor x = random_tensor(rng, {m, n}, lo, hi);
                             Tensor w = random_tensor(rng, f(x.detach()).shape(), -1, 1, false);
                             return std::pair{std::vector<Tensor>{x}, std::function<Tensor()>([=] {
                                                  return contract(f(x), w);
                                              })};
                         }});
    };
    unary_case("tanh", [](const Tensor& x) { return cdr::tanh(x); }, -2, 2);
    unary_case("gelu", [](const Tensor& x) { return gelu(x); }, -2, 2);
    unary_case("exp", [](const Tensor& x) { return cdr::exp(x); }, -2, 2);
    unary_case("log", [](const Tensor& x) { return cdr::log(x); }, 0.25, 2);
    unary_case("scale", [](const Tensor& x) { return scale(x, -1.7); }, -2, 2);
    unary_case("softmax_rows", [](const Tensor& x) { return softmax_rows(x); }, -2, 2);
    unary_case("mean_rows", [](const Tensor& x) { return mean_rows(x); }, -2, 2);
    unary_case("sum", [](const Tensor& x) { return scale(sum(x), 1.0); }, -2, 2);
    unary_case("mean", [](const Tensor& x) { return mean(x); }, -2, 2);
    unary_case("reshape", [](const Tensor& x) { return reshape(x, {x.size()}); }, -2, 2);

    auto binary_case = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> f) {
        cases.push_back({name, [f](Rng& rng) {
                             const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
                             Tensor a = random_tensor(rng, {m, n});
                             Tensor b = random_tensor(rng, {m, n});
                             Tensor w = random_tensor(rng, f(a.detach(), b.detach()).shape(), -1, 1, false);
                             return std::pair{std::vector<Tensor>{a, b},
                                              std::function<Tensor()>([=] { return contract(f(a, b), w); })};
                         }});
    };
    binary_case("add", [](const Tensor& a, const Tensor& b) { return add(a, b); });
    binary_case("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); });
    binary_case("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); });
    binary_case("mse", [](const Tensor& a, const Tensor& b) { return scale(mse(a, b), 1.0); });

    cases.push_back({"matmul", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 5), n = dim(rng, 1, 4);
                         Tensor a = random_tensor(rng, {m, k});
                         Tensor b = random_tensor(rng, {k, n});
                         Tensor w = random_tensor(rng, {m, n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a, b},
                                          std::function<Tensor()>([=] { return contract(matmul(a, b), w); })};
                     }});
    cases.push_back({"add_row", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
                         Tensor a = random_tensor(rng, {m, n});
                         Tensor b = random_tensor(rng, {n});
                         Tensor w = random_tensor(rng, {m, n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a, b},
                                          std::function<Tensor()>([=] { return contract(add_row(a, b), w); })};
                     }});
    cases.push_back({"layer_norm", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 2, 6);
                         Tensor x = random_tensor(rng, {m, n});
                         Tensor g = random_tensor(rng, {n});
                         Tensor b = random_tensor(rng, {n});
                         Tensor w = random_tensor(rng, {m, n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{x, g, b}, std::function<Tensor()>([=] {
                                              return contract(layer_norm(x, g, b), w);
                                          })};
                     }});
    cases.push_back({"concat", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), p = dim(rng, 1, 3), q = dim(rng, 1, 3);
                         Tensor a = random_tensor(rng, {m, p});
                         Tensor b = random_tensor(rng, {m, q});
                         Tensor w = random_tensor(rng, {m, p + q}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a, b},
                                          std::function<Tensor()>([=] { return contract(concat(a, b), w); })};
                     }});
    cases.push_back({"concat_rows", [](Rng& rng) {
                         const std::size_t n = dim(rng, 1, 4);
                         Tensor a = random_tensor(rng, {dim(rng, 1, 3), n});
                         Tensor b = random_tensor(rng, {dim(rng, 1, 3), n});
                         Tensor w = random_tensor(rng, {a.rows() + b.rows(), n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a, b}, std::function<Tensor()>([=] {
                                              return contract(concat_rows({a, b}), w);
                                          })};
                     }});
    cases.push_back({"cosine_sim", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4), d = dim(rng, 2, 5);
                         Tensor a = random_tensor(rng, {m, d});
                         Tensor b = random_tensor(rng, {n, d});
                         Tensor w = random_tensor(rng, {m, n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a, b}, std::function<Tensor()>([=] {
                                              return contract(cosine_sim(a, b), w);
                                          })};
                     }});
    cases.push_back({"gather_rows", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4), len = dim(rng, 1, 6);
                         Tensor a = random_tensor(rng, {m, n});
                         std::vector<std::size_t> idx(len);
                         for (auto& i : idx) {
                             i = rng.index(m);
                         }
                         Tensor w = random_tensor(rng, {len, n}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([=] {
                                              return contract(gather_rows(a, idx), w);
                                          })};
                     }});
    cases.push_back({"select_col", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
                         Tensor a = random_tensor(rng, {m, n});
                         const std::size_t c = rng.index(n);
                         Tensor w = random_tensor(rng, {m, 1}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([=] {
                                              return contract(select_col(a, c), w);
                                          })};
                     }});
    cases.push_back({"take_per_row", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
                         Tensor a = random_tensor(rng, {m, n});
                         std::vector<std::size_t> cols(m);
                         for (auto& c : cols) {
                             c = rng.index(n);
                         }
                         Tensor w = random_tensor(rng, {m, 1}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([=] {
                                              return contract(take_per_row(a, cols), w);
                                          })};
                     }});
    cases.push_back({"cross_entropy_rows", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 5);
                         Tensor a = random_tensor(rng, {m, n});
                         std::vector<std::size_t> targets(m);
                         for (auto& t : targets) {
                             t = rng.index(n);
                         }
                         return std::pair{std::vector<Tensor>{a}, std::function<Tensor()>([=] {
                                              return cross_entropy_rows(a, targets);
                                          })};
                     }});
    cases.push_back({"multi_head_attention", [](Rng& rng) {
                         const std::size_t heads = dim(rng, 1, 2);
                         const std::size_t d = heads * dim(rng, 1, 3);
                         std::vector<Segment> segs;
                         std::size_t rows = 0;
                         for (std::size_t s = 0, ns = dim(rng, 1, 3); s < ns; ++s) {
                             const std::size_t len = dim(rng, 1, 4);
                             segs.push_back({rows, len, dim(rng, 1, len)});
                             rows += len;
                         }
                         Tensor q = random_tensor(rng, {rows, d});
                         Tensor k = random_tensor(rng, {rows, d});
                         Tensor v = random_tensor(rng, {rows, d});
                         Tensor w = random_tensor(rng, {rows, d}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{q, k, v}, std::function<Tensor()>([=] {
                                              return contract(multi_head_attention(q, k, v, segs, heads), w);
                                          })};
                     }});
    cases.push_back({"weighted_segment_mean", [](Rng& rng) {
                         const std::size_t d = dim(rng, 1, 4);
                         std::vector<Segment> segs;
                         std::size_t rows = 0;
                         for (std::size_t s = 0, ns = dim(rng, 1, 3); s < ns; ++s) {
                             const std::size_t len = dim(rng, 1, 4);
                             segs.push_back({rows, len, dim(rng, 1, len)});
                             rows += len;
                         }
                         Tensor h = random_tensor(rng, {rows, d});
                         Tensor wt = random_tensor(rng, {rows, 1}, 0.1, 2.0);
                         Tensor w = random_tensor(rng, {segs.size(), d}, -1, 1, false);
                         return std::pair{std::vector<Tensor>{h, wt}, std::function<Tensor()>([=] {
                                              return contract(weighted_segment_mean(h, wt, segs), w);
                                          })};
                     }});
    return cases;
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor i = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(a, i);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax of equal logits is uniform") {
    Tensor y = softmax_rows(Tensor::row({0, 0}));
    CHECK(y.at(0, 0) == 0.5);
    CHECK(y.at(0, 1) == 0.5);
}

TEST_CASE("cosine similarity of orthogonal vectors") {
    CHECK(cosine_sim(Tensor::row({1, 0}), Tensor::row({0, 1})).item() == 0.0);
    CHECK(cosine_sim(Tensor::row({2, 0}), Tensor::row({3, 0})).item() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("backward: analytic derivatives") {
    SUBCASE("sum of squares") {
        Tensor x = Tensor::row({1, 2}, true);
        sum(mul(x, x)).backward();
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
    }
    SUBCASE("mse against zero, single element") {
        Tensor x = Tensor::from({1}, {3}, true);
        mse(x, Tensor::zeros({1})).backward();
        CHECK(x.grad()[0] == 6.0);
    }
    SUBCASE("cosine of a vector with itself is constant") {
        Tensor x = Tensor::row({0.3, -1.2, 0.7}, true);
        cosine_sim(x, x).backward();
        for (double g : x.grad()) {
            CHECK(std::abs(g) < 1e-15);
        }
    }
    SUBCASE("zero-norm input yields zero similarity and zero gradient") {
        Tensor x = Tensor::row({0, 0}, true);
        Tensor y = Tensor::row({1, 2}, true);
        Tensor s = cosine_sim(x, y);
        CHECK(s.item() == 0.0);
        s.backward();
        for (double g : x.grad()) {
            CHECK(g == 0.0);
        }
        for (double g : y.grad()) {
            CHECK(g == 0.0);
        }
    }
}

TEST_CASE("backward error paths") {
    Tensor x = Tensor::row({1, 2}, true);
    Tensor y = sum(mul(x, x));
    y.backward();
    CHECK_THROWS_AS(y.backward(), GraphError);
    CHECK_THROWS_AS(mul(x, x).backward(), GraphError);  // non-scalar root
}

TEST_CASE("shape errors name the op and dims") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(4x5)") != std::string::npos);
    }
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("checked mode rejects non-finite values") {
    CHECK_THROWS_AS(Tensor::row({1.0, std::nan("")}), NonFiniteError);
    CHECK_THROWS_AS(cdr::exp(Tensor::row({1000.0})), NonFiniteError);
    set_checked_mode(false);
    CHECK_NOTHROW(Tensor::row({1.0, std::numeric_limits<double>::infinity()}));
    set_checked_mode(true);
}

TEST_CASE("no graph is recorded without grad inputs or under NoGradGuard") {
    Tensor a = Tensor::row({1, 2});
    CHECK(!mul(a, a).requires_grad());
    Tensor b = Tensor::row({1, 2}, true);
    NoGradGuard guard;
    CHECK(!mul(b, b).requires_grad());
}

TEST_CASE("random three-layer composite matches finite differences") {
    Rng rng(5);
    const std::size_t d = 5;
    Tensor x = random_tensor(rng, {1, d});
    Tensor w1 = random_tensor(rng, {d, d});
    Tensor w2 = random_tensor(rng, {d, d});
    Tensor w3 = random_tensor(rng, {d, 1});
    auto loss = [&] { return sum(matmul(gelu(matmul(cdr::tanh(matmul(x, w1)), w2)), w3)); };
    auto r = gradcheck::check("composite", {x, w1, w2, w3}, loss);
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("every op kind matches central finite differences over 100 trials") {
    Rng rng(20240);
    for (const auto& op : op_cases()) {
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            auto [params, loss] = op.make(rng);
            auto r = gradcheck::check(op.name, params, loss);
            worst = std::max(worst, r.max_rel_error);
        }
        INFO(op.name << " worst rel err " << worst);
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("softmax rows are positive and sum to one") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x = random_tensor(rng, {3, 1 + rng.index(7)}, -20, 20, false);
        Tensor y = softmax_rows(x);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) {
                CHECK(y.at(r, c) > 0.0);
                s += y.at(r, c);
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [] {
        Rng rng(99);
        Tensor a = random_tensor(rng, {4, 6});
        Tensor b = random_tensor(rng, {6, 3});
        Tensor g = random_tensor(rng, {3});
        Tensor z = layer_norm(matmul(a, b), g, Tensor::zeros({3}));
        sum(mul(softmax_rows(z), z)).backward();
        std::vector<double> out(a.grad().begin(), a.grad().end());
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        out.insert(out.end(), g.grad().begin(), g.grad().end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("attention weights exclude padded keys") {
    Rng rng(3);
    Tensor q = random_tensor(rng, {5, 4}, -2, 2, false);
    Tensor k = random_tensor(rng, {5, 4}, -2, 2, false);
    std::vector<Segment> segs{{0, 5, 3}};
    auto w = attention_weights(q, k, segs, 2);
    for (const auto& head : w[0]) {
        for (std::size_t i = 0; i < 5; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                if (j >= 3) {
                    CHECK(head[i * 5 + j] == 0.0);
                }
                s += head[i * 5 + j];
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("cross entropy equals negative log softmax") {
    Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.0, 500.0});
    const std::vector<std::size_t> targets{2, 0};
    const double r0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    const double r1 = 501.0 + std::log1p(std::exp(-501.0) + std::exp(-500.0));
    CHECK(cross_entropy_rows(logits, targets).item() == doctest::Approx(0.5 * (r0 + r1)).epsilon(1e-14));
    const std::vector<std::size_t> bad{3, 0};
    CHECK_THROWS_AS(cross_entropy_rows(logits, bad), ShapeError);
}
