#include <doctest.h>

#include <cmath>
#include <set>

#include "cdr/disentangle.hpp"
#include "cdr/model_check.hpp"
#include "cdr/rng.hpp"

using namespace cdr;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) {
        x = sd * rng.normal();
    }
    return Tensor::from({r, c}, std::move(v));
}

MlpParams zero_gate(std::size_t d, double b0, double b1) {
    return {Tensor::zeros({d, 4}), Tensor::zeros({4}), Tensor::zeros({4, 2}), Tensor::from({2}, {b0, b1})};
}

std::vector<double> row(const Tensor& t, std::size_t r) {
    std::vector<double> out;
    for (std::size_t c = 0; c < t.cols(); ++c) {
        out.push_back(t.at(r, c));
    }
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// The mix loss written as the printed double sum over anchors, views and
// in-batch candidates.
double info_nce_loop(const Tensor& h_mix, const Tensor& h, std::size_t K, double tau) {
    const std::size_t B = h.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < K; ++j) {
            const auto m = row(h_mix, i * K + j);
            double denom = 0.0;
            for (std::size_t n = 0; n < B; ++n) {
                denom += std::exp(cosine(m, row(h, n)) / tau);
            }
            total += -std::log(std::exp(cosine(m, row(h, i)) / tau) / denom);
        }
    }
    return total / static_cast<double>(B * K);
}

TokenSequence seq_of(std::vector<int> ids, std::size_t T) {
    TokenSequence s;
    s.ids = std::move(ids);
    s.ids.resize(T, Vocabulary::kPad);
    s.categories.assign(T, TokenCategory::structural);
    return s;
}

Model small_model(std::uint64_t seed, CombineMode combine = CombineMode::add) {
    ModelDims dims;
    dims.encoder.vocab_size = 30;
    dims.encoder.seq_len = 12;
    dims.encoder.d_model = 8;
    dims.encoder.n_blocks = 1;
    dims.encoder.n_heads = 2;
    dims.gate_hidden = 6;
    dims.combine = combine;
    return init_model(seed, dims);
}

PackedBatch small_batch() {
    return pack(std::vector<TokenSequence>{seq_of({1, 4, 8, 12, 5}, 12), seq_of({1, 7, 9, 2, 3, 20, 21, 22}, 12),
                                           seq_of({1, 11, 13}, 12), seq_of({1, 14, 15, 16, 17, 18, 19}, 12)});
}

}  // namespace

TEST_CASE("symmetric gate logits give an even split") {
    Rng rng(1);
    const Tensor H = random_tensor(rng, 5, 3);
    const Tensor A = gate(H, zero_gate(3, 0.0, 0.0));
    for (std::size_t r = 0; r < 5; ++r) {
        CHECK(A.at(r, 0) == 0.5);
        CHECK(A.at(r, 1) == 0.5);
    }
}

TEST_CASE("gate bias (-2, 2) gives the analytic softmax") {
    Rng rng(2);
    const Tensor A = gate(random_tensor(rng, 4, 3), zero_gate(3, -2.0, 2.0));
    for (std::size_t r = 0; r < 4; ++r) {
        CHECK(A.at(r, 0) == doctest::Approx(0.01799).epsilon(1e-4));
        CHECK(A.at(r, 1) == doctest::Approx(0.98201).epsilon(1e-5));
        CHECK(A.at(r, 0) == doctest::Approx(1.0 / (1.0 + std::exp(4.0))).epsilon(1e-14));
    }
}

TEST_CASE("gate rows sum to one on random inputs") {
    Rng rng(3);
    const Tensor H = random_tensor(rng, 10000, 8, 3.0);
    MlpParams p{random_tensor(rng, 8, 6, 2.0), reshape(random_tensor(rng, 1, 6), {6}), random_tensor(rng, 6, 2, 4.0),
                reshape(random_tensor(rng, 1, 2), {2})};
    const Tensor A = gate(H, p);
    for (std::size_t r = 0; r < A.rows(); ++r) {
        CHECK(A.at(r, 0) >= 0.0);
        CHECK(A.at(r, 1) >= 0.0);
        CHECK(std::abs(A.at(r, 0) + A.at(r, 1) - 1.0) <= 1e-12);
    }
    MlpParams wide = p;
    wide.w2 = random_tensor(rng, 6, 3);
    wide.b2 = Tensor::zeros({3});
    CHECK_THROWS_AS(gate(H, wide), ShapeError);
}

TEST_CASE("pooling: uniform weights, one-hot weights and a hand example") {
    const Tensor H = Tensor::from({3, 2}, {1.0, 2.0, 3.0, -1.0, 0.5, 4.0});
    const std::vector<Segment> seg{{0, 3, 3}};
    {
        const auto p = pool(H, Tensor::full({3, 2}, 0.5), seg);
        CHECK(p.x_o.at(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
        CHECK(p.x_o.at(0, 1) == doctest::Approx(5.0 / 3.0).epsilon(1e-15));
    }
    {
        const auto p = pool(H, Tensor::from({3, 2}, {1, 0, 0, 1, 1, 0}), seg);
        CHECK(p.x_o.at(0, 0) == 3.0);
        CHECK(p.x_o.at(0, 1) == -1.0);
        CHECK(p.x_c.at(0, 0) == doctest::Approx(0.75).epsilon(1e-15));
        CHECK(p.x_c.at(0, 1) == doctest::Approx(3.0).epsilon(1e-15));
    }
    {
        // Causal weights .2, .7, .4; confounder weights .8, .3, .6.
        const auto p = pool(H, Tensor::from({3, 2}, {0.8, 0.2, 0.3, 0.7, 0.6, 0.4}), seg);
        const double xo0 = (0.2 * 1.0 + 0.7 * 3.0 + 0.4 * 0.5) / 1.3;
        const double xo1 = (0.2 * 2.0 + 0.7 * -1.0 + 0.4 * 4.0) / 1.3;
        const double xc0 = (0.8 * 1.0 + 0.3 * 3.0 + 0.6 * 0.5) / 1.7;
        const double xc1 = (0.8 * 2.0 + 0.3 * -1.0 + 0.6 * 4.0) / 1.7;
        CHECK(p.x_o.at(0, 0) + p.x_c.at(0, 0) == doctest::Approx(xo0 + xc0).epsilon(1e-12));
        CHECK(p.x_o.at(0, 1) + p.x_c.at(0, 1) == doctest::Approx(xo1 + xc1).epsilon(1e-12));
        CHECK(p.x_o.at(0, 0) == doctest::Approx(xo0).epsilon(1e-12));
        CHECK(p.x_c.at(0, 1) == doctest::Approx(xc1).epsilon(1e-12));
    }
    CHECK_THROWS_AS(pool(H, Tensor::full({2, 2}, 0.5), seg), ShapeError);
}

TEST_CASE("mix adds or concatenates") {
    const Tensor a = Tensor::from({1, 2}, {1, 2});
    const Tensor b = Tensor::from({1, 2}, {3, 4});
    const Tensor s = mix(a, b, CombineMode::add);
    CHECK(s.at(0, 0) == 4.0);
    CHECK(s.at(0, 1) == 6.0);
    const Tensor c = mix(a, b, CombineMode::concat);
    REQUIRE(c.cols() == 4);
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3, 4});
    const Tensor z = mix(a, Tensor::zeros({1, 2}), CombineMode::add);
    CHECK(z.at(0, 0) == 1.0);
    CHECK(z.at(0, 1) == 2.0);
    CHECK(combine_from_string("concat") == CombineMode::concat);
    CHECK_THROWS_AS(combine_from_string("stack"), std::invalid_argument);
}

TEST_CASE("partners exclude self and are uniform") {
    Rng rng(4);
    const auto two = sample_partners(2, 1, rng);
    CHECK(two[0][0] == 1);
    CHECK(two[1][0] == 0);
    CHECK(sample_partners(1, 2, rng).empty());

    for (int t = 0; t < 10000; ++t) {
        const auto p = sample_partners(5, 2, rng);
        for (std::size_t i = 0; i < 5; ++i) {
            for (auto j : p[i]) {
                CHECK_FALSE(j == i);
            }
        }
    }

    constexpr std::size_t B = 8, draws = 100000;
    std::vector<std::vector<double>> counts(B, std::vector<double>(B, 0.0));
    for (std::size_t t = 0; t < draws; ++t) {
        const auto p = sample_partners(B, 1, rng);
        for (std::size_t i = 0; i < B; ++i) {
            counts[i][p[i][0]] += 1.0;
        }
    }
    const double expected = static_cast<double>(draws) / (B - 1);
    double chi2 = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
        CHECK(counts[i][i] == 0.0);
        for (std::size_t j = 0; j < B; ++j) {
            if (j != i) {
                CHECK(std::abs(counts[i][j] / expected - 1.0) <= 0.03);
                chi2 += (counts[i][j] - expected) * (counts[i][j] - expected) / expected;
            }
        }
    }
    // 99.9th percentile of chi-square with 8 * 6 degrees of freedom.
    CHECK(chi2 < 84.04);
}

TEST_CASE("mix loss closed forms") {
    const Tensor same = Tensor::from({2, 3}, {1, 2, 3, 1, 2, 3});
    CHECK(info_nce_mix_loss(same, same, 1, 1.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const Tensor h = Tensor::from({2, 2}, {1, 0, -1, 0});
    CHECK(info_nce_mix_loss(h, h, 1, 1.0).item() ==
          doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-12));
    CHECK(std::log1p(std::exp(-2.0)) == doctest::Approx(0.126928).epsilon(1e-6));

    CHECK_THROWS_AS(info_nce_mix_loss(h, h, 1, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(info_nce_mix_loss(h, h, 2, 1.0), ShapeError);
}

TEST_CASE("mix loss equals the explicit triple loop") {
    Rng rng(5);
    for (std::size_t B : {2, 4, 8}) {
        for (std::size_t K : {1, 2}) {
            for (double tau : {1.0, 0.3}) {
                const Tensor h = random_tensor(rng, B, 5);
                const Tensor m = random_tensor(rng, B * K, 5);
                CHECK(std::abs(info_nce_mix_loss(m, h, K, tau).item() - info_nce_loop(m, h, K, tau)) <= 1e-10);
            }
        }
    }
}

TEST_CASE("zero-norm vectors have similarity zero") {
    const Tensor h = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor m = Tensor::from({2, 2}, {0, 0, 1, 1});
    const Tensor s = cosine_sim(m, h);
    CHECK(s.at(0, 0) == 0.0);
    CHECK(s.at(0, 1) == 0.0);
    CHECK(s.at(1, 0) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
}

TEST_CASE("causal head output does not depend on the partner") {
    for (auto mode : {CombineMode::add, CombineMode::concat}) {
        const Model model = small_model(11, mode);
        const auto batch = small_batch();
        const std::vector<std::vector<std::size_t>> p1{{1, 2}, {0, 3}, {3, 1}, {2, 0}};
        const std::vector<std::vector<std::size_t>> p2{{3, 3}, {2, 2}, {0, 1}, {1, 1}};
        const auto a = forward_batch(model, batch, p1);
        const auto b = forward_batch(model, batch, p2);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(a.y_o.at(i, 0) == b.y_o.at(i, 0));
        }
        const auto unmixed = forward_batch(model, batch, {});
        CHECK_FALSE(unmixed.mixed());
        const auto pred = predict(model, batch);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(unmixed.y_o.at(i, 0) == a.y_o.at(i, 0));
            CHECK(pred[i] == model.label_mean + model.label_sd * a.y_o.at(i, 0));
        }
        CHECK(predict(model, batch) == pred);
        CHECK(a.x_mix.cols() == (mode == CombineMode::concat ? 16u : 8u));
        CHECK(a.h_mix.cols() == 8);
        CHECK(a.y_co.rows() == 8);
    }
}

TEST_CASE("total loss is the weighted sum of its components") {
    const Model model = small_model(12);
    const auto batch = small_batch();
    const std::vector<std::vector<std::size_t>> partners{{1, 2}, {0, 3}, {3, 1}, {2, 0}};
    const auto out = forward_batch(model, batch, partners);
    const std::vector<double> y{0.3, -1.2, 0.8, 0.1};
    const LossWeights w{1.0, 0.5, 1.0, 0.1};
    const MixSettings ms{2, 0.7};

    double l_o = 0, l_c = 0, l_co = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        l_o += std::pow(out.y_o.at(i, 0) - y[i], 2) / 4.0;
        l_c += std::pow(out.y_c.at(i, 0) - y[i], 2) / 4.0;
        for (std::size_t k = 0; k < 2; ++k) {
            l_co += std::pow(out.y_co.at(i * 2 + k, 0) - y[i], 2) / 8.0;
        }
    }
    const double l_mix = info_nce_loop(out.h_mix, out.anchor, 2, 0.7);
    const auto parts = total_loss(out, y, w, ms);
    CHECK(parts.causal == doctest::Approx(l_o).epsilon(1e-12));
    CHECK(parts.confounder == doctest::Approx(l_c).epsilon(1e-12));
    CHECK(parts.joint == doctest::Approx(l_co).epsilon(1e-12));
    CHECK(parts.mix == doctest::Approx(l_mix).epsilon(1e-12));
    CHECK(parts.total.item() == doctest::Approx(l_o + 0.5 * l_c + l_co + 0.1 * l_mix).epsilon(1e-12));

    // Mean objective regresses the confounder head onto a constant.
    const auto mean_parts = total_loss(out, y, w, ms, ConfounderObjective::mean, 0.25);
    double l_c_mean = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        l_c_mean += std::pow(out.y_c.at(i, 0) - 0.25, 2) / 4.0;
    }
    CHECK(mean_parts.confounder == doctest::Approx(l_c_mean).epsilon(1e-12));

    CHECK_THROWS_AS(total_loss(out, y, LossWeights{1.0, -0.1, 1.0, 0.1}, ms), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(out, {1.0}, w, ms), ShapeError);
}

TEST_CASE("zero disentanglement weights reduce to plain regression") {
    const Model model = small_model(13);
    const auto batch = small_batch();
    const std::vector<double> y{0.3, -1.2, 0.8, 0.1};
    const auto out = forward_batch(model, batch, {{1, 2}, {0, 3}, {3, 1}, {2, 0}});
    const auto parts = total_loss(out, y, LossWeights{1.0, 0.0, 0.0, 0.0}, MixSettings{});
    CHECK(parts.total.item() == parts.causal);
    for (auto nt : model.named()) {
        nt.tensor.zero_grad();
    }
    Tensor total = parts.total;
    total.backward();
    for (const auto& nt : model.heads.named()) {
        if (nt.name.rfind("f_c.", 0) == 0 || nt.name.rfind("f_co.", 0) == 0) {
            INFO(nt.name);
            bool zero = true;
            if (nt.tensor.has_grad()) {
                for (double g : nt.tensor.grad()) {
                    zero = zero && g == 0.0;
                }
            }
            CHECK(zero);
        }
    }
}

TEST_CASE("full model gradients match finite differences") {
    for (auto mode : {CombineMode::add, CombineMode::concat}) {
        for (auto objective : {ConfounderObjective::label, ConfounderObjective::mean}) {
            ModelCheckSettings s;
            s.combine = mode;
            s.objective = objective;
            const auto results = check_model_gradients(s);
            CHECK(results.size() == small_model(1, mode).named().size());
            for (const auto& r : results) {
                INFO(r.name);
                CHECK(r.max_rel_error <= 1e-4);
            }
        }
    }
}
