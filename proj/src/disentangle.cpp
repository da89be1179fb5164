#include "cdr/disentangle.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace cdr {

namespace {

Tensor uniform_param(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) {
        x = rng.uniform(-a, a);
    }
    return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

MlpParams init_mlp(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
    return {uniform_param(rng, in, hidden), Tensor::zeros({hidden}, true), uniform_param(rng, hidden, out),
            Tensor::zeros({out}, true)};
}

void push_mlp(std::vector<NamedTensor>& out, const std::string& prefix, const MlpParams& p) {
    out.push_back({prefix + ".w1", p.w1});
    out.push_back({prefix + ".b1", p.b1});
    out.push_back({prefix + ".w2", p.w2});
    out.push_back({prefix + ".b2", p.b2});
}

Tensor column(const std::vector<double>& v) { return Tensor::from({v.size(), 1}, v); }

}  // namespace

std::string to_string(CombineMode m) { return m == CombineMode::add ? "add" : "concat"; }

CombineMode combine_from_string(const std::string& s) {
    if (s == "add") {
        return CombineMode::add;
    }
    if (s == "concat") {
        return CombineMode::concat;
    }
    throw std::invalid_argument("unknown combine mode '" + s + "' (expected add or concat)");
}

std::string to_string(ConfounderObjective o) { return o == ConfounderObjective::label ? "label" : "mean"; }

ConfounderObjective objective_from_string(const std::string& s) {
    if (s == "label") {
        return ConfounderObjective::label;
    }
    if (s == "mean") {
        return ConfounderObjective::mean;
    }
    throw std::invalid_argument("unknown confounder_objective '" + s + "' (expected label or mean)");
}

std::vector<NamedTensor> DisentangleParams::named() const {
    std::vector<NamedTensor> out;
    push_mlp(out, "gate", gate);
    push_mlp(out, "f_o", f_o);
    push_mlp(out, "f_c", f_c);
    push_mlp(out, "f_co", f_co);
    if (combine == CombineMode::concat) {
        out.push_back({"projection", projection});
    }
    return out;
}

DisentangleParams init_disentangle(std::uint64_t seed, std::size_t d_model, std::size_t gate_hidden,
                                   CombineMode combine) {
    if (d_model == 0 || gate_hidden == 0) {
        throw ShapeError("disentangle dims: sizes must be positive");
    }
    Rng rng(seed);
    DisentangleParams p;
    p.d_model = d_model;
    p.gate_hidden = gate_hidden;
    p.combine = combine;
    p.gate = init_mlp(rng, d_model, gate_hidden, 2);
    p.f_o = init_mlp(rng, d_model, d_model, 1);
    p.f_c = init_mlp(rng, d_model, d_model, 1);
    const std::size_t mix_width = combine == CombineMode::concat ? 2 * d_model : d_model;
    p.f_co = init_mlp(rng, mix_width, d_model, 1);
    if (combine == CombineMode::concat) {
        p.projection = uniform_param(rng, 2 * d_model, d_model);
    }
    return p;
}

std::vector<NamedTensor> Model::named() const {
    auto out = encoder.named();
    for (auto& t : heads.named()) {
        out.push_back(std::move(t));
    }
    return out;
}

Model init_model(std::uint64_t seed, const ModelDims& dims) {
    Model m;
    m.encoder = init_encoder(derive_seed(seed, 11), dims.encoder);
    m.heads = init_disentangle(derive_seed(seed, 12), dims.encoder.d_model, dims.gate_hidden, dims.combine);
    return m;
}

Tensor mlp(const MlpParams& p, const Tensor& x) {
    return add_row(matmul(tanh(add_row(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

Tensor gate(const Tensor& H, const MlpParams& params) {
    if (params.b2.size() != 2) {
        throw ShapeError("gate: output layer must have width 2, got " + shape_str(params.b2.shape()));
    }
    return softmax_rows(mlp(params, H));
}

Pooled pool(const Tensor& H, const Tensor& A, std::span<const Segment> segments) {
    if (A.rows() != H.rows() || A.cols() != 2) {
        throw ShapeError("pool: gate matrix " + shape_str(A.shape()) + " does not match hidden states " +
                         shape_str(H.shape()));
    }
    return {weighted_segment_mean(H, select_col(A, 1), segments),
            weighted_segment_mean(H, select_col(A, 0), segments)};
}

Tensor mix(const Tensor& x_o, const Tensor& x_c, CombineMode mode) {
    switch (mode) {
        case CombineMode::add:
            return add(x_o, x_c);
        case CombineMode::concat:
            return concat(x_o, x_c);
    }
    throw std::invalid_argument("mix: unknown combine mode");
}

std::vector<std::vector<std::size_t>> sample_partners(std::size_t batch_size, std::size_t K, Rng& rng) {
    if (batch_size < 2) {
        std::clog << "mixing skipped: batch of " << batch_size << " has no partner candidates\n";
        return {};
    }
    std::vector<std::vector<std::size_t>> partners(batch_size, std::vector<std::size_t>(K));
    for (std::size_t i = 0; i < batch_size; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            const auto r = static_cast<std::size_t>(rng.index(batch_size - 1));
            partners[i][k] = r >= i ? r + 1 : r;
        }
    }
    return partners;
}

Tensor info_nce_mix_loss(const Tensor& h_mix, const Tensor& h, std::size_t K, double tau) {
    if (!(tau > 0.0)) {
        throw std::invalid_argument("info_nce_mix_loss: tau must be > 0");
    }
    const std::size_t B = h.rows();
    if (K == 0 || h_mix.rows() != B * K || h_mix.cols() != h.cols()) {
        throw ShapeError("info_nce_mix_loss: h_mix " + shape_str(h_mix.shape()) + " is not (B*K)x d for h " +
                         shape_str(h.shape()) + " and K = " + std::to_string(K));
    }
    std::vector<std::size_t> targets(B * K);
    for (std::size_t r = 0; r < targets.size(); ++r) {
        targets[r] = r / K;
    }
    return cross_entropy_rows(scale(cosine_sim(h_mix, h), 1.0 / tau), targets);
}

void LossWeights::validate() const {
    for (double w : {causal, confounder, joint, mix}) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw std::invalid_argument("loss weights must be finite and >= 0");
        }
    }
}

BatchOutputs forward_batch(const Model& model,
                           const PackedBatch& batch,
                           const std::vector<std::vector<std::size_t>>& partners,
                           EncoderTrace* trace) {
    const auto& hp = model.heads;
    BatchOutputs out;
    out.H = encode_packed(batch, model.encoder, trace);
    out.A = gate(out.H, hp.gate);
    auto pooled = pool(out.H, out.A, batch.segments);
    out.x_o = pooled.x_o;
    out.x_c = pooled.x_c;
    out.y_o = mlp(hp.f_o, out.x_o);
    out.y_c = mlp(hp.f_c, out.x_c);
    out.anchor = hp.combine == CombineMode::add ? add(out.x_o, out.x_c)
                                                : matmul(concat(out.x_o, out.x_c), hp.projection);
    if (partners.empty()) {
        return out;
    }
    const std::size_t B = batch.batch_size();
    if (partners.size() != B) {
        throw ShapeError("forward_batch: partner table has " + std::to_string(partners.size()) + " rows for batch " +
                         std::to_string(B));
    }
    const std::size_t K = partners.front().size();
    std::vector<std::size_t> causal_idx, conf_idx;
    for (std::size_t i = 0; i < B; ++i) {
        if (partners[i].size() != K) {
            throw ShapeError("forward_batch: ragged partner table");
        }
        for (std::size_t j : partners[i]) {
            if (j >= B) {
                throw ShapeError("forward_batch: partner index out of range");
            }
            causal_idx.push_back(i);
            conf_idx.push_back(j);
        }
    }
    out.partners = partners;
    out.K = K;
    out.x_mix = mix(gather_rows(out.x_o, causal_idx), gather_rows(out.x_c, conf_idx), hp.combine);
    out.h_mix = hp.combine == CombineMode::add ? out.x_mix : matmul(out.x_mix, hp.projection);
    out.y_co = mlp(hp.f_co, out.x_mix);
    return out;
}

LossParts total_loss(const BatchOutputs& out,
                     const std::vector<double>& y,
                     const LossWeights& weights,
                     const MixSettings& mix_settings,
                     ConfounderObjective objective,
                     double confounder_target) {
    weights.validate();
    const std::size_t B = out.y_o.rows();
    if (y.size() != B) {
        throw ShapeError("total_loss: " + std::to_string(y.size()) + " labels for batch of " + std::to_string(B));
    }
    const Tensor target = column(y);
    LossParts parts;
    const Tensor l_o = mse(out.y_o, target);
    const Tensor c_target =
        objective == ConfounderObjective::label ? target : Tensor::full({B, 1}, confounder_target);
    const Tensor l_c = mse(out.y_c, c_target);
    parts.causal = l_o.item();
    parts.confounder = l_c.item();

    std::vector<Tensor> terms;
    auto add_term = [&](double w, const Tensor& l) {
        if (w > 0.0) {
            terms.push_back(w == 1.0 ? l : scale(l, w));
        }
    };
    add_term(weights.causal, l_o);
    add_term(weights.confounder, l_c);
    if (out.mixed()) {
        std::vector<double> y_rep;
        y_rep.reserve(B * out.K);
        for (std::size_t i = 0; i < B; ++i) {
            y_rep.insert(y_rep.end(), out.K, y[i]);
        }
        const Tensor l_co = mse(out.y_co, column(y_rep));
        const Tensor l_mix = info_nce_mix_loss(out.h_mix, out.anchor, out.K, mix_settings.tau);
        parts.joint = l_co.item();
        parts.mix = l_mix.item();
        add_term(weights.joint, l_co);
        add_term(weights.mix, l_mix);
    }
    if (terms.empty()) {
        parts.total = scale(l_o, 0.0);
        return parts;
    }
    Tensor total = terms.front();
    for (std::size_t t = 1; t < terms.size(); ++t) {
        total = add(total, terms[t]);
    }
    parts.total = total;
    return parts;
}

std::vector<double> predict(const Model& model, const PackedBatch& batch) {
    NoGradGuard guard;
    const Tensor H = encode_packed(batch, model.encoder);
    const Tensor A = gate(H, model.heads.gate);
    const Tensor x_o = weighted_segment_mean(H, select_col(A, 1), batch.segments);
    const Tensor y = mlp(model.heads.f_o, x_o);
    std::vector<double> out(y.data().begin(), y.data().end());
    for (auto& v : out) {
        v = model.label_mean + model.label_sd * v;
    }
    return out;
}

double predict(const Model& model, const TokenSequence& seq) {
    return predict(model, pack(std::vector<const TokenSequence*>{&seq})).front();
}

std::vector<double> causal_saliency(const Model& model, const PackedBatch& batch) {
    NoGradGuard guard;
    const Tensor A = gate(encode_packed(batch, model.encoder), model.heads.gate);
    std::vector<double> s(batch.rows());
    for (std::size_t r = 0; r < s.size(); ++r) {
        s[r] = A.at(r, 1);
    }
    return s;
}

}  // namespace cdr
