#include "cdr/encoder.hpp"

#include <cmath>

#include "cdr/rng.hpp"

namespace cdr {

namespace {

Tensor uniform_param(Rng& rng, Shape shape, double a) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) {
        x = rng.uniform(-a, a);
    }
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor projection(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    return uniform_param(rng, {fan_in, fan_out}, std::sqrt(3.0 / static_cast<double>(fan_in)));
}

Tensor zeros_param(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_param(std::size_t n) { return Tensor::full({n}, 1.0, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row(matmul(x, w), b); }

}  // namespace

void EncoderDims::validate() const {
    if (vocab_size == 0 || seq_len == 0 || d_model == 0 || n_blocks == 0 || n_heads == 0) {
        throw ShapeError("encoder dims: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ShapeError("encoder dims: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                         std::to_string(n_heads));
    }
}

std::vector<NamedTensor> EncoderParams::named() const {
    std::vector<NamedTensor> out{{"encoder.token_embedding", token_embedding},
                                 {"encoder.position_embedding", position_embedding}};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& p = blocks[b];
        const std::string pre = "encoder.block" + std::to_string(b) + ".";
        out.push_back({pre + "ln1_gain", p.ln1_gain});
        out.push_back({pre + "ln1_bias", p.ln1_bias});
        out.push_back({pre + "wq", p.wq});
        out.push_back({pre + "bq", p.bq});
        out.push_back({pre + "wk", p.wk});
        out.push_back({pre + "bk", p.bk});
        out.push_back({pre + "wv", p.wv});
        out.push_back({pre + "bv", p.bv});
        out.push_back({pre + "wo", p.wo});
        out.push_back({pre + "bo", p.bo});
        out.push_back({pre + "ln2_gain", p.ln2_gain});
        out.push_back({pre + "ln2_bias", p.ln2_bias});
        out.push_back({pre + "w_ff1", p.w_ff1});
        out.push_back({pre + "b_ff1", p.b_ff1});
        out.push_back({pre + "w_ff2", p.w_ff2});
        out.push_back({pre + "b_ff2", p.b_ff2});
    }
    out.push_back({"encoder.final_gain", final_gain});
    out.push_back({"encoder.final_bias", final_bias});
    return out;
}

EncoderParams init_encoder(std::uint64_t seed, const EncoderDims& dims) {
    dims.validate();
    Rng rng(seed);
    const std::size_t d = dims.d_model;
    const double emb = std::sqrt(3.0 / static_cast<double>(d));
    EncoderParams p;
    p.dims = dims;
    p.token_embedding = uniform_param(rng, {dims.vocab_size, d}, emb);
    p.position_embedding = uniform_param(rng, {dims.seq_len, d}, emb);
    for (std::size_t b = 0; b < dims.n_blocks; ++b) {
        BlockParams bp;
        bp.ln1_gain = ones_param(d);
        bp.ln1_bias = zeros_param(d);
        bp.wq = projection(rng, d, d);
        bp.bq = zeros_param(d);
        bp.wk = projection(rng, d, d);
        bp.bk = zeros_param(d);
        bp.wv = projection(rng, d, d);
        bp.bv = zeros_param(d);
        bp.wo = projection(rng, d, d);
        bp.bo = zeros_param(d);
        bp.ln2_gain = ones_param(d);
        bp.ln2_bias = zeros_param(d);
        bp.w_ff1 = projection(rng, d, 4 * d);
        bp.b_ff1 = zeros_param(4 * d);
        bp.w_ff2 = projection(rng, 4 * d, d);
        bp.b_ff2 = zeros_param(d);
        p.blocks.push_back(std::move(bp));
    }
    p.final_gain = ones_param(d);
    p.final_bias = zeros_param(d);
    return p;
}

PackedBatch pack(const std::vector<const TokenSequence*>& seqs, bool keep_padding) {
    PackedBatch batch;
    for (const TokenSequence* s : seqs) {
        const std::size_t valid = s->valid_length();
        if (valid == 0) {
            throw ShapeError("pack: sequence '" + s->patient_id + "' has no tokens");
        }
        const std::size_t len = keep_padding ? s->ids.size() : valid;
        batch.segments.push_back({batch.rows(), len, valid});
        for (std::size_t t = 0; t < len; ++t) {
            if (s->ids[t] < 0) {
                throw ShapeError("pack: negative token id");
            }
            batch.token_ids.push_back(static_cast<std::size_t>(s->ids[t]));
            batch.positions.push_back(t);
            batch.categories.push_back(s->categories[t]);
        }
    }
    return batch;
}

PackedBatch pack(const std::vector<TokenSequence>& seqs, bool keep_padding) {
    std::vector<const TokenSequence*> ptrs;
    ptrs.reserve(seqs.size());
    for (const auto& s : seqs) {
        ptrs.push_back(&s);
    }
    return pack(ptrs, keep_padding);
}

Tensor encode_packed(const PackedBatch& batch, const EncoderParams& params, EncoderTrace* trace) {
    const auto& dims = params.dims;
    for (std::size_t i = 0; i < batch.rows(); ++i) {
        if (batch.token_ids[i] >= dims.vocab_size) {
            throw ShapeError("encoder: token id " + std::to_string(batch.token_ids[i]) + " >= vocabulary size " +
                             std::to_string(dims.vocab_size));
        }
        if (batch.positions[i] >= dims.seq_len) {
            throw ShapeError("encoder: position " + std::to_string(batch.positions[i]) + " >= sequence length " +
                             std::to_string(dims.seq_len));
        }
    }
    if (trace) {
        trace->attention.clear();
    }
    Tensor x = add(gather_rows(params.token_embedding, batch.token_ids),
                   gather_rows(params.position_embedding, batch.positions));
    for (const auto& b : params.blocks) {
        const Tensor h = layer_norm(x, b.ln1_gain, b.ln1_bias);
        const Tensor q = linear(h, b.wq, b.bq);
        const Tensor k = linear(h, b.wk, b.bk);
        const Tensor v = linear(h, b.wv, b.bv);
        if (trace) {
            trace->attention.push_back(attention_weights(q, k, batch.segments, dims.n_heads));
        }
        const Tensor att = multi_head_attention(q, k, v, batch.segments, dims.n_heads);
        x = add(x, linear(att, b.wo, b.bo));
        const Tensor h2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
        x = add(x, linear(gelu(linear(h2, b.w_ff1, b.b_ff1)), b.w_ff2, b.b_ff2));
    }
    return layer_norm(x, params.final_gain, params.final_bias);
}

Tensor encode_hidden(const TokenSequence& seq, const EncoderParams& params, EncoderTrace* trace) {
    if (seq.ids.size() != params.dims.seq_len) {
        throw ShapeError("encode_hidden: sequence length " + std::to_string(seq.ids.size()) +
                         " differs from encoder length " + std::to_string(params.dims.seq_len));
    }
    return encode_packed(pack(std::vector<const TokenSequence*>{&seq}, true), params, trace);
}

}  // namespace cdr
