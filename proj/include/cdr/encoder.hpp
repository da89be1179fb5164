#pragma once

// Pre-norm transformer encoder over narrative token sequences.
//
// Batches are packed: the rows of every sequence are stacked into one N×d
// matrix and attention runs within each sequence's segment. Padding rows can
// be dropped from the pack without changing any non-padding output, because
// padded keys are masked.

#include <cstdint>
#include <string>
#include <vector>

#include "cdr/narrative.hpp"
#include "cdr/ops.hpp"
#include "cdr/tensor.hpp"

namespace cdr {

struct EncoderDims {
    std::size_t vocab_size = 0;
    std::size_t seq_len = kSequenceLength;
    std::size_t d_model = 64;
    std::size_t n_blocks = 2;
    std::size_t n_heads = 4;

    // Throws ShapeError when d_model is not divisible by n_heads or a size is 0.
    void validate() const;
};

struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_ff1, b_ff1;  // d×4d, 4d
    Tensor w_ff2, b_ff2;  // 4d×d, d
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct EncoderParams {
    EncoderDims dims;
    Tensor token_embedding;     // V×d
    Tensor position_embedding;  // T×d
    std::vector<BlockParams> blocks;
    Tensor final_gain, final_bias;

    // Stable order; names are used as checkpoint array names.
    std::vector<NamedTensor> named() const;
};

// Uniform(-a, a) with a = sqrt(3 / fan_in) for projections and
// a = sqrt(3 / d) for embeddings (sd 1/sqrt(d)); gains 1, biases 0.
EncoderParams init_encoder(std::uint64_t seed, const EncoderDims& dims);

struct PackedBatch {
    std::vector<std::size_t> token_ids;  // one per packed row
    std::vector<std::size_t> positions;
    std::vector<Segment> segments;        // one per sequence
    std::vector<TokenCategory> categories;

    std::size_t rows() const { return token_ids.size(); }
    std::size_t batch_size() const { return segments.size(); }
};

// keep_padding = false drops PAD rows; true keeps all T rows per sequence.
PackedBatch pack(const std::vector<const TokenSequence*>& seqs, bool keep_padding = false);
PackedBatch pack(const std::vector<TokenSequence>& seqs, bool keep_padding = false);

// Per-block attention weights, filled when requested.
struct EncoderTrace {
    // [block][segment][head] -> length×length row-major.
    std::vector<std::vector<std::vector<std::vector<double>>>> attention;
};

// Hidden states for every packed row (N×d).
Tensor encode_packed(const PackedBatch& batch, const EncoderParams& params, EncoderTrace* trace = nullptr);

// Hidden states H (T×d) of one sequence, PAD rows included.
Tensor encode_hidden(const TokenSequence& seq, const EncoderParams& params, EncoderTrace* trace = nullptr);

}  // namespace cdr
