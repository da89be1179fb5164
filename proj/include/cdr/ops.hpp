#pragma once

// Differentiable primitives. All operate on rank-1 or rank-2 tensors; a
// rank-1 operand is treated as a single row. Broadcasting is limited to the
// row-bias pattern of add_row.

#include <cstddef>
#include <span>
#include <vector>

#include "cdr/tensor.hpp"

namespace cdr {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a[m×n] + bias[n] added to every row.
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor scale(const Tensor& a, double factor);

Tensor tanh(const Tensor& a);
// tanh approximation of GELU.
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
// Mean over rows of -log softmax(logits[r])[targets[r]]; scalar result.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Column means: a[m×n] -> 1×n.
Tensor mean_rows(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& prediction, const Tensor& target);

// Along the column axis: [m×p], [m×q] -> m×(p+q).
Tensor concat(const Tensor& a, const Tensor& b);
// Stack along rows; all parts must share a column count.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

// Pairwise cosine similarity between rows: a[m×d], b[n×d] -> m×n.
// A zero-norm row yields similarity 0 with zero gradient.
Tensor cosine_sim(const Tensor& a, const Tensor& b);

// Row lookup (embedding tables, partner rows): out[r] = a[index[r]].
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
// a[m×n] -> m×1 column c.
Tensor select_col(const Tensor& a, std::size_t c);
// out[r] = a[r, cols[r]] as m×1.
Tensor take_per_row(const Tensor& a, std::span<const std::size_t> cols);

// A contiguous run of rows [offset, offset + length) belonging to one
// sequence. Only the first `valid` rows are keys / pooled positions; the
// remainder are padding.
struct Segment {
    std::size_t offset = 0;
    std::size_t length = 0;
    std::size_t valid = 0;
};

// Multi-head scaled dot-product self-attention within each segment. Queries
// at every row attend only to the segment's valid keys. q, k, v: N×d.
Tensor multi_head_attention(const Tensor& q,
                            const Tensor& k,
                            const Tensor& v,
                            std::span<const Segment> segments,
                            std::size_t n_heads);

// Attention weights for inspection (no graph). Returned per segment, per head,
// as a length×length row-major block; padded keys are exactly 0.
std::vector<std::vector<std::vector<double>>> attention_weights(const Tensor& q,
                                                                const Tensor& k,
                                                                std::span<const Segment> segments,
                                                                std::size_t n_heads);

// Per segment: sum_t w_t h_t / sum_t w_t over the valid rows. h: N×d, w: N×1.
Tensor weighted_segment_mean(const Tensor& h, const Tensor& w, std::span<const Segment> segments);

}  // namespace cdr
