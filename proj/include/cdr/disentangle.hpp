#pragma once

// Per-token causal/confounder gating, gate-weighted pooling, counterfactual
// mixing across patients, the InfoNCE mix loss and the three readout heads.
//
// Gate column 0 is the confounder channel and column 1 the causal channel;
// x_o pools with column 1 and x_c with column 0.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cdr/encoder.hpp"
#include "cdr/rng.hpp"

namespace cdr {

enum class CombineMode { add, concat };
enum class ConfounderObjective { label, mean };

std::string to_string(CombineMode m);
CombineMode combine_from_string(const std::string& s);
std::string to_string(ConfounderObjective o);
ConfounderObjective objective_from_string(const std::string& s);

// Two-layer perceptron: tanh(x W1 + b1) W2 + b2.
struct MlpParams {
    Tensor w1, b1, w2, b2;
};

struct DisentangleParams {
    std::size_t d_model = 0;
    std::size_t gate_hidden = 0;
    CombineMode combine = CombineMode::add;
    MlpParams gate;  // d -> g -> 2
    MlpParams f_o;   // d -> d -> 1
    MlpParams f_c;   // d -> d -> 1
    MlpParams f_co;  // (d | 2d) -> d -> 1
    Tensor projection;  // 2d×d, concat mode only

    std::vector<NamedTensor> named() const;
};

DisentangleParams init_disentangle(std::uint64_t seed, std::size_t d_model, std::size_t gate_hidden,
                                   CombineMode combine);

struct Model {
    EncoderParams encoder;
    DisentangleParams heads;
    // Heads are trained on standardized labels; predictions are mapped back.
    double label_mean = 0.0;
    double label_sd = 1.0;

    std::vector<NamedTensor> named() const;
};

struct ModelDims {
    EncoderDims encoder;
    std::size_t gate_hidden = 32;
    CombineMode combine = CombineMode::add;
};

Model init_model(std::uint64_t seed, const ModelDims& dims);

Tensor mlp(const MlpParams& p, const Tensor& x);

// Row softmax of the gate MLP: H (N×d) -> A (N×2).
Tensor gate(const Tensor& H, const MlpParams& params);

struct Pooled {
    Tensor x_o;  // B×d, causal channel
    Tensor x_c;  // B×d, confounder channel
};

// Gate-weighted means over each segment's valid rows.
Pooled pool(const Tensor& H, const Tensor& A, std::span<const Segment> segments);

// add -> x_o + x_c; concat -> [x_o ; x_c]. Operates row-wise.
Tensor mix(const Tensor& x_o, const Tensor& x_c, CombineMode mode);

// partners[i][k] != i, uniform over the rest of the batch. Returns an empty
// list (and logs) when B < 2.
std::vector<std::vector<std::size_t>> sample_partners(std::size_t batch_size, std::size_t K, Rng& rng);

// h_mix: (B·K)×d with row i·K + k the k-th mixed view of anchor i; h: B×d.
// Mean over views of -log softmax_n(cos(h_mix[i,k], h[n]) / tau) at n = i.
Tensor info_nce_mix_loss(const Tensor& h_mix, const Tensor& h, std::size_t K, double tau = 1.0);

struct LossWeights {
    double causal = 1.0;      // lambda_o
    double confounder = 0.5;  // lambda_c
    double joint = 1.0;       // lambda_co
    double mix = 0.1;         // lambda_mix

    // Throws std::invalid_argument on a negative or non-finite weight.
    void validate() const;
};

struct MixSettings {
    std::size_t K = 2;
    double tau = 1.0;
};

struct BatchOutputs {
    Tensor H;       // N×d
    Tensor A;       // N×2
    Tensor x_o;     // B×d
    Tensor x_c;     // B×d
    Tensor anchor;  // B×d, the unmixed representation of each patient
    Tensor x_mix;   // (B·K)×(d | 2d)
    Tensor h_mix;   // (B·K)×d
    Tensor y_o;     // B×1
    Tensor y_c;     // B×1
    Tensor y_co;    // (B·K)×1
    std::vector<std::vector<std::size_t>> partners;
    std::size_t K = 0;

    bool mixed() const { return !partners.empty(); }
};

// Empty partners skip the mixing branch.
BatchOutputs forward_batch(const Model& model,
                           const PackedBatch& batch,
                           const std::vector<std::vector<std::size_t>>& partners,
                           EncoderTrace* trace = nullptr);

struct LossParts {
    Tensor total;
    double causal = 0.0;
    double confounder = 0.0;
    double joint = 0.0;
    double mix = 0.0;
};

// y holds the standardized labels of the batch. With objective mean the
// confounder head regresses onto confounder_target instead of y.
LossParts total_loss(const BatchOutputs& out,
                     const std::vector<double>& y,
                     const LossWeights& weights,
                     const MixSettings& mix_settings,
                     ConfounderObjective objective = ConfounderObjective::label,
                     double confounder_target = 0.0);

// Causal-head predictions in label units, no graph recorded. Raw values; the
// caller clips for severity decisions.
std::vector<double> predict(const Model& model, const PackedBatch& batch);
double predict(const Model& model, const TokenSequence& seq);

// Causal-channel gate weight per packed row.
std::vector<double> causal_saliency(const Model& model, const PackedBatch& batch);

}  // namespace cdr
