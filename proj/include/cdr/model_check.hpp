#pragma once

// Finite-difference check of the full loss against every parameter group of
// a small model (d=8, T=12, B=4, one block).

#include <cstdint>
#include <vector>

#include "cdr/disentangle.hpp"
#include "cdr/gradcheck.hpp"

namespace cdr {

struct ModelCheckSettings {
    std::uint64_t seed = 7;
    CombineMode combine = CombineMode::add;
    ConfounderObjective objective = ConfounderObjective::label;
    std::size_t d_model = 8;
    std::size_t seq_len = 12;
    std::size_t batch = 4;
    std::size_t n_blocks = 1;
    std::size_t n_heads = 2;
    std::size_t gate_hidden = 6;
    std::size_t K = 2;
    double tau = 0.5;
};

// One result per named parameter tensor.
std::vector<gradcheck::Result> check_model_gradients(const ModelCheckSettings& settings = {},
                                                     const gradcheck::Options& options = {});

}  // namespace cdr
