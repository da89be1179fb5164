#pragma once

// Central finite-difference gradient checking.

#include <functional>
#include <string>
#include <vector>

#include "cdr/tensor.hpp"

namespace cdr::gradcheck {

struct Options {
    double step = 1e-5;
    // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-4;
};

struct Result {
    std::string name;
    std::size_t checked = 0;
    double max_abs_error = 0.0;
    double max_rel_error = 0.0;
    // Flat index of the worst element, in the concatenation of all params.
    std::size_t worst_index = 0;
};

// `loss` must rebuild the forward pass from the current parameter values and
// return a scalar. Parameters are restored exactly after probing.
Result check(const std::string& name,
             std::vector<Tensor> params,
             const std::function<Tensor()>& loss,
             const Options& options = {});

}  // namespace cdr::gradcheck
