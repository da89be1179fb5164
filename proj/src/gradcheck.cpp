#include "cdr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cdr::gradcheck {

Result check(const std::string& name,
             std::vector<Tensor> params,
             const std::function<Tensor()>& loss,
             const Options& options) {
    for (auto& p : params) {
        p.zero_grad();
    }
    Tensor root = loss();
    root.backward();

    Result result;
    result.name = name;
    std::size_t flat = 0;
    for (auto& p : params) {
        std::vector<double> analytic(p.size(), 0.0);
        if (p.has_grad()) {
            std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        }
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
            const double saved = values[i];
            double plus = 0.0, minus = 0.0;
            {
                NoGradGuard no_grad;
                values[i] = saved + options.step;
                plus = loss().item();
                values[i] = saved - options.step;
                minus = loss().item();
            }
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * options.step);
            const double abs_err = std::abs(analytic[i] - numeric);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
            const double rel = abs_err / denom;
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_index = flat;
            }
            ++result.checked;
        }
    }
    for (auto& p : params) {
        p.zero_grad();
    }
    return result;
}

}  // namespace cdr::gradcheck
