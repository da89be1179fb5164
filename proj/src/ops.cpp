#include "cdr/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numbers>
#include <sstream>

namespace cdr {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b, const char* what) {
    std::ostringstream msg;
    msg << op << ": " << what << ' ' << shape_str(a.shape()) << " vs " << shape_str(b.shape());
    throw ShapeError(msg.str());
}

void require_rank12(const char* op, const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(a.shape()));
    }
}

Shape mat_shape(std::size_t r, std::size_t c) { return {r, c}; }

// Builds the output tensor and, when any input participates in autodiff,
// records the backward closure.
Tensor make_result(const char* op,
                   Shape shape,
                   std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
    detail::check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool track = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) {
            track = track || t.requires_grad();
        }
    }
    if (track) {
        node->requires_grad = true;
        for (auto& t : inputs) {
            node->inputs.push_back(t.node_ptr());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(node));
}

Node& input(Node& out, std::size_t i) { return *out.inputs[i]; }

// tanh through one exp call; libm's tanh goes through expm1 and dominates the
// feed-forward cost. Relative error stays near 1e-13 across the range.
double fast_tanh(double x) {
    const double ax = std::abs(x);
    if (ax < 1e-3) {
        const double x2 = x * x;
        return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
    }
    const double e = std::exp(-2.0 * ax);
    const double t = (1.0 - e) / (1.0 + e);
    return x < 0.0 ? -t : t;
}

template <class Fn, class DFn>
Tensor unary(const char* op, const Tensor& a, Fn f, DFn df) {
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = f(x[i]);
    }
    return make_result(op, a.shape(), std::move(y), {a}, [df](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += out.grad[i] * df(in.value[i], out.value[i]);
        }
    });
}

std::atomic<bool> g_zero_norm_logged{false};

void log_zero_norm_once() {
    if (!g_zero_norm_logged.exchange(true)) {
        std::clog << "cosine_sim: zero-norm vector, similarity set to 0 with zero gradient\n";
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank12("matmul", a);
    require_rank12("matmul", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        shape_fail("matmul", a, b, "inner dimensions differ");
    }
    std::vector<double> c(m * n);
    Map(c.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
    return make_result("matmul", mat_shape(m, n), std::move(c), {a, b}, [m, k, n](Node& out) {
        Node& na = input(out, 0);
        Node& nb = input(out, 1);
        MapC dc(out.grad.data(), m, n);
        if (na.requires_grad) {
            Map(na.grad_buffer().data(), m, k).noalias() += dc * MapC(nb.value.data(), k, n).transpose();
        }
        if (nb.requires_grad) {
            Map(nb.grad_buffer().data(), k, n).noalias() += MapC(na.value.data(), m, k).transpose() * dc;
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_fail("add", a, b, "shapes differ");
    }
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = x[i] + y[i];
    }
    return make_result("add", a.shape(), std::move(z), {a, b}, [](Node& out) {
        for (std::size_t s = 0; s < 2; ++s) {
            Node& in = input(out, s);
            if (in.requires_grad) {
                auto& g = in.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += out.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_fail("sub", a, b, "shapes differ");
    }
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = x[i] - y[i];
    }
    return make_result("sub", a.shape(), std::move(z), {a, b}, [](Node& out) {
        for (std::size_t s = 0; s < 2; ++s) {
            Node& in = input(out, s);
            if (in.requires_grad) {
                const double sign = s == 0 ? 1.0 : -1.0;
                auto& g = in.grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += sign * out.grad[i];
                }
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_fail("mul", a, b, "shapes differ");
    }
    auto x = a.data(), y = b.data();
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = x[i] * y[i];
    }
    return make_result("mul", a.shape(), std::move(z), {a, b}, [](Node& out) {
        Node& na = input(out, 0);
        Node& nb = input(out, 1);
        if (na.requires_grad) {
            auto& g = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += out.grad[i] * nb.value[i];
            }
        }
        if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += out.grad[i] * na.value[i];
            }
        }
    });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
    require_rank12("add_row", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (bias.size() != n || (bias.rank() == 2 && bias.rows() != 1)) {
        shape_fail("add_row", a, bias, "bias width differs from column count");
    }
    auto x = a.data(), b = bias.data();
    std::vector<double> z(x.size());
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            z[r * n + c] = x[r * n + c] + b[c];
        }
    }
    return make_result("add_row", a.shape(), std::move(z), {a, bias}, [m, n](Node& out) {
        Node& na = input(out, 0);
        Node& nb = input(out, 1);
        if (na.requires_grad) {
            auto& g = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += out.grad[i];
            }
        }
        if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    g[c] += out.grad[r * n + c];
                }
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor tanh(const Tensor& a) {
    return unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    auto x = a.data();
    std::vector<double> y(x.size()), t(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        t[i] = fast_tanh(c * (x[i] + k * x[i] * x[i] * x[i]));
        y[i] = 0.5 * x[i] * (1.0 + t[i]);
    }
    return make_result("gelu", a.shape(), std::move(y), {a}, [t = std::move(t)](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xi = in.value[i];
            const double d = 0.5 * (1.0 + t[i]) + 0.5 * xi * (1.0 - t[i] * t[i]) * c * (1.0 + 3.0 * k * xi * xi);
            g[i] += out.grad[i] * d;
        }
    });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : a.data()) {
        if (!(x > 0.0) && checked_mode()) {
            throw NonFiniteError("log: non-positive input");
        }
    }
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softmax_rows(const Tensor& a) {
    require_rank12("softmax_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = x.data() + r * n;
        double* yr = y.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        for (std::size_t c = 0; c < n; ++c) {
            yr[c] /= z;
        }
    }
    return make_result("softmax_rows", a.shape(), std::move(y), {a}, [m, n](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        for (std::size_t r = 0; r < m; ++r) {
            const double* yr = out.value.data() + r * n;
            const double* dy = out.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
                dot += yr[c] * dy[c];
            }
            for (std::size_t c = 0; c < n; ++c) {
                g[r * n + c] += yr[c] * (dy[c] - dot);
            }
        }
    });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets) {
    require_rank12("cross_entropy_rows", logits);
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m || m == 0) {
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
    }
    auto x = logits.data();
    std::vector<double> prob(x.size());
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        if (tgt[r] >= n) {
            throw ShapeError("cross_entropy_rows: target " + std::to_string(tgt[r]) + " out of range for " +
                             shape_str(logits.shape()));
        }
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            prob[r * n + c] = std::exp(xr[c] - mx);
            z += prob[r * n + c];
        }
        for (std::size_t c = 0; c < n; ++c) {
            prob[r * n + c] /= z;
        }
        total += std::log(z) + mx - xr[tgt[r]];
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    return make_result("cross_entropy_rows", {1}, {total * inv_m}, {logits},
                       [prob = std::move(prob), tgt = std::move(tgt), n, inv_m](Node& out) {
                           Node& in = input(out, 0);
                           if (!in.requires_grad) {
                               return;
                           }
                           auto& g = in.grad_buffer();
                           const double go = out.grad[0] * inv_m;
                           for (std::size_t r = 0; r < tgt.size(); ++r) {
                               for (std::size_t c = 0; c < n; ++c) {
                                   g[r * n + c] += go * (prob[r * n + c] - (c == tgt[r] ? 1.0 : 0.0));
                               }
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank12("layer_norm", x);
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n) {
        shape_fail("layer_norm", x, gain, "gain width differs from column count");
    }
    if (bias.size() != n) {
        shape_fail("layer_norm", x, bias, "bias width differs from column count");
    }
    auto xv = x.data(), gv = gain.data(), bv = bias.data();
    std::vector<double> y(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            mu += xr[c];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            var += (xr[c] - mu) * (xr[c] - mu);
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            const double h = (xr[c] - mu) * inv_std[r];
            xhat[r * n + c] = h;
            y[r * n + c] = gv[c] * h + bv[c];
        }
    }
    return make_result(
        "layer_norm", x.shape(), std::move(y), {x, gain, bias},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& out) {
            Node& nx = input(out, 0);
            Node& ng = input(out, 1);
            Node& nb = input(out, 2);
            if (ng.requires_grad) {
                auto& g = ng.grad_buffer();
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < n; ++c) {
                        g[c] += out.grad[r * n + c] * xhat[r * n + c];
                    }
                }
            }
            if (nb.requires_grad) {
                auto& g = nb.grad_buffer();
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < n; ++c) {
                        g[c] += out.grad[r * n + c];
                    }
                }
            }
            if (nx.requires_grad) {
                auto& g = nx.grad_buffer();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t r = 0; r < m; ++r) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double d = out.grad[r * n + c] * ng.value[c];
                        mean_d += d;
                        mean_dh += d * xhat[r * n + c];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for (std::size_t c = 0; c < n; ++c) {
                        const double d = out.grad[r * n + c] * ng.value[c];
                        g[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dh);
                    }
                }
            }
        });
}

Tensor mean_rows(const Tensor& a) {
    require_rank12("mean_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    auto x = a.data();
    std::vector<double> y(n, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            y[c] += x[r * n + c];
        }
    }
    for (auto& v : y) {
        v /= static_cast<double>(m);
    }
    return make_result("mean_rows", mat_shape(1, n), std::move(y), {a}, [m, n](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                g[r * n + c] += out.grad[c] * inv;
            }
        }
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return make_result("sum", {1}, {s}, {a}, [](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        for (auto& g : in.grad_buffer()) {
            g += out.grad[0];
        }
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mse(const Tensor& prediction, const Tensor& target) {
    if (prediction.size() != target.size()) {
        shape_fail("mse", prediction, target, "element counts differ");
    }
    auto p = prediction.data(), t = target.data();
    const double inv = 1.0 / static_cast<double>(p.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        s += (p[i] - t[i]) * (p[i] - t[i]);
    }
    return make_result("mse", {1}, {s * inv}, {prediction, target}, [inv](Node& out) {
        Node& np = input(out, 0);
        Node& nt = input(out, 1);
        const double g0 = out.grad[0] * 2.0 * inv;
        for (std::size_t s = 0; s < 2; ++s) {
            Node& in = s == 0 ? np : nt;
            if (!in.requires_grad) {
                continue;
            }
            const double sign = s == 0 ? 1.0 : -1.0;
            auto& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += sign * g0 * (np.value[i] - nt.value[i]);
            }
        }
    });
}

Tensor concat(const Tensor& a, const Tensor& b) {
    require_rank12("concat", a);
    require_rank12("concat", b);
    const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
    if (b.rows() != m) {
        shape_fail("concat", a, b, "row counts differ");
    }
    auto x = a.data(), y = b.data();
    std::vector<double> z(m * (p + q));
    for (std::size_t r = 0; r < m; ++r) {
        std::copy_n(x.data() + r * p, p, z.data() + r * (p + q));
        std::copy_n(y.data() + r * q, q, z.data() + r * (p + q) + p);
    }
    return make_result("concat", mat_shape(m, p + q), std::move(z), {a, b}, [m, p, q](Node& out) {
        Node& na = input(out, 0);
        Node& nb = input(out, 1);
        if (na.requires_grad) {
            auto& g = na.grad_buffer();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < p; ++c) {
                    g[r * p + c] += out.grad[r * (p + q) + c];
                }
            }
        }
        if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < q; ++c) {
                    g[r * q + c] += out.grad[r * (p + q) + p + c];
                }
            }
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no parts");
    }
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<std::size_t> offsets;
    for (const auto& t : parts) {
        require_rank12("concat_rows", t);
        if (t.cols() != n) {
            shape_fail("concat_rows", parts.front(), t, "column counts differ");
        }
        offsets.push_back(m * n);
        m += t.rows();
    }
    std::vector<double> z;
    z.reserve(m * n);
    for (const auto& t : parts) {
        z.insert(z.end(), t.data().begin(), t.data().end());
    }
    return make_result("concat_rows", mat_shape(m, n), std::move(z), parts,
                       [offsets = std::move(offsets)](Node& out) {
                           for (std::size_t s = 0; s < out.inputs.size(); ++s) {
                               Node& in = input(out, s);
                               if (!in.requires_grad) {
                                   continue;
                               }
                               auto& g = in.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   g[i] += out.grad[offsets[s] + i];
                               }
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> v(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(v), {a}, [](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += out.grad[i];
        }
    });
}

Tensor cosine_sim(const Tensor& a, const Tensor& b) {
    require_rank12("cosine_sim", a);
    require_rank12("cosine_sim", b);
    const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
    if (b.cols() != d) {
        shape_fail("cosine_sim", a, b, "row widths differ");
    }
    auto x = a.data(), y = b.data();
    auto norms = [d](std::span<const double> v, std::size_t rows) {
        std::vector<double> out(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                s += v[r * d + c] * v[r * d + c];
            }
            out[r] = std::sqrt(s);
        }
        return out;
    };
    std::vector<double> na = norms(x, m), nb = norms(y, n);
    std::vector<double> s(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (na[i] == 0.0 || nb[j] == 0.0) {
                log_zero_norm_once();
                continue;
            }
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                dot += x[i * d + c] * y[j * d + c];
            }
            s[i * n + j] = dot / (na[i] * nb[j]);
        }
    }
    return make_result(
        "cosine_sim", mat_shape(m, n), std::move(s), {a, b},
        [m, n, d, na = std::move(na), nb = std::move(nb)](Node& out) {
            Node& ia = input(out, 0);
            Node& ib = input(out, 1);
            const auto& x = ia.value;
            const auto& y = ib.value;
            std::vector<double>* ga = ia.requires_grad ? &ia.grad_buffer() : nullptr;
            std::vector<double>* gb = ib.requires_grad ? &ib.grad_buffer() : nullptr;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    if (na[i] == 0.0 || nb[j] == 0.0) {
                        continue;
                    }
                    const double g = out.grad[i * n + j];
                    const double sij = out.value[i * n + j];
                    const double inv = 1.0 / (na[i] * nb[j]);
                    if (ga) {
                        const double self = sij / (na[i] * na[i]);
                        for (std::size_t c = 0; c < d; ++c) {
                            (*ga)[i * d + c] += g * (y[j * d + c] * inv - x[i * d + c] * self);
                        }
                    }
                    if (gb) {
                        const double self = sij / (nb[j] * nb[j]);
                        for (std::size_t c = 0; c < d; ++c) {
                            (*gb)[j * d + c] += g * (x[i * d + c] * inv - y[j * d + c] * self);
                        }
                    }
                }
            }
        });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    require_rank12("gather_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (index.empty()) {
        throw ShapeError("gather_rows: empty index");
    }
    auto x = a.data();
    std::vector<double> z(index.size() * n);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= m) {
            throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " out of range for " +
                             shape_str(a.shape()));
        }
        std::copy_n(x.data() + index[r] * n, n, z.data() + r * n);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result("gather_rows", mat_shape(index.size(), n), std::move(z), {a},
                       [n, idx = std::move(idx)](Node& out) {
                           Node& in = input(out, 0);
                           if (!in.requires_grad) {
                               return;
                           }
                           auto& g = in.grad_buffer();
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                               for (std::size_t c = 0; c < n; ++c) {
                                   g[idx[r] * n + c] += out.grad[r * n + c];
                               }
                           }
                       });
}

Tensor select_col(const Tensor& a, std::size_t col) {
    require_rank12("select_col", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (col >= n) {
        throw ShapeError("select_col: column " + std::to_string(col) + " out of range for " +
                         shape_str(a.shape()));
    }
    std::vector<std::size_t> cols(m, col);
    return take_per_row(a, cols);
}

Tensor take_per_row(const Tensor& a, std::span<const std::size_t> cols) {
    require_rank12("take_per_row", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (cols.size() != m) {
        throw ShapeError("take_per_row: " + std::to_string(cols.size()) + " column indices for " +
                         shape_str(a.shape()));
    }
    auto x = a.data();
    std::vector<double> z(m);
    for (std::size_t r = 0; r < m; ++r) {
        if (cols[r] >= n) {
            throw ShapeError("take_per_row: column index out of range for " + shape_str(a.shape()));
        }
        z[r] = x[r * n + cols[r]];
    }
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return make_result("take_per_row", mat_shape(m, 1), std::move(z), {a}, [n, idx = std::move(idx)](Node& out) {
        Node& in = input(out, 0);
        if (!in.requires_grad) {
            return;
        }
        auto& g = in.grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            g[r * n + idx[r]] += out.grad[r];
        }
    });
}

namespace {

void check_segments(const char* op, std::span<const Segment> segments, std::size_t rows) {
    for (const auto& s : segments) {
        if (s.valid == 0 || s.valid > s.length || s.offset + s.length > rows) {
            std::ostringstream msg;
            msg << op << ": invalid segment (offset " << s.offset << ", length " << s.length << ", valid "
                << s.valid << ") for " << rows << " rows";
            throw ShapeError(msg.str());
        }
    }
}

// Softmax-normalized q·k/sqrt(dh) over the valid keys of one segment and head.
// probs is length×valid row-major.
void segment_head_probs(const double* q,
                        const double* k,
                        std::size_t d,
                        std::size_t head_off,
                        std::size_t dh,
                        const Segment& s,
                        std::vector<double>& probs) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    probs.assign(s.length * s.valid, 0.0);
    for (std::size_t i = 0; i < s.length; ++i) {
        const double* qi = q + (s.offset + i) * d + head_off;
        double* pr = probs.data() + i * s.valid;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s.valid; ++j) {
            const double* kj = k + (s.offset + j) * d + head_off;
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
                dot += qi[c] * kj[c];
            }
            pr[j] = dot * inv_sqrt;
            mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < s.valid; ++j) {
            pr[j] = std::exp(pr[j] - mx);
            z += pr[j];
        }
        for (std::size_t j = 0; j < s.valid; ++j) {
            pr[j] /= z;
        }
    }
}

}  // namespace

Tensor multi_head_attention(const Tensor& q,
                            const Tensor& k,
                            const Tensor& v,
                            std::span<const Segment> segments,
                            std::size_t n_heads) {
    require_rank12("multi_head_attention", q);
    if (k.shape() != q.shape()) {
        shape_fail("multi_head_attention", q, k, "query/key shapes differ");
    }
    if (v.shape() != q.shape()) {
        shape_fail("multi_head_attention", q, v, "query/value shapes differ");
    }
    const std::size_t rows = q.rows(), d = q.cols();
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    }
    check_segments("multi_head_attention", segments, rows);
    const std::size_t dh = d / n_heads;

    std::vector<Segment> segs(segments.begin(), segments.end());
    // probs[s * n_heads + h] is length×valid.
    std::vector<std::vector<double>> probs(segs.size() * n_heads);
    std::vector<double> out(rows * d, 0.0);
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    for (std::size_t si = 0; si < segs.size(); ++si) {
        const Segment& s = segs[si];
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto& p = probs[si * n_heads + h];
            segment_head_probs(qd, kd, d, h * dh, dh, s, p);
            for (std::size_t i = 0; i < s.length; ++i) {
                double* oi = out.data() + (s.offset + i) * d + h * dh;
                for (std::size_t j = 0; j < s.valid; ++j) {
                    const double pij = p[i * s.valid + j];
                    const double* vj = vd + (s.offset + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) {
                        oi[c] += pij * vj[c];
                    }
                }
            }
        }
    }

    return make_result(
        "multi_head_attention", q.shape(), std::move(out), {q, k, v},
        [d, dh, n_heads, segs = std::move(segs), probs = std::move(probs)](Node& out) {
            Node& nq = input(out, 0);
            Node& nk = input(out, 1);
            Node& nv = input(out, 2);
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double>* gq = nq.requires_grad ? &nq.grad_buffer() : nullptr;
            std::vector<double>* gk = nk.requires_grad ? &nk.grad_buffer() : nullptr;
            std::vector<double>* gv = nv.requires_grad ? &nv.grad_buffer() : nullptr;
            std::vector<double> dscore;
            for (std::size_t si = 0; si < segs.size(); ++si) {
                const Segment& s = segs[si];
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const auto& p = probs[si * n_heads + h];
                    const std::size_t off = h * dh;
                    dscore.assign(s.valid, 0.0);
                    for (std::size_t i = 0; i < s.length; ++i) {
                        const double* doi = out.grad.data() + (s.offset + i) * d + off;
                        const double* pr = p.data() + i * s.valid;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < s.valid; ++j) {
                            const double* vj = nv.value.data() + (s.offset + j) * d + off;
                            double dp = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) {
                                dp += doi[c] * vj[c];
                            }
                            dscore[j] = dp;
                            dot += pr[j] * dp;
                            if (gv) {
                                double* gvj = gv->data() + (s.offset + j) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) {
                                    gvj[c] += pr[j] * doi[c];
                                }
                            }
                        }
                        const double* qi = nq.value.data() + (s.offset + i) * d + off;
                        for (std::size_t j = 0; j < s.valid; ++j) {
                            const double ds = pr[j] * (dscore[j] - dot) * inv_sqrt;
                            const double* kj = nk.value.data() + (s.offset + j) * d + off;
                            if (gq) {
                                double* gqi = gq->data() + (s.offset + i) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) {
                                    gqi[c] += ds * kj[c];
                                }
                            }
                            if (gk) {
                                double* gkj = gk->data() + (s.offset + j) * d + off;
                                for (std::size_t c = 0; c < dh; ++c) {
                                    gkj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

std::vector<std::vector<std::vector<double>>> attention_weights(const Tensor& q,
                                                                const Tensor& k,
                                                                std::span<const Segment> segments,
                                                                std::size_t n_heads) {
    if (k.shape() != q.shape()) {
        shape_fail("attention_weights", q, k, "query/key shapes differ");
    }
    const std::size_t d = q.cols();
    if (n_heads == 0 || d % n_heads != 0) {
        throw ShapeError("attention_weights: width not divisible by head count");
    }
    check_segments("attention_weights", segments, q.rows());
    const std::size_t dh = d / n_heads;
    std::vector<std::vector<std::vector<double>>> out;
    std::vector<double> p;
    for (const auto& s : segments) {
        auto& per_head = out.emplace_back();
        for (std::size_t h = 0; h < n_heads; ++h) {
            segment_head_probs(q.data().data(), k.data().data(), d, h * dh, dh, s, p);
            std::vector<double> full(s.length * s.length, 0.0);
            for (std::size_t i = 0; i < s.length; ++i) {
                for (std::size_t j = 0; j < s.valid; ++j) {
                    full[i * s.length + j] = p[i * s.valid + j];
                }
            }
            per_head.push_back(std::move(full));
        }
    }
    return out;
}

Tensor weighted_segment_mean(const Tensor& h, const Tensor& w, std::span<const Segment> segments) {
    require_rank12("weighted_segment_mean", h);
    const std::size_t rows = h.rows(), d = h.cols();
    if (w.size() != rows) {
        shape_fail("weighted_segment_mean", h, w, "one weight per row required");
    }
    check_segments("weighted_segment_mean", segments, rows);
    auto hv = h.data(), wv = w.data();
    std::vector<Segment> segs(segments.begin(), segments.end());
    std::vector<double> totals(segs.size());
    std::vector<double> out(segs.size() * d, 0.0);
    for (std::size_t si = 0; si < segs.size(); ++si) {
        const Segment& s = segs[si];
        double total = 0.0;
        for (std::size_t t = 0; t < s.valid; ++t) {
            const std::size_t r = s.offset + t;
            total += wv[r];
            for (std::size_t c = 0; c < d; ++c) {
                out[si * d + c] += wv[r] * hv[r * d + c];
            }
        }
        if (!(total > 0.0)) {
            // Saturated or non-finite weights; the mean would be 0/0.
            throw NonFiniteError("weighted_segment_mean: segment " + std::to_string(si) +
                                 " has no positive weight mass on valid rows");
        }
        totals[si] = total;
        for (std::size_t c = 0; c < d; ++c) {
            out[si * d + c] /= total;
        }
    }
    Shape out_shape = mat_shape(segs.size(), d);
    return make_result(
        "weighted_segment_mean", std::move(out_shape), std::move(out), {h, w},
        [d, segs = std::move(segs), totals = std::move(totals)](Node& out) {
            Node& nh = input(out, 0);
            Node& nw = input(out, 1);
            for (std::size_t si = 0; si < segs.size(); ++si) {
                const Segment& s = segs[si];
                const double* dx = out.grad.data() + si * d;
                const double* x = out.value.data() + si * d;
                for (std::size_t t = 0; t < s.valid; ++t) {
                    const std::size_t r = s.offset + t;
                    const double* hr = nh.value.data() + r * d;
                    if (nh.requires_grad) {
                        const double f = nw.value[r] / totals[si];
                        double* g = nh.grad_buffer().data() + r * d;
                        for (std::size_t c = 0; c < d; ++c) {
                            g[c] += f * dx[c];
                        }
                    }
                    if (nw.requires_grad) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                            acc += (hr[c] - x[c]) * dx[c];
                        }
                        nw.grad_buffer()[r] += acc / totals[si];
                    }
                }
            }
        });
}

}  // namespace cdr
