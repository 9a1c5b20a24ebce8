#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "emofuse/random.hpp"
#include "emofuse/tensor.hpp"

// Differentiable operations on Tape values. Everything is 2-D row-major
// except the scalar reductions and losses; bias-add is the only broadcast.
namespace emofuse {

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
    if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
    return a.tape();
}

inline void require_rank2(const Shape& s, const char* op, const char* what) {
    if (s.size() != 2) {
        throw DimensionError(std::string(op) + ": " + what + " must be rank 2, got " + shape_str(s));
    }
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    MutMap(c, ix(m), ix(n)).noalias() += ConstMap(a, ix(m), ix(k)) * ConstMap(b, ix(k), ix(n));
}

// C[m x n] += A[m x k] * B^T, B stored [n x k]
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    MutMap(c, ix(m), ix(n)).noalias() += ConstMap(a, ix(m), ix(k)) * ConstMap(b, ix(n), ix(k)).transpose();
}

// C[k x n] += A^T * B, A stored [m x k], B stored [m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    MutMap(c, ix(k), ix(n)).noalias() += ConstMap(a, ix(m), ix(k)).transpose() * ConstMap(b, ix(m), ix(n));
}

// Bernoulli(rate) via one 64-bit draw compared against rate * 2^64.
class DropMask {
public:
    explicit DropMask(double rate) {
        const double scaled = std::ldexp(rate, 64);
        threshold_ = rate <= 0.0 ? 0 : scaled >= 0x1p64 ? ~0ULL : static_cast<std::uint64_t>(scaled);
    }
    bool drop(Rng& rng) const { return threshold_ != 0 && rng() < threshold_; }

private:
    std::uint64_t threshold_ = 0;
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b, "matmul");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw DimensionError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
    }
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
    return tape.record("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
        auto dc = ctx.out_grad();
        if (auto ga = ctx.input_grad(0); !ga.empty()) {
            detail::gemm_nt(dc.data(), ctx.input_value(1).data(), ga.data(), m, n, k);
        }
        if (auto gb = ctx.input_grad(1); !gb.empty()) {
            detail::gemm_tn(ctx.input_value(0).data(), dc.data(), gb.data(), m, k, n);
        }
    });
}

inline Var add(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b, "add");
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto va = a.value();
    auto vb = b.value();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return tape.record("add", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        for (std::size_t slot = 0; slot < 2; ++slot) {
            auto gi = ctx.input_grad(slot);
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b, "sub");
    if (a.shape() != b.shape()) {
        throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto va = a.value();
    auto vb = b.value();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return tape.record("sub", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto ga = ctx.input_grad(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        auto gb = ctx.input_grad(1);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b, "mul");
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    auto va = a.value();
    auto vb = b.value();
    std::vector<double> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return tape.record("mul", a.shape(), std::move(out), {a, b}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto va = ctx.input_value(0);
        auto vb = ctx.input_value(1);
        if (auto ga = ctx.input_grad(0); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
        if (auto gb = ctx.input_grad(1); !gb.empty())
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
    });
}

inline Var scale(Var x, double s) {
    auto vx = x.value();
    std::vector<double> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * s;
    return x.tape().record("scale", x.shape(), std::move(out), {x}, [s](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * s;
    });
}

// x[m x n] + b[n] broadcast over rows.
inline Var add_bias(Var x, Var b) {
    Tape& tape = detail::same_tape(x, b, "add_bias");
    detail::require_rank2(x.shape(), "add_bias", "input");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (b.numel() != n || b.shape().size() > 2 || (b.shape().size() == 2 && b.shape()[0] != 1)) {
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
    }
    auto vx = x.value();
    auto vb = b.value();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = vx[i * n + j] + vb[j];
    return tape.record("add_bias", x.shape(), std::move(out), {x, b}, [m, n](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        if (auto gb = ctx.input_grad(1); !gb.empty()) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    return x.tape().record("sum", {}, {s}, {x}, [](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0];
        auto gx = ctx.input_grad(0);
        for (auto& v : gx) v += g;
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Var reshape(Var x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.value().begin(), x.value().end());
    return x.tape().record("reshape", std::move(shape), std::move(out), {x}, [](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

enum class Activation { gelu, sigmoid, tanh };

inline double activate(Activation kind, double x) {
    switch (kind) {
        case Activation::gelu: return x * detail::normal_cdf(x);
        case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Activation::tanh: return std::tanh(x);
    }
    return x;
}

inline double activate_derivative(Activation kind, double x) {
    switch (kind) {
        case Activation::gelu: return detail::normal_cdf(x) + x * detail::normal_pdf(x);
        case Activation::sigmoid: {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        }
        case Activation::tanh: {
            double t = std::tanh(x);
            return 1.0 - t * t;
        }
    }
    return 1.0;
}

inline Var activation(Var x, Activation kind) {
    auto vx = x.value();
    std::vector<double> out(vx.size());
    auto deriv = std::make_shared<std::vector<double>>(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (kind == Activation::gelu) {
            const double cdf = detail::normal_cdf(vx[i]);
            out[i] = vx[i] * cdf;
            (*deriv)[i] = cdf + vx[i] * detail::normal_pdf(vx[i]);
        } else {
            out[i] = activate(kind, vx[i]);
            (*deriv)[i] = activate_derivative(kind, vx[i]);
        }
    }
    return x.tape().record("activation", x.shape(), std::move(out), {x}, [deriv](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*deriv)[i];
    });
}

inline Var gelu(Var x) { return activation(x, Activation::gelu); }

// Numerically stable row softmax (max-subtracted).
inline Var softmax_rows(Var x) {
    detail::require_rank2(x.shape(), "softmax_rows", "input");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    auto vx = x.value();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = vx.data() + i * n;
        double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    return x.tape().record("softmax_rows", x.shape(), std::move(out), {x}, [m, n](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto y = ctx.out_value();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
        }
    });
}

// Row-wise layer normalization with population variance, then gamma * xhat + beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12) {
    Tape& tape = detail::same_tape(x, gamma, "layer_norm");
    detail::same_tape(x, beta, "layer_norm");
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    detail::require_rank2(x.shape(), "layer_norm", "input");
    const std::size_t m = x.shape()[0], d = x.shape()[1];
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " do not fit " + shape_str(x.shape()));
    }
    auto vx = x.value();
    auto vg = gamma.value();
    auto vb = beta.value();
    auto xhat = std::make_shared<std::vector<double>>(m * d);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    std::vector<double> out(m * d);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = vx.data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (row[j] - mu) * is;
            (*xhat)[i * d + j] = h;
            out[i * d + j] = vg[j] * h + vb[j];
        }
    }
    return tape.record("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [m, d, xhat, inv_std](BackwardContext& ctx) {
                           auto g = ctx.out_grad();
                           auto vg = ctx.input_value(1);
                           const auto& xh = *xhat;
                           if (auto gg = ctx.input_grad(1); !gg.empty())
                               for (std::size_t i = 0; i < m * d; ++i) gg[i % d] += g[i] * xh[i];
                           if (auto gb = ctx.input_grad(2); !gb.empty())
                               for (std::size_t i = 0; i < m * d; ++i) gb[i % d] += g[i];
                           auto gx = ctx.input_grad(0);
                           if (gx.empty()) return;
                           const double inv_d = 1.0 / static_cast<double>(d);
                           for (std::size_t i = 0; i < m; ++i) {
                               double mean_dh = 0.0, mean_dh_xh = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   double dh = g[i * d + j] * vg[j];
                                   mean_dh += dh;
                                   mean_dh_xh += dh * xh[i * d + j];
                               }
                               mean_dh *= inv_d;
                               mean_dh_xh *= inv_d;
                               for (std::size_t j = 0; j < d; ++j) {
                                   double dh = g[i * d + j] * vg[j];
                                   gx[i * d + j] +=
                                       (*inv_std)[i] * (dh - mean_dh - xh[i * d + j] * mean_dh_xh);
                               }
                           }
                       });
}

// [m x d1] (+) [m x d2] -> [m x (d1 + d2)]
inline Var concat_features(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b, "concat_features");
    detail::require_rank2(a.shape(), "concat_features", "left operand");
    detail::require_rank2(b.shape(), "concat_features", "right operand");
    if (a.shape()[0] != b.shape()[0]) {
        throw DimensionError("concat_features: leading dimensions differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], d1 = a.shape()[1], d2 = b.shape()[1], d = d1 + d2;
    auto va = a.value();
    auto vb = b.value();
    std::vector<double> out(m * d);
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(va.data() + i * d1, d1, out.data() + i * d);
        std::copy_n(vb.data() + i * d2, d2, out.data() + i * d + d1);
    }
    return tape.record("concat_features", {m, d}, std::move(out), {a, b}, [m, d1, d2, d](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        if (auto ga = ctx.input_grad(0); !ga.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d1; ++j) ga[i * d1 + j] += g[i * d + j];
        if (auto gb = ctx.input_grad(1); !gb.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d2; ++j) gb[i * d2 + j] += g[i * d + d1 + j];
    });
}

// Columns [begin, end) of a rank-2 value.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    detail::require_rank2(x.shape(), "slice_cols", "input");
    const std::size_t m = x.shape()[0], n = x.shape()[1];
    if (begin >= end || end > n) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") invalid for " + shape_str(x.shape()));
    }
    const std::size_t w = end - begin;
    auto vx = x.value();
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(vx.data() + i * n + begin, w, out.data() + i * w);
    return x.tape().record("slice_cols", {m, w}, std::move(out), {x}, [m, n, w, begin](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
    });
}

// Rows of a [V x d] table picked by index; used for embeddings and CLS pooling.
inline Var gather_rows(Var table, std::span<const std::size_t> rows) {
    detail::require_rank2(table.shape(), "gather_rows", "table");
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    auto vt = table.value();
    std::vector<double> out(rows.size() * d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= v) {
            throw ContractError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " +
                                std::to_string(v) + " rows");
        }
        std::copy_n(vt.data() + rows[r] * d, d, out.data() + r * d);
    }
    if (rows.empty()) throw DimensionError("gather_rows: empty index list");
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return table.tape().record("gather_rows", {idx.size(), d}, std::move(out), {table},
                               [idx, d](BackwardContext& ctx) {
                                   auto g = ctx.out_grad();
                                   auto gt = ctx.input_grad(0);
                                   for (std::size_t r = 0; r < idx.size(); ++r)
                                       for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += g[r * d + j];
                               });
}

// Inverted dropout; identity when rate == 0.
inline Var dropout(Var x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    if (rate == 0.0) return x;
    const double keep = 1.0 / (1.0 - rate);
    const detail::DropMask drop(rate);
    auto vx = x.value();
    std::vector<double> mask(vx.size());
    std::vector<double> out(vx.size());
    for (std::size_t i = 0; i < vx.size(); ++i) {
        mask[i] = drop.drop(rng) ? 0.0 : keep;
        out[i] = vx[i] * mask[i];
    }
    return x.tape().record("dropout", x.shape(), std::move(out), {x}, [mask = std::move(mask)](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gx = ctx.input_grad(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

struct AttentionShape {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::size_t heads = 1;
};

// Multi-head scaled dot-product self-attention over packed [B*L x d] inputs.
// Head h owns columns [h*dh, (h+1)*dh). Keys with key_mask == 0 get a -inf
// logit, so padded positions never contribute to any output row. Dropout is
// applied to the attention weights when rng != nullptr and rate > 0.
inline Var multi_head_attention(Var q, Var k, Var v, std::span<const int> key_mask, AttentionShape shape,
                                double dropout_rate = 0.0, Rng* rng = nullptr) {
    Tape& tape = detail::same_tape(q, k, "attention");
    detail::same_tape(q, v, "attention");
    const std::size_t B = shape.batch, L = shape.seq_len, H = shape.heads;
    detail::require_rank2(q.shape(), "attention", "queries");
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const std::size_t d = q.shape()[1];
    if (q.shape()[0] != B * L) {
        throw DimensionError("attention: " + shape_str(q.shape()) + " rows do not match batch " +
                             std::to_string(B) + " x length " + std::to_string(L));
    }
    if (H == 0 || d % H != 0) throw DimensionError("attention: width not divisible by head count");
    if (key_mask.size() != B * L) throw DimensionError("attention: mask length mismatch");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ContractError("attention: dropout rate out of range");
    const bool use_dropout = rng != nullptr && dropout_rate > 0.0;
    const std::size_t dh = d / H;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    auto vq = q.value();
    auto vk = k.value();
    auto vv = v.value();
    // probs / dropped probs per (b, h): [L x L]
    auto probs = std::make_shared<std::vector<double>>(B * H * L * L, 0.0);
    auto dmask = std::make_shared<std::vector<double>>(use_dropout ? B * H * L * L : 0, 0.0);
    std::vector<double> out(B * L * d, 0.0);
    const detail::DropMask drop(dropout_rate);
    const double keep = use_dropout ? 1.0 / (1.0 - dropout_rate) : 1.0;

    for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t j = 0; j < L; ++j) any = any || key_mask[b * L + j] != 0;
        if (!any) throw ContractError("attention: sequence " + std::to_string(b) + " has no unmasked position");
        for (std::size_t h = 0; h < H; ++h) {
            double* P = probs->data() + (b * H + h) * L * L;
            for (std::size_t i = 0; i < L; ++i) {
                const double* qi = vq.data() + (b * L + i) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < L; ++j) {
                    if (key_mask[b * L + j] == 0) continue;
                    const double* kj = vk.data() + (b * L + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= inv_sqrt;
                    P[i * L + j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < L; ++j) {
                    if (key_mask[b * L + j] == 0) continue;
                    P[i * L + j] = std::exp(P[i * L + j] - mx);
                    z += P[i * L + j];
                }
                double* oi = out.data() + (b * L + i) * d + h * dh;
                for (std::size_t j = 0; j < L; ++j) {
                    if (key_mask[b * L + j] == 0) continue;
                    P[i * L + j] /= z;
                    double w = P[i * L + j];
                    if (use_dropout) {
                        double mval = drop.drop(*rng) ? 0.0 : keep;
                        (*dmask)[(b * H + h) * L * L + i * L + j] = mval;
                        w *= mval;
                    }
                    if (w == 0.0) continue;
                    const double* vj = vv.data() + (b * L + j) * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) oi[t] += w * vj[t];
                }
            }
        }
    }

    std::vector<int> mask(key_mask.begin(), key_mask.end());
    return tape.record(
        "attention", q.shape(), std::move(out), {q, k, v},
        [B, L, H, d, dh, inv_sqrt, use_dropout, probs, dmask, mask = std::move(mask)](BackwardContext& ctx) {
            auto g = ctx.out_grad();
            auto vq = ctx.input_value(0);
            auto vk = ctx.input_value(1);
            auto vv = ctx.input_value(2);
            auto gq = ctx.input_grad(0);
            auto gk = ctx.input_grad(1);
            auto gv = ctx.input_grad(2);
            std::vector<double> dp(L);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    const double* P = probs->data() + (b * H + h) * L * L;
                    const double* M = use_dropout ? dmask->data() + (b * H + h) * L * L : nullptr;
                    for (std::size_t i = 0; i < L; ++i) {
                        const double* gi = g.data() + (b * L + i) * d + h * dh;
                        // dP'_ij = g_i . v_j ; dV_j += P'_ij g_i
                        double rowdot = 0.0;
                        for (std::size_t j = 0; j < L; ++j) {
                            dp[j] = 0.0;
                            if (mask[b * L + j] == 0) continue;
                            const double m = M ? M[i * L + j] : 1.0;
                            const double* vj = vv.data() + (b * L + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
                            dp[j] = s * m;
                            rowdot += dp[j] * P[i * L + j];
                            if (!gv.empty()) {
                                const double w = P[i * L + j] * m;
                                double* gvj = gv.data() + (b * L + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gvj[t] += w * gi[t];
                            }
                        }
                        // dS_ij = P_ij (dP_ij - sum_l dP_il P_il), scaled by 1/sqrt(dh)
                        const double* qi = vq.data() + (b * L + i) * d + h * dh;
                        double* gqi = gq.empty() ? nullptr : gq.data() + (b * L + i) * d + h * dh;
                        for (std::size_t j = 0; j < L; ++j) {
                            if (mask[b * L + j] == 0) continue;
                            const double ds = P[i * L + j] * (dp[j] - rowdot) * inv_sqrt;
                            if (ds == 0.0) continue;
                            const double* kj = vk.data() + (b * L + j) * d + h * dh;
                            if (gqi)
                                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                            if (!gk.empty()) {
                                double* gkj = gk.data() + (b * L + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                            }
                        }
                    }
                }
            }
        });
}

// Mean over rows of -log softmax(logits)[gold].
inline Var cross_entropy(Var logits, std::span<const std::size_t> gold) {
    detail::require_rank2(logits.shape(), "cross_entropy", "logits");
    const std::size_t m = logits.shape()[0], c = logits.shape()[1];
    if (gold.size() != m) {
        throw DimensionError("cross_entropy: " + std::to_string(gold.size()) + " labels for " +
                             std::to_string(m) + " rows");
    }
    for (auto y : gold) {
        if (y >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                                std::to_string(c) + " classes");
        }
    }
    auto z = logits.value();
    auto probs = std::make_shared<std::vector<double>>(m * c);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = z.data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        total += lse - row[gold[i]];
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
    }
    std::vector<std::size_t> y(gold.begin(), gold.end());
    return logits.tape().record("cross_entropy", {}, {total / static_cast<double>(m)}, {logits},
                                [m, c, probs, y = std::move(y)](BackwardContext& ctx) {
                                    const double g = ctx.out_grad()[0] / static_cast<double>(m);
                                    auto gz = ctx.input_grad(0);
                                    for (std::size_t i = 0; i < m; ++i) {
                                        for (std::size_t j = 0; j < c; ++j) {
                                            double t = (*probs)[i * c + j] - (j == y[i] ? 1.0 : 0.0);
                                            gz[i * c + j] += g * t;
                                        }
                                    }
                                });
}

// Mean over all entries of the binary cross entropy in logit form:
//   max(z, 0) - z*y + log1p(exp(-|z|))
inline Var bce_with_logits(Var logits, std::span<const double> targets) {
    detail::require_rank2(logits.shape(), "bce_with_logits", "logits");
    if (targets.size() != logits.numel()) {
        throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    for (double t : targets) {
        if (t != 0.0 && t != 1.0) throw ContractError("bce_with_logits: targets must be 0 or 1");
    }
    auto z = logits.value();
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        total += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    const double n = static_cast<double>(z.size());
    std::vector<double> y(targets.begin(), targets.end());
    return logits.tape().record("bce_with_logits", {}, {total / n}, {logits}, [n, y = std::move(y)](BackwardContext& ctx) {
        const double g = ctx.out_grad()[0] / n;
        auto z = ctx.input_value(0);
        auto gz = ctx.input_grad(0);
        for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g * (activate(Activation::sigmoid, z[i]) - y[i]);
    });
}

}  // namespace emofuse
