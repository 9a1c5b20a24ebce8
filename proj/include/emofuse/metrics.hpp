#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "emofuse/errors.hpp"

namespace emofuse {

// Per-class counts over the full label map.
struct ConfusionCounts {
    std::vector<std::size_t> tp, fp, fn;

    explicit ConfusionCounts(std::size_t num_classes = 0) : tp(num_classes), fp(num_classes), fn(num_classes) {}
    std::size_t num_classes() const { return tp.size(); }
};

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

inline ConfusionCounts confusion_counts(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                                        std::size_t num_classes) {
    if (preds.size() != golds.size()) {
        throw ContractError("macro_f1: " + std::to_string(preds.size()) + " predictions vs " +
                            std::to_string(golds.size()) + " gold labels");
    }
    ConfusionCounts c(num_classes);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= num_classes || golds[i] >= num_classes) {
            throw ContractError("macro_f1: label outside [0, " + std::to_string(num_classes) + ")");
        }
        if (preds[i] == golds[i]) {
            ++c.tp[preds[i]];
        } else {
            ++c.fp[preds[i]];
            ++c.fn[golds[i]];
        }
    }
    return c;
}

// 0/0 is taken as 0 for precision, recall and F1.
inline std::vector<ClassScores> per_class_scores(const ConfusionCounts& c) {
    std::vector<ClassScores> out(c.num_classes());
    for (std::size_t k = 0; k < c.num_classes(); ++k) {
        const double tp = static_cast<double>(c.tp[k]);
        const std::size_t pred_pos = c.tp[k] + c.fp[k];
        const std::size_t gold_pos = c.tp[k] + c.fn[k];
        auto& s = out[k];
        s.support = gold_pos;
        s.precision = pred_pos ? tp / static_cast<double>(pred_pos) : 0.0;
        s.recall = gold_pos ? tp / static_cast<double>(gold_pos) : 0.0;
        s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    }
    return out;
}

// Unweighted mean of per-class F1 over every class, absent ones included.
inline double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t num_classes) {
    if (num_classes == 0) throw ContractError("macro_f1: num_classes must be positive");
    const auto scores = per_class_scores(confusion_counts(preds, golds, num_classes));
    double total = 0.0;
    for (const auto& s : scores) total += s.f1;
    return total / static_cast<double>(num_classes);
}

struct SeedAggregate {
    double mean = 0.0;
    std::vector<double> values;
};

inline SeedAggregate aggregate_seeds(std::span<const double> values) {
    if (values.empty()) throw ContractError("aggregate_seeds: no results");
    SeedAggregate a;
    a.values.assign(values.begin(), values.end());
    // Sorted summation keeps the mean bitwise independent of seed order.
    std::vector<double> sorted = a.values;
    std::sort(sorted.begin(), sorted.end());
    a.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
    return a;
}

// ---------------------------------------------------------------------------
// Student t distribution
// ---------------------------------------------------------------------------

namespace detail {

// Continued fraction for I_x(a, b) (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) return h;
    }
    throw NumericError("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

// Regularized incomplete beta I_x(a, b) for a, b > 0, x in [0, 1].
inline double regularized_incomplete_beta(double x, double a, double b) {
    if (!(a > 0.0 && b > 0.0)) throw ContractError("incomplete beta: a and b must be positive");
    if (!(x >= 0.0 && x <= 1.0)) throw ContractError("incomplete beta: x must lie in [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// Two-sided tail P(|T| >= |t|) for T ~ t(df).
inline double student_t_two_sided_p(double t, double df) {
    if (!(df > 0.0)) throw ContractError("student t: df must be positive");
    if (std::isinf(t)) return 0.0;
    return regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
}

inline double student_t_cdf(double x, double df) {
    if (!(df > 0.0)) throw ContractError("student_t_cdf: df must be positive, got " + std::to_string(df));
    if (std::isnan(x)) throw NumericError("student_t_cdf: x is NaN");
    const double tail = 0.5 * student_t_two_sided_p(x, df);
    return x < 0.0 ? tail : 1.0 - tail;
}

// ---------------------------------------------------------------------------
// Two-sample t-test
// ---------------------------------------------------------------------------

enum class VarianceMode { welch, pooled };
enum class Pairing { unpaired, paired };

struct TTestOptions {
    VarianceMode variance = VarianceMode::welch;
    Pairing pairing = Pairing::unpaired;
    double alpha = 0.05;
};

struct SignificanceResult {
    double t_statistic = 0.0;
    double degrees_of_freedom = 0.0;
    double p_value = 1.0;
    bool significant = false;
};

inline double sample_mean(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// n - 1 denominator.
inline double sample_variance(std::span<const double> x) {
    const double m = sample_mean(x);
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return ss / static_cast<double>(x.size() - 1);
}

inline SignificanceResult t_test(std::span<const double> a, std::span<const double> b, TTestOptions opt = {}) {
    if (a.size() < 2 || b.size() < 2) throw ContractError("t_test: each sample needs at least 2 values");
    for (double v : a) if (!std::isfinite(v)) throw NumericError("t_test: non-finite sample value");
    for (double v : b) if (!std::isfinite(v)) throw NumericError("t_test: non-finite sample value");
    SignificanceResult r;
    if (opt.pairing == Pairing::paired) {
        if (a.size() != b.size()) throw ContractError("t_test: paired samples need equal lengths");
        std::vector<double> d(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
        const double var = sample_variance(d);
        if (var == 0.0) throw NumericError("t_test: degenerate variance (all paired differences equal)");
        const double n = static_cast<double>(d.size());
        r.t_statistic = sample_mean(d) / std::sqrt(var / n);
        r.degrees_of_freedom = n - 1.0;
    } else {
        const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
        const double va = sample_variance(a), vb = sample_variance(b);
        if (va == 0.0 && vb == 0.0) throw NumericError("t_test: degenerate variance (both samples constant)");
        const double diff = sample_mean(a) - sample_mean(b);
        if (opt.variance == VarianceMode::welch) {
            const double sa = va / na, sb = vb / nb;
            r.t_statistic = diff / std::sqrt(sa + sb);
            r.degrees_of_freedom = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        } else {
            const double df = na + nb - 2.0;
            const double sp = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            r.t_statistic = diff / std::sqrt(sp * (1.0 / na + 1.0 / nb));
            r.degrees_of_freedom = df;
        }
    }
    r.p_value = std::clamp(student_t_two_sided_p(r.t_statistic, r.degrees_of_freedom), 0.0, 1.0);
    r.significant = r.p_value < opt.alpha;
    return r;
}

// ---------------------------------------------------------------------------
// Two-sample Kolmogorov-Smirnov test (asymptotic p-value)
// ---------------------------------------------------------------------------

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

// Q_KS(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2).
inline double kolmogorov_survival(double lambda) {
    if (lambda < 1e-3) return 1.0;
    double sum = 0.0;
    for (int j = 1; j <= 200; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += (j % 2 ? 1.0 : -1.0) * term;
        if (term < 1e-17) break;
    }
    return std::clamp(2.0 * sum, 0.0, 1.0);
}

inline KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw ContractError("ks_two_sample: empty sample");
    std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double v = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == v) ++i;
        while (j < y.size() && y[j] == v) ++j;
        d = std::max(d, std::fabs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    const double en = std::sqrt(n * m / (n + m));
    return {d, kolmogorov_survival((en + 0.12 + 0.11 / en) * d)};
}

}  // namespace emofuse
