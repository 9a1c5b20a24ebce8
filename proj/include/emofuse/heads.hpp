#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "emofuse/encoder.hpp"
#include "emofuse/ops.hpp"

namespace emofuse {

enum class TaskKind { single, multi };

inline const char* to_string(TaskKind k) { return k == TaskKind::single ? "single" : "multi"; }

// Linear output layer: logits = features * weight + bias.
struct HeadParams {
    Tensor weight;  // [in_dim x num_labels]
    Tensor bias;    // [num_labels]

    std::size_t in_dim() const { return weight.shape.at(0); }
    std::size_t num_labels() const { return weight.shape.at(1); }

    std::vector<NamedParam> named_parameters(const std::string& prefix = "head.") {
        return {{prefix + "weight", &weight}, {prefix + "bias", &bias}};
    }

    friend bool operator==(const HeadParams& a, const HeadParams& b) {
        return a.weight == b.weight && a.bias == b.bias;
    }
};

inline HeadParams init_head(std::size_t in_dim, std::size_t num_labels, Rng& rng) {
    if (in_dim == 0 || num_labels == 0) throw ConfigError("head dimensions must be positive");
    return {init_weight({in_dim, num_labels}, rng), Tensor::zeros({num_labels}, true)};
}

struct HeadOutput {
    Var logits;
    Var loss;
};

template <class Head>
    requires std::same_as<std::remove_const_t<Head>, HeadParams>
Var head_logits(Tape& tape, Var features, Head& head) {
    if (features.shape().size() != 2 || features.shape()[1] != head.in_dim()) {
        throw DimensionError("head expects features [B x " + std::to_string(head.in_dim()) + "], got " +
                             shape_str(features.shape()));
    }
    return add_bias(matmul(features, detail::bind(tape, head.weight)), detail::bind(tape, head.bias));
}

// Softmax / cross-entropy head for single-label tasks.
inline HeadOutput forward_single(Tape& tape, Var h_cls, HeadParams& head, std::span<const std::size_t> gold) {
    Var logits = head_logits(tape, h_cls, head);
    return {logits, cross_entropy(logits, gold)};
}

// Sigmoid / binary cross-entropy head; gold is a row-major [B x C] 0/1 matrix.
inline HeadOutput forward_multi(Tape& tape, Var h_cls, HeadParams& head, std::span<const double> gold) {
    Var logits = head_logits(tape, h_cls, head);
    return {logits, bce_with_logits(logits, gold)};
}

// Single-label head over the concatenation h_cls (+) e_cls.
inline HeadOutput forward_fusion(Tape& tape, Var h_cls, Var e_cls, HeadParams& head,
                                 std::span<const std::size_t> gold) {
    if (h_cls.shape().size() != 2 || e_cls.shape().size() != 2 ||
        h_cls.shape()[1] + e_cls.shape()[1] != head.in_dim()) {
        throw DimensionError("fusion head expects in_dim " + std::to_string(head.in_dim()) + ", got " +
                             shape_str(h_cls.shape()) + " (+) " + shape_str(e_cls.shape()));
    }
    return forward_single(tape, concat_features(h_cls, e_cls), head, gold);
}

struct Prediction {
    TaskKind mode = TaskKind::single;
    Tensor logits;                      // [B x C]
    std::vector<double> probabilities;  // softmax rows (single) or sigmoids (multi)

    std::size_t rows() const { return logits.shape.at(0); }
    std::size_t num_labels() const { return logits.shape.at(1); }
};

inline Prediction make_prediction(Tensor logits, TaskKind mode) {
    if (logits.rank() != 2) throw DimensionError("prediction logits must be rank 2");
    Prediction p;
    p.mode = mode;
    const std::size_t m = logits.shape[0], c = logits.shape[1];
    p.probabilities.resize(m * c);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits.data.data() + i * c;
        if (mode == TaskKind::single) {
            double mx = *std::max_element(row, row + c);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < c; ++j) p.probabilities[i * c + j] = std::exp(row[j] - mx) / z;
        } else {
            for (std::size_t j = 0; j < c; ++j) p.probabilities[i * c + j] = activate(Activation::sigmoid, row[j]);
        }
    }
    p.logits = std::move(logits);
    return p;
}

// Single mode: argmax with lowest-index tie-break, one label per row.
// Multi mode: every label whose probability is >= threshold.
inline std::vector<std::vector<std::size_t>> predict_labels(const Prediction& pred, TaskKind mode,
                                                            double threshold = 0.5) {
    if (mode == TaskKind::multi && !(threshold > 0.0 && threshold < 1.0)) {
        throw ContractError("predict_labels: threshold must lie in (0, 1)");
    }
    const std::size_t m = pred.rows(), c = pred.num_labels();
    std::vector<std::vector<std::size_t>> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = pred.probabilities.data() + i * c;
        if (mode == TaskKind::single) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (row[j] > row[best]) best = j;
            out[i] = {best};
        } else {
            for (std::size_t j = 0; j < c; ++j)
                if (row[j] >= threshold) out[i].push_back(j);
        }
    }
    return out;
}

// Convenience for single-label predictions.
inline std::vector<std::size_t> argmax_labels(const Prediction& pred) {
    std::vector<std::size_t> out;
    for (const auto& row : predict_labels(pred, TaskKind::single)) out.push_back(row.front());
    return out;
}

}  // namespace emofuse
