#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "emofuse/encoder.hpp"
#include "emofuse/heads.hpp"
#include "emofuse/random.hpp"

namespace emofuse {

// Encoder + linear head.
struct Classifier {
    EncoderParams encoder;
    HeadParams head;
    TaskKind kind = TaskKind::single;

    std::vector<NamedParam> named_parameters() {
        auto out = encoder.named_parameters("encoder.");
        for (auto& p : head.named_parameters("head.")) out.push_back(std::move(p));
        return out;
    }

    template <class Self>
    static Var logits_of(Tape& tape, Self& self, std::span<const TokenizedSequence> batch, Rng* dropout_rng) {
        Var h = encode_sequence(tape, self.encoder, batch, dropout_rng);
        return head_logits(tape, pool_cls(h), self.head);
    }

    Var logits(Tape& tape, std::span<const TokenizedSequence> batch, Rng* dropout_rng = nullptr) {
        return logits_of(tape, *this, batch, dropout_rng);
    }
    Var logits(Tape& tape, std::span<const TokenizedSequence> batch) const {
        return logits_of(tape, *this, batch, nullptr);
    }
};

// Two encoders whose CLS vectors are concatenated into one single-label head.
struct FusionClassifier {
    EncoderParams hmc_encoder;
    EncoderParams emotion_encoder;
    HeadParams head;
    TaskKind kind = TaskKind::single;

    std::vector<NamedParam> named_parameters() {
        auto out = hmc_encoder.named_parameters("hmc.");
        for (auto& p : emotion_encoder.named_parameters("emotion.")) out.push_back(std::move(p));
        for (auto& p : head.named_parameters("head.")) out.push_back(std::move(p));
        return out;
    }

    template <class Self>
    static Var logits_of(Tape& tape, Self& self, std::span<const TokenizedSequence> batch, Rng* dropout_rng) {
        Var h = pool_cls(encode_sequence(tape, self.hmc_encoder, batch, dropout_rng));
        Var e = pool_cls(encode_sequence(tape, self.emotion_encoder, batch, dropout_rng));
        if (h.shape()[1] + e.shape()[1] != self.head.in_dim()) {
            throw DimensionError("fusion head in_dim " + std::to_string(self.head.in_dim()) +
                                 " does not match branch widths");
        }
        return head_logits(tape, concat_features(h, e), self.head);
    }

    Var logits(Tape& tape, std::span<const TokenizedSequence> batch, Rng* dropout_rng = nullptr) {
        return logits_of(tape, *this, batch, dropout_rng);
    }
    Var logits(Tape& tape, std::span<const TokenizedSequence> batch) const {
        return logits_of(tape, *this, batch, nullptr);
    }
};

struct AdamState {
    std::uint64_t step = 0;
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update. A parameter without a gradient buffer is
// treated as having a zero gradient.
inline void adam_step(std::span<const NamedParam> params, AdamState& state) {
    for (const auto& [name, t] : params) {
        if (!t->grad.empty()) check_finite(t->grad, "adam_step: gradient of " + name);
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.second->numel(), 0.0);
            state.v.emplace_back(p.second->numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adam_step: parameter list changed between steps");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi].second;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (m.size() != p.numel()) throw ContractError("adam_step: moment shape mismatch for " + params[pi].first);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double g = p.grad.empty() ? 0.0 : p.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

struct TrainConfig {
    std::size_t epochs = 3;
    std::size_t batch_size = 128;
    double lr = 2e-5;
    std::uint64_t seed = 1;
    bool shuffle = true;

    // epochs == 0 is accepted as the untrained control.
    void validate() const {
        if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Tokenized examples with targets in the form the heads consume.
struct EncodedDataset {
    TaskKind kind = TaskKind::single;
    std::size_t num_labels = 0;
    std::vector<TokenizedSequence> sequences;
    std::vector<std::size_t> single;  // one label per example
    std::vector<double> multi;        // [N x num_labels] 0/1

    std::size_t size() const { return sequences.size(); }
};

struct LossRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
};

struct TrainLog {
    std::vector<LossRecord> steps;
    std::vector<double> epoch_mean;
};

inline void write_loss_log(const std::filesystem::path& path, const TrainLog& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write loss log " + path.string());
    out << "step,epoch,loss\n";
    out.precision(17);
    for (const auto& r : log.steps) out << r.step << ',' << r.epoch << ',' << r.loss << '\n';
}

template <class Model>
Var batch_loss(Tape& tape, Model& model, const EncodedDataset& data, std::span<const std::size_t> rows, Rng* dropout_rng) {
    std::vector<TokenizedSequence> seqs;
    seqs.reserve(rows.size());
    for (auto r : rows) seqs.push_back(data.sequences[r]);
    Var logits = model.logits(tape, trim_padding(seqs), dropout_rng);
    if (data.kind == TaskKind::single) {
        std::vector<std::size_t> gold;
        for (auto r : rows) gold.push_back(data.single[r]);
        return cross_entropy(logits, gold);
    }
    std::vector<double> gold;
    for (auto r : rows)
        gold.insert(gold.end(), data.multi.begin() + r * data.num_labels, data.multi.begin() + (r + 1) * data.num_labels);
    return bce_with_logits(logits, gold);
}

// Minibatch Adam: epochs x ceil(N / batch_size) steps, shuffling every epoch
// from the (seed, "shuffle<tag>") stream; the last partial batch is kept.
template <class Model>
TrainLog train(Model& model, const EncodedDataset& data, const TrainConfig& cfg, std::string_view tag = "") {
    cfg.validate();
    if (data.size() == 0) throw ContractError("train: empty dataset");
    if (model.head.num_labels() != data.num_labels || model.kind != data.kind) {
        throw ConfigError("train: head has " + std::to_string(model.head.num_labels()) + " " +
                          to_string(model.kind) + " outputs but data has " + std::to_string(data.num_labels) +
                          " " + to_string(data.kind) + " labels");
    }
    Rng shuffle_rng = make_stream(cfg.seed, std::string("shuffle") + std::string(tag));
    Rng dropout_rng = make_stream(cfg.seed, std::string("dropout") + std::string(tag));
    auto params = model.named_parameters();
    AdamState adam;
    adam.lr = cfg.lr;

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    TrainLog log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) std::shuffle(order.begin(), order.end(), shuffle_rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            for (auto& p : params) p.second->zero_grad();
            Tape tape;
            Var loss = batch_loss(tape, model, data, std::span(order).subspan(start, end - start), &dropout_rng);
            tape.backward(loss);
            adam_step(params, adam);
            log.steps.push_back({step++, epoch, loss.item()});
            total += loss.item();
            ++batches;
        }
        log.epoch_mean.push_back(total / static_cast<double>(batches));
    }
    for (auto& p : params) p.second->grad.clear();
    return log;
}

// Logits for every sequence, evaluated without dropout or gradients.
template <class Model>
Prediction predict(const Model& model, std::span<const TokenizedSequence> sequences, std::size_t batch_size = 256) {
    if (sequences.empty()) throw ContractError("predict: no sequences");
    std::vector<double> all;
    std::size_t classes = 0;
    for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
        const std::size_t end = std::min(sequences.size(), start + batch_size);
        Tape tape(false);
        Var logits = model.logits(tape, trim_padding(sequences.subspan(start, end - start)));
        classes = logits.shape()[1];
        all.insert(all.end(), logits.value().begin(), logits.value().end());
    }
    return make_prediction(Tensor({sequences.size(), classes}, std::move(all)), model.kind);
}

}  // namespace emofuse
