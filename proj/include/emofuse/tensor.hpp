#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emofuse/errors.hpp"

namespace emofuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline void check_finite(std::span<const double> values, std::string_view what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string(what) + ": non-finite value " + std::to_string(values[i]) +
                               " at flat index " + std::to_string(i));
        }
    }
}

// Dense row-major tensor of doubles. A rank-0 shape is a scalar.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass writes into it
    bool requires_grad = false;
    std::optional<std::size_t> tape_id;

    Tensor() = default;

    Tensor(Shape shape_, std::vector<double> values, bool requires_grad_ = false)
        : shape(std::move(shape_)), data(std::move(values)), requires_grad(requires_grad_) {
        for (auto d : shape) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        }
        check_finite(data, "tensor construction");
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({}, {value}, requires_grad);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::vector<double> values;
        std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
        for (const auto& row : rows) {
            if (row.size() != cols) throw DimensionError("ragged matrix literal");
            values.insert(values.end(), row.begin(), row.end());
        }
        return Tensor({rows.size(), cols}, std::move(values), requires_grad);
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool has_grad() const { return !grad.empty(); }

    void zero_grad() { grad.assign(data.size(), 0.0); }

    double item() const {
        if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape == b.shape && a.data == b.data;
    }
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    std::size_t id() const { return id_; }
    Tape& tape() const {
        if (tape_ == nullptr) throw ContractError("use of an unbound Var");
        return *tape_;
    }

    const Shape& shape() const;
    std::span<const double> value() const;
    bool requires_grad() const;
    double item() const;
    std::size_t numel() const { return value().size(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// What a backward rule sees: the upstream gradient of its output and
// accumulator spans for each input (empty when that input needs no grad).
class BackwardContext {
public:
    BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

    std::span<const double> out_grad() const;
    std::span<const double> out_value() const;
    std::span<const double> input_value(std::size_t i) const;
    std::span<double> input_grad(std::size_t i);
    const Shape& input_shape(std::size_t i) const;

private:
    Tape& tape_;
    std::size_t node_;
};

using BackwardRule = std::function<void(BackwardContext&)>;

// Records operations in topological order (every node after its inputs) and
// replays them in reverse to accumulate gradients.
class Tape {
public:
    struct Node {
        std::string op;
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::vector<std::size_t> inputs;
        BackwardRule rule;
        Tensor* param = nullptr;
        bool requires_grad = false;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    // Binds an external tensor. When it requires grad, backward() adds the
    // gradient into t.grad; otherwise it behaves as a constant.
    Var leaf(Tensor& t) {
        Node n;
        n.op = "leaf";
        n.shape = t.shape;
        n.value = t.data;
        n.requires_grad = grad_enabled_ && t.requires_grad;
        if (n.requires_grad) n.param = &t;
        t.tape_id = nodes_.size();
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor t) { return constant(std::move(t.shape), std::move(t.data)); }

    Var constant(Shape shape, std::vector<double> value) {
        if (shape_numel(shape) != value.size()) {
            throw DimensionError("constant shape " + shape_str(shape) + " does not match " +
                                 std::to_string(value.size()) + " values");
        }
        check_finite(value, "constant");
        Node n;
        n.op = "constant";
        n.shape = std::move(shape);
        n.value = std::move(value);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Var record(std::string_view op, Shape shape, std::vector<double> value, std::vector<Var> inputs,
               BackwardRule rule) {
        if (shape_numel(shape) != value.size()) {
            throw DimensionError(std::string(op) + ": output shape " + shape_str(shape) +
                                 " does not match " + std::to_string(value.size()) + " values");
        }
        check_finite(value, op);
        Node n;
        n.op = std::string(op);
        n.shape = std::move(shape);
        n.value = std::move(value);
        for (const auto& in : inputs) {
            if (&in.tape() != this) throw ContractError(std::string(op) + ": input from another tape");
            n.inputs.push_back(in.id());
            n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
        }
        n.requires_grad = n.requires_grad && grad_enabled_;
        if (n.requires_grad) n.rule = std::move(rule);
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    // Reverse sweep from a scalar loss. Node gradients are reset on every call;
    // bound parameter gradients accumulate across calls.
    void backward(Var loss) {
        if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
        if (!grad_enabled_) throw ContractError("backward on a tape recorded without gradients");
        const auto& root = nodes_[loss.id()];
        if (root.value.size() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(root.shape));
        }
        for (auto& n : nodes_) {
            if (n.requires_grad) {
                n.grad.assign(n.value.size(), 0.0);
            } else {
                n.grad.clear();
            }
        }
        if (!root.requires_grad) return;
        nodes_[loss.id()].grad[0] = 1.0;
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (!n.requires_grad || !n.rule) continue;
            BackwardContext ctx(*this, id);
            n.rule(ctx);
        }
        for (auto& n : nodes_) {
            if (n.param == nullptr || !n.requires_grad) continue;
            auto& g = n.param->grad;
            if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    }

    const Node& node(std::size_t id) const { return nodes_.at(id); }
    Node& node(std::size_t id) { return nodes_.at(id); }

    Tensor to_tensor(Var v) const {
        const auto& n = nodes_.at(v.id());
        return Tensor(n.shape, n.value);
    }

private:
    std::vector<Node> nodes_;
    bool grad_enabled_;
};

inline const Shape& Var::shape() const { return tape().node(id_).shape; }
inline std::span<const double> Var::value() const { return tape().node(id_).value; }
inline bool Var::requires_grad() const { return tape().node(id_).requires_grad; }
inline double Var::item() const {
    auto v = value();
    if (v.size() != 1) throw ContractError("item() on non-scalar of shape " + shape_str(shape()));
    return v[0];
}

inline std::span<const double> BackwardContext::out_grad() const { return tape_.node(node_).grad; }
inline std::span<const double> BackwardContext::out_value() const { return tape_.node(node_).value; }
inline std::span<const double> BackwardContext::input_value(std::size_t i) const {
    return tape_.node(tape_.node(node_).inputs.at(i)).value;
}
inline std::span<double> BackwardContext::input_grad(std::size_t i) {
    auto& in = tape_.node(tape_.node(node_).inputs.at(i));
    if (!in.requires_grad) return {};
    return in.grad;
}
inline const Shape& BackwardContext::input_shape(std::size_t i) const {
    return tape_.node(tape_.node(node_).inputs.at(i)).shape;
}

}  // namespace emofuse
