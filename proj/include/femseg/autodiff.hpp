#pragma once

// Reverse-mode differentiation over a linear tape of primitive applications.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "femseg/kernels.hpp"

namespace femseg {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

template <class T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>& gout)>;

    /// A non-recording tape evaluates primitives without saving backward state.
    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Input that never receives a gradient.
    Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

    /// Owned input; differentiable when `requires_grad` (or the tensor's own flag) is set.
    Var leaf(Tensor<T> value, bool requires_grad = true) {
        const bool rg = record_ && (requires_grad || value.requires_grad());
        return push(std::move(value), rg, {});
    }

    /// Differentiable reference to an external tensor that must outlive the tape.
    Var param(const Tensor<T>& value) {
        Node node;
        node.external = &value;
        node.requires_grad = record_;
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.owned;
    }

    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient from the last backward pass; zeros when the node was not reached.
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad) return *n.grad;
        return Tensor<T>(value(v).shape());
    }

    /// Appends a primitive application; `back` is kept only when recording and the output needs a gradient.
    Var push(Tensor<T> value, bool requires_grad, Backward back) {
        Node node;
        node.owned = std::move(value);
        node.requires_grad = record_ && requires_grad;
        if (node.requires_grad) node.backward = std::move(back);
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    /// Accumulation buffer for a node's gradient, created zeroed on first use.
    Tensor<T>& grad_buffer(Var v) {
        Node& n = nodes_.at(v.id);
        if (!n.grad) n.grad.emplace(value(v).shape());
        return *n.grad;
    }

    /// Exact reverse-mode gradients of a scalar. Gradients from earlier calls are discarded.
    void backward(Var loss) {
        if (!record_) throw std::logic_error("backward: tape was created without recording");
        if (value(loss).size() != 1)
            throw ShapeError(cat("backward: loss must be a scalar, got shape ", to_string(value(loss).shape())));
        for (auto& n : nodes_) n.grad.reset();
        if (!nodes_[loss.id].requires_grad) return;
        grad_buffer(loss)[0] = T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.grad || !n.backward) continue;
            n.backward(*this, *n.grad);
        }
    }

private:
    struct Node {
        const Tensor<T>* external = nullptr;
        Tensor<T> owned;
        bool requires_grad = false;
        Backward backward;
        std::optional<Tensor<T>> grad;
    };

    bool record_;
    std::vector<Node> nodes_;
};

/// Free-function spelling of Tape::backward.
template <class T>
void backward(Tape<T>& tape, Var loss) {
    tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Differentiable primitives.

template <class T>
Var conv(Tape<T>& tape, Var x, Var kernel, Var bias, const ConvSpec& spec) {
    auto y = kernels::conv_forward(tape.value(x), tape.value(kernel), tape.value(bias), spec);
    const bool rg = tape.requires_grad(x) || tape.requires_grad(kernel) || tape.requires_grad(bias);
    return tape.push(std::move(y), rg, [x, kernel, bias, spec](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
        Tensor<T>* gk = t.requires_grad(kernel) ? &t.grad_buffer(kernel) : nullptr;
        Tensor<T>* gb = t.requires_grad(bias) ? &t.grad_buffer(bias) : nullptr;
        kernels::conv_backward(t.value(x), t.value(kernel), spec, g, gx, gk, gb);
    });
}

template <class T>
Var max_pool(Tape<T>& tape, Var x, const ConvSpec& spec) {
    auto argmax = std::make_shared<std::vector<std::size_t>>();
    auto y = kernels::max_pool_forward(tape.value(x), spec, *argmax);
    return tape.push(std::move(y), tape.requires_grad(x), [x, argmax](Tape<T>& t, const Tensor<T>& g) {
        kernels::max_pool_backward(*argmax, g, t.grad_buffer(x));
    });
}

template <class T>
Var up_conv(Tape<T>& tape, Var x, Var kernel, const ConvSpec& spec) {
    auto y = kernels::up_conv_forward(tape.value(x), tape.value(kernel), spec);
    const bool rg = tape.requires_grad(x) || tape.requires_grad(kernel);
    return tape.push(std::move(y), rg, [x, kernel, spec](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
        Tensor<T>* gk = t.requires_grad(kernel) ? &t.grad_buffer(kernel) : nullptr;
        kernels::up_conv_backward(t.value(x), t.value(kernel), spec, g, gx, gk);
    });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
    auto y = kernels::relu_forward(tape.value(x));
    return tape.push(std::move(y), tape.requires_grad(x), [x](Tape<T>& t, const Tensor<T>& g) {
        kernels::relu_backward(t.value(x), g, t.grad_buffer(x));
    });
}

template <class T>
Var channel_softmax(Tape<T>& tape, Var x) {
    auto y = kernels::softmax_forward(tape.value(x));
    // The backward pass reads the softmax output from the node about to be pushed.
    const Var self{tape.size()};
    return tape.push(std::move(y), tape.requires_grad(x), [x, self](Tape<T>& t, const Tensor<T>& g) {
        kernels::softmax_backward(t.value(self), g, t.grad_buffer(x));
    });
}

template <class T>
Var crop_concat(Tape<T>& tape, Var encoder, Var decoder) {
    auto y = kernels::crop_concat_forward(tape.value(encoder), tape.value(decoder));
    const bool rg = tape.requires_grad(encoder) || tape.requires_grad(decoder);
    return tape.push(std::move(y), rg, [encoder, decoder](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* ge = t.requires_grad(encoder) ? &t.grad_buffer(encoder) : nullptr;
        Tensor<T>* gd = t.requires_grad(decoder) ? &t.grad_buffer(decoder) : nullptr;
        kernels::crop_concat_backward(t.value(encoder), t.value(decoder), g, ge, gd);
    });
}

/// Sum of all elements, as a scalar.
template <class T>
Var sum(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    T s{0};
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    return tape.push(Tensor<T>({1}, std::vector<T>{s}), tape.requires_grad(x), [x](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
}

/// Inner product with a fixed weight tensor, as a scalar. Used to project
/// tensors onto random directions in gradient checks.
template <class T>
Var dot(Tape<T>& tape, Var x, const Tensor<T>& weights) {
    const auto& xv = tape.value(x);
    if (xv.shape() != weights.shape())
        throw ShapeError(cat("dot: shapes differ: ", to_string(xv.shape()), " vs ", to_string(weights.shape())));
    T s{0};
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
    return tape.push(Tensor<T>({1}, std::vector<T>{s}), tape.requires_grad(x),
                     [x, weights](Tape<T>& t, const Tensor<T>& g) {
                         auto& gx = t.grad_buffer(x);
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
                     });
}

}  // namespace femseg
