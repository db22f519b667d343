#pragma once

#include "wsed/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace wsed {

// Named trainable tensor. Graph::backward accumulates into `grad`.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}

    void zero_grad() { grad.fill(0.0); }
};

enum class Padding { same, valid };
enum class BatchNormMode { train, infer };
enum class GruDirection { forward, backward };

// Running statistics for one batch-norm layer; owned by the model and
// updated as a side effect of train-mode forward passes.
struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    double momentum = 0.9;
    double epsilon = 1e-5;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels)
        : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}
};

// One direction of GRU parameters. Gate formulation (the library contract):
//   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)          update gate
//   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)          reset gate
//   g_t = tanh(x_t Wh + (r_t * h_{t-1}) Uh + bh)     candidate; reset gates the
//                                                    recurrent term only
//   h_t = (1 - z_t) * h_{t-1} + z_t * g_t            h_0 = 0
// W*: [feat, hidden], U*: [hidden, hidden], b*: [hidden].
struct GruParams {
    Parameter* Wz = nullptr;
    Parameter* Uz = nullptr;
    Parameter* bz = nullptr;
    Parameter* Wr = nullptr;
    Parameter* Ur = nullptr;
    Parameter* br = nullptr;
    Parameter* Wh = nullptr;
    Parameter* Uh = nullptr;
    Parameter* bh = nullptr;
};

// Reverse-mode autodiff tape. Ops append nodes; inputs always precede their
// consumers, so the creation order is a topological order. One graph per
// forward/backward pass; graphs are single-threaded, distinct graphs are
// independent.
//
// Conventions:
//   conv2d       cross-correlation (no kernel flip), stride 1.
//   max_pool2d   non-overlapping windows, trailing remainder rows/columns
//                are dropped; ties route the gradient to the first (lowest
//                flat index) element of the window.
//   batch_norm   per-channel statistics over batch x time x freq with biased
//                variance; train mode updates running stats as
//                running = momentum * running + (1 - momentum) * batch.
//
// Every op validates shapes and, by default, checks its output for NaN/Inf
// and throws if any value is non-finite.
class Graph {
public:
    struct Var {
        std::uint32_t id = 0;
    };

    explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaves.
    Var leaf(Tensor value);        // constant input
    Var param(Parameter& p);       // trainable leaf; backward fills p.grad

    // Elementwise.
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var affine(Var x, double scale, double shift);  // scale * x + shift
    Var sigmoid(Var x);
    Var tanh(Var x);
    Var log(Var x);
    Var clamp(Var x, double lo, double hi);

    // Broadcast bias over the trailing axis: x[..., C] + b[C].
    Var add_rowvec(Var x, Var bias);

    // Linear algebra.
    Var matmul(Var a, Var b);            // [m,k] x [k,n] -> [m,n]
    Var linear(Var x, Var w, Var b);     // x [R,in] * w [in,out] + b [out]

    // Structure.
    Var reshape(Var x, Shape s);
    Var permute(Var x, const std::vector<std::size_t>& axes);
    Var concat(Var a, Var b, std::size_t axis);
    Var slice0(Var x, std::size_t index);       // x[index], drops axis 0
    Var stack0(const std::vector<Var>& xs);     // inverse of slice0
    Var reverse0(Var x);

    // Reductions.
    Var sum_all(Var x);
    Var mean_all(Var x);
    Var sum_axis(Var x, std::size_t axis);
    Var softmax(Var x, std::size_t axis);

    // Network ops.
    Var conv2d(Var input, Var kernel, Var bias, Padding padding);
    Var max_pool2d(Var input, std::size_t pool_t, std::size_t pool_f);
    Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, BatchNormMode mode);

    // input [T,B,F] -> [T,B,H]; output row t is aligned with input row t for
    // both directions.
    Var gru_forward(Var input, const GruParams& params, GruDirection direction);
    // concat(forward, backward) along the feature axis -> [T,B,2H].
    Var bigru(Var input, const GruParams& fwd, const GruParams& bwd);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    // Node-level gradient; valid after backward() for nodes on the loss path.
    const Tensor& grad(Var v) const;

    // Reverse sweep from a scalar loss. Accumulates into Parameter::grad for
    // every param leaf in the graph. Throws if the loss is not scalar.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until needed in backward
        std::vector<std::uint32_t> inputs;
        std::function<void(Graph&, std::uint32_t)> backward_fn;
        Parameter* parameter = nullptr;
        bool needs_grad = false;
        const char* op = "";
    };

    Var push(const char* op, Tensor value, std::vector<std::uint32_t> inputs,
             std::function<void(Graph&, std::uint32_t)> backward_fn, Parameter* parameter = nullptr);
    Tensor& ensure_grad(std::uint32_t id);
    bool wants_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
    void add_to_grad(std::uint32_t id, const double* values, std::size_t n);

    std::vector<Node> nodes_;
    bool check_finite_ = true;
};

using Var = Graph::Var;

}  // namespace wsed
