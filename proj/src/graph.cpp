#include "wsed/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Strides for row-major iteration with one axis singled out.
struct AxisSplit {
    std::size_t outer = 1;  // product of extents before the axis
    std::size_t len = 1;    // extent of the axis
    std::size_t inner = 1;  // product of extents after the axis
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    s.len = shape[axis];
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= shape[i];
    }
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

}  // namespace

Var Graph::push(const char* op, Tensor value, std::vector<std::uint32_t> inputs,
                std::function<void(Graph&, std::uint32_t)> backward_fn, Parameter* parameter) {
    if (check_finite_ && !value.all_finite()) {
        throw std::runtime_error(std::string(op) + ": non-finite value in output of shape " +
                                 shape_to_string(value.shape));
    }
    Node node;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.backward_fn = std::move(backward_fn);
    node.parameter = parameter;
    node.op = op;
    node.needs_grad = parameter != nullptr;
    for (std::uint32_t in : node.inputs) {
        node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
    }
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Graph::ensure_grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) {
        n.grad = Tensor::zeros(n.value.shape);
    }
    return n.grad;
}

void Graph::add_to_grad(std::uint32_t id, const double* values, std::size_t n) {
    Tensor& g = ensure_grad(id);
    for (std::size_t i = 0; i < n; ++i) {
        g.data[i] += values[i];
    }
}

const Tensor& Graph::grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.data.empty()) {
        throw std::runtime_error("Graph::grad: no gradient recorded for this node");
    }
    return n.grad;
}

Var Graph::leaf(Tensor value) {
    return push("leaf", std::move(value), {}, nullptr);
}

Var Graph::param(Parameter& p) {
    return push("param", p.value, {}, nullptr, &p);
}

Var Graph::add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape == tb.shape, "add: shape " + shape_to_string(ta.shape) +
                                      " does not match shape " + shape_to_string(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] += tb.data[i];
    }
    return push("add", std::move(out), {a.id, b.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        for (std::uint32_t in : n.inputs) {
            if (g.wants_grad(in)) {
                g.add_to_grad(in, n.grad.data.data(), n.grad.numel());
            }
        }
    });
}

Var Graph::mul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape == tb.shape, "mul: shape " + shape_to_string(ta.shape) +
                                      " does not match shape " + shape_to_string(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] *= tb.data[i];
    }
    return push("mul", std::move(out), {a.id, b.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t ia = n.inputs[0];
        const std::uint32_t ib = n.inputs[1];
        const std::size_t count = n.grad.numel();
        if (g.wants_grad(ia)) {
            Tensor& ga = g.ensure_grad(ia);
            const Tensor& vb = g.nodes_[ib].value;
            for (std::size_t i = 0; i < count; ++i) {
                ga.data[i] += n.grad.data[i] * vb.data[i];
            }
        }
        if (g.wants_grad(ib)) {
            Tensor& gb = g.ensure_grad(ib);
            const Tensor& va = g.nodes_[ia].value;
            for (std::size_t i = 0; i < count; ++i) {
                gb.data[i] += n.grad.data[i] * va.data[i];
            }
        }
    });
}

Var Graph::affine(Var x, double scale, double shift) {
    Tensor out = value(x);
    for (double& v : out.data) {
        v = scale * v + shift;
    }
    return push("affine", std::move(out), {x.id}, [scale](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            gi.data[i] += scale * n.grad.data[i];
        }
    });
}

Var Graph::sigmoid(Var x) {
    Tensor out = value(x);
    for (double& v : out.data) {
        v = stable_sigmoid(v);
    }
    return push("sigmoid", std::move(out), {x.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            const double s = n.value.data[i];
            gi.data[i] += n.grad.data[i] * s * (1.0 - s);
        }
    });
}

Var Graph::tanh(Var x) {
    Tensor out = value(x);
    for (double& v : out.data) {
        v = std::tanh(v);
    }
    return push("tanh", std::move(out), {x.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            const double t = n.value.data[i];
            gi.data[i] += n.grad.data[i] * (1.0 - t * t);
        }
    });
}

Var Graph::log(Var x) {
    const Tensor& tx = value(x);
    Tensor out = tx;
    for (double& v : out.data) {
        if (v <= 0.0) {
            throw std::invalid_argument("log: input must be positive");
        }
        v = std::log(v);
    }
    return push("log", std::move(out), {x.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        const Tensor& vx = g.nodes_[in].value;
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            gi.data[i] += n.grad.data[i] / vx.data[i];
        }
    });
}

Var Graph::clamp(Var x, double lo, double hi) {
    require(lo < hi, "clamp: lo must be below hi");
    Tensor out = value(x);
    for (double& v : out.data) {
        v = std::min(hi, std::max(lo, v));
    }
    return push("clamp", std::move(out), {x.id}, [lo, hi](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        const Tensor& vx = g.nodes_[in].value;
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            if (vx.data[i] >= lo && vx.data[i] <= hi) {
                gi.data[i] += n.grad.data[i];
            }
        }
    });
}

Var Graph::add_rowvec(Var x, Var bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    require(tb.ndim() == 1, "add_rowvec: bias must be 1-d, got " + shape_to_string(tb.shape));
    const std::size_t cols = tb.shape[0];
    require(tx.shape.back() == cols, "add_rowvec: trailing extent of " + shape_to_string(tx.shape) +
                                         " does not match bias " + shape_to_string(tb.shape));
    Tensor out = tx;
    const std::size_t rows = tx.numel() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] += tb.data[c];
        }
    }
    return push("add_rowvec", std::move(out), {x.id, bias.id}, [cols](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t ix = n.inputs[0];
        const std::uint32_t ib = n.inputs[1];
        if (g.wants_grad(ix)) {
            g.add_to_grad(ix, n.grad.data.data(), n.grad.numel());
        }
        if (g.wants_grad(ib)) {
            Tensor& gb = g.ensure_grad(ib);
            const std::size_t rows = n.grad.numel() / cols;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = n.grad.data.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    gb.data[c] += row[c];
                }
            }
        }
    });
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.ndim() == 2 && tb.ndim() == 2,
            "matmul: expected 2-d operands, got " + shape_to_string(ta.shape) + " and " +
                shape_to_string(tb.shape));
    require(ta.shape[1] == tb.shape[0], "matmul: inner extents of " + shape_to_string(ta.shape) +
                                            " and " + shape_to_string(tb.shape) + " do not match");
    const std::size_t m = ta.shape[0];
    const std::size_t k = ta.shape[1];
    const std::size_t n = tb.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = ta.data.data() + i * k;
        double* orow = out.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = tb.data.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return push("matmul", std::move(out), {a.id, b.id}, [m, k, n](Graph& g, std::uint32_t self) {
        const Node& node = g.nodes_[self];
        const std::uint32_t ia = node.inputs[0];
        const std::uint32_t ib = node.inputs[1];
        const Tensor& va = g.nodes_[ia].value;
        const Tensor& vb = g.nodes_[ib].value;
        if (g.wants_grad(ia)) {
            // dA = dY * B^T
            Tensor& ga = g.ensure_grad(ia);
            for (std::size_t i = 0; i < m; ++i) {
                const double* gy = node.grad.data.data() + i * n;
                double* garow = ga.data.data() + i * k;
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = vb.data.data() + p * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += gy[j] * brow[j];
                    }
                    garow[p] += acc;
                }
            }
        }
        if (g.wants_grad(ib)) {
            // dB = A^T * dY
            Tensor& gb = g.ensure_grad(ib);
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = va.data.data() + i * k;
                const double* gy = node.grad.data.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = arow[p];
                    double* gbrow = gb.data.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        gbrow[j] += av * gy[j];
                    }
                }
            }
        }
    });
}

Var Graph::linear(Var x, Var w, Var b) {
    return add_rowvec(matmul(x, w), b);
}

Var Graph::reshape(Var x, Shape s) {
    const Tensor& tx = value(x);
    require(shape_numel(s) == tx.numel(), "reshape: cannot view " + shape_to_string(tx.shape) +
                                              " as " + shape_to_string(s));
    Tensor out(std::move(s), tx.data);
    return push("reshape", std::move(out), {x.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (g.wants_grad(in)) {
            g.add_to_grad(in, n.grad.data.data(), n.grad.numel());
        }
    });
}

Var Graph::permute(Var x, const std::vector<std::size_t>& axes) {
    const Tensor& tx = value(x);
    const std::size_t nd = tx.ndim();
    require(axes.size() == nd, "permute: axes list must cover every dimension");
    std::vector<bool> seen(nd, false);
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        require(axes[i] < nd && !seen[axes[i]], "permute: invalid axes permutation");
        seen[axes[i]] = true;
        out_shape[i] = tx.shape[axes[i]];
    }

    std::vector<std::size_t> in_strides(nd, 1);
    for (std::size_t i = nd - 1; i-- > 0;) {
        in_strides[i] = in_strides[i + 1] * tx.shape[i + 1];
    }
    // stride in the input for each output axis
    std::vector<std::size_t> gather(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        gather[i] = in_strides[axes[i]];
    }

    Tensor out(out_shape);
    std::vector<std::size_t> idx(nd, 0);
    const std::size_t count = out.numel();
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < count; ++flat) {
        out.data[flat] = tx.data[src];
        for (std::size_t d = nd; d-- > 0;) {
            idx[d] += 1;
            src += gather[d];
            if (idx[d] < out_shape[d]) {
                break;
            }
            idx[d] = 0;
            src -= gather[d] * out_shape[d];
        }
    }

    return push("permute", std::move(out), {x.id},
                [gather, out_shape, nd](Graph& g, std::uint32_t self) {
                    const Node& n = g.nodes_[self];
                    const std::uint32_t in = n.inputs[0];
                    if (!g.wants_grad(in)) {
                        return;
                    }
                    Tensor& gi = g.ensure_grad(in);
                    std::vector<std::size_t> idx(nd, 0);
                    std::size_t src = 0;
                    const std::size_t count = n.grad.numel();
                    for (std::size_t flat = 0; flat < count; ++flat) {
                        gi.data[src] += n.grad.data[flat];
                        for (std::size_t d = nd; d-- > 0;) {
                            idx[d] += 1;
                            src += gather[d];
                            if (idx[d] < out_shape[d]) {
                                break;
                            }
                            idx[d] = 0;
                            src -= gather[d] * out_shape[d];
                        }
                    }
                });
}

Var Graph::concat(Var a, Var b, std::size_t axis) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.ndim() == tb.ndim(), "concat: rank mismatch");
    require(axis < ta.ndim(), "concat: axis out of range");
    for (std::size_t i = 0; i < ta.ndim(); ++i) {
        require(i == axis || ta.shape[i] == tb.shape[i],
                "concat: shapes " + shape_to_string(ta.shape) + " and " + shape_to_string(tb.shape) +
                    " differ off the concat axis");
    }
    Shape out_shape = ta.shape;
    out_shape[axis] += tb.shape[axis];

    const AxisSplit sa = split_axis(ta.shape, axis);
    const AxisSplit sb = split_axis(tb.shape, axis);
    Tensor out(out_shape);
    const std::size_t stride_a = sa.len * sa.inner;
    const std::size_t stride_b = sb.len * sb.inner;
    const std::size_t stride_o = stride_a + stride_b;
    for (std::size_t o = 0; o < sa.outer; ++o) {
        std::copy_n(ta.data.data() + o * stride_a, stride_a, out.data.data() + o * stride_o);
        std::copy_n(tb.data.data() + o * stride_b, stride_b, out.data.data() + o * stride_o + stride_a);
    }

    return push("concat", std::move(out), {a.id, b.id},
                [sa, stride_a, stride_b, stride_o](Graph& g, std::uint32_t self) {
                    const Node& n = g.nodes_[self];
                    const std::uint32_t ia = n.inputs[0];
                    const std::uint32_t ib = n.inputs[1];
                    for (std::size_t o = 0; o < sa.outer; ++o) {
                        const double* base = n.grad.data.data() + o * stride_o;
                        if (g.wants_grad(ia)) {
                            Tensor& ga = g.ensure_grad(ia);
                            double* dst = ga.data.data() + o * stride_a;
                            for (std::size_t i = 0; i < stride_a; ++i) {
                                dst[i] += base[i];
                            }
                        }
                        if (g.wants_grad(ib)) {
                            Tensor& gb = g.ensure_grad(ib);
                            double* dst = gb.data.data() + o * stride_b;
                            for (std::size_t i = 0; i < stride_b; ++i) {
                                dst[i] += base[stride_a + i];
                            }
                        }
                    }
                });
}

Var Graph::slice0(Var x, std::size_t index) {
    const Tensor& tx = value(x);
    require(tx.ndim() >= 2, "slice0: need at least 2 dimensions");
    require(index < tx.shape[0], "slice0: index " + std::to_string(index) + " out of range for " +
                                     shape_to_string(tx.shape));
    Shape out_shape(tx.shape.begin() + 1, tx.shape.end());
    const std::size_t block = shape_numel(out_shape);
    Tensor out(out_shape,
               std::vector<double>(tx.data.begin() + index * block, tx.data.begin() + (index + 1) * block));
    return push("slice0", std::move(out), {x.id}, [index, block](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        double* dst = gi.data.data() + index * block;
        for (std::size_t i = 0; i < block; ++i) {
            dst[i] += n.grad.data[i];
        }
    });
}

Var Graph::stack0(const std::vector<Var>& xs) {
    require(!xs.empty(), "stack0: need at least one input");
    const Tensor& first = value(xs[0]);
    for (const Var& v : xs) {
        require(value(v).shape == first.shape, "stack0: all inputs must share one shape");
    }
    Shape out_shape;
    out_shape.push_back(xs.size());
    out_shape.insert(out_shape.end(), first.shape.begin(), first.shape.end());
    const std::size_t block = first.numel();
    Tensor out(out_shape);
    std::vector<std::uint32_t> ids;
    ids.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        std::copy_n(value(xs[i]).data.data(), block, out.data.data() + i * block);
        ids.push_back(xs[i].id);
    }
    return push("stack0", std::move(out), std::move(ids), [block](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const std::uint32_t in = n.inputs[i];
            if (!g.wants_grad(in)) {
                continue;
            }
            Tensor& gi = g.ensure_grad(in);
            const double* src = n.grad.data.data() + i * block;
            for (std::size_t j = 0; j < block; ++j) {
                gi.data[j] += src[j];
            }
        }
    });
}

Var Graph::reverse0(Var x) {
    const Tensor& tx = value(x);
    require(tx.ndim() >= 1, "reverse0: scalar input");
    const std::size_t rows = tx.shape[0];
    const std::size_t block = tx.numel() / rows;
    Tensor out(tx.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(tx.data.data() + r * block, block, out.data.data() + (rows - 1 - r) * block);
    }
    return push("reverse0", std::move(out), {x.id}, [rows, block](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* src = n.grad.data.data() + (rows - 1 - r) * block;
            double* dst = gi.data.data() + r * block;
            for (std::size_t i = 0; i < block; ++i) {
                dst[i] += src[i];
            }
        }
    });
}

Var Graph::sum_all(Var x) {
    const Tensor& tx = value(x);
    double acc = 0.0;
    for (double v : tx.data) {
        acc += v;
    }
    return push("sum_all", Tensor::scalar(acc), {x.id}, [](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        const double go = n.grad.data[0];
        for (double& v : gi.data) {
            v += go;
        }
    });
}

Var Graph::mean_all(Var x) {
    const Tensor& tx = value(x);
    double acc = 0.0;
    for (double v : tx.data) {
        acc += v;
    }
    const double inv = 1.0 / static_cast<double>(tx.numel());
    return push("mean_all", Tensor::scalar(acc * inv), {x.id}, [inv](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        const double go = n.grad.data[0] * inv;
        for (double& v : gi.data) {
            v += go;
        }
    });
}

Var Graph::sum_axis(Var x, std::size_t axis) {
    const Tensor& tx = value(x);
    require(axis < tx.ndim(), "sum_axis: axis out of range");
    require(tx.ndim() >= 2, "sum_axis: use sum_all for 1-d tensors");
    const AxisSplit s = split_axis(tx.shape, axis);
    Shape out_shape;
    for (std::size_t i = 0; i < tx.ndim(); ++i) {
        if (i != axis) {
            out_shape.push_back(tx.shape[i]);
        }
    }
    Tensor out(out_shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.len; ++l) {
            const double* src = tx.data.data() + (o * s.len + l) * s.inner;
            double* dst = out.data.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                dst[i] += src[i];
            }
        }
    }
    return push("sum_axis", std::move(out), {x.id}, [s](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = n.grad.data.data() + o * s.inner;
            for (std::size_t l = 0; l < s.len; ++l) {
                double* dst = gi.data.data() + (o * s.len + l) * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
}

Var Graph::softmax(Var x, std::size_t axis) {
    const Tensor& tx = value(x);
    require(axis < tx.ndim(), "softmax: axis out of range");
    const AxisSplit s = split_axis(tx.shape, axis);
    Tensor out(tx.shape);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mx = tx.data[base];
            for (std::size_t l = 1; l < s.len; ++l) {
                mx = std::max(mx, tx.data[base + l * s.inner]);
            }
            double denom = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
                const double e = std::exp(tx.data[base + l * s.inner] - mx);
                out.data[base + l * s.inner] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (std::size_t l = 0; l < s.len; ++l) {
                out.data[base + l * s.inner] *= inv;
            }
        }
    }
    return push("softmax", std::move(out), {x.id}, [s](Graph& g, std::uint32_t self) {
        const Node& n = g.nodes_[self];
        const std::uint32_t in = n.inputs[0];
        if (!g.wants_grad(in)) {
            return;
        }
        Tensor& gi = g.ensure_grad(in);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.len * s.inner + i;
                double dot = 0.0;
                for (std::size_t l = 0; l < s.len; ++l) {
                    const std::size_t k = base + l * s.inner;
                    dot += n.grad.data[k] * n.value.data[k];
                }
                for (std::size_t l = 0; l < s.len; ++l) {
                    const std::size_t k = base + l * s.inner;
                    gi.data[k] += n.value.data[k] * (n.grad.data[k] - dot);
                }
            }
        }
    });
}

Var Graph::conv2d(Var input, Var kernel, Var bias, Padding padding) {
    const Tensor& ti = value(input);
    const Tensor& tk = value(kernel);
    const Tensor& tb = value(bias);
    require(ti.ndim() == 4, "conv2d: input must be [batch,ch,time,freq], got " +
                                shape_to_string(ti.shape));
    require(tk.ndim() == 4, "conv2d: kernel must be [out,in,kt,kf], got " + shape_to_string(tk.shape));
    require(tk.shape[1] == ti.shape[1],
            "conv2d: kernel input channels of " + shape_to_string(tk.shape) +
                " do not match input channels of " + shape_to_string(ti.shape));
    require(tb.ndim() == 1 && tb.shape[0] == tk.shape[0],
            "conv2d: bias " + shape_to_string(tb.shape) + " does not match kernel " +
                shape_to_string(tk.shape));

    const std::size_t B = ti.shape[0], Ci = ti.shape[1], T = ti.shape[2], F = ti.shape[3];
    const std::size_t Co = tk.shape[0], Kt = tk.shape[2], Kf = tk.shape[3];

    std::size_t pad_t = 0, pad_f = 0, Ot = 0, Of = 0;
    if (padding == Padding::same) {
        pad_t = (Kt - 1) / 2;
        pad_f = (Kf - 1) / 2;
        Ot = T;
        Of = F;
    } else {
        require(T >= Kt && F >= Kf, "conv2d: valid padding needs input " + shape_to_string(ti.shape) +
                                        " at least as large as kernel " + shape_to_string(tk.shape));
        Ot = T - Kt + 1;
        Of = F - Kf + 1;
    }

    Tensor out({B, Co, Ot, Of});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Co; ++co) {
            double* plane = out.data.data() + (b * Co + co) * Ot * Of;
            const double bval = tb.data[co];
            for (std::size_t i = 0; i < Ot * Of; ++i) {
                plane[i] = bval;
            }
            for (std::size_t ci = 0; ci < Ci; ++ci) {
                const double* in_plane = ti.data.data() + (b * Ci + ci) * T * F;
                const double* ker = tk.data.data() + (co * Ci + ci) * Kt * Kf;
                for (std::size_t kt = 0; kt < Kt; ++kt) {
                    for (std::size_t kf = 0; kf < Kf; ++kf) {
                        const double w = ker[kt * Kf + kf];
                        if (w == 0.0) {
                            continue;
                        }
                        // it = ot + kt - pad_t must land in [0, T)
                        const std::size_t ot_lo =
                            (pad_t > kt) ? (pad_t - kt) : 0;
                        const std::size_t ot_hi =
                            std::min(Ot, T + pad_t - kt);
                        const std::size_t of_lo =
                            (pad_f > kf) ? (pad_f - kf) : 0;
                        const std::size_t of_hi =
                            std::min(Of, F + pad_f - kf);
                        for (std::size_t ot = ot_lo; ot < ot_hi; ++ot) {
                            const std::size_t it = ot + kt - pad_t;
                            const double* in_row = in_plane + it * F + kf - pad_f;
                            double* out_row = plane + ot * Of;
                            for (std::size_t of = of_lo; of < of_hi; ++of) {
                                out_row[of] += w * in_row[of];
                            }
                        }
                    }
                }
            }
        }
    }

    return push(
        "conv2d", std::move(out), {input.id, kernel.id, bias.id},
        [B, Ci, T, F, Co, Kt, Kf, pad_t, pad_f, Ot, Of](Graph& g, std::uint32_t self) {
            const Node& n = g.nodes_[self];
            const std::uint32_t ii = n.inputs[0];
            const std::uint32_t ik = n.inputs[1];
            const std::uint32_t ib = n.inputs[2];
            const Tensor& vi = g.nodes_[ii].value;
            const Tensor& vk = g.nodes_[ik].value;
            const bool want_in = g.wants_grad(ii);
            const bool want_k = g.wants_grad(ik);
            const bool want_b = g.wants_grad(ib);
            Tensor* gi = want_in ? &g.ensure_grad(ii) : nullptr;
            Tensor* gk = want_k ? &g.ensure_grad(ik) : nullptr;
            Tensor* gb = want_b ? &g.ensure_grad(ib) : nullptr;

            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t co = 0; co < Co; ++co) {
                    const double* gplane = n.grad.data.data() + (b * Co + co) * Ot * Of;
                    if (want_b) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < Ot * Of; ++i) {
                            acc += gplane[i];
                        }
                        gb->data[co] += acc;
                    }
                    if (!want_in && !want_k) {
                        continue;
                    }
                    for (std::size_t ci = 0; ci < Ci; ++ci) {
                        const double* in_plane = vi.data.data() + (b * Ci + ci) * T * F;
                        const double* ker = vk.data.data() + (co * Ci + ci) * Kt * Kf;
                        double* gin_plane = want_in ? gi->data.data() + (b * Ci + ci) * T * F : nullptr;
                        double* gker = want_k ? gk->data.data() + (co * Ci + ci) * Kt * Kf : nullptr;
                        for (std::size_t kt = 0; kt < Kt; ++kt) {
                            for (std::size_t kf = 0; kf < Kf; ++kf) {
                                const std::size_t ot_lo = (pad_t > kt) ? (pad_t - kt) : 0;
                                const std::size_t ot_hi = std::min(Ot, T + pad_t - kt);
                                const std::size_t of_lo = (pad_f > kf) ? (pad_f - kf) : 0;
                                const std::size_t of_hi = std::min(Of, F + pad_f - kf);
                                const double w = ker[kt * Kf + kf];
                                double wacc = 0.0;
                                for (std::size_t ot = ot_lo; ot < ot_hi; ++ot) {
                                    const std::size_t it = ot + kt - pad_t;
                                    const double* grow = gplane + ot * Of;
                                    const double* in_row = in_plane + it * F + kf - pad_f;
                                    if (want_in) {
                                        double* gin_row = gin_plane + it * F + kf - pad_f;
                                        for (std::size_t of = of_lo; of < of_hi; ++of) {
                                            gin_row[of] += w * grow[of];
                                        }
                                    }
                                    if (want_k) {
                                        for (std::size_t of = of_lo; of < of_hi; ++of) {
                                            wacc += grow[of] * in_row[of];
                                        }
                                    }
                                }
                                if (want_k) {
                                    gker[kt * Kf + kf] += wacc;
                                }
                            }
                        }
                    }
                }
            }
        });
}

Var Graph::max_pool2d(Var input, std::size_t pool_t, std::size_t pool_f) {
    const Tensor& ti = value(input);
    require(ti.ndim() == 4, "max_pool2d: input must be [batch,ch,time,freq], got " +
                                shape_to_string(ti.shape));
    require(pool_t >= 1 && pool_f >= 1, "max_pool2d: window extents must be positive");
    const std::size_t B = ti.shape[0], C = ti.shape[1], T = ti.shape[2], F = ti.shape[3];
    require(pool_t <= T && pool_f <= F,
            "max_pool2d: window " + std::to_string(pool_t) + "x" + std::to_string(pool_f) +
                " larger than input " + shape_to_string(ti.shape));
    const std::size_t Ot = T / pool_t;  // trailing remainder dropped
    const std::size_t Of = F / pool_f;

    Tensor out({B, C, Ot, Of});
    // flat input index of the winning element, first index wins ties
    std::vector<std::uint32_t> argmax(out.numel());
    std::size_t oidx = 0;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* plane = ti.data.data() + (b * C + c) * T * F;
            const std::size_t plane_off = (b * C + c) * T * F;
            for (std::size_t ot = 0; ot < Ot; ++ot) {
                for (std::size_t of = 0; of < Of; ++of) {
                    double best = plane[ot * pool_t * F + of * pool_f];
                    std::size_t best_at = ot * pool_t * F + of * pool_f;
                    for (std::size_t dt = 0; dt < pool_t; ++dt) {
                        for (std::size_t df = 0; df < pool_f; ++df) {
                            const std::size_t at = (ot * pool_t + dt) * F + of * pool_f + df;
                            if (plane[at] > best) {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out.data[oidx] = best;
                    argmax[oidx] = static_cast<std::uint32_t>(plane_off + best_at);
                    ++oidx;
                }
            }
        }
    }

    return push("max_pool2d", std::move(out), {input.id},
                [argmax = std::move(argmax)](Graph& g, std::uint32_t self) {
                    const Node& n = g.nodes_[self];
                    const std::uint32_t in = n.inputs[0];
                    if (!g.wants_grad(in)) {
                        return;
                    }
                    Tensor& gi = g.ensure_grad(in);
                    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
                        gi.data[argmax[i]] += n.grad.data[i];
                    }
                });
}

Var Graph::batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, BatchNormMode mode) {
    const Tensor& ti = value(input);
    const Tensor& tg = value(gamma);
    const Tensor& tb = value(beta);
    require(ti.ndim() == 4, "batch_norm: input must be [batch,ch,time,freq], got " +
                                shape_to_string(ti.shape));
    const std::size_t B = ti.shape[0], C = ti.shape[1], T = ti.shape[2], F = ti.shape[3];
    require(tg.ndim() == 1 && tg.shape[0] == C, "batch_norm: gamma " + shape_to_string(tg.shape) +
                                                    " does not match channels of " +
                                                    shape_to_string(ti.shape));
    require(tb.shape == tg.shape, "batch_norm: beta shape mismatch");
    require(state.running_mean.shape == Shape{C}, "batch_norm: running stats sized for wrong channel count");
    if (mode == BatchNormMode::train) {
        require(B > 0, "batch_norm: zero batch in train mode");
    }

    const std::size_t plane = T * F;
    const std::size_t m = B * plane;  // samples per channel
    std::vector<double> mean(C), var(C);
    if (mode == BatchNormMode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* p = ti.data.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    acc += p[i];
                }
            }
            mean[c] = acc / static_cast<double>(m);
            double vacc = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
                const double* p = ti.data.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mean[c];
                    vacc += d * d;
                }
            }
            var[c] = vacc / static_cast<double>(m);
            state.running_mean.data[c] =
                state.momentum * state.running_mean.data[c] + (1.0 - state.momentum) * mean[c];
            state.running_var.data[c] =
                state.momentum * state.running_var.data[c] + (1.0 - state.momentum) * var[c];
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean.data[c];
            var[c] = state.running_var.data[c];
        }
    }

    std::vector<double> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        inv_std[c] = 1.0 / std::sqrt(var[c] + state.epsilon);
    }

    Tensor out(ti.shape);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = ti.data.data() + (b * C + c) * plane;
            double* dst = out.data.data() + (b * C + c) * plane;
            const double g = tg.data[c], bt = tb.data[c], mu = mean[c], is = inv_std[c];
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] = g * (src[i] - mu) * is + bt;
            }
        }
    }

    const bool train = mode == BatchNormMode::train;
    return push(
        "batch_norm", std::move(out), {input.id, gamma.id, beta.id},
        [B, C, plane, m, mean, inv_std, train](Graph& g, std::uint32_t self) {
            const Node& n = g.nodes_[self];
            const std::uint32_t ii = n.inputs[0];
            const std::uint32_t ig = n.inputs[1];
            const std::uint32_t ib = n.inputs[2];
            const Tensor& vi = g.nodes_[ii].value;
            const Tensor& vg = g.nodes_[ig].value;
            const bool want_in = g.wants_grad(ii);
            const bool want_g = g.wants_grad(ig);
            const bool want_b = g.wants_grad(ib);
            Tensor* gin = want_in ? &g.ensure_grad(ii) : nullptr;
            Tensor* ggamma = want_g ? &g.ensure_grad(ig) : nullptr;
            Tensor* gbeta = want_b ? &g.ensure_grad(ib) : nullptr;

            for (std::size_t c = 0; c < C; ++c) {
                const double mu = mean[c], is = inv_std[c], gam = vg.data[c];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* dy = n.grad.data.data() + (b * C + c) * plane;
                    const double* x = vi.data.data() + (b * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (x[i] - mu) * is;
                    }
                }
                if (want_b) {
                    gbeta->data[c] += sum_dy;
                }
                if (want_g) {
                    ggamma->data[c] += sum_dy_xhat;
                }
                if (want_in) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (std::size_t b = 0; b < B; ++b) {
                        const double* dy = n.grad.data.data() + (b * C + c) * plane;
                        const double* x = vi.data.data() + (b * C + c) * plane;
                        double* dx = gin->data.data() + (b * C + c) * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            if (train) {
                                const double xhat = (x[i] - mu) * is;
                                dx[i] += gam * is *
                                         (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                            } else {
                                dx[i] += gam * is * dy[i];
                            }
                        }
                    }
                }
            }
        });
}

Var Graph::gru_forward(Var input, const GruParams& p, GruDirection direction) {
    const Tensor& tx = value(input);
    require(tx.ndim() == 3, "gru_forward: input must be [time,batch,feat], got " +
                                shape_to_string(tx.shape));
    const std::size_t T = tx.shape[0];
    const std::size_t B = tx.shape[1];
    require(T >= 1, "gru_forward: time extent must be positive");
    require(p.Wz && p.Uz && p.bz && p.Wr && p.Ur && p.br && p.Wh && p.Uh && p.bh,
            "gru_forward: missing parameters");
    const std::size_t feat = tx.shape[2];
    const std::size_t hidden = p.Wz->value.shape[1];
    require(p.Wz->value.shape == Shape({feat, hidden}), "gru_forward: Wz shaped " +
                                                            shape_to_string(p.Wz->value.shape) +
                                                            " for input " + shape_to_string(tx.shape));

    Var x = input;
    if (direction == GruDirection::backward) {
        x = reverse0(x);
    }

    Var wz = param(*p.Wz), uz = param(*p.Uz), bz = param(*p.bz);
    Var wr = param(*p.Wr), ur = param(*p.Ur), br = param(*p.br);
    Var wh = param(*p.Wh), uh = param(*p.Uh), bh = param(*p.bh);

    Var h = leaf(Tensor::zeros({B, hidden}));
    std::vector<Var> outputs;
    outputs.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Var xt = slice0(x, t);
        Var z = sigmoid(add(linear(xt, wz, bz), matmul(h, uz)));
        Var r = sigmoid(add(linear(xt, wr, br), matmul(h, ur)));
        Var cand = tanh(add(linear(xt, wh, bh), matmul(mul(r, h), uh)));
        h = add(mul(affine(z, -1.0, 1.0), h), mul(z, cand));
        outputs.push_back(h);
    }
    Var out = stack0(outputs);
    if (direction == GruDirection::backward) {
        out = reverse0(out);
    }
    return out;
}

Var Graph::bigru(Var input, const GruParams& fwd, const GruParams& bwd) {
    Var f = gru_forward(input, fwd, GruDirection::forward);
    Var b = gru_forward(input, bwd, GruDirection::backward);
    return concat(f, b, 2);
}

void Graph::backward(Var loss) {
    const Node& loss_node = nodes_[loss.id];
    if (loss_node.value.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_to_string(loss_node.value.shape));
    }
    ensure_grad(loss.id).data[0] = 1.0;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.data.empty()) {
            continue;
        }
        if (n.backward_fn) {
            n.backward_fn(*this, id);
        }
        if (n.parameter != nullptr) {
            Tensor& pg = n.parameter->grad;
            for (std::size_t i = 0; i < pg.numel(); ++i) {
                pg.data[i] += n.grad.data[i];
            }
        }
    }
}

}  // namespace wsed
