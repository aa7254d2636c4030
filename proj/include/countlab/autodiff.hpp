#pragma once

// Tape-based reverse-mode automatic differentiation over float64 tensors.
//
// Every primitive application appends one node to the tape. Nodes keep their
// forward value; backward rules read whichever of (inputs, output) gives the
// cheapest correct derivative:
//
//   matmul / matmul_nt / mul / mul_row   inputs
//   tanh / sigmoid / softmax_rows        output
//   log_softmax_rows                     output (softmax = exp(output))
//   log                                  input
//   add / add_row / scale / add_scalar / sum / sum_rows / concat / clamp
//                                        shapes only
//
// Gradients are accumulated strictly in reverse tape order, so a replay of the
// same computation gives bit-identical results.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "countlab/tensor.hpp"

namespace countlab {

enum class Primitive : std::uint8_t {
    Leaf,
    MatMul,          // a[n,k] * b[k,m]
    MatMulNT,        // a[n,k] * b[m,k]^T
    Add,             // elementwise, equal shapes
    AddRow,          // a[n,m] + b[1,m] broadcast over rows
    Mul,             // elementwise, equal shapes
    MulRow,          // a[n,m] * b[1,m] broadcast over rows
    Scale,           // a * s
    AddScalar,       // a + s
    Tanh,
    Sigmoid,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    Sum,             // -> scalar
    SumRows,         // a[n,m] -> [1,m]
    Concat,          // a[n,k1] | b[n,k2] -> [n,k1+k2]
    Clamp,           // clamp to [lo, hi]; straight-through gradient
    Count_
};

inline constexpr std::size_t kPrimitiveCount = static_cast<std::size_t>(Primitive::Count_);

inline const char* primitive_name(Primitive op) {
    switch (op) {
        case Primitive::Leaf: return "leaf";
        case Primitive::MatMul: return "matmul";
        case Primitive::MatMulNT: return "matmul_nt";
        case Primitive::Add: return "add";
        case Primitive::AddRow: return "add_row";
        case Primitive::Mul: return "mul";
        case Primitive::MulRow: return "mul_row";
        case Primitive::Scale: return "scale";
        case Primitive::AddScalar: return "add_scalar";
        case Primitive::Tanh: return "tanh";
        case Primitive::Sigmoid: return "sigmoid";
        case Primitive::Log: return "log";
        case Primitive::SoftmaxRows: return "softmax_rows";
        case Primitive::LogSoftmaxRows: return "log_softmax_rows";
        case Primitive::Sum: return "sum";
        case Primitive::SumRows: return "sum_rows";
        case Primitive::Concat: return "concat";
        case Primitive::Clamp: return "clamp";
        case Primitive::Count_: break;
    }
    return "?";
}

inline std::size_t primitive_arity(Primitive op) {
    switch (op) {
        case Primitive::Leaf: return 0;
        case Primitive::MatMul:
        case Primitive::MatMulNT:
        case Primitive::Add:
        case Primitive::AddRow:
        case Primitive::Mul:
        case Primitive::MulRow:
        case Primitive::Concat: return 2;
        default: return 1;
    }
}

class ShapeError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Named, ordered collection of trainable tensors. Parameter ids are indices.
class ParameterStore {
public:
    std::size_t add(std::string name, Tensor value) {
        names_.push_back(std::move(name));
        values_.push_back(std::move(value));
        return values_.size() - 1;
    }

    std::size_t size() const noexcept { return values_.size(); }
    const std::string& name(std::size_t id) const { return names_.at(id); }
    Tensor& value(std::size_t id) { return values_.at(id); }
    const Tensor& value(std::size_t id) const { return values_.at(id); }
    std::vector<Tensor>& values() noexcept { return values_; }
    const std::vector<Tensor>& values() const noexcept { return values_; }
    const std::vector<std::string>& names() const noexcept { return names_; }

    std::size_t find(const std::string& name) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return i;
        throw std::out_of_range("no parameter named '" + name + "'");
    }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
};

/// Per-parameter gradients, indexed by parameter id.
using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const ParameterStore& params) {
    Gradients grads;
    grads.reserve(params.size());
    for (const auto& v : params.values()) grads.push_back(Tensor::zeros_like(v));
    return grads;
}

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
};

struct TapeNode {
    Primitive op = Primitive::Leaf;
    std::array<std::uint32_t, 2> inputs{};
    double arg0 = 0.0;
    double arg1 = 0.0;
    std::int64_t param_id = -1;
    bool requires_grad = false;
    Tensor value;
    const Tensor* ref = nullptr;  // parameter leaves alias the store

    const Tensor& get() const noexcept { return ref ? *ref : value; }
};

/// A backward rule writes d(loss)/d(input k) into grad_in[k] (pre-sized,
/// may be null when that input needs no gradient) given the node and the
/// gradient arriving at its output.
using BackwardRule = void (*)(const Tape& tape, const TapeNode& node, const Tensor& grad_out,
                              std::array<Tensor*, 2> grad_in);

class Tape {
public:
    Tape() { nodes_.reserve(64); }

    Var constant(Tensor value) {
        TapeNode node;
        node.value = std::move(value);
        return push(std::move(node));
    }

    /// Leaf bound to a stored parameter; the store must outlive the tape and
    /// stay unmodified while it is in use.
    Var parameter(const ParameterStore& params, std::size_t id) {
        TapeNode node;
        node.ref = &params.value(id);
        node.param_id = static_cast<std::int64_t>(id);
        node.requires_grad = true;
        return push(std::move(node));
    }

    const TapeNode& node(std::uint32_t id) const { return nodes_.at(id); }
    const TapeNode& node(Var v) const { return nodes_.at(v.id); }
    const Tensor& value(Var v) const { return nodes_[v.id].get(); }
    std::size_t size() const noexcept { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    /// Replaces the backward rule of one primitive on this tape (used by
    /// mutation tests of the gradient checker).
    void override_backward(Primitive op, BackwardRule rule) { overrides_[static_cast<std::size_t>(op)] = rule; }
    BackwardRule backward_override(Primitive op) const { return overrides_[static_cast<std::size_t>(op)]; }

    Var push(TapeNode node) {
        nodes_.push_back(std::move(node));
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

private:
    std::vector<TapeNode> nodes_;
    std::array<BackwardRule, kPrimitiveCount> overrides_{};
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

[[noreturn]] inline void shape_fail(Primitive op, const Tensor& a, const Tensor* b, const std::string& what) {
    std::string msg = std::string(primitive_name(op)) + ": " + what + " (shapes " + shape_str(a.shape());
    if (b) msg += " and " + shape_str(b->shape());
    throw ShapeError(msg + ")");
}

inline void require_matrix(Primitive op, const Tensor& a, const Tensor* b = nullptr) {
    if (a.rank() > 2 || (b && b->rank() > 2)) shape_fail(op, a, b, "rank above 2");
}

inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.storage().data();
    const double* pb = b.storage().data();
    double* po = out.storage().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* row = po + i * m;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[i * k + t];
            if (av == 0.0) continue;
            const double* brow = pb + t * m;
            for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
        }
    }
}

// out[n,m] += a[n,k] * b[m,k]^T
inline void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    const double* pa = a.storage().data();
    const double* pb = b.storage().data();
    double* po = out.storage().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += pa[i * k + t] * pb[j * k + t];
            po[i * m + j] += acc;
        }
}

// out[k,m] += a[n,k]^T * b[n,m]
inline void matmul_tn_into(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.storage().data();
    const double* pb = b.storage().data();
    double* po = out.storage().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* brow = pb + i * m;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[i * k + t];
            if (av == 0.0) continue;
            double* orow = po + t * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

inline double stable_sigmoid(double x) {
    double s;
    if (x >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        s = e / (1.0 + e);
    }
    // keep the result strictly inside (0, 1) even when exp saturates
    constexpr double lo = std::numeric_limits<double>::min();
    constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    return std::clamp(s, lo, hi);
}

inline Tensor forward(Primitive op, const Tensor& a, const Tensor* b, double arg0, double arg1) {
    switch (op) {
        case Primitive::MatMul: {
            require_matrix(op, a, b);
            if (a.cols() != b->rows()) shape_fail(op, a, b, "inner dimensions differ");
            Tensor out(Shape{a.rows(), b->cols()});
            matmul_into(a, *b, out);
            return out;
        }
        case Primitive::MatMulNT: {
            require_matrix(op, a, b);
            if (a.cols() != b->cols()) shape_fail(op, a, b, "inner dimensions differ");
            Tensor out(Shape{a.rows(), b->rows()});
            matmul_nt_into(a, *b, out);
            return out;
        }
        case Primitive::Add:
        case Primitive::Mul: {
            if (a.shape() != b->shape()) shape_fail(op, a, b, "elementwise shapes differ");
            Tensor out = a;
            auto& o = out.storage();
            const auto& bv = b->storage();
            if (op == Primitive::Add)
                for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
            else
                for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
            return out;
        }
        case Primitive::AddRow:
        case Primitive::MulRow: {
            require_matrix(op, a, b);
            if (b->rows() != 1 || b->cols() != a.cols()) shape_fail(op, a, b, "row operand must be [1 x cols]");
            Tensor out = a;
            const std::size_t n = a.rows(), m = a.cols();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    if (op == Primitive::AddRow)
                        out[i * m + j] += (*b)[j];
                    else
                        out[i * m + j] *= (*b)[j];
                }
            return out;
        }
        case Primitive::Scale: {
            Tensor out = a;
            for (auto& v : out.storage()) v *= arg0;
            return out;
        }
        case Primitive::AddScalar: {
            Tensor out = a;
            for (auto& v : out.storage()) v += arg0;
            return out;
        }
        case Primitive::Tanh: {
            Tensor out = a;
            for (auto& v : out.storage()) v = std::tanh(v);
            return out;
        }
        case Primitive::Sigmoid: {
            Tensor out = a;
            for (auto& v : out.storage()) v = stable_sigmoid(v);
            return out;
        }
        case Primitive::Log: {
            Tensor out = a;
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (!(out[i] > 0.0))
                    throw std::domain_error("log: non-positive input " + std::to_string(out[i]) + " at index " +
                                            std::to_string(i) + " of shape " + shape_str(a.shape()));
                out[i] = std::log(out[i]);
            }
            return out;
        }
        case Primitive::SoftmaxRows:
        case Primitive::LogSoftmaxRows: {
            require_matrix(op, a);
            Tensor out = a;
            const std::size_t n = a.rows(), m = a.cols();
            for (std::size_t i = 0; i < n; ++i) {
                double* row = out.storage().data() + i * m;
                double mx = row[0];
                for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < m; ++j) z += std::exp(row[j] - mx);
                if (op == Primitive::SoftmaxRows) {
                    for (std::size_t j = 0; j < m; ++j) row[j] = std::exp(row[j] - mx) / z;
                } else {
                    const double lz = std::log(z);
                    for (std::size_t j = 0; j < m; ++j) row[j] = row[j] - mx - lz;
                }
            }
            return out;
        }
        case Primitive::Sum: {
            double s = 0.0;
            for (double v : a.values()) s += v;
            return Tensor::scalar(s);
        }
        case Primitive::SumRows: {
            require_matrix(op, a);
            const std::size_t n = a.rows(), m = a.cols();
            Tensor out(Shape{1, m});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) out[j] += a[i * m + j];
            return out;
        }
        case Primitive::Concat: {
            require_matrix(op, a, b);
            if (a.rows() != b->rows()) shape_fail(op, a, b, "row counts differ");
            const std::size_t n = a.rows(), ka = a.cols(), kb = b->cols();
            Tensor out(Shape{n, ka + kb});
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < ka; ++j) out[i * (ka + kb) + j] = a[i * ka + j];
                for (std::size_t j = 0; j < kb; ++j) out[i * (ka + kb) + ka + j] = (*b)[i * kb + j];
            }
            return out;
        }
        case Primitive::Clamp: {
            if (!(arg0 <= arg1)) throw std::invalid_argument("clamp: lo > hi");
            Tensor out = a;
            for (auto& v : out.storage()) v = std::clamp(v, arg0, arg1);
            return out;
        }
        case Primitive::Leaf:
        case Primitive::Count_: break;
    }
    throw std::invalid_argument("apply_primitive: not an operation");
}

inline void backward_rule(const Tape& tape, const TapeNode& node, const Tensor& g, std::array<Tensor*, 2> grad_in) {
    const Tensor& a = tape.node(node.inputs[0]).get();
    const Tensor* b = primitive_arity(node.op) == 2 ? &tape.node(node.inputs[1]).get() : nullptr;
    const Tensor& y = node.value;
    Tensor* ga = grad_in[0];
    Tensor* gb = grad_in[1];
    switch (node.op) {
        case Primitive::MatMul:
            if (ga) matmul_nt_into(g, *b, *ga);  // g * b^T
            if (gb) matmul_tn_into(a, g, *gb);   // a^T * g
            return;
        case Primitive::MatMulNT:
            if (ga) matmul_into(g, *b, *ga);     // g * b
            if (gb) matmul_tn_into(g, a, *gb);   // g^T * a
            return;
        case Primitive::Add:
            if (ga) ga->accumulate(g);
            if (gb) gb->accumulate(g);
            return;
        case Primitive::Mul:
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (ga) (*ga)[i] += g[i] * (*b)[i];
                if (gb) (*gb)[i] += g[i] * a[i];
            }
            return;
        case Primitive::AddRow:
        case Primitive::MulRow: {
            const std::size_t n = a.rows(), m = a.cols();
            const bool add = node.op == Primitive::AddRow;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double gij = g[i * m + j];
                    if (ga) (*ga)[i * m + j] += add ? gij : gij * (*b)[j];
                    if (gb) (*gb)[j] += add ? gij : gij * a[i * m + j];
                }
            return;
        }
        case Primitive::Scale:
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * node.arg0;
            return;
        case Primitive::AddScalar:
        case Primitive::Clamp:
            ga->accumulate(g);
            return;
        case Primitive::Tanh:
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
            return;
        case Primitive::Sigmoid:
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
            return;
        case Primitive::Log:
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / a[i];
            return;
        case Primitive::SoftmaxRows: {
            const std::size_t n = y.rows(), m = y.cols();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
                for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
            }
            return;
        }
        case Primitive::LogSoftmaxRows: {
            const std::size_t n = y.rows(), m = y.cols();
            for (std::size_t i = 0; i < n; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < m; ++j) gsum += g[i * m + j];
                for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += g[i * m + j] - std::exp(y[i * m + j]) * gsum;
            }
            return;
        }
        case Primitive::Sum: {
            const double gs = g[0];
            for (auto& v : ga->storage()) v += gs;
            return;
        }
        case Primitive::SumRows: {
            const std::size_t n = a.rows(), m = a.cols();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) (*ga)[i * m + j] += g[j];
            return;
        }
        case Primitive::Concat: {
            const std::size_t n = a.rows(), ka = a.cols(), kb = b->cols();
            for (std::size_t i = 0; i < n; ++i) {
                if (ga)
                    for (std::size_t j = 0; j < ka; ++j) (*ga)[i * ka + j] += g[i * (ka + kb) + j];
                if (gb)
                    for (std::size_t j = 0; j < kb; ++j) (*gb)[i * kb + j] += g[i * (ka + kb) + ka + j];
            }
            return;
        }
        case Primitive::Leaf:
        case Primitive::Count_: return;
    }
}

}  // namespace detail

/// Applies one primitive and records it on the inputs' tape. `arg0`/`arg1`
/// carry the scalar operand of scale/add_scalar and the bounds of clamp.
inline Var apply_primitive(Primitive op, std::span<const Var> inputs, double arg0 = 0.0, double arg1 = 0.0) {
    if (op == Primitive::Leaf || op == Primitive::Count_)
        throw std::invalid_argument("apply_primitive: leaf is not an operation");
    if (inputs.size() != primitive_arity(op))
        throw std::invalid_argument(std::string(primitive_name(op)) + ": expected " +
                                    std::to_string(primitive_arity(op)) + " inputs, got " +
                                    std::to_string(inputs.size()));
    Tape* tape = inputs[0].tape;
    for (const Var& v : inputs)
        if (v.tape != tape) throw std::invalid_argument(std::string(primitive_name(op)) + ": inputs on different tapes");

    const Tensor& a = tape->value(inputs[0]);
    const Tensor* b = inputs.size() > 1 ? &tape->value(inputs[1]) : nullptr;
    TapeNode node;
    node.op = op;
    node.arg0 = arg0;
    node.arg1 = arg1;
    node.value = detail::forward(op, a, b, arg0, arg1);
    if (!node.value.all_finite())
        throw std::domain_error(std::string(primitive_name(op)) + ": produced a non-finite value");
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        node.inputs[k] = inputs[k].id;
        node.requires_grad = node.requires_grad || tape->node(inputs[k]).requires_grad;
    }
    return tape->push(std::move(node));
}

inline Var apply_primitive(Primitive op, std::initializer_list<Var> inputs, double arg0 = 0.0, double arg1 = 0.0) {
    return apply_primitive(op, std::span<const Var>(inputs.begin(), inputs.size()), arg0, arg1);
}

inline Var matmul(Var a, Var b) { return apply_primitive(Primitive::MatMul, {a, b}); }
inline Var matmul_nt(Var a, Var b) { return apply_primitive(Primitive::MatMulNT, {a, b}); }
inline Var add(Var a, Var b) { return apply_primitive(Primitive::Add, {a, b}); }
inline Var add_row(Var a, Var row) { return apply_primitive(Primitive::AddRow, {a, row}); }
inline Var mul(Var a, Var b) { return apply_primitive(Primitive::Mul, {a, b}); }
inline Var mul_row(Var a, Var row) { return apply_primitive(Primitive::MulRow, {a, row}); }
inline Var scale(Var a, double s) { return apply_primitive(Primitive::Scale, {a}, s); }
inline Var add_scalar(Var a, double s) { return apply_primitive(Primitive::AddScalar, {a}, s); }
inline Var tanh(Var a) { return apply_primitive(Primitive::Tanh, {a}); }
inline Var sigmoid(Var a) { return apply_primitive(Primitive::Sigmoid, {a}); }
inline Var log(Var a) { return apply_primitive(Primitive::Log, {a}); }
inline Var softmax_rows(Var a) { return apply_primitive(Primitive::SoftmaxRows, {a}); }
inline Var log_softmax_rows(Var a) { return apply_primitive(Primitive::LogSoftmaxRows, {a}); }
inline Var sum(Var a) { return apply_primitive(Primitive::Sum, {a}); }
inline Var sum_rows(Var a) { return apply_primitive(Primitive::SumRows, {a}); }
inline Var concat(Var a, Var b) { return apply_primitive(Primitive::Concat, {a, b}); }
inline Var clamp(Var a, double lo, double hi) { return apply_primitive(Primitive::Clamp, {a}, lo, hi); }

/// Reverse pass from a scalar output; gradients of parameter leaves are added
/// into `grads` (indexed by parameter id).
inline void backward_into(const Tape& tape, Var output, Gradients& grads) {
    const Tensor& out = tape.value(output);
    if (out.size() != 1)
        throw std::invalid_argument("backward: output must be a scalar, got shape " + shape_str(out.shape()));
    std::vector<Tensor> node_grads(output.id + 1);
    node_grads[output.id] = Tensor(out.shape(), 1.0);
    for (std::uint32_t id = output.id + 1; id-- > 0;) {
        const TapeNode& node = tape.node(id);
        Tensor& g = node_grads[id];
        if (g.empty() || !node.requires_grad) continue;
        if (node.op == Primitive::Leaf) {
            if (node.param_id >= 0) grads.at(static_cast<std::size_t>(node.param_id)).accumulate(g);
            continue;
        }
        std::array<Tensor*, 2> grad_in{nullptr, nullptr};
        for (std::size_t k = 0; k < primitive_arity(node.op); ++k) {
            const std::uint32_t in = node.inputs[k];
            if (!tape.node(in).requires_grad) continue;
            if (node_grads[in].empty()) node_grads[in] = Tensor::zeros_like(tape.node(in).get());
            grad_in[k] = &node_grads[in];
        }
        if (BackwardRule rule = tape.backward_override(node.op))
            rule(tape, node, g, grad_in);
        else
            detail::backward_rule(tape, node, g, grad_in);
        g = Tensor();
    }
}

/// d(output)/d(parameter) for every parameter of `params`; parameters not
/// reached by the output get zero gradients.
inline Gradients backward(const Tape& tape, Var output, const ParameterStore& params) {
    Gradients grads = zero_gradients(params);
    backward_into(tape, output, grads);
    return grads;
}

using LossFunction = std::function<Var(Tape&, const ParameterStore&)>;

class GradCheckError : public std::runtime_error {
public:
    GradCheckError(const std::string& what, std::size_t parameter, std::size_t index)
        : std::runtime_error(what), parameter_(parameter), index_(index) {}
    std::size_t parameter() const noexcept { return parameter_; }
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t parameter_;
    std::size_t index_;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_parameter = 0;
    std::size_t worst_index = 0;
    std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients against central differences over every
/// parameter entry. Relative error is |a - n| / max(1e-8, |a| + |n|).
/// `params` is perturbed in place and restored before returning.
inline GradCheckResult grad_check(const LossFunction& loss, ParameterStore& params, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
    Gradients analytic;
    {
        Tape tape;
        const Var out = loss(tape, params);
        analytic = backward(tape, out, params);
    }
    auto eval = [&](std::size_t p, std::size_t i) {
        Tape tape;
        double value = std::numeric_limits<double>::quiet_NaN();
        try {
            value = loss(tape, params).value().item();
        } catch (const std::domain_error&) {
            // primitives reject non-finite values; reported below
        }
        if (!std::isfinite(value))
            throw GradCheckError("grad_check: non-finite loss when perturbing parameter '" + params.name(p) +
                                     "' entry " + std::to_string(i),
                                 p, i);
        return value;
    };
    GradCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& value = params.value(p);
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value[i];
            value[i] = saved + step;
            const double up = eval(p, i);
            value[i] = saved - step;
            const double down = eval(p, i);
            value[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[p][i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++result.entries_checked;
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst_parameter = p;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace countlab
