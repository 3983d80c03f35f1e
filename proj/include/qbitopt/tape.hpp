#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qbitopt/errors.hpp"
#include "qbitopt/rng.hpp"
#include "qbitopt/tensor.hpp"

namespace qbitopt {

/// Gradient treatment of non-differentiable ops in backward.
/// For round, Exact is the a.e. derivative (zero) and StraightThrough passes
/// the gradient unchanged. For clamp both policies pass the gradient inside
/// the interval and block it outside; they differ only at the endpoints
/// (Exact is exclusive, StraightThrough inclusive).
enum class GradPolicy { Exact, StraightThrough };

/// Reverse-mode tape over Tensor ops. Ops are recorded whenever any input is
/// tracked; backward() replays them in reverse and accumulates gradients into
/// every tracked tensor. Single-threaded per training run.
class Tape {
    enum class OpKind {
        Matmul,
        Add,
        Mul,
        Div,
        Scale,
        Relu,
        Sum,
        Mean,
        Clamp,
        Round,
        UniformNoise,
        SoftmaxCrossEntropy,
    };

    enum class Broadcast { Same, Trailing, Scalar };

    struct OpRecord {
        OpKind kind;
        std::vector<std::shared_ptr<detail::TensorStorage>> inputs;
        std::shared_ptr<detail::TensorStorage> output;
        std::vector<double> saved;   // forward data needed by backward (probs, noise)
        std::vector<int> labels;     // cross-entropy targets
        double c0 = 0.0;             // scale factor / clamp lo
        double c1 = 0.0;             // clamp hi
        GradPolicy policy = GradPolicy::Exact;
        Broadcast bcast = Broadcast::Same;
    };

public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf tensor for gradient tracking on this tape.
    void watch(Tensor& t) {
        if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
        t.s_->tracked = true;
        t.s_->tape = this;
        t.s_->op_output = false;
    }

    std::size_t num_ops() const { return ops_.size(); }

    /// Drop all recorded ops. Watched leaves stay tracked.
    void reset() { ops_.clear(); }

    // ---- forward ops ------------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
            throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
        }
        const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        Tensor out = Tensor::zeros({m, n});
        auto av = a.values();
        auto bv = b.values();
        auto ov = out.values_mut();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = av[i * k + p];
                if (aip == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
            }
        }
        record(OpKind::Matmul, {a, b}, out);
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) { return binary(OpKind::Add, a, b); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(OpKind::Mul, a, b); }
    Tensor div(const Tensor& a, const Tensor& b) { return binary(OpKind::Div, a, b); }

    /// Elementwise multiplication by a constant.
    Tensor scale(const Tensor& a, double c) {
        Tensor out = a.clone();
        for (double& v : out.values_mut()) v *= c;
        if (OpRecord* rec = record(OpKind::Scale, {a}, out)) rec->c0 = c;
        return out;
    }

    Tensor relu(const Tensor& a) {
        Tensor out = a.clone();
        for (double& v : out.values_mut()) v = std::max(v, 0.0);
        record(OpKind::Relu, {a}, out);
        return out;
    }

    Tensor sum(const Tensor& a) {
        double s = 0.0;
        for (double v : a.values()) s += v;
        Tensor out = Tensor::scalar(s);
        record(OpKind::Sum, {a}, out);
        return out;
    }

    Tensor mean(const Tensor& a) {
        double s = 0.0;
        for (double v : a.values()) s += v;
        Tensor out = Tensor::scalar(s / static_cast<double>(a.size()));
        record(OpKind::Mean, {a}, out);
        return out;
    }

    Tensor clamp(const Tensor& a, double lo, double hi,
                 GradPolicy policy = GradPolicy::StraightThrough) {
        if (lo > hi) throw ContractError("clamp: lo > hi");
        Tensor out = a.clone();
        for (double& v : out.values_mut()) v = std::min(std::max(v, lo), hi);
        if (OpRecord* rec = record(OpKind::Clamp, {a}, out)) {
            rec->c0 = lo;
            rec->c1 = hi;
            rec->policy = policy;
        }
        return out;
    }

    Tensor round(const Tensor& a, GradPolicy policy = GradPolicy::StraightThrough) {
        Tensor out = a.clone();
        for (double& v : out.values_mut()) v = std::nearbyint(v);
        if (OpRecord* rec = record(OpKind::Round, {a}, out)) rec->policy = policy;
        return out;
    }

    /// Adds i.i.d. U[-1/2, 1/2) noise per element. The realized noise is kept
    /// on the tape so a replay of backward sees the same forward values.
    Tensor uniform_noise(const Tensor& a, Rng& rng) {
        Tensor out = a.clone();
        std::vector<double> noise(a.size());
        auto ov = out.values_mut();
        for (std::size_t i = 0; i < noise.size(); ++i) {
            noise[i] = rng.uniform() - 0.5;
            ov[i] += noise[i];
        }
        if (OpRecord* rec = record(OpKind::UniformNoise, {a}, out)) rec->saved = std::move(noise);
        return out;
    }

    /// Mean negative log-likelihood of the labels under row-wise softmax.
    Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
        if (logits.shape().size() != 2) {
            throw ShapeError("softmax_cross_entropy: logits must be 2-D, got " +
                             shape_str(logits.shape()));
        }
        const std::size_t m = logits.shape()[0], n = logits.shape()[1];
        if (labels.size() != m) {
            throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(m) + " rows");
        }
        std::vector<double> probs(m * n);
        auto lv = logits.values();
        double loss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const int y = labels[i];
            if (y < 0 || static_cast<std::size_t>(y) >= n) {
                throw ContractError("softmax_cross_entropy: label " + std::to_string(y) +
                                    " out of range for " + std::to_string(n) + " classes");
            }
            double mx = lv[i * n];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                probs[i * n + j] = std::exp(lv[i * n + j] - mx);
                z += probs[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= z;
            loss -= std::log(probs[i * n + static_cast<std::size_t>(y)]);
        }
        Tensor out = Tensor::scalar(loss / static_cast<double>(m));
        if (OpRecord* rec = record(OpKind::SoftmaxCrossEntropy, {logits}, out)) {
            rec->saved = std::move(probs);
            rec->labels.assign(labels.begin(), labels.end());
        }
        return out;
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(loss)/d(tensor) into the grad of every tracked tensor
    /// reachable from loss. Gradients add up across calls; zero_grad between
    /// steps.
    void backward(const Tensor& loss) {
        if (!loss.defined() || !loss.is_scalar()) {
            throw ContractError("backward: loss must be a scalar");
        }
        if (loss.s_->tape != this || !loss.s_->op_output) {
            throw ContractError("backward: loss was not produced on this tape");
        }
        ensure_grad(*loss.s_)[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) backward_op(*it);
    }

private:
    std::vector<OpRecord> ops_;

    static std::span<double> ensure_grad(detail::TensorStorage& s) {
        if (s.grad.size() != s.values.size()) s.grad.assign(s.values.size(), 0.0);
        return s.grad;
    }

    OpRecord* record(OpKind kind, std::initializer_list<Tensor> ins, Tensor& out) {
        bool tracked = false;
        for (const Tensor& t : ins) tracked |= t.tracked();
        if (!tracked) return nullptr;
        OpRecord rec;
        rec.kind = kind;
        for (const Tensor& t : ins) rec.inputs.push_back(t.s_);
        out.s_->tracked = true;
        out.s_->tape = this;
        out.s_->op_output = true;
        rec.output = out.s_;
        ops_.push_back(std::move(rec));
        return &ops_.back();
    }

    Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) const {
        if (a == b) return Broadcast::Same;
        const std::size_t bn = shape_numel(b);
        if (bn == 1) return Broadcast::Scalar;
        if (!a.empty() && b.size() == 1 && b[0] == a.back()) return Broadcast::Trailing;
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                         shape_str(b) + " (broadcast is limited to a trailing channel axis)");
    }

    Tensor binary(OpKind kind, const Tensor& a, const Tensor& b) {
        const char* name = kind == OpKind::Add ? "add" : kind == OpKind::Mul ? "mul" : "div";
        const Broadcast bc = broadcast_kind(name, a.shape(), b.shape());
        const std::size_t n = a.size();
        const std::size_t c = a.shape().back();
        Tensor out = a.clone();
        auto ov = out.values_mut();
        auto bv = b.values();
        for (std::size_t i = 0; i < n; ++i) {
            const double rhs = bc == Broadcast::Same      ? bv[i]
                               : bc == Broadcast::Scalar  ? bv[0]
                                                          : bv[i % c];
            switch (kind) {
                case OpKind::Add: ov[i] += rhs; break;
                case OpKind::Mul: ov[i] *= rhs; break;
                default: ov[i] /= rhs; break;
            }
        }
        if (OpRecord* rec = record(kind, {a, b}, out)) rec->bcast = bc;
        return out;
    }

    void backward_op(const OpRecord& op) {
        const auto& out = *op.output;
        if (out.grad.empty()) return;  // no gradient flowed to this output
        const std::span<const double> go = out.grad;

        auto in_tracked = [&](std::size_t idx) { return op.inputs[idx]->tracked; };

        switch (op.kind) {
            case OpKind::Matmul: {
                const auto& A = *op.inputs[0];
                const auto& B = *op.inputs[1];
                const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
                if (in_tracked(0)) {
                    auto ga = ensure_grad(*op.inputs[0]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const double g = go[i * n + j];
                            if (g == 0.0) continue;
                            for (std::size_t p = 0; p < k; ++p)
                                ga[i * k + p] += g * B.values[p * n + j];
                        }
                }
                if (in_tracked(1)) {
                    auto gb = ensure_grad(*op.inputs[1]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const double a = A.values[i * k + p];
                            if (a == 0.0) continue;
                            for (std::size_t j = 0; j < n; ++j)
                                gb[p * n + j] += a * go[i * n + j];
                        }
                }
                break;
            }
            case OpKind::Add:
            case OpKind::Mul:
            case OpKind::Div: {
                const auto av = std::span<const double>(op.inputs[0]->values);
                const auto bv = std::span<const double>(op.inputs[1]->values);
                const std::size_t n = av.size();
                const std::size_t c = op.inputs[0]->shape.back();
                auto rhs_index = [&](std::size_t i) -> std::size_t {
                    return op.bcast == Broadcast::Same     ? i
                           : op.bcast == Broadcast::Scalar ? 0
                                                           : i % c;
                };
                if (in_tracked(0)) {
                    auto ga = ensure_grad(*op.inputs[0]);
                    for (std::size_t i = 0; i < n; ++i) {
                        if (op.kind == OpKind::Add) ga[i] += go[i];
                        else if (op.kind == OpKind::Mul) ga[i] += go[i] * bv[rhs_index(i)];
                        else ga[i] += go[i] / bv[rhs_index(i)];
                    }
                }
                if (in_tracked(1)) {
                    auto gb = ensure_grad(*op.inputs[1]);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t j = rhs_index(i);
                        if (op.kind == OpKind::Add) gb[j] += go[i];
                        else if (op.kind == OpKind::Mul) gb[j] += go[i] * av[i];
                        else {
                            const double b = bv[j];
                            gb[j] -= go[i] * av[i] / (b * b);
                        }
                    }
                }
                break;
            }
            case OpKind::Scale: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * op.c0;
                break;
            }
            case OpKind::Relu: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                const auto& av = op.inputs[0]->values;
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (av[i] > 0.0) ga[i] += go[i];
                break;
            }
            case OpKind::Sum: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                for (double& g : ga) g += go[0];
                break;
            }
            case OpKind::Mean: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                const double inv = 1.0 / static_cast<double>(ga.size());
                for (double& g : ga) g += go[0] * inv;
                break;
            }
            case OpKind::Clamp: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                const auto& av = op.inputs[0]->values;
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    const bool inside = op.policy == GradPolicy::StraightThrough
                                            ? (av[i] >= op.c0 && av[i] <= op.c1)
                                            : (av[i] > op.c0 && av[i] < op.c1);
                    if (inside) ga[i] += go[i];
                }
                break;
            }
            case OpKind::Round: {
                if (!in_tracked(0) || op.policy == GradPolicy::Exact) break;
                auto ga = ensure_grad(*op.inputs[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
                break;
            }
            case OpKind::UniformNoise: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
                break;
            }
            case OpKind::SoftmaxCrossEntropy: {
                if (!in_tracked(0)) break;
                auto ga = ensure_grad(*op.inputs[0]);
                const std::size_t m = op.inputs[0]->shape[0];
                const std::size_t n = op.inputs[0]->shape[1];
                const double g = go[0] / static_cast<double>(m);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        double d = op.saved[i * n + j];
                        if (static_cast<std::size_t>(op.labels[i]) == j) d -= 1.0;
                        ga[i * n + j] += g * d;
                    }
                }
                break;
            }
        }
    }
};

/// Max relative error between the tape gradient of fn at point and central
/// finite differences with per-coordinate step scaled by magnitude. fn must
/// be deterministic (freeze any noise).
inline double grad_check(const std::function<Tensor(Tape&, Tensor&)>& fn, const Tensor& point,
                         double step) {
    if (step <= 0.0) throw ContractError("grad_check: step must be > 0");
    Tape tape;
    Tensor x = point.clone();
    tape.watch(x);
    Tensor loss = fn(tape, x);
    tape.backward(loss);
    std::vector<double> g(x.grad().begin(), x.grad().end());

    auto eval_at = [&](std::size_t i, double xi) {
        Tape t;
        Tensor p = point.clone();
        p.values_mut()[i] = xi;
        t.watch(p);
        const double v = fn(t, p).item();
        if (!std::isfinite(v)) {
            throw NumericError("grad_check: non-finite loss at perturbed coordinate " +
                               std::to_string(i));
        }
        return v;
    };

    double max_rel = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double h = step * (1.0 + std::abs(point[i]));
        const double fd = (eval_at(i, point[i] + h) - eval_at(i, point[i] - h)) / (2.0 * h);
        const double rel = std::abs(g[i] - fd) / std::max({1.0, std::abs(g[i]), std::abs(fd)});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace qbitopt
