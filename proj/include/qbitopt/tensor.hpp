#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qbitopt/errors.hpp"

namespace qbitopt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

class Tape;

namespace detail {

struct TensorStorage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;       // empty until first accumulation
    const Tape* tape = nullptr;     // tape this storage is registered on
    bool tracked = false;
    bool op_output = false;         // produced by a recorded op (vs. watched leaf)
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share storage; use clone() for
/// an independent value. Values are treated as immutable once an op has
/// consumed them; parameter updates go through values_mut() between forwards.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values)
        : s_(std::make_shared<detail::TensorStorage>()) {
        if (values.size() != shape_numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("tensor shape has zero dimension " + shape_str(shape));
        }
        s_->shape = std::move(shape);
        s_->values = std::move(values);
    }

    /// Scalar tensor of shape [1].
    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor zeros(Shape shape) {
        std::vector<double> v(shape_numel(shape), 0.0);
        return Tensor(std::move(shape), std::move(v));
    }

    static Tensor full(Shape shape, double fill) {
        std::vector<double> v(shape_numel(shape), fill);
        return Tensor(std::move(shape), std::move(v));
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t size() const { return s_ ? s_->values.size() : 0; }
    bool is_scalar() const { return defined() && s_->values.size() == 1; }

    double item() const {
        if (!is_scalar()) throw ContractError("item() requires a scalar tensor");
        return s_->values[0];
    }

    std::span<const double> values() const { return s_->values; }
    std::span<double> values_mut() { return s_->values; }
    double operator[](std::size_t i) const { return s_->values[i]; }

    bool has_grad() const { return defined() && !s_->grad.empty(); }

    std::span<const double> grad() const {
        if (!has_grad()) throw ContractError("tensor has no gradient; call backward first");
        return s_->grad;
    }

    void zero_grad() {
        if (s_) s_->grad.assign(s_->grad.size(), 0.0);
    }

    bool tracked() const { return defined() && s_->tracked; }

    /// Deep copy, detached from any tape.
    Tensor clone() const {
        Tensor t;
        if (s_) {
            t.s_ = std::make_shared<detail::TensorStorage>();
            t.s_->shape = s_->shape;
            t.s_->values = s_->values;
        }
        return t;
    }

private:
    std::shared_ptr<detail::TensorStorage> s_;
    friend class Tape;
};

}  // namespace qbitopt
