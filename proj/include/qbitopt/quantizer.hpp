#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qbitopt/errors.hpp"
#include "qbitopt/tape.hpp"
#include "qbitopt/tensor.hpp"

namespace qbitopt {

enum class Signedness { Unsigned, Signed };
enum class Granularity { PerTensor, PerChannel };  // channel = trailing axis
enum class QuantMode { Hard, Pqn };
enum class QuantizerRole { Weight, Activation };

inline const char* role_str(QuantizerRole r) {
    return r == QuantizerRole::Weight ? "weight" : "activation";
}

/// Smallest admissible range parameter; keeps the step size positive on
/// degenerate inputs.
inline constexpr double kAlphaFloor = 1e-8;

struct QuantizerConfig {
    Signedness signedness = Signedness::Unsigned;
    Granularity granularity = Granularity::PerTensor;
    QuantMode mode = QuantMode::Hard;
    int b_min = 2;
    int b_max = 8;
    QuantizerRole role = QuantizerRole::Weight;

    void validate() const {
        if (b_min < 1) throw ContractError("quantizer: b_min must be >= 1");
        if (signedness == Signedness::Signed && b_min < 2) {
            throw ContractError("quantizer: signed grids need b_min >= 2");
        }
        if (b_max < b_min) throw ContractError("quantizer: b_max < b_min");
        if (granularity == Granularity::PerChannel && role != QuantizerRole::Weight) {
            throw ContractError("quantizer: per-channel granularity is weight-only");
        }
    }
};

/// Number of positive quantization steps: the step size is alpha / levels.
inline double quant_levels(Signedness s, double bits) {
    return s == Signedness::Unsigned ? std::exp2(bits) - 1.0 : std::exp2(bits - 1.0) - 1.0;
}

/// Integer-domain clamp bounds [lo, hi] of the grid.
inline double grid_lo(Signedness s, double bits) {
    return s == Signedness::Unsigned ? 0.0 : -(std::exp2(bits - 1.0) - 1.0);
}

inline double grid_hi(Signedness s, double bits) {
    return s == Signedness::Unsigned ? std::exp2(bits) - 1.0 : std::exp2(bits - 1.0) - 1.0;
}

/// One simulated quantizer: a learnable range alpha (per tensor or per
/// output channel) and a current bitwidth. alpha lives in a Tensor so range
/// gradients flow through the tape.
struct QuantizerState {
    Tensor alpha;           // shape [1] (per-tensor) or [C] (per-channel)
    double bitwidth = 8.0;
    QuantizerConfig config;
    int id = -1;            // position in the allocation problem
    std::string name;

    std::size_t channels() const { return alpha.size(); }

    void validate() const {
        config.validate();
        if (!alpha.defined() || alpha.size() == 0) {
            throw ContractError("quantizer " + name + ": alpha is empty");
        }
        for (double a : alpha.values()) {
            if (!(a > 0.0)) throw ContractError("quantizer " + name + ": alpha must be > 0");
        }
        if (bitwidth < config.b_min || bitwidth > config.b_max) {
            throw ContractError("quantizer " + name + ": bitwidth " + std::to_string(bitwidth) +
                                " outside [" + std::to_string(config.b_min) + ", " +
                                std::to_string(config.b_max) + "]");
        }
    }
};

/// Step size per channel: alpha / (2^b - 1) unsigned, alpha / (2^(b-1) - 1)
/// signed.
inline std::vector<double> step_size(const QuantizerState& state) {
    if (!(state.bitwidth > 0.0)) throw ContractError("step_size: bitwidth must be > 0");
    const double lv = quant_levels(state.config.signedness, state.bitwidth);
    if (!(lv > 0.0)) throw ContractError("step_size: empty grid at bitwidth " +
                                         std::to_string(state.bitwidth));
    std::vector<double> out;
    out.reserve(state.alpha.size());
    for (double a : state.alpha.values()) {
        if (!(a > 0.0)) throw ContractError("step_size: alpha must be > 0");
        out.push_back(a / lv);
    }
    return out;
}

namespace detail_q {

/// x / delta with the channel index recovered from the flat position.
inline double channel_value(std::span<const double> per_channel, std::size_t flat,
                            std::size_t channels) {
    return per_channel.size() == 1 ? per_channel[0] : per_channel[flat % channels];
}

inline void check_channel_shape(const Tensor& x, const QuantizerState& state) {
    if (state.config.granularity == Granularity::PerChannel &&
        state.alpha.size() != x.shape().back()) {
        throw ShapeError("quantize: per-channel alpha " + shape_str(state.alpha.shape()) +
                         " does not match trailing axis of " + shape_str(x.shape()));
    }
}

}  // namespace detail_q

/// Hard quantizer: delta * clamp(round(x/delta), lo, hi). Round and clamp are
/// straight-through, so the input gradient is 1 inside the grid and 0 when
/// saturated, and alpha receives the range gradient through delta.
inline Tensor quantize(Tape& tape, const Tensor& x, const QuantizerState& state) {
    state.validate();
    if (state.config.mode != QuantMode::Hard) {
        throw ContractError("quantize: quantizer " + state.name + " is not in hard mode");
    }
    if (state.bitwidth != std::nearbyint(state.bitwidth)) {
        throw ContractError("quantize: fractional bitwidth " + std::to_string(state.bitwidth) +
                            " is invalid in hard mode");
    }
    detail_q::check_channel_shape(x, state);
    const double lv = quant_levels(state.config.signedness, state.bitwidth);
    const Tensor delta = tape.scale(state.alpha, 1.0 / lv);
    const Tensor q = tape.div(x, delta);
    const Tensor r = tape.round(q, GradPolicy::StraightThrough);
    const Tensor c = tape.clamp(r, grid_lo(state.config.signedness, state.bitwidth),
                                grid_hi(state.config.signedness, state.bitwidth),
                                GradPolicy::StraightThrough);
    return tape.mul(c, delta);
}

/// Pseudo-noise quantizer: delta * clamp(x/delta + eps, lo, hi) with
/// eps ~ U[-1/2, 1/2) drawn per element per forward. Fully differentiable;
/// admits fractional bitwidths. Pass rng = nullptr to freeze eps at zero.
inline Tensor pqn_quantize(Tape& tape, const Tensor& x, const QuantizerState& state, Rng* rng) {
    state.validate();
    if (state.config.mode != QuantMode::Pqn) {
        throw ContractError("pqn_quantize: quantizer " + state.name + " is not in pqn mode");
    }
    detail_q::check_channel_shape(x, state);
    const double lv = quant_levels(state.config.signedness, state.bitwidth);
    const Tensor delta = tape.scale(state.alpha, 1.0 / lv);
    Tensor q = tape.div(x, delta);
    if (rng != nullptr) q = tape.uniform_noise(q, *rng);
    const Tensor c = tape.clamp(q, grid_lo(state.config.signedness, state.bitwidth),
                                grid_hi(state.config.signedness, state.bitwidth),
                                GradPolicy::StraightThrough);
    return tape.mul(c, delta);
}

/// Clamp values to the quantizer's representable real range: [0, alpha]
/// unsigned, [-alpha, alpha] signed, per channel where applicable. No
/// rounding, no tape.
inline Tensor clip_params(const Tensor& theta, const QuantizerState& state) {
    detail_q::check_channel_shape(theta, state);
    Tensor out = theta.clone();
    auto ov = out.values_mut();
    const auto av = state.alpha.values();
    const std::size_t c = theta.shape().back();
    const bool is_signed = state.config.signedness == Signedness::Signed;
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double a = detail_q::channel_value(av, i, c);
        const double lo = is_signed ? -a : 0.0;
        ov[i] = std::min(std::max(ov[i], lo), a);
    }
    return out;
}

namespace detail_q {

inline double quantize_value(double x, double alpha, double bits, Signedness s) {
    const double delta = alpha / quant_levels(s, bits);
    const double r = std::nearbyint(x / delta);
    const double c = std::min(std::max(r, grid_lo(s, bits)), grid_hi(s, bits));
    return c * delta;
}

}  // namespace detail_q

/// Range initialization: per channel, pick alpha from the candidate grid
/// c * max|x| (c = 0.01, 0.02, ..., 1.00) minimizing the squared
/// reconstruction error at the given bitwidth. All-zero channels fall back to
/// the alpha floor.
inline Tensor mse_range_init(const Tensor& x, int bitwidth, const QuantizerConfig& config) {
    config.validate();
    if (!x.defined() || x.size() == 0) throw ContractError("mse_range_init: empty input");
    if (bitwidth < config.b_min || bitwidth > config.b_max) {
        throw ContractError("mse_range_init: bitwidth " + std::to_string(bitwidth) +
                            " outside the bit domain");
    }
    const std::size_t channels =
        config.granularity == Granularity::PerChannel ? x.shape().back() : 1;
    const auto xv = x.values();
    std::vector<double> alpha(channels, kAlphaFloor);
    for (std::size_t ch = 0; ch < channels; ++ch) {
        double maxabs = 0.0;
        for (std::size_t i = ch; i < xv.size(); i += channels) {
            maxabs = std::max(maxabs, std::abs(xv[i]));
        }
        if (maxabs == 0.0) continue;  // keep the floor
        double best_alpha = maxabs;
        double best_err = std::numeric_limits<double>::infinity();
        for (int k = 1; k <= 100; ++k) {
            const double cand = maxabs * (0.01 * k);
            double err = 0.0;
            for (std::size_t i = ch; i < xv.size(); i += channels) {
                const double q = detail_q::quantize_value(xv[i], cand, bitwidth,
                                                          config.signedness);
                err += (xv[i] - q) * (xv[i] - q);
            }
            if (err < best_err) {
                best_err = err;
                best_alpha = cand;
            }
        }
        alpha[ch] = best_alpha;
    }
    return Tensor({channels}, std::move(alpha));
}

/// Assign a new bitwidth. Hard-mode quantizers only accept integers.
inline void set_bitwidth(QuantizerState& state, double b) {
    if (b < state.config.b_min || b > state.config.b_max) {
        throw ContractError("set_bitwidth: " + std::to_string(b) + " outside [" +
                            std::to_string(state.config.b_min) + ", " +
                            std::to_string(state.config.b_max) + "] for quantizer " + state.name);
    }
    if (state.config.mode == QuantMode::Hard && b != std::nearbyint(b)) {
        throw ContractError("set_bitwidth: fractional bitwidth " + std::to_string(b) +
                            " on hard quantizer " + state.name);
    }
    state.bitwidth = b;
}

}  // namespace qbitopt
