#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qbitopt/quantizer.hpp"
#include "qbitopt/rng.hpp"
#include "qbitopt/tape.hpp"
#include "qbitopt/tensor.hpp"

namespace qbitopt {

/// Fully-connected relu network: layer_widths = [in, h1, ..., out].
struct ModelSpec {
    std::vector<std::size_t> layer_widths;
    std::uint64_t seed = 1;

    std::size_t num_layers() const { return layer_widths.empty() ? 0 : layer_widths.size() - 1; }

    void validate() const {
        if (layer_widths.size() < 2) {
            throw ContractError("model: need at least input and output widths");
        }
        for (std::size_t w : layer_widths) {
            if (w == 0) throw ContractError("model: zero layer width");
        }
    }
};

/// MLP with one signed per-channel quantizer per weight matrix and one
/// unsigned per-tensor quantizer on the input of every layer except the
/// first. Biases stay full precision.
class QuantizedMlp {
public:
    ModelSpec spec;
    std::vector<Tensor> weights;              // [in, out] per layer
    std::vector<Tensor> biases;               // [out] per layer
    std::vector<QuantizerState> weight_q;     // one per layer
    std::vector<QuantizerState> act_q;        // input of layers 2..L
    bool quantizers_enabled = true;

    static QuantizedMlp build(const ModelSpec& spec, int init_bits, int b_min, int b_max,
                              QuantMode mode) {
        spec.validate();
        QuantizedMlp m;
        m.spec = spec;
        const std::size_t layers = spec.num_layers();
        int next_id = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t fan_in = spec.layer_widths[l];
            const std::size_t fan_out = spec.layer_widths[l + 1];
            Rng rng(Rng::mix(spec.seed, l));
            std::vector<double> w(fan_in * fan_out);
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (double& v : w) v = std_dev * rng.normal();
            m.weights.emplace_back(Shape{fan_in, fan_out}, std::move(w));
            m.biases.push_back(Tensor::zeros({fan_out}));

            QuantizerState wq;
            wq.config.signedness = Signedness::Signed;
            wq.config.granularity = Granularity::PerChannel;
            wq.config.mode = mode;
            wq.config.role = QuantizerRole::Weight;
            wq.config.b_min = b_min;
            wq.config.b_max = b_max;
            wq.bitwidth = init_bits;
            wq.alpha = mse_range_init(m.weights.back(), init_bits, wq.config);
            wq.id = next_id++;
            wq.name = "w" + std::to_string(l + 1);
            m.weight_q.push_back(std::move(wq));

            if (l > 0) {
                QuantizerState aq;
                aq.config.signedness = Signedness::Unsigned;  // relu outputs
                aq.config.granularity = Granularity::PerTensor;
                aq.config.mode = mode;
                aq.config.role = QuantizerRole::Activation;
                aq.config.b_min = b_min;
                aq.config.b_max = b_max;
                aq.bitwidth = init_bits;
                aq.alpha = Tensor::full({1}, 1.0);  // calibrated from data
                aq.id = next_id++;
                aq.name = "a" + std::to_string(l + 1);
                m.act_q.push_back(std::move(aq));
            }
        }
        return m;
    }

    std::size_t num_quantizers() const { return weight_q.size() + act_q.size(); }

    /// All quantizers in id order: w1, w2, a2, w3, a3, ...
    std::vector<QuantizerState*> quantizers() {
        std::vector<QuantizerState*> out(num_quantizers());
        for (auto& q : weight_q) out[static_cast<std::size_t>(q.id)] = &q;
        for (auto& q : act_q) out[static_cast<std::size_t>(q.id)] = &q;
        return out;
    }

    std::vector<const QuantizerState*> quantizers() const {
        std::vector<const QuantizerState*> out(num_quantizers());
        for (const auto& q : weight_q) out[static_cast<std::size_t>(q.id)] = &q;
        for (const auto& q : act_q) out[static_cast<std::size_t>(q.id)] = &q;
        return out;
    }

    /// Trainable tensors in a fixed order: W1, b1, W2, b2, ...
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(&weights[l]);
            out.push_back(&biases[l]);
        }
        return out;
    }

    std::vector<Tensor*> ranges() {
        std::vector<Tensor*> out;
        for (auto* q : quantizers()) out.push_back(&q->alpha);
        return out;
    }

    struct Forward {
        Tensor logits;
        Tensor loss;                        // defined when labels were given
        std::vector<Tensor> act_sites;      // inputs of layers 2..L (FP pass only)
        std::vector<Tensor> weight_leaves;  // the weight tensors the pass consumed
    };

    /// Quantized forward. Each quantizer applies per its own mode; PQN draws
    /// noise from noise_rng (required when any quantizer is in PQN mode).
    Forward forward(Tape& tape, const Tensor& x, std::span<const int> labels,
                    Rng* noise_rng = nullptr) {
        Forward out;
        Tensor z = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (l > 0 && quantizers_enabled) z = apply_quantizer(tape, z, act_q[l - 1], noise_rng);
            Tensor w = quantizers_enabled ? apply_quantizer(tape, weights[l], weight_q[l], noise_rng)
                                          : weights[l];
            z = tape.add(tape.matmul(z, w), biases[l]);
            if (l + 1 < weights.size()) z = tape.relu(z);
        }
        out.logits = z;
        if (!labels.empty()) out.loss = tape.softmax_cross_entropy(z, labels);
        return out;
    }

    /// Full-precision probe pass on fresh leaf copies of the parameters,
    /// clipped to the quantizer ranges when clip is set. Gradients from a
    /// backward on the result land on the returned leaves and act_sites, not
    /// on the model parameters.
    Forward forward_fp(Tape& tape, const Tensor& x, std::span<const int> labels,
                       bool clip) const {
        Forward out;
        Tensor z = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (l > 0) out.act_sites.push_back(z);
            Tensor w = clip ? clip_params(weights[l], weight_q[l]) : weights[l].clone();
            tape.watch(w);
            out.weight_leaves.push_back(w);
            Tensor b = biases[l].clone();
            tape.watch(b);
            z = tape.add(tape.matmul(z, w), b);
            if (l + 1 < weights.size()) z = tape.relu(z);
        }
        out.logits = z;
        if (!labels.empty()) out.loss = tape.softmax_cross_entropy(z, labels);
        return out;
    }

    /// MSE-initialize activation ranges from the full-precision activations
    /// of a calibration batch.
    void calibrate_activations(const Tensor& x) {
        if (act_q.empty()) return;
        Tape tape;
        Forward fwd = forward_fp(tape, x, {}, /*clip=*/false);
        for (std::size_t i = 0; i < act_q.size(); ++i) {
            act_q[i].alpha = mse_range_init(fwd.act_sites[i],
                                            static_cast<int>(act_q[i].bitwidth),
                                            act_q[i].config);
        }
    }

private:
    static Tensor apply_quantizer(Tape& tape, const Tensor& x, const QuantizerState& q,
                                  Rng* noise_rng) {
        if (q.config.mode == QuantMode::Hard) return quantize(tape, x, q);
        return pqn_quantize(tape, x, q, noise_rng);
    }
};

}  // namespace qbitopt
