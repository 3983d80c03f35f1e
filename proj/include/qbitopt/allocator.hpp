#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "qbitopt/errors.hpp"
#include "qbitopt/quantizer.hpp"

namespace qbitopt {

/// Mean bitwidth over all quantizers bounded by beta.
struct AvgBitwidthConstraint {
    double beta = 4.0;
    int b_min = 2;
    int b_max = 8;

    void validate() const {
        if (b_min < 1 || b_max < b_min) throw ConstraintError("constraint: bad bit bounds");
        if (beta < b_min || beta > b_max) {
            throw ConstraintError("constraint: beta " + std::to_string(beta) +
                                  " outside [" + std::to_string(b_min) + ", " +
                                  std::to_string(b_max) + "]");
        }
    }
};

/// Element-weighted mean bitwidth bounded per group, weights and activations
/// independently.
struct PerElementAvgConstraint {
    double beta_weights = 4.0;
    double beta_activations = 4.0;
    int b_min = 2;
    int b_max = 8;

    void validate() const {
        if (b_min < 1 || b_max < b_min) throw ConstraintError("constraint: bad bit bounds");
        for (double beta : {beta_weights, beta_activations}) {
            if (beta < b_min || beta > b_max) {
                throw ConstraintError("constraint: beta " + std::to_string(beta) +
                                      " outside [" + std::to_string(b_min) + ", " +
                                      std::to_string(b_max) + "]");
            }
        }
    }
};

using ResourceConstraint = std::variant<AvgBitwidthConstraint, PerElementAvgConstraint>;

inline int constraint_b_min(const ResourceConstraint& c) {
    return std::visit([](const auto& v) { return v.b_min; }, c);
}
inline int constraint_b_max(const ResourceConstraint& c) {
    return std::visit([](const auto& v) { return v.b_max; }, c);
}
inline void validate_constraint(const ResourceConstraint& c) {
    std::visit([](const auto& v) { v.validate(); }, c);
}

/// Per-quantizer data of one allocation instance. weights[q] is the
/// sensitivity mass A_q already folded with the squared range.
struct AllocationProblem {
    std::vector<std::string> names;
    std::vector<double> weights;              // A_q
    std::vector<QuantizerRole> roles;
    std::vector<std::size_t> elements;        // e_q

    std::size_t size() const { return weights.size(); }

    void validate() const {
        if (weights.empty()) throw ContractError("allocation problem: no quantizers");
        if (names.size() != weights.size() || roles.size() != weights.size() ||
            elements.size() != weights.size()) {
            throw ContractError("allocation problem: field lengths disagree");
        }
        for (double w : weights) {
            if (!std::isfinite(w) || w < 0.0) {
                throw ContractError("allocation problem: weights must be finite and >= 0");
            }
        }
        for (std::size_t e : elements) {
            if (e == 0) throw ContractError("allocation problem: element counts must be > 0");
        }
    }
};

struct BitAllocation {
    std::vector<double> bits;
    bool integral = false;

    double average() const {
        return std::accumulate(bits.begin(), bits.end(), 0.0) / static_cast<double>(bits.size());
    }
};

/// Sum of A_q / (2^b_q - 1)^2.
inline double allocation_objective(const BitAllocation& alloc, const AllocationProblem& problem) {
    problem.validate();
    if (alloc.bits.size() != problem.size()) {
        throw ContractError("objective: allocation has " + std::to_string(alloc.bits.size()) +
                            " bitwidths for " + std::to_string(problem.size()) + " quantizers");
    }
    double total = 0.0;
    for (std::size_t q = 0; q < problem.size(); ++q) {
        const double lv = std::exp2(alloc.bits[q]) - 1.0;
        total += problem.weights[q] / (lv * lv);
    }
    return total;
}

/// Signed violation of the constraint: positive means over budget. For the
/// per-element variant this is the worst group violation, in bits.
inline double constraint_violation(const BitAllocation& alloc, const AllocationProblem& problem,
                                   const ResourceConstraint& constraint) {
    if (std::holds_alternative<AvgBitwidthConstraint>(constraint)) {
        return alloc.average() - std::get<AvgBitwidthConstraint>(constraint).beta;
    }
    const auto& c = std::get<PerElementAvgConstraint>(constraint);
    double worst = -std::numeric_limits<double>::infinity();
    for (QuantizerRole role : {QuantizerRole::Weight, QuantizerRole::Activation}) {
        double bits_mass = 0.0, elems = 0.0;
        for (std::size_t q = 0; q < problem.size(); ++q) {
            if (problem.roles[q] != role) continue;
            bits_mass += alloc.bits[q] * static_cast<double>(problem.elements[q]);
            elems += static_cast<double>(problem.elements[q]);
        }
        if (elems == 0.0) continue;
        const double beta =
            role == QuantizerRole::Weight ? c.beta_weights : c.beta_activations;
        worst = std::max(worst, bits_mass / elems - beta);
    }
    return worst == -std::numeric_limits<double>::infinity() ? 0.0 : worst;
}

/// Bit-increment selection rule for the greedy solver. MaxGain upgrades the
/// quantizer whose extra bit removes the most objective mass.
/// MinWeightedSensitivity upgrades the quantizer with the smallest current
/// weighted sensitivity instead; kept for comparison, not the default.
enum class GreedyRule { MaxGain, MinWeightedSensitivity };

namespace detail_alloc {

/// Objective decrease from granting one more bit at current width b.
inline double marginal_gain(double weight, double b) {
    const double lv0 = std::exp2(b) - 1.0;
    const double lv1 = std::exp2(b + 1.0) - 1.0;
    return weight * (1.0 / (lv0 * lv0) - 1.0 / (lv1 * lv1));
}

/// Candidate ordering: larger key first; ties go to the quantizer with
/// fewer bits, then the lower id.
struct Candidate {
    double key = -std::numeric_limits<double>::infinity();
    double bits = 0.0;
    std::size_t id = 0;
    bool valid = false;

    bool beats(const Candidate& other) const {
        if (!other.valid) return true;
        if (key != other.key) return key > other.key;
        if (bits != other.bits) return bits < other.bits;
        return id < other.id;
    }
};

inline double selection_key(GreedyRule rule, double weight, double b) {
    if (rule == GreedyRule::MaxGain) return marginal_gain(weight, b);
    // Smallest weighted sensitivity wins; negate so one comparator serves both.
    return -(weight / (std::exp2(b) - 1.0));
}

inline std::vector<std::size_t> group_indices(const AllocationProblem& problem,
                                              QuantizerRole role) {
    std::vector<std::size_t> idx;
    for (std::size_t q = 0; q < problem.size(); ++q) {
        if (problem.roles[q] == role) idx.push_back(q);
    }
    return idx;
}

}  // namespace detail_alloc

/// Greedy integer assignment: start every quantizer at b_min and spend the
/// bit budget one increment at a time on the best candidate. Exact for the
/// average-bitwidth constraint (marginal gains decrease in b); a heuristic
/// for the per-element variant where increments have unequal costs.
inline BitAllocation greedy_integer(const AllocationProblem& problem,
                                    const ResourceConstraint& constraint,
                                    GreedyRule rule = GreedyRule::MaxGain,
                                    std::vector<std::string>* warnings = nullptr) {
    problem.validate();
    validate_constraint(constraint);
    const int b_min = constraint_b_min(constraint);
    const int b_max = constraint_b_max(constraint);
    const std::size_t K = problem.size();
    BitAllocation alloc;
    alloc.bits.assign(K, static_cast<double>(b_min));
    alloc.integral = true;

    if (std::holds_alternative<AvgBitwidthConstraint>(constraint)) {
        const double beta = std::get<AvgBitwidthConstraint>(constraint).beta;
        const double budget_exact = static_cast<double>(K) * (beta - b_min);
        auto budget = static_cast<std::size_t>(std::floor(budget_exact + 1e-9));
        if (std::abs(budget_exact - static_cast<double>(budget)) > 1e-9 && warnings) {
            warnings->push_back("greedy: bit budget " + std::to_string(budget_exact) +
                                " is not integral; floored to " + std::to_string(budget));
        }
        if (budget > K * static_cast<std::size_t>(b_max - b_min)) {
            throw ConstraintError("greedy: budget " + std::to_string(budget) +
                                  " exceeds box capacity " +
                                  std::to_string(K * static_cast<std::size_t>(b_max - b_min)));
        }
        for (std::size_t step = 0; step < budget; ++step) {
            detail_alloc::Candidate best;
            for (std::size_t q = 0; q < K; ++q) {
                if (alloc.bits[q] >= b_max) continue;
                detail_alloc::Candidate cand{
                    detail_alloc::selection_key(rule, problem.weights[q], alloc.bits[q]),
                    alloc.bits[q], q, true};
                if (cand.beats(best)) best = cand;
            }
            alloc.bits[best.id] += 1.0;
        }
        return alloc;
    }

    // Per-element variant: each increment on q costs e_q element-bits.
    const auto& c = std::get<PerElementAvgConstraint>(constraint);
    for (QuantizerRole role : {QuantizerRole::Weight, QuantizerRole::Activation}) {
        const auto idx = detail_alloc::group_indices(problem, role);
        if (idx.empty()) continue;
        const double beta =
            role == QuantizerRole::Weight ? c.beta_weights : c.beta_activations;
        double total_elems = 0.0;
        for (std::size_t q : idx) total_elems += static_cast<double>(problem.elements[q]);
        double remaining = (beta - b_min) * total_elems;
        while (true) {
            detail_alloc::Candidate best;
            for (std::size_t q : idx) {
                const double cost = static_cast<double>(problem.elements[q]);
                if (alloc.bits[q] >= b_max || cost > remaining + 1e-9) continue;
                detail_alloc::Candidate cand{
                    detail_alloc::selection_key(rule, problem.weights[q], alloc.bits[q]) / cost,
                    alloc.bits[q], q, true};
                if (cand.beats(best)) best = cand;
            }
            if (!best.valid) break;
            alloc.bits[best.id] += 1.0;
            remaining -= static_cast<double>(problem.elements[best.id]);
        }
    }
    return alloc;
}

namespace detail_alloc {

/// Negated derivative of A (2^b - 1)^-2, a positive decreasing function of b.
inline double neg_obj_derivative(double weight, double b) {
    const double p = std::exp2(b);
    const double lv = p - 1.0;
    return 2.0 * 0.6931471805599453 * weight * p / (lv * lv * lv);
}

/// argmin over [b_min, b_max] of A (2^b - 1)^-2 + lambda * w * b. Zero-weight
/// coordinates are objective-flat and pin to b_min, which frees budget for
/// the rest and keeps the dual function continuous at lambda = 0.
inline double box_minimizer(double weight, double lambda_w, double b_min, double b_max) {
    if (weight == 0.0) return b_min;
    if (neg_obj_derivative(weight, b_min) <= lambda_w) return b_min;
    if (neg_obj_derivative(weight, b_max) >= lambda_w) return b_max;
    double lo = b_min, hi = b_max;
    for (int i = 0; i < 80; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (neg_obj_derivative(weight, mid) > lambda_w) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

struct GroupSpec {
    std::vector<std::size_t> idx;
    std::vector<double> w;     // budget weight per quantizer
    double budget = 0.0;       // sum w_q b_q <= budget
    double beta = 0.0;
};

inline std::vector<GroupSpec> constraint_groups(const AllocationProblem& problem,
                                                const ResourceConstraint& constraint) {
    std::vector<GroupSpec> groups;
    if (std::holds_alternative<AvgBitwidthConstraint>(constraint)) {
        const auto& c = std::get<AvgBitwidthConstraint>(constraint);
        GroupSpec g;
        g.idx.resize(problem.size());
        std::iota(g.idx.begin(), g.idx.end(), std::size_t{0});
        g.w.assign(problem.size(), 1.0);
        g.beta = c.beta;
        g.budget = c.beta * static_cast<double>(problem.size());
        groups.push_back(std::move(g));
        return groups;
    }
    const auto& c = std::get<PerElementAvgConstraint>(constraint);
    for (QuantizerRole role : {QuantizerRole::Weight, QuantizerRole::Activation}) {
        GroupSpec g;
        g.idx = group_indices(problem, role);
        if (g.idx.empty()) continue;
        g.beta = role == QuantizerRole::Weight ? c.beta_weights : c.beta_activations;
        double total = 0.0;
        for (std::size_t q : g.idx) {
            g.w.push_back(static_cast<double>(problem.elements[q]));
            total += static_cast<double>(problem.elements[q]);
        }
        g.budget = g.beta * total;
        groups.push_back(std::move(g));
    }
    return groups;
}

}  // namespace detail_alloc

/// Fractional relaxation: minimize sum A_q (2^b_q - 1)^-2 subject to the
/// budget and box, by bisecting the dual multiplier of the (binding) budget
/// constraint. Separable and convex, so each lambda gives independent 1-D
/// subproblems. Optionally reports the multiplier per constraint group.
inline BitAllocation fractional_solve(const AllocationProblem& problem,
                                      const ResourceConstraint& constraint,
                                      std::vector<double>* lambdas_out = nullptr) {
    problem.validate();
    validate_constraint(constraint);
    const double b_min = constraint_b_min(constraint);
    const double b_max = constraint_b_max(constraint);
    BitAllocation alloc;
    alloc.bits.assign(problem.size(), b_min);
    alloc.integral = false;
    if (lambdas_out) lambdas_out->clear();

    for (const auto& group : detail_alloc::constraint_groups(problem, constraint)) {
        const std::size_t n = group.idx.size();
        auto fill = [&](double lambda) {
            double usage = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t q = group.idx[i];
                alloc.bits[q] = detail_alloc::box_minimizer(problem.weights[q],
                                                            lambda * group.w[i], b_min, b_max);
                usage += group.w[i] * alloc.bits[q];
            }
            return usage;
        };

        bool all_zero = true;
        for (std::size_t q : group.idx) all_zero &= problem.weights[q] == 0.0;
        if (all_zero) {
            // Flat objective: meet the budget with the uniform allocation.
            for (std::size_t q : group.idx) alloc.bits[q] = group.beta;
            if (lambdas_out) lambdas_out->push_back(0.0);
            continue;
        }

        const double tol = 1e-6 * group.budget;
        if (fill(0.0) <= group.budget + tol) {
            if (lambdas_out) lambdas_out->push_back(0.0);
            continue;  // budget does not bind
        }

        double lam_hi = 1.0;
        int doublings = 0;
        while (fill(lam_hi) > group.budget && doublings++ < 200) lam_hi *= 2.0;
        if (doublings > 200) {
            throw NumericError("fractional_solve: could not bracket the multiplier");
        }
        double lam_lo = lam_hi > 1.0 ? lam_hi / 2.0 : 0.0;
        double lambda = lam_hi;
        double usage = fill(lam_hi);
        int iters = 0;
        while (std::abs(usage - group.budget) > tol) {
            if (++iters > 200) {
                throw NumericError("fractional_solve: no convergence; budget residual " +
                                   std::to_string(usage - group.budget));
            }
            const double mid = 0.5 * (lam_lo + lam_hi);
            const double u = fill(mid);
            if (u > group.budget) lam_lo = mid;
            else lam_hi = mid;
            lambda = mid;
            usage = u;
        }
        if (lambdas_out) lambdas_out->push_back(lambda);
    }
    return alloc;
}

/// Project a fractional allocation to integers: floor every coordinate, then
/// spend the reclaimed budget with greedy max-gain increments. The constraint
/// holds at every intermediate step.
inline BitAllocation round_to_integer(const BitAllocation& frac, const AllocationProblem& problem,
                                      const ResourceConstraint& constraint) {
    problem.validate();
    validate_constraint(constraint);
    if (frac.bits.size() != problem.size()) {
        throw ContractError("round_to_integer: allocation and problem sizes disagree");
    }
    if (constraint_violation(frac, problem, constraint) > 1e-6) {
        throw ContractError("round_to_integer: input allocation violates the constraint");
    }
    const int b_min = constraint_b_min(constraint);
    const int b_max = constraint_b_max(constraint);
    BitAllocation alloc;
    alloc.integral = true;
    alloc.bits.resize(problem.size());
    for (std::size_t q = 0; q < problem.size(); ++q) {
        alloc.bits[q] = std::max(static_cast<double>(b_min), std::floor(frac.bits[q] + 1e-9));
    }

    if (std::holds_alternative<AvgBitwidthConstraint>(constraint)) {
        const double beta = std::get<AvgBitwidthConstraint>(constraint).beta;
        const double cap = std::floor(beta * static_cast<double>(problem.size()) + 1e-9);
        double used = std::accumulate(alloc.bits.begin(), alloc.bits.end(), 0.0);
        while (cap - used >= 1.0) {
            detail_alloc::Candidate best;
            for (std::size_t q = 0; q < problem.size(); ++q) {
                if (alloc.bits[q] >= b_max) continue;
                detail_alloc::Candidate cand{
                    detail_alloc::marginal_gain(problem.weights[q], alloc.bits[q]),
                    alloc.bits[q], q, true};
                if (cand.beats(best)) best = cand;
            }
            if (!best.valid) break;
            alloc.bits[best.id] += 1.0;
            used += 1.0;
        }
        return alloc;
    }

    const auto& c = std::get<PerElementAvgConstraint>(constraint);
    for (QuantizerRole role : {QuantizerRole::Weight, QuantizerRole::Activation}) {
        const auto idx = detail_alloc::group_indices(problem, role);
        if (idx.empty()) continue;
        const double beta =
            role == QuantizerRole::Weight ? c.beta_weights : c.beta_activations;
        double total = 0.0, used = 0.0;
        for (std::size_t q : idx) {
            total += static_cast<double>(problem.elements[q]);
            used += alloc.bits[q] * static_cast<double>(problem.elements[q]);
        }
        double remaining = beta * total - used;
        while (true) {
            detail_alloc::Candidate best;
            for (std::size_t q : idx) {
                const double cost = static_cast<double>(problem.elements[q]);
                if (alloc.bits[q] >= b_max || cost > remaining + 1e-9) continue;
                detail_alloc::Candidate cand{
                    detail_alloc::marginal_gain(problem.weights[q], alloc.bits[q]) / cost,
                    alloc.bits[q], q, true};
                if (cand.beats(best)) best = cand;
            }
            if (!best.valid) break;
            alloc.bits[best.id] += 1.0;
            remaining -= static_cast<double>(problem.elements[best.id]);
        }
    }
    return alloc;
}

/// Exhaustive integer search, the test oracle. Returns the feasible
/// allocation with minimal objective, lexicographically lowest on ties.
inline BitAllocation brute_force(const AllocationProblem& problem,
                                 const ResourceConstraint& constraint) {
    problem.validate();
    validate_constraint(constraint);
    const int b_min = constraint_b_min(constraint);
    const int b_max = constraint_b_max(constraint);
    const std::size_t K = problem.size();
    if (K > 6 || b_max - b_min > 6) {
        throw ContractError("brute_force: search space too large (K <= 6 and b_max - b_min <= 6)");
    }

    BitAllocation current;
    current.bits.assign(K, static_cast<double>(b_min));
    current.integral = true;
    BitAllocation best;
    double best_obj = std::numeric_limits<double>::infinity();
    bool found = false;

    while (true) {
        if (constraint_violation(current, problem, constraint) <= 1e-9) {
            const double obj = allocation_objective(current, problem);
            if (!found || obj < best_obj) {
                best = current;
                best_obj = obj;
                found = true;
            }
        }
        // Lexicographic odometer over the box.
        std::size_t pos = K;
        while (pos > 0) {
            --pos;
            if (current.bits[pos] < b_max) {
                current.bits[pos] += 1.0;
                for (std::size_t p = pos + 1; p < K; ++p) {
                    current.bits[p] = static_cast<double>(b_min);
                }
                break;
            }
            if (pos == 0) {
                if (!found) throw ConstraintError("brute_force: no feasible allocation");
                return best;
            }
        }
    }
}

}  // namespace qbitopt
