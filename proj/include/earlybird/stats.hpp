#pragma once

// Classification metrics and paired comparisons between seed-aligned runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "earlybird/error.hpp"

namespace earlybird::stats {

inline constexpr double kAlpha = 0.05;

/// Largest sample size for which the Wilcoxon p-value is computed exactly.
inline constexpr std::size_t kExactWilcoxonLimit = 20;

enum class Magnitude { negligible, small, medium, large };

inline std::string_view to_string(Magnitude m) {
    switch (m) {
    case Magnitude::large:
        return "large";
    case Magnitude::medium:
        return "medium";
    case Magnitude::small:
        return "small";
    case Magnitude::negligible:
        break;
    }
    return "negligible";
}

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.empty() || predictions.size() != labels.size()) {
        throw ContractError("accuracy: need equal, non-empty prediction and label lists (got " +
                            std::to_string(predictions.size()) + " and " + std::to_string(labels.size()) + ")");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += predictions[i] == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Per-class F1 averaged with weights equal to each class's true support.
/// A class with no true and no predicted members has F1 = 0 and weight 0.
inline double weighted_f1(std::span<const int> predictions, std::span<const int> labels, std::size_t num_classes) {
    if (predictions.empty() || predictions.size() != labels.size()) {
        throw ContractError("weighted_f1: need equal, non-empty prediction and label lists");
    }
    std::vector<std::size_t> tp(num_classes, 0), predicted(num_classes, 0), support(num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        const int p = predictions[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes || p < 0 ||
            static_cast<std::size_t>(p) >= num_classes) {
            throw ContractError("weighted_f1: class index outside [0, " + std::to_string(num_classes) + ")");
        }
        ++support[static_cast<std::size_t>(y)];
        ++predicted[static_cast<std::size_t>(p)];
        if (y == p) {
            ++tp[static_cast<std::size_t>(y)];
        }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (support[c] == 0) {
            continue;
        }
        // F1 = 2TP / (2TP + FP + FN) = 2TP / (predicted + support)
        const double f1 = 2.0 * static_cast<double>(tp[c]) / static_cast<double>(predicted[c] + support[c]);
        total += f1 * static_cast<double>(support[c]);
    }
    return total / static_cast<double>(labels.size());
}

namespace detail {

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

} // namespace detail

struct WilcoxonResult {
    double p_value = 1.0;
    double w_plus = 0.0;
    double w_minus = 0.0;
    std::size_t n = 0; ///< pairs left after dropping zero differences
    bool exact = true;
};

/// Two-sided Wilcoxon signed-rank test on candidate - baseline.
///
/// Zero differences are discarded, the remaining absolute differences get
/// mid-ranks, and W = min(W+, W-). For n <= 20 the p-value is the exact
/// probability, under the 2^n equally likely sign assignments, of a statistic
/// at most as large as W; above that a tie-corrected normal approximation with
/// continuity correction is used.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> baseline, std::span<const double> candidate) {
    if (baseline.size() != candidate.size()) {
        throw ContractError("wilcoxon_signed_rank: paired samples of different lengths (" +
                            std::to_string(baseline.size()) + " vs " + std::to_string(candidate.size()) + ")");
    }
    std::vector<double> diffs;
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        const double d = candidate[i] - baseline[i];
        if (d != 0.0) {
            diffs.push_back(d);
        }
    }
    WilcoxonResult r;
    r.n = diffs.size();
    if (r.n == 0) {
        return r;
    }

    std::vector<std::size_t> order(r.n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(diffs[a]) < std::abs(diffs[b]); });

    // Ranks are kept doubled so that mid-ranks stay integral.
    std::vector<std::uint64_t> rank2(r.n);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < r.n;) {
        std::size_t j = i;
        while (j + 1 < r.n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) {
            ++j;
        }
        const std::uint64_t mid2 = static_cast<std::uint64_t>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            rank2[order[k]] = mid2;
        }
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }

    std::uint64_t plus2 = 0, total2 = 0;
    for (std::size_t i = 0; i < r.n; ++i) {
        total2 += rank2[i];
        if (diffs[i] > 0) {
            plus2 += rank2[i];
        }
    }
    r.w_plus = static_cast<double>(plus2) / 2.0;
    r.w_minus = static_cast<double>(total2 - plus2) / 2.0;
    const std::uint64_t w2 = std::min(plus2, total2 - plus2);

    if (r.n <= kExactWilcoxonLimit) {
        // Count sign assignments by their doubled positive-rank sum.
        std::vector<double> ways(total2 + 1, 0.0);
        ways[0] = 1.0;
        std::uint64_t reach = 0;
        for (std::uint64_t rk : rank2) {
            for (std::uint64_t s = reach + 1; s-- > 0;) {
                if (ways[s] != 0.0) {
                    ways[s + rk] += ways[s];
                }
            }
            reach += rk;
        }
        // min(S, total - S) <= w  <=>  S <= w or S >= total - w
        double extreme = 0.0;
        for (std::uint64_t s = 0; s <= total2; ++s) {
            if (s <= w2 || s >= total2 - w2) {
                extreme += ways[s];
            }
        }
        r.p_value = std::min(1.0, extreme / std::ldexp(1.0, static_cast<int>(r.n)));
        r.exact = true;
        return r;
    }

    const double n = static_cast<double>(r.n);
    const double mean = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    const double w = static_cast<double>(w2) / 2.0;
    const double z = std::max(0.0, std::abs(w - mean) - 0.5) / std::sqrt(var);
    r.p_value = std::min(1.0, 2.0 * detail::normal_sf(z));
    r.exact = false;
    return r;
}

struct EffectSize {
    double a12 = 0.5;
    Magnitude magnitude = Magnitude::negligible;
};

/// Magnitude of an A12 value from max(a12, 1 - a12) against 0.71 / 0.64 / 0.56.
inline Magnitude a12_magnitude(double a12) {
    const double m = std::max(a12, 1.0 - a12);
    if (m >= 0.71) {
        return Magnitude::large;
    }
    if (m >= 0.64) {
        return Magnitude::medium;
    }
    if (m >= 0.56) {
        return Magnitude::small;
    }
    return Magnitude::negligible;
}

/// Vargha-Delaney A12: probability that a candidate value exceeds a baseline
/// value, counting ties as one half.
inline EffectSize a12(std::span<const double> candidate, std::span<const double> baseline) {
    if (candidate.empty() || baseline.empty()) {
        throw ContractError("a12: both samples must be non-empty");
    }
    std::vector<double> sorted(baseline.begin(), baseline.end());
    std::sort(sorted.begin(), sorted.end());
    double wins = 0.0;
    for (double c : candidate) {
        const auto lo = std::lower_bound(sorted.begin(), sorted.end(), c);
        const auto hi = std::upper_bound(lo, sorted.end(), c);
        wins += static_cast<double>(lo - sorted.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    EffectSize e;
    e.a12 = wins / (static_cast<double>(candidate.size()) * static_cast<double>(baseline.size()));
    e.magnitude = a12_magnitude(e.a12);
    return e;
}

/// Ratio of baseline to candidate epoch time.
inline double speedup(double baseline_seconds, double candidate_seconds) {
    if (!(baseline_seconds > 0.0) || !(candidate_seconds > 0.0)) {
        throw ContractError("speedup: epoch times must be positive");
    }
    return baseline_seconds / candidate_seconds;
}

/// "3.3x" style, one decimal.
inline std::string format_speedup(double factor) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1fx", factor);
    return buf;
}

/// "m:ss" with seconds rounded to the nearest integer.
inline std::string format_mmss(double seconds) {
    const auto total = static_cast<long long>(std::llround(seconds));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld:%02lld", total / 60, total % 60);
    return buf;
}

struct ComparisonResult {
    double mean_diff = 0.0; ///< candidate minus baseline
    double p_value = 1.0;
    bool significant = false;
    double a12 = 0.5;
    Magnitude magnitude = Magnitude::negligible;
    std::size_t n = 0;
};

/// Compares seed-aligned metric values (element i of both lists comes from
/// the same seed).
inline ComparisonResult compare(std::span<const double> baseline, std::span<const double> candidate) {
    if (baseline.empty() || baseline.size() != candidate.size()) {
        throw ContractError("compare: need equal, non-empty seed-aligned samples (got " +
                            std::to_string(baseline.size()) + " and " + std::to_string(candidate.size()) + ")");
    }
    ComparisonResult r;
    const double n = static_cast<double>(baseline.size());
    r.mean_diff = std::accumulate(candidate.begin(), candidate.end(), 0.0) / n -
                  std::accumulate(baseline.begin(), baseline.end(), 0.0) / n;
    r.p_value = wilcoxon_signed_rank(baseline, candidate).p_value;
    r.significant = r.p_value < kAlpha;
    const auto e = a12(candidate, baseline);
    r.a12 = e.a12;
    r.magnitude = e.magnitude;
    r.n = baseline.size();
    return r;
}

} // namespace earlybird::stats
