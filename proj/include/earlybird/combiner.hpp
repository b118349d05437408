#pragma once

// The twelve ways of turning the per-layer encoder states of a batch into one
// H-vector per sequence.
//
// All operations accept a leading batch axis: block states are [B, L, S, H],
// one layer is [B, S, H], per-layer vectors are [B, L, H]. Unbatched inputs
// ([L, S, H], [S, H], [L, H]) work too since the reduced axis is counted from
// the end.

#include <array>
#include <charconv>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "earlybird/diffcore.hpp"
#include "earlybird/encoder.hpp"
#include "earlybird/error.hpp"

namespace earlybird::combiner {

enum class Strategy { i, ii, iii, iv, v, vi, vii, viii, ix, x, xi, xii };
enum class Scope { all_tokens, code_tokens };

inline constexpr std::array<std::string_view, 12> kStrategyNames{"i",  "ii", "iii", "iv", "v",  "vi",
                                                                  "vii", "viii", "ix", "x", "xi", "xii"};

inline std::string_view to_string(Strategy s) { return kStrategyNames[static_cast<std::size_t>(s)]; }
inline std::string_view to_string(Scope s) { return s == Scope::code_tokens ? "code" : "all"; }

inline bool takes_layer(Strategy s) { return s == Strategy::ii || s == Strategy::v || s == Strategy::ix || s == Strategy::xii; }

/// Strategies that look at token positions other than CLS.
inline bool uses_scope(Strategy s) { return s >= Strategy::v && s <= Strategy::xi; }

inline bool uses_token_weights(Strategy s) {
    return s == Strategy::vii || s == Strategy::ix || s == Strategy::x || s == Strategy::xi;
}

inline bool uses_layer_weights(Strategy s) {
    return s == Strategy::iv || s == Strategy::viii || s == Strategy::x || s == Strategy::xi;
}

struct CombinationSpec {
    Strategy strategy = Strategy::i;
    std::optional<std::size_t> layer; ///< 1-based
    Scope scope = Scope::all_tokens;

    bool is_baseline() const { return strategy == Strategy::i; }
    bool uses_pruned_model() const { return strategy == Strategy::xii; }

    /// Checks the layer constraints against a model with `num_layers` blocks.
    void validate(std::size_t num_layers) const {
        const auto name = std::string(to_string(strategy));
        if (!takes_layer(strategy)) {
            if (layer) {
                throw ConfigError("strategy " + name + " takes no layer");
            }
            return;
        }
        if (!layer) {
            throw ConfigError("strategy " + name + " needs a layer");
        }
        const std::size_t hi = (strategy == Strategy::v || strategy == Strategy::ix) ? num_layers : num_layers - 1;
        if (*layer < 1 || *layer > hi) {
            throw ConfigError("strategy " + name + " layer " + std::to_string(*layer) + " outside [1, " +
                              std::to_string(hi) + "] for a " + std::to_string(num_layers) + "-layer model");
        }
    }

    bool operator==(const CombinationSpec&) const = default;
};

/// Canonical text form: `<strategy>[:layer=<l>][:scope=<all|code>]`, the
/// scope written only for strategies that use it.
inline std::string format_spec(const CombinationSpec& s) {
    std::string out(to_string(s.strategy));
    if (s.layer) {
        out += ":layer=" + std::to_string(*s.layer);
    }
    if (uses_scope(s.strategy)) {
        out += ":scope=";
        out += to_string(s.scope);
    }
    return out;
}

inline CombinationSpec parse_spec(std::string_view text) {
    auto fail = [&](const std::string& why) -> ConfigError {
        return ConfigError("bad combination '" + std::string(text) + "': " + why);
    };
    std::vector<std::string_view> parts;
    for (std::size_t pos = 0;;) {
        const auto next = text.find(':', pos);
        parts.push_back(text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
        if (next == std::string_view::npos) {
            break;
        }
        pos = next + 1;
    }
    CombinationSpec spec;
    bool found = false;
    for (std::size_t k = 0; k < kStrategyNames.size(); ++k) {
        if (parts[0] == kStrategyNames[k]) {
            spec.strategy = static_cast<Strategy>(k);
            found = true;
        }
    }
    if (!found) {
        throw fail("unknown strategy '" + std::string(parts[0]) + "'");
    }
    bool seen_layer = false, seen_scope = false;
    for (std::size_t k = 1; k < parts.size(); ++k) {
        const auto part = parts[k];
        if (part.starts_with("layer=") && !seen_layer) {
            seen_layer = true;
            const auto digits = part.substr(6);
            std::size_t l = 0;
            const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), l);
            if (ec != std::errc{} || end != digits.data() + digits.size() || digits.empty()) {
                throw fail("layer must be a positive integer");
            }
            spec.layer = l;
        } else if (part.starts_with("scope=") && !seen_scope) {
            seen_scope = true;
            const auto v = part.substr(6);
            if (v == "all") {
                spec.scope = Scope::all_tokens;
            } else if (v == "code") {
                spec.scope = Scope::code_tokens;
            } else {
                throw fail("scope must be 'all' or 'code'");
            }
        } else {
            throw fail("unexpected field '" + std::string(part) + "'");
        }
    }
    if (spec.layer.has_value() != takes_layer(spec.strategy)) {
        throw fail(takes_layer(spec.strategy) ? "missing layer" : "strategy takes no layer");
    }
    if (!uses_scope(spec.strategy)) {
        spec.scope = Scope::all_tokens;
    }
    return spec;
}

/// Every valid spec for an L-layer model: baseline first, then the other
/// strategies in order, layers ascending, all-tokens before code-tokens.
inline std::vector<CombinationSpec> all_specs(std::size_t num_layers) {
    std::vector<CombinationSpec> out;
    for (std::size_t k = 0; k < kStrategyNames.size(); ++k) {
        const auto s = static_cast<Strategy>(k);
        std::vector<std::optional<std::size_t>> layers{std::nullopt};
        if (takes_layer(s)) {
            layers.clear();
            const std::size_t hi = (s == Strategy::v || s == Strategy::ix) ? num_layers : num_layers - 1;
            for (std::size_t l = 1; l <= hi; ++l) {
                layers.push_back(l);
            }
        }
        for (const auto& l : layers) {
            out.push_back({s, l, Scope::all_tokens});
            if (uses_scope(s)) {
                out.push_back({s, l, Scope::code_tokens});
            }
        }
    }
    return out;
}

/// Learnable weights added by a spec: 0, L, S or S + L.
inline std::size_t added_param_count(const CombinationSpec& spec, std::size_t num_layers, std::size_t seq_len) {
    return (uses_token_weights(spec.strategy) ? seq_len : 0) + (uses_layer_weights(spec.strategy) ? num_layers : 0);
}

/// Token weights (length S, shared by all layers) and layer weights (length L).
/// Only the ones the spec uses are allocated; both start at 1/n.
struct CombinerParams {
    Tensor token_weights;
    Tensor layer_weights;

    static CombinerParams for_spec(const CombinationSpec& spec, std::size_t num_layers, std::size_t seq_len) {
        CombinerParams p;
        if (uses_token_weights(spec.strategy)) {
            p.token_weights = Tensor::full({seq_len}, 1.0 / static_cast<double>(seq_len), true);
        }
        if (uses_layer_weights(spec.strategy)) {
            p.layer_weights = Tensor::full({num_layers}, 1.0 / static_cast<double>(num_layers), true);
        }
        return p;
    }

    ParameterSet parameters() const {
        ParameterSet ps;
        if (token_weights.defined()) {
            ps.add("combiner.token_weights", token_weights);
        }
        if (layer_weights.defined()) {
            ps.add("combiner.layer_weights", layer_weights);
        }
        return ps;
    }
};

// ---------------------------------------------------------------------------
// Building blocks

namespace detail {

inline std::size_t axis_from_end(const Tensor& x, std::size_t k, const char* op) {
    if (x.rank() < k) {
        throw DimensionError(std::string(op) + ": input of shape " + shape_str(x.shape()) + " has too few axes");
    }
    return x.rank() - k;
}

/// Repeats a per-sequence token mask (B*S) for every layer (B*L*S).
inline std::vector<std::uint8_t> repeat_mask(std::span<const std::uint8_t> mask, std::size_t batch,
                                             std::size_t layers, std::size_t seq) {
    std::vector<std::uint8_t> out;
    out.reserve(batch * layers * seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t l = 0; l < layers; ++l) {
            out.insert(out.end(), mask.begin() + static_cast<std::ptrdiff_t>(b * seq),
                       mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * seq));
        }
    }
    return out;
}

} // namespace detail

/// Output of block l (1-based): [B, S, H].
inline Tensor layer_slice(const Tensor& states, std::size_t l) {
    const auto axis = detail::axis_from_end(states, 3, "layer_slice");
    if (l < 1 || l > states.dim(axis)) {
        throw ContractError("layer " + std::to_string(l) + " outside [1, " + std::to_string(states.dim(axis)) + "]");
    }
    return select(states, axis, l - 1);
}

/// CLS row (position 0) of block l: [B, H].
inline Tensor slice_cls(const Tensor& states, std::size_t l) {
    const auto s = layer_slice(states, l);
    return select(s, s.rank() - 2, 0);
}

/// CLS rows of every block: [B, L, H].
inline Tensor cls_vectors(const Tensor& states) { return select(states, detail::axis_from_end(states, 2, "cls"), 0); }

inline Tensor pool_tokens_max(const Tensor& layer, Mask scope = {}) {
    return max_reduce(layer, detail::axis_from_end(layer, 2, "pool_tokens_max"), scope);
}

inline Tensor pool_layers_max(const Tensor& states) {
    return max_reduce(states, detail::axis_from_end(states, 3, "pool_layers_max"));
}

inline Tensor sum_tokens_weighted(const Tensor& layer, const Tensor& token_weights, Mask scope = {}) {
    return weighted_reduce(layer, token_weights, detail::axis_from_end(layer, 2, "sum_tokens_weighted"), scope);
}

inline Tensor sum_layers_weighted(const Tensor& per_layer, const Tensor& layer_weights) {
    return weighted_reduce(per_layer, layer_weights, detail::axis_from_end(per_layer, 2, "sum_layers_weighted"));
}

// ---------------------------------------------------------------------------

/// Maps the block states of a batch to [B, H].
inline Tensor combine(const encoder::LayerStates& ls, const CombinationSpec& spec, const CombinerParams& params) {
    const Tensor& x = ls.states;
    if (x.rank() != 4) {
        throw DimensionError("combine: states must be [B, L, S, H], got " + shape_str(x.shape()));
    }
    const std::size_t B = x.dim(0), L = x.dim(1), S = x.dim(2);
    const auto name = format_spec(spec);
    if (uses_token_weights(spec.strategy) &&
        (!params.token_weights.defined() || params.token_weights.numel() != S)) {
        throw ContractError("combine " + name + ": needs " + std::to_string(S) + " token weights");
    }
    if (uses_layer_weights(spec.strategy) &&
        (!params.layer_weights.defined() || params.layer_weights.numel() != L)) {
        throw ContractError("combine " + name + ": needs " + std::to_string(L) + " layer weights");
    }
    if (takes_layer(spec.strategy) && (!spec.layer || *spec.layer < 1 || *spec.layer > L)) {
        throw ContractError("combine " + name + ": layer outside [1, " + std::to_string(L) + "]");
    }

    std::span<const std::uint8_t> mask;
    if (uses_scope(spec.strategy) && spec.scope == Scope::code_tokens) {
        if (ls.code_token_mask.size() != B * S) {
            throw ContractError("combine " + name + ": code-token mask has wrong length");
        }
        mask = ls.code_token_mask;
    }
    auto per_layer_mask = [&] { return mask.empty() ? std::vector<std::uint8_t>{} : detail::repeat_mask(mask, B, L, S); };

    switch (spec.strategy) {
    case Strategy::i:
        return slice_cls(x, L);
    case Strategy::ii:
        return slice_cls(x, *spec.layer);
    case Strategy::iii:
        return max_reduce(cls_vectors(x), 1);
    case Strategy::iv:
        return sum_layers_weighted(cls_vectors(x), params.layer_weights);
    case Strategy::v:
        return pool_tokens_max(layer_slice(x, *spec.layer), mask);
    case Strategy::vi:
        return pool_tokens_max(pool_layers_max(x), mask);
    case Strategy::vii:
        return sum_tokens_weighted(pool_layers_max(x), params.token_weights, mask);
    case Strategy::viii:
        return sum_layers_weighted(max_reduce(x, 2, per_layer_mask()), params.layer_weights);
    case Strategy::ix:
        return sum_tokens_weighted(layer_slice(x, *spec.layer), params.token_weights, mask);
    case Strategy::x:
        return sum_layers_weighted(weighted_reduce(x, params.token_weights, 2, per_layer_mask()),
                                   params.layer_weights);
    case Strategy::xi:
        return sum_tokens_weighted(weighted_reduce(x, params.layer_weights, 1), params.token_weights, mask);
    case Strategy::xii:
        // States come from a model pruned to `layer` blocks.
        if (*spec.layer != L) {
            throw ContractError("combine " + name + ": expects states of a " + std::to_string(*spec.layer) +
                                "-layer model, got " + std::to_string(L));
        }
        return slice_cls(x, L);
    }
    throw ContractError("combine: unknown strategy");
}

} // namespace earlybird::combiner
