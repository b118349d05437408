#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "earlybird/combiner.hpp"
#include "test_helpers.hpp"

using namespace earlybird;
using namespace earlybird::combiner;
using earlybird::testing::Dims;
using earlybird::testing::random_params;
using earlybird::testing::random_states;
using earlybird::testing::random_tensor;

namespace {

// Straight loops over the raw [B, L, S, H] array.
std::vector<double> combine_oracle(const std::vector<double>& x, const Dims& d, const std::vector<std::uint8_t>& code,
                                   const CombinationSpec& spec, const std::vector<double>& tw,
                                   const std::vector<double>& lw) {
    const bool code_scope = uses_scope(spec.strategy) && spec.scope == Scope::code_tokens;
    auto in = [&](std::size_t b, std::size_t s) { return !code_scope || code[b * d.S + s]; };
    const double ninf = -std::numeric_limits<double>::infinity();
    std::vector<double> out(d.B * d.H, 0.0);
    for (std::size_t b = 0; b < d.B; ++b) {
        for (std::size_t h = 0; h < d.H; ++h) {
            double r = 0.0;
            auto X = [&](std::size_t l, std::size_t s) { return x[d.at(b, l, s, h)]; };
            switch (spec.strategy) {
            case Strategy::i:
                r = X(d.L - 1, 0);
                break;
            case Strategy::ii:
            case Strategy::xii:
                r = X(*spec.layer - 1, 0);
                break;
            case Strategy::iii:
                r = ninf;
                for (std::size_t l = 0; l < d.L; ++l) r = std::max(r, X(l, 0));
                break;
            case Strategy::iv:
                for (std::size_t l = 0; l < d.L; ++l) r += lw[l] * X(l, 0);
                break;
            case Strategy::v:
                r = ninf;
                for (std::size_t s = 0; s < d.S; ++s)
                    if (in(b, s)) r = std::max(r, X(*spec.layer - 1, s));
                break;
            case Strategy::vi:
                r = ninf;
                for (std::size_t l = 0; l < d.L; ++l)
                    for (std::size_t s = 0; s < d.S; ++s)
                        if (in(b, s)) r = std::max(r, X(l, s));
                break;
            case Strategy::vii:
                for (std::size_t s = 0; s < d.S; ++s) {
                    if (!in(b, s)) continue;
                    double m = ninf;
                    for (std::size_t l = 0; l < d.L; ++l) m = std::max(m, X(l, s));
                    r += tw[s] * m;
                }
                break;
            case Strategy::viii:
                for (std::size_t l = 0; l < d.L; ++l) {
                    double m = ninf;
                    for (std::size_t s = 0; s < d.S; ++s)
                        if (in(b, s)) m = std::max(m, X(l, s));
                    r += lw[l] * m;
                }
                break;
            case Strategy::ix:
                for (std::size_t s = 0; s < d.S; ++s)
                    if (in(b, s)) r += tw[s] * X(*spec.layer - 1, s);
                break;
            case Strategy::x:
            case Strategy::xi:
                for (std::size_t l = 0; l < d.L; ++l)
                    for (std::size_t s = 0; s < d.S; ++s)
                        if (in(b, s)) r += lw[l] * tw[s] * X(l, s);
                break;
            }
            out[b * d.H + h] = r;
        }
    }
    return out;
}

std::vector<double> vals(const Tensor& t) {
    if (!t.defined()) {
        return {};
    }
    return {t.values().begin(), t.values().end()};
}

} // namespace

TEST(Spec, ParseFormatRoundTrip) {
    for (const auto& s : all_specs(12)) {
        EXPECT_NO_THROW(s.validate(12));
        EXPECT_EQ(parse_spec(format_spec(s)), s) << format_spec(s);
    }
    EXPECT_EQ(format_spec(parse_spec("ii:layer=3")), "ii:layer=3");
    EXPECT_EQ(format_spec(parse_spec("v:layer=12:scope=code")), "v:layer=12:scope=code");
    EXPECT_EQ(format_spec(parse_spec("x")), "x:scope=all");
    EXPECT_EQ(format_spec(parse_spec("iii:scope=code")), "iii");
}

TEST(Spec, RejectsMalformedText) {
    for (const char* bad : {"", "xiii", "ii", "i:layer=2", "v:layer=x", "v:layer=", "v:layer=2:scope=some",
                            "vi:color=red", "v:layer=1:layer=2", "ii:layer=-1"}) {
        EXPECT_THROW((void)parse_spec(bad), ConfigError) << bad;
    }
}

TEST(Spec, LayerRanges) {
    EXPECT_THROW(parse_spec("ii:layer=12").validate(12), ConfigError);
    EXPECT_NO_THROW(parse_spec("ii:layer=11").validate(12));
    EXPECT_NO_THROW(parse_spec("v:layer=12").validate(12));
    EXPECT_THROW(parse_spec("ix:layer=13").validate(12), ConfigError);
    EXPECT_THROW(parse_spec("xii:layer=12").validate(12), ConfigError);
    EXPECT_THROW(parse_spec("v:layer=0").validate(12), ConfigError);
}

TEST(Spec, GridSize) {
    // 1 + 3 + 1 + 1 + 8 + 2 + 2 + 2 + 8 + 2 + 2 + 3
    EXPECT_EQ(all_specs(4).size(), 35u);
    EXPECT_TRUE(all_specs(4).front().is_baseline());
}

TEST(AddedParams, Counts) {
    EXPECT_EQ(added_param_count(parse_spec("v:layer=3"), 12, 512), 0u);
    EXPECT_EQ(added_param_count(parse_spec("x"), 12, 512), 524u);
    EXPECT_EQ(added_param_count(parse_spec("xi"), 12, 512), 524u);
    EXPECT_EQ(added_param_count(parse_spec("iv"), 12, 512), 12u);
    EXPECT_EQ(added_param_count(parse_spec("viii"), 12, 512), 12u);
    EXPECT_EQ(added_param_count(parse_spec("vii"), 12, 512), 512u);
    EXPECT_EQ(added_param_count(parse_spec("ix:layer=2"), 12, 512), 512u);
    for (const char* s : {"i", "ii:layer=1", "iii", "vi", "xii:layer=2"}) {
        EXPECT_EQ(added_param_count(parse_spec(s), 12, 512), 0u) << s;
    }
    for (const auto& s : all_specs(4)) {
        EXPECT_EQ(CombinerParams::for_spec(s, 4, 16).parameters().total_elements(), added_param_count(s, 4, 16));
    }
}

TEST(Ops, SliceClsOfConstantLayers) {
    const std::size_t L = 3, S = 4, H = 2;
    std::vector<double> v(L * S * H);
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t k = 0; k < S * H; ++k) v[l * S * H + k] = static_cast<double>(l + 1);
    const Tensor x({L, S, H}, v);
    for (std::size_t l = 1; l <= L; ++l) {
        EXPECT_EQ(vals(slice_cls(x, l)), std::vector<double>(H, static_cast<double>(l)));
    }
    EXPECT_THROW((void)slice_cls(x, 0), ContractError);
    EXPECT_THROW((void)slice_cls(x, L + 1), ContractError);
    const auto pooled = pool_layers_max(x);
    EXPECT_EQ(vals(pooled), std::vector<double>(S * H, 3.0));
}

TEST(Ops, SliceClsGradientIsSparse) {
    Rng rng(1);
    const auto x = random_tensor(rng, {3, 4, 2}, true);
    backward(sum(slice_cls(x, 2)));
    const auto g = x.grad();
    for (std::size_t k = 0; k < g.size(); ++k) {
        const bool hit = k >= 8 && k < 10;
        EXPECT_DOUBLE_EQ(g[k], hit ? 1.0 : 0.0) << k;
    }
}

TEST(Ops, PoolTokensMaxExamples) {
    const Tensor x({2, 2}, {1, -3, 0, 5});
    EXPECT_EQ(vals(pool_tokens_max(x)), (std::vector<double>{1, 5}));
    const std::vector<std::uint8_t> only_second{0, 1};
    EXPECT_EQ(vals(pool_tokens_max(x, only_second)), (std::vector<double>{0, 5}));
    const std::vector<std::uint8_t> none{0, 0};
    EXPECT_THROW((void)pool_tokens_max(x, none), InvalidMaskError);
}

TEST(Ops, WeightedSumExamples) {
    Rng rng(2);
    const auto x = random_tensor(rng, {5, 3});
    const auto mean = sum_tokens_weighted(x, Tensor::full({5}, 0.2));
    for (std::size_t h = 0; h < 3; ++h) {
        double m = 0;
        for (std::size_t s = 0; s < 5; ++s) m += x.values()[s * 3 + h] / 5.0;
        EXPECT_NEAR(mean.values()[h], m, 1e-15);
    }
    const auto at_cls = sum_tokens_weighted(x, Tensor({5}, {1, 0, 0, 0, 0}));
    EXPECT_EQ(vals(at_cls), (std::vector<double>{x.values()[0], x.values()[1], x.values()[2]}));
    EXPECT_THROW((void)sum_tokens_weighted(x, Tensor::full({4}, 0.25)), DimensionError);
    EXPECT_THROW((void)sum_layers_weighted(x, Tensor::full({4}, 0.25)), DimensionError);
}

TEST(Combine, MatchesLoopOracleForEverySpec) {
    Rng rng(3);
    const Dims d{3, 4, 7, 5};
    for (int trial = 0; trial < 5; ++trial) {
        const auto ls = random_states(rng, d);
        for (const auto& spec : all_specs(d.L)) {
            if (spec.uses_pruned_model()) {
                continue;
            }
            const auto p = random_params(rng, spec, d.L, d.S);
            const auto got = combine(ls, spec, p);
            EXPECT_EQ(got.shape(), (Shape{d.B, d.H})) << format_spec(spec);
            const auto want = combine_oracle(vals(ls.states), d, ls.code_token_mask, spec, vals(p.token_weights),
                                             vals(p.layer_weights));
            for (std::size_t k = 0; k < want.size(); ++k) {
                EXPECT_NEAR(got.values()[k], want[k], 1e-12) << format_spec(spec);
            }
        }
    }
}

TEST(Combine, BaselineEquivalence) {
    Rng rng(4);
    const Dims d{2, 4, 6, 3};
    const auto ls = random_states(rng, d);
    const auto base = vals(combine(ls, parse_spec("i"), {}));
    EXPECT_EQ(base, vals(combine(ls, {Strategy::ii, 4, Scope::all_tokens}, {})));
    EXPECT_EQ(base, vals(combine(ls, {Strategy::xii, 4, Scope::all_tokens}, {})));

    // (xii) on a pruned model's states: states must have exactly l layers.
    EXPECT_THROW((void)combine(ls, parse_spec("xii:layer=2"), {}), ContractError);
}

TEST(Combine, GlobalMaxAndCommutativity) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t L = 1 + rng.below(4), S = 1 + rng.below(5), H = 1 + rng.below(3);
        const auto x = random_tensor(rng, {L, S, H});
        const auto a = pool_tokens_max(pool_layers_max(x));
        const auto b = max_reduce(pool_tokens_max(x), 0);
        ASSERT_EQ(vals(a), vals(b));
        for (std::size_t h = 0; h < H; ++h) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = h; k < x.numel(); k += H) m = std::max(m, x.values()[k]);
            ASSERT_EQ(a.values()[h], m);
        }
    }
}

TEST(Combine, SingleLayerIdentityAndUniformReductions) {
    Rng rng(6);
    const Dims d{2, 3, 5, 4};
    const auto ls = random_states(rng, d);
    // (xi) with uniform layer weights and one-hot CLS token weight == layer-mean of CLS
    auto p = CombinerParams::for_spec(parse_spec("xi"), d.L, d.S);
    auto tw = p.token_weights.mutable_values();
    std::fill(tw.begin(), tw.end(), 0.0);
    tw[0] = 1.0;
    const auto got = combine(ls, parse_spec("xi:scope=all"), p);
    for (std::size_t b = 0; b < d.B; ++b)
        for (std::size_t h = 0; h < d.H; ++h) {
            double m = 0;
            for (std::size_t l = 0; l < d.L; ++l) m += ls.states.values()[d.at(b, l, 0, h)] / 3.0;
            EXPECT_NEAR(got.values()[b * d.H + h], m, 1e-15);
        }
    // one-hot layer weight at L over CLS == baseline
    auto q = CombinerParams::for_spec(parse_spec("iv"), d.L, d.S);
    auto lw = q.layer_weights.mutable_values();
    std::fill(lw.begin(), lw.end(), 0.0);
    lw[d.L - 1] = 1.0;
    EXPECT_EQ(vals(combine(ls, parse_spec("iv"), q)), vals(combine(ls, parse_spec("i"), {})));
}

TEST(Combine, CodeScopeIgnoresExcludedRows) {
    Rng rng(7);
    const Dims d{3, 3, 8, 4};
    for (int trial = 0; trial < 20; ++trial) {
        const auto ls = random_states(rng, d);
        auto perturbed = ls;
        auto v = vals(ls.states);
        for (std::size_t b = 0; b < d.B; ++b)
            for (std::size_t s = 0; s < d.S; ++s)
                if (!ls.code_token_mask[b * d.S + s])
                    for (std::size_t l = 0; l < d.L; ++l)
                        for (std::size_t h = 0; h < d.H; ++h) v[d.at(b, l, s, h)] = 100.0 * rng.normal();
        perturbed.states = Tensor(ls.states.shape(), v);
        for (const auto& spec : all_specs(d.L)) {
            if (!uses_scope(spec.strategy) || spec.scope != Scope::code_tokens) {
                continue;
            }
            const auto p = random_params(rng, spec, d.L, d.S);
            EXPECT_EQ(vals(combine(ls, spec, p)), vals(combine(perturbed, spec, p))) << format_spec(spec);
        }
    }
}

TEST(Combine, ParamInconsistencyIsContractError) {
    Rng rng(8);
    const Dims d{1, 3, 5, 2};
    const auto ls = random_states(rng, d);
    EXPECT_THROW((void)combine(ls, parse_spec("x"), {}), ContractError);
    EXPECT_THROW((void)combine(ls, parse_spec("x"), CombinerParams::for_spec(parse_spec("x"), 3, 6)), ContractError);
    EXPECT_THROW((void)combine(ls, parse_spec("iv"), CombinerParams::for_spec(parse_spec("vii"), 3, 5)),
                 ContractError);
    EXPECT_THROW((void)combine(ls, {Strategy::v, 4, Scope::all_tokens}, {}), ContractError);
}

TEST(Combine, FiniteDifferenceOnWeightedSpecs) {
    Rng rng(9);
    const Dims d{2, 3, 5, 3};
    for (const char* text : {"iv", "vii:scope=code", "viii:scope=all", "ix:layer=2:scope=code", "x:scope=code",
                             "xi:scope=all", "vi:scope=code", "iii"}) {
        const auto spec = parse_spec(text);
        auto ls = random_states(rng, d, true);
        auto p = random_params(rng, spec, d.L, d.S);
        const auto probe = random_tensor(rng, {d.B, d.H});
        ParameterSet params = p.parameters();
        params.add("states", ls.states);
        const auto r = finite_difference_check([&] { return sum(mul(combine(ls, spec, p), probe)); }, params);
        EXPECT_LE(r.max_relative_error, 1e-4) << text << " " << r.worst_parameter;
        for (const Tensor* w : {&p.token_weights, &p.layer_weights}) {
            if (w->defined()) {
                params.zero_grad();
                backward(sum(mul(combine(ls, spec, p), probe)));
                const auto g = w->grad();
                EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) << text;
            }
        }
    }
}

TEST(Combine, SharedTokenWeightsCollectEveryLayer) {
    Rng rng(10);
    const Dims d{2, 3, 4, 3};
    const auto ls = random_states(rng, d);
    const auto spec = parse_spec("x:scope=all");
    auto p = random_params(rng, spec, d.L, d.S);
    const auto probe = random_tensor(rng, {d.B, d.H});
    backward(sum(mul(combine(ls, spec, p), probe)));
    const auto g = p.token_weights.grad();
    for (std::size_t s = 0; s < d.S; ++s) {
        double want = 0.0;
        for (std::size_t l = 0; l < d.L; ++l) {
            double per_layer = 0.0;
            for (std::size_t b = 0; b < d.B; ++b)
                for (std::size_t h = 0; h < d.H; ++h)
                    per_layer += probe.values()[b * d.H + h] * ls.states.values()[d.at(b, l, s, h)];
            want += p.layer_weights.values()[l] * per_layer;
        }
        EXPECT_NEAR(g[s], want, 1e-12);
    }
}
