#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "earlybird/diffcore.hpp"
#include "test_helpers.hpp"

using namespace earlybird;
using earlybird::testing::random_mask;
using earlybird::testing::random_tensor;
using earlybird::testing::to_vec;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += a.values()[i * k + p] * b.values()[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    return c;
}

} // namespace

TEST(Matmul, IdentityAndHandComputed) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(to_vec(matmul(a, eye)), (std::vector<double>{1, 2, 3, 4}));

    Tensor row({1, 2}, {1, 2});
    Tensor col({2, 1}, {3, 4});
    EXPECT_EQ(to_vec(matmul(row, col)), std::vector<double>{11});
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_tensor(rng, {5, 7});
        auto b = random_tensor(rng, {7, 3});
        const auto got = to_vec(matmul(a, b));
        const auto want = naive_matmul(a, b);
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-12);
        }
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a({2, 3}, std::vector<double>(6, 1.0));
    Tensor b({2, 3}, std::vector<double>(6, 1.0));
    try {
        (void)matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    }
}

TEST(Softmax, AnalyticValues) {
    auto s = softmax(Tensor({2}, {0.0, 0.0}), 0);
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);

    s = softmax(Tensor({2}, {0.0, std::log(3.0)}), 0);
    EXPECT_NEAR(s[0], 0.25, 1e-15);
    EXPECT_NEAR(s[1], 0.75, 1e-15);

    s = softmax(Tensor({2}, {1000.0, 1000.0}), 0);
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, SumsToOneAndShiftInvariantOnEveryAxis) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Shape shape{1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(3)};
        auto x = random_tensor(rng, shape, false, 5.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            auto y = softmax(x, axis);
            ASSERT_EQ(y.shape(), shape);
            const auto s = detail::split_axis(shape, axis, "t");
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    double total = 0.0;
                    for (std::size_t t = 0; t < s.n; ++t) {
                        const double v = y[(o * s.n + t) * s.inner + i];
                        EXPECT_GE(v, 0.0);
                        total += v;
                    }
                    EXPECT_NEAR(total, 1.0, 1e-12);
                }
            }
            auto shifted = softmax(add(x, Tensor::full(shape, 123.5)), axis);
            for (std::size_t k = 0; k < y.numel(); ++k) {
                EXPECT_NEAR(shifted[k], y[k], 1e-12);
            }
        }
    }
}

TEST(Softmax, InvalidAxis) {
    EXPECT_THROW((void)softmax(Tensor({3}, {1, 2, 3}), 1), DimensionError);
}

TEST(LayerNorm, ConstantAndNormalizedInputs) {
    Tensor ones({3}, {1, 1, 1});
    Tensor zeros({3}, {0, 0, 0});
    auto y = layer_norm(Tensor({3}, {5, 5, 5}), ones, zeros, 1e-12);
    for (double v : y.values()) {
        EXPECT_DOUBLE_EQ(v, 0.0);
    }
    y = layer_norm(Tensor({2}, {1, -1}), Tensor({2}, {1, 1}), Tensor({2}, {0, 0}), 1e-300);
    EXPECT_NEAR(y[0], 1.0, 1e-15);
    EXPECT_NEAR(y[1], -1.0, 1e-15);
}

TEST(LayerNorm, MatchesDirectFormula) {
    Rng rng(3);
    auto x = random_tensor(rng, {4, 9});
    auto gamma = random_tensor(rng, {9});
    auto beta = random_tensor(rng, {9});
    const double eps = 1e-5;
    auto y = layer_norm(x, gamma, beta, eps);
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            mean += x[r * 9 + j];
        }
        mean /= 9.0;
        double var = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            var += (x[r * 9 + j] - mean) * (x[r * 9 + j] - mean);
        }
        var /= 9.0;
        for (std::size_t j = 0; j < 9; ++j) {
            const double want = (x[r * 9 + j] - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
            EXPECT_NEAR(y[r * 9 + j], want, 1e-12);
        }
    }
    EXPECT_THROW((void)layer_norm(x, Tensor::full({8}, 1.0), beta), DimensionError);
}

TEST(MaxReduce, HandComputedAndIdentity) {
    Tensor x({2, 2}, {1, -3, 0, 5});
    EXPECT_EQ(to_vec(max_reduce(x, 0)), (std::vector<double>{1, 5}));

    const std::vector<std::uint8_t> only_second{0, 1};
    EXPECT_EQ(to_vec(max_reduce(x, 0, only_second)), (std::vector<double>{0, 5}));

    const std::vector<std::uint8_t> none{0, 0};
    EXPECT_THROW((void)max_reduce(x, 0, none), InvalidMaskError);
}

TEST(MaxReduce, InvariantToExcludedPositions) {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(6);
        const std::size_t h = 1 + rng.below(4);
        auto x = random_tensor(rng, {n, h});
        auto mask = random_mask(rng, n, 0.5);
        mask[rng.below(n)] = 1;
        auto base = max_reduce(x, 0, mask);
        auto perturbed = x.detach();
        auto pv = perturbed.mutable_values();
        for (std::size_t t = 0; t < n; ++t) {
            if (!mask[t]) {
                for (std::size_t i = 0; i < h; ++i) {
                    pv[t * h + i] = rng.normal() * 1e3;
                }
            }
        }
        EXPECT_EQ(to_vec(max_reduce(perturbed, 0, mask)), to_vec(base));
    }
}

TEST(MaxReduce, NegationIdentityWithMin) {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_tensor(rng, {3, 4, 5});
        const std::size_t axis = rng.below(3);
        auto lhs = max_reduce(x, axis);
        auto rhs = neg(min_reduce(neg(x), axis));
        EXPECT_EQ(to_vec(lhs), to_vec(rhs));
    }
}

TEST(MaxReduce, TieRoutesGradientToFirstPosition) {
    Tensor x({3, 1}, {2.0, 2.0, 1.0}, true);
    auto loss = sum(max_reduce(x, 0));
    backward(loss);
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1.0, 0.0, 0.0}));
}

TEST(WeightedReduce, MeanAndSelection) {
    Tensor tokens({2, 2}, {2, 0, 0, 2});
    EXPECT_EQ(to_vec(weighted_reduce(tokens, Tensor({2}, {0.5, 0.5}), 0)), (std::vector<double>{1, 1}));
    EXPECT_EQ(to_vec(weighted_reduce(tokens, Tensor({2}, {0.0, 1.0}), 0)), (std::vector<double>{0, 2}));
    EXPECT_THROW((void)weighted_reduce(tokens, Tensor({3}, {1, 1, 1}), 0), DimensionError);
}

TEST(WeightedReduce, MaskedEqualsZeroedWeights) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(7);
        auto x = random_tensor(rng, {n, 3});
        auto w = random_tensor(rng, {n});
        auto mask = random_mask(rng, n, 0.6);
        auto zeroed = w.detach();
        for (std::size_t t = 0; t < n; ++t) {
            if (!mask[t]) {
                zeroed.mutable_values()[t] = 0.0;
            }
        }
        auto masked = weighted_reduce(x, w, 0, mask);
        auto direct = weighted_reduce(x, zeroed, 0);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_NEAR(masked[i], direct[i], 1e-12);
        }
    }
}

TEST(ForwardOps, OutputShapeDependsOnlyOnInputShapes) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const Shape shape{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)};
        const std::size_t axis = rng.below(3);
        auto x1 = random_tensor(rng, shape);
        auto x2 = random_tensor(rng, shape);
        auto w = random_tensor(rng, {shape[axis]});
        EXPECT_EQ(max_reduce(x1, axis).shape(), max_reduce(x2, axis).shape());
        EXPECT_EQ(weighted_reduce(x1, w, axis).shape(), detail::drop_axis(shape, axis));
        EXPECT_EQ(select(x1, axis, 0).shape(), detail::drop_axis(shape, axis));
        EXPECT_EQ(softmax(x1, axis).shape(), shape);
        EXPECT_EQ(gelu(x1).shape(), shape);
        Shape stacked = shape;
        stacked.insert(stacked.begin() + static_cast<std::ptrdiff_t>(axis), 2);
        EXPECT_EQ(stack({x1, x2}, axis).shape(), stacked);
    }
}

TEST(Backward, ProductAndSum) {
    Tensor w({1}, {0.7}, true);
    Tensor x({1}, {3.0});
    backward(mul(w, x));
    EXPECT_DOUBLE_EQ(w.grad()[0], 3.0);

    Tensor v({4}, {1, 2, 3, 4}, true);
    backward(sum(v));
    EXPECT_EQ(std::vector<double>(v.grad().begin(), v.grad().end()), (std::vector<double>{1, 1, 1, 1}));
}

TEST(Backward, RequiresScalarLoss) {
    Tensor v({2}, {1, 2}, true);
    EXPECT_THROW(backward(scale(v, 2.0)), ContractError);
}

TEST(Backward, RequiresZeroingBetweenPasses) {
    Tensor w({1}, {2.0}, true);
    backward(mul(w, w));
    EXPECT_THROW(backward(mul(w, w)), ContractError);
    w.zero_grad();
    backward(mul(w, w));
    EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Tensor w({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = sum(mul(w, w));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    ParameterSet params;
    params.add("w", Tensor({3}, {1, 2, 3}, true));
    params.zero_grad();
    AdamState state;
    adam_step(params, state, {.lr = 0.1});
    EXPECT_EQ(state.step, 1u);
    EXPECT_EQ(to_vec(params.at("w")), (std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    for (double g : {-5.0, 0.3, 42.0}) {
        ParameterSet params;
        params.add("w", Tensor({1}, {1.0}, true));
        backward(scale(params.at("w"), g));
        AdamState state;
        adam_step(params, state, {.lr = 0.01, .eps = 0.0});
        EXPECT_NEAR(params.at("w")[0], 1.0 - 0.01 * (g > 0 ? 1.0 : -1.0), 1e-15);
    }
}

TEST(Adam, QuadraticTrajectoryMatchesReferenceRecurrence) {
    ParameterSet params;
    params.add("w", Tensor({1}, {1.5}, true));
    AdamState state;
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double w = 1.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 10; ++t) {
        params.zero_grad();
        auto& pw = params.at("w");
        backward(mul(pw, pw));
        adam_step(params, state, {.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps});

        const double g = 2.0 * w;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mhat = m / (1 - std::pow(b1, t));
        const double vhat = v / (1 - std::pow(b2, t));
        w -= lr * mhat / (std::sqrt(vhat) + eps);
        EXPECT_NEAR(params.at("w")[0], w, 1e-12) << "step " << t;
    }
}

TEST(Adam, MisalignedStateIsRejected) {
    ParameterSet params;
    params.add("w", Tensor({2}, {1, 2}, true));
    AdamState state;
    state.step = 3;
    state.m = {{0.0}};
    state.v = {{0.0}};
    EXPECT_THROW(adam_step(params, state, {}), ContractError);
}

TEST(ParameterSet, NamesAreUnique) {
    ParameterSet params;
    params.add("a", Tensor({1}, {1}, true));
    EXPECT_THROW(params.add("a", Tensor({1}, {1}, true)), ContractError);
}

TEST(FiniteDifference, Quadratic) {
    ParameterSet params;
    params.add("w", Tensor({1}, {3.0}, true));
    auto r = finite_difference_check([&] { return mul(params.at("w"), params.at("w")); }, params);
    EXPECT_LE(r.max_relative_error, 1e-8);
    EXPECT_DOUBLE_EQ(params.at("w")[0], 3.0);
}

TEST(FiniteDifference, SoftmaxSumHasZeroGradient) {
    ParameterSet params;
    params.add("w", Tensor({4}, {0.1, -2.0, 0.5, 3.0}, true));
    backward(sum(softmax(params.at("w"), 0)));
    for (double g : params.at("w").grad()) {
        EXPECT_NEAR(g, 0.0, 1e-15);
    }
    params.zero_grad();
    auto r = finite_difference_check([&] { return sum(softmax(params.at("w"), 0)); }, params);
    EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(FiniteDifference, CompositeOpsMatchNumericGradients) {
    Rng rng(21);
    ParameterSet params;
    params.add("x", random_tensor(rng, {2, 3, 4}, true));
    params.add("w_tok", random_tensor(rng, {3}, true));
    params.add("gamma", random_tensor(rng, {4}, true));
    params.add("beta", random_tensor(rng, {4}, true));
    params.add("proj", random_tensor(rng, {4, 3}, true));
    params.add("bias", random_tensor(rng, {3}, true));
    const std::vector<std::uint8_t> mask{1, 0, 1};
    const std::vector<int> labels{2, 0};
    auto loss_fn = [&] {
        auto normed = layer_norm(params.at("x"), params.at("gamma"), params.at("beta"), 1e-5);
        auto act = gelu(normed);
        auto pooled_max = max_reduce(act, 1, mask);
        auto pooled_sum = weighted_reduce(act, params.at("w_tok"), 1, mask);
        auto combined = add(pooled_max, pooled_sum);
        auto logits = linear(combined, params.at("proj"), params.at("bias"));
        return add(cross_entropy(logits, labels), sum(softmax(logits, 1)));
    };
    auto r = finite_difference_check(loss_fn, params);
    EXPECT_LE(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(FiniteDifference, AttentionGradients) {
    Rng rng(4);
    const std::size_t batch = 2, seq = 5, h = 4, heads = 2;
    ParameterSet params;
    params.add("qkv", random_tensor(rng, {batch * seq, 3 * h}, true));
    params.add("w", random_tensor(rng, {h, 1}, true));
    const std::vector<std::uint8_t> keys{1, 1, 1, 0, 0, 1, 1, 0, 0, 0};
    auto loss_fn = [&] {
        auto ctx = multi_head_attention(params.at("qkv"), keys, batch, seq, heads);
        return sum(gelu(matmul(ctx, params.at("w"))));
    };
    auto r = finite_difference_check(loss_fn, params);
    EXPECT_LE(r.max_relative_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Attention, MaskedKeysDoNotInfluenceOtherPositions) {
    Rng rng(12);
    const std::size_t seq = 6, h = 4;
    auto qkv = random_tensor(rng, {seq, 3 * h});
    const std::vector<std::uint8_t> keys{1, 1, 1, 1, 0, 0};
    auto base = multi_head_attention(qkv, keys, 1, seq, 2);
    auto changed = qkv.detach();
    for (std::size_t i = 4; i < seq; ++i) {
        for (std::size_t j = 0; j < 3 * h; ++j) {
            changed.mutable_values()[i * 3 * h + j] = rng.normal() * 10;
        }
    }
    auto after = multi_head_attention(changed, keys, 1, seq, 2);
    for (std::size_t i = 0; i < 4 * h; ++i) {
        EXPECT_EQ(after[i], base[i]);
    }
}

TEST(Dropout, EvalIsIdentityAndTrainIsSeeded) {
    Rng rng(1);
    auto x = random_tensor(rng, {50});
    Rng r1(99), r2(99);
    EXPECT_EQ(to_vec(dropout(x, 0.5, r1, false)), to_vec(x));
    auto a = dropout(x, 0.5, r1, true);
    auto b = dropout(x, 0.5, r2, true);
    EXPECT_EQ(to_vec(a), to_vec(b));
    std::size_t zeros = 0;
    for (double v : a.values()) {
        zeros += v == 0.0;
    }
    EXPECT_GT(zeros, 0u);
    EXPECT_LT(zeros, 50u);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
    Rng rng(17);
    auto x = random_tensor(rng, {6, 8});
    auto w = random_tensor(rng, {8, 24});
    auto b = random_tensor(rng, {24});
    const std::vector<std::uint8_t> keys(6, 1);
    auto run = [&] { return to_vec(multi_head_attention(gelu(linear(x, w, b)), keys, 2, 3, 2)); };
    EXPECT_EQ(run(), run());
}
