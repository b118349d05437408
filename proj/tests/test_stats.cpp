#include <gtest/gtest.h>

#include <cmath>

#include "earlybird/rng.hpp"
#include "earlybird/stats.hpp"
#include "oracles.hpp"

using namespace earlybird;
using namespace earlybird::stats;

TEST(Accuracy, Examples) {
    const std::vector<int> y{0, 1, 1};
    EXPECT_DOUBLE_EQ(accuracy(y, y), 1.0);
    EXPECT_DOUBLE_EQ(accuracy(std::vector<int>{0, 0, 1}, y), 2.0 / 3.0);
    EXPECT_THROW((void)accuracy(std::vector<int>{}, std::vector<int>{}), ContractError);
}

TEST(Accuracy, MatchesCountingOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        std::vector<int> p(n), y(n);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = static_cast<int>(rng.below(3));
            y[i] = static_cast<int>(rng.below(3));
            hits += p[i] == y[i];
        }
        EXPECT_DOUBLE_EQ(accuracy(p, y), static_cast<double>(hits) / static_cast<double>(n));
    }
}

TEST(WeightedF1, PerfectAndMajorityPredictor) {
    const std::vector<int> y{0, 1, 2, 1};
    EXPECT_DOUBLE_EQ(weighted_f1(y, y, 3), 1.0);

    // class 0: P=3/4, R=1 -> F1=6/7; class 1: F1=0.
    const std::vector<int> labels{0, 0, 0, 1};
    const std::vector<int> preds{0, 0, 0, 0};
    EXPECT_NEAR(weighted_f1(preds, labels, 2), (3.0 * 6.0 / 7.0) / 4.0, 1e-15);
    EXPECT_NEAR(weighted_f1(preds, labels, 2), 0.6428571428571429, 1e-12);
}

TEST(WeightedF1, MatchesConfusionMatrixOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t c = 2 + rng.below(4);
        const std::size_t n = 1 + rng.below(50);
        std::vector<int> p(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(c));
            p[i] = rng.uniform() < 0.6 ? y[i] : static_cast<int>(rng.below(c));
        }
        const double got = weighted_f1(p, y, c);
        EXPECT_NEAR(got, oracle::weighted_f1(p, y, c), 1e-12);
        EXPECT_GE(got, 0.0);
        EXPECT_LE(got, 1.0);
    }
}

TEST(WeightedF1, SingleClassDataEqualsThatClassF1) {
    const std::vector<int> labels{1, 1, 1, 1, 1};
    const std::vector<int> preds{1, 0, 1, 1, 0};
    // precision 1, recall 3/5
    EXPECT_NEAR(weighted_f1(preds, labels, 2), 2.0 * 1.0 * 0.6 / 1.6, 1e-15);
}

TEST(Wilcoxon, IdenticalSamplesGivePOne) {
    const std::vector<double> x{0.5, 0.6, 0.7};
    const auto r = wilcoxon_signed_rank(x, x);
    EXPECT_DOUBLE_EQ(r.p_value, 1.0);
    EXPECT_EQ(r.n, 0u);
}

TEST(Wilcoxon, AllPositiveDistinctTenPairs) {
    std::vector<double> base(10), cand(10);
    for (int i = 0; i < 10; ++i) {
        base[i] = 0.5;
        cand[i] = 0.5 + 0.01 * (i + 1);
    }
    const auto r = wilcoxon_signed_rank(base, cand);
    EXPECT_DOUBLE_EQ(r.w_minus, 0.0);
    EXPECT_NEAR(r.p_value, 2.0 / 1024.0, 1e-15);
    EXPECT_NEAR(r.p_value, oracle::wilcoxon_exact_p(base, cand), 1e-12);
}

TEST(Wilcoxon, MatchesSignEnumerationOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> base(10), cand(10);
        for (int i = 0; i < 10; ++i) {
            base[i] = rng.normal();
            cand[i] = base[i] + rng.normal() + 0.3;
        }
        EXPECT_NEAR(wilcoxon_signed_rank(base, cand).p_value, oracle::wilcoxon_exact_p(base, cand), 1e-12);
    }
}

TEST(Wilcoxon, TiesAndZerosMatchOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<double> base(n), cand(n);
        for (std::size_t i = 0; i < n; ++i) {
            base[i] = static_cast<double>(rng.below(5));
            cand[i] = static_cast<double>(rng.below(5));
        }
        EXPECT_NEAR(wilcoxon_signed_rank(base, cand).p_value, oracle::wilcoxon_exact_p(base, cand), 1e-12);
    }
}

TEST(Wilcoxon, SymmetricInArgumentOrder) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.normal();
            b[i] = rng.normal();
        }
        const double p1 = wilcoxon_signed_rank(a, b).p_value;
        EXPECT_DOUBLE_EQ(p1, wilcoxon_signed_rank(b, a).p_value);
        EXPECT_GE(p1, 0.0);
        EXPECT_LE(p1, 1.0);
        if (n <= kExactWilcoxonLimit) {
            EXPECT_GE(p1, 2.0 / std::ldexp(1.0, static_cast<int>(n)) - 1e-15);
        }
    }
}

TEST(Wilcoxon, NormalApproximationAboveLimit) {
    std::vector<double> base(30, 0.0), cand(30);
    for (int i = 0; i < 30; ++i) {
        cand[i] = (i % 3 == 0 ? -1.0 : 1.0) * (i + 1);
    }
    const auto r = wilcoxon_signed_rank(base, cand);
    EXPECT_FALSE(r.exact);
    // W- = 1+4+...+28 = 145, n=30: mean 232.5, sd sqrt(2363.75)
    const double z = (232.5 - 145.0 - 0.5) / std::sqrt(30.0 * 31.0 * 61.0 / 24.0);
    EXPECT_NEAR(r.p_value, std::erfc(z / std::sqrt(2.0)), 1e-12);
}

TEST(Wilcoxon, MismatchedLengths) {
    EXPECT_THROW((void)wilcoxon_signed_rank(std::vector<double>{1, 2}, std::vector<double>{1}), ContractError);
}

TEST(A12, SelfComparisonAndDominance) {
    const std::vector<double> x{0.1, 0.4, 0.4, 0.9};
    const auto self = a12(x, x);
    EXPECT_DOUBLE_EQ(self.a12, 0.5);
    EXPECT_EQ(self.magnitude, Magnitude::negligible);

    const std::vector<double> higher{1.0, 2.0};
    const auto dom = a12(higher, x);
    EXPECT_DOUBLE_EQ(dom.a12, 1.0);
    EXPECT_EQ(dom.magnitude, Magnitude::large);
    EXPECT_THROW((void)a12(std::vector<double>{}, x), ContractError);
}

TEST(A12, MatchesAllPairsOracleAndIsComplementary) {
    Rng rng(6);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(12), m = 1 + rng.below(12);
        std::vector<double> c(n), b(m);
        for (auto& v : c) {
            v = static_cast<double>(rng.below(6));
        }
        for (auto& v : b) {
            v = static_cast<double>(rng.below(6));
        }
        const double got = a12(c, b).a12;
        EXPECT_NEAR(got, oracle::a12(c, b), 1e-12);
        EXPECT_NEAR(got + a12(b, c).a12, 1.0, 1e-12);
    }
}

TEST(A12, MagnitudeThresholds) {
    EXPECT_EQ(a12_magnitude(0.71), Magnitude::large);
    EXPECT_EQ(a12_magnitude(0.29), Magnitude::large);
    EXPECT_EQ(a12_magnitude(0.70), Magnitude::medium);
    EXPECT_EQ(a12_magnitude(0.64), Magnitude::medium);
    EXPECT_EQ(a12_magnitude(0.60), Magnitude::small);
    EXPECT_EQ(a12_magnitude(0.56), Magnitude::small);
    EXPECT_EQ(a12_magnitude(0.55), Magnitude::negligible);
    EXPECT_EQ(a12_magnitude(0.45), Magnitude::negligible);
}

TEST(Speedup, TableValues) {
    EXPECT_EQ(format_speedup(speedup(100.0, 100.0)), "1.0x");
    EXPECT_EQ(format_speedup(speedup(530.0, 161.0)), "3.3x");
    EXPECT_EQ(format_speedup(speedup(417.0, 112.0)), "3.7x");
    EXPECT_THROW((void)speedup(0.0, 1.0), ContractError);
    EXPECT_THROW((void)speedup(1.0, -1.0), ContractError);
}

TEST(Format, MinutesSeconds) {
    EXPECT_EQ(format_mmss(530.0), "8:50");
    EXPECT_EQ(format_mmss(161.0), "2:41");
    EXPECT_EQ(format_mmss(3.4), "0:03");
}

TEST(Compare, IdenticalRuns) {
    const std::vector<double> x{0.7, 0.8, 0.75};
    const auto r = compare(x, x);
    EXPECT_DOUBLE_EQ(r.mean_diff, 0.0);
    EXPECT_DOUBLE_EQ(r.p_value, 1.0);
    EXPECT_DOUBLE_EQ(r.a12, 0.5);
    EXPECT_FALSE(r.significant);
}

TEST(Compare, AllPositiveTenSeedsIsSignificantAndConsistent) {
    std::vector<double> base(10), cand(10);
    Rng rng(7);
    for (int i = 0; i < 10; ++i) {
        base[i] = 0.6 + 0.01 * rng.normal();
        cand[i] = base[i] + 0.005 + 0.001 * i;
    }
    const auto r = compare(base, cand);
    EXPECT_TRUE(r.significant);
    EXPECT_NEAR(r.p_value, oracle::wilcoxon_exact_p(base, cand), 1e-12);
    EXPECT_NEAR(r.a12, oracle::a12(cand, base), 1e-12);
    EXPECT_EQ(r.magnitude, a12_magnitude(r.a12));
    double mb = 0, mc = 0;
    for (int i = 0; i < 10; ++i) {
        mb += base[i] / 10;
        mc += cand[i] / 10;
    }
    EXPECT_NEAR(r.mean_diff, mc - mb, 1e-12);
}
