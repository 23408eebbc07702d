#include <gtest/gtest.h>

#include <cmath>

#include "fgcrn/random.hpp"
#include "fgcrn/weibull.hpp"

using namespace fgcrn;

namespace {

std::vector<double> weibull_draws(double shape, double scale, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> x(n);
    for (auto& v : x) {
        double u = uniform01(rng);
        while (u <= 0) u = uniform01(rng);
        v = scale * std::pow(-std::log(u), 1.0 / shape);
    }
    return x;
}

}  // namespace

TEST(WeibullMle, RecoversShapeTwo) {
    auto x = weibull_draws(2.0, 3.0, 10000, 1);
    auto f = fit_weibull_mle(x);
    EXPECT_GE(f.shape, 1.9);
    EXPECT_LE(f.shape, 2.1);
    EXPECT_GE(f.scale, 2.85);
    EXPECT_LE(f.scale, 3.15);
}

TEST(WeibullMle, RecoversExponential) {
    auto x = weibull_draws(1.0, 0.5, 10000, 2);
    auto f = fit_weibull_mle(x);
    EXPECT_GE(f.shape, 0.95);
    EXPECT_LE(f.shape, 1.05);
}

TEST(WeibullMle, SatisfiesLikelihoodEquations) {
    auto x = weibull_draws(5.0, 0.5, 500, 3);
    auto f = fit_weibull_mle(x);
    double s0 = 0, s1 = 0, ml = 0;
    for (double v : x) {
        const double w = std::pow(v, f.shape);
        s0 += w;
        s1 += w * std::log(v);
        ml += std::log(v);
    }
    const double n = static_cast<double>(x.size());
    EXPECT_NEAR(s1 / s0 - 1 / f.shape - ml / n, 0.0, 1e-9);
    EXPECT_NEAR(std::pow(s0 / n, 1 / f.shape), f.scale, 1e-9 * f.scale);
}

TEST(WeibullMle, RejectsDegenerateInput) {
    std::vector<double> c(50, 2.0);
    EXPECT_THROW(fit_weibull_mle(c), DataError);
    std::vector<double> neg = {1.0, -1.0, 2.0};
    EXPECT_THROW(fit_weibull_mle(neg), DataError);
}

TEST(WeibullTail, ConstantTailIsError) {
    std::vector<double> d(200, 1.0);
    EXPECT_THROW(fit_weibull_tail(d, 0.1, 20), DataError);
}

TEST(WeibullTail, TooSmallTailIsError) {
    auto d = weibull_draws(2, 1, 100, 4);
    EXPECT_THROW(fit_weibull_tail(d, 0.1, 20), DataError);
}

TEST(WeibullTail, UsesLargestDistances) {
    auto d = weibull_draws(2, 1, 1000, 5);
    auto t = fit_weibull_tail(d, 0.1, 20);
    EXPECT_EQ(t.tail_count, 100u);
    std::vector<double> s = d;
    std::sort(s.begin(), s.end(), std::greater<>());
    EXPECT_DOUBLE_EQ(t.tau, s[99] * (1 - 1e-9));
    EXPECT_GT(t.shape, 0);
    EXPECT_GT(t.scale, 0);
}

TEST(Rejection, ClosedForms) {
    WeibullTail t;
    t.tau = 1.5;
    t.scale = 0.7;
    t.shape = 3.3;
    EXPECT_EQ(rejection_probability(1.5, t), 0.0);
    EXPECT_EQ(rejection_probability(0.2, t), 0.0);
    EXPECT_NEAR(rejection_probability(1.5 + 0.7, t), 1 - std::exp(-1.0), 1e-12);
    t.tau = 0;
    t.scale = 2;
    t.shape = 2;
    EXPECT_NEAR(rejection_probability(1.0, t), 1 - std::exp(-0.25), 1e-12);
    EXPECT_GT(rejection_probability(10 * 2.0, t), 0.9999);
}

TEST(Rejection, MonotoneAndBounded) {
    WeibullTail t{0.3, 1.2, 0.8, 0.1, 20};
    Rng rng(6);
    std::vector<double> d(10000);
    for (auto& v : d) v = 10 * uniform01(rng);
    std::sort(d.begin(), d.end());
    double prev = 0;
    for (double v : d) {
        const double q = rejection_probability(v, t);
        EXPECT_GE(q, prev);
        EXPECT_GE(q, 0.0);
        EXPECT_LT(q, 1.0);
        prev = q;
    }
}
