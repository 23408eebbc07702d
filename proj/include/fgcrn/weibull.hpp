#pragma once

// Two-parameter Weibull maximum likelihood and the tail model used to turn a
// distance into a rejection probability.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fgcrn/error.hpp"

namespace fgcrn {

struct WeibullFit {
    double shape = 1.0;
    double scale = 1.0;
    std::size_t iterations = 0;
};

// MLE on strictly positive samples. Newton on the shape profile equation
//   g(k) = sum x^k ln x / sum x^k - 1/k - mean(ln x) = 0   (increasing in k)
// kept inside a bisection bracket; the scale then has a closed form.
inline WeibullFit fit_weibull_mle(std::span<const double> samples, std::size_t max_iter = 200, double tol = 1e-12) {
    const std::size_t n = samples.size();
    if (n < 2) throw DataError("weibull: need at least 2 samples");
    double xmax = 0.0, xmin = samples[0];
    for (double x : samples) {
        if (!(x > 0) || !std::isfinite(x)) throw DataError("weibull: samples must be finite and positive");
        xmax = std::max(xmax, x);
        xmin = std::min(xmin, x);
    }
    if (xmax == xmin) throw DataError("weibull: zero-variance sample");
    // scale to (0, 1] so x^k stays representable
    std::vector<double> lx(n);
    double mean_log = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        lx[i] = std::log(samples[i] / xmax);
        mean_log += lx[i];
    }
    mean_log /= static_cast<double>(n);

    auto eval = [&](double k, double& g, double& dg) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        for (double l : lx) {
            const double w = std::exp(k * l);
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        const double ratio = s1 / s0;
        g = ratio - 1.0 / k - mean_log;
        dg = s2 / s0 - ratio * ratio + 1.0 / (k * k);
    };

    double lo = 1e-3, hi = 1.0, g, dg;
    eval(hi, g, dg);
    while (g < 0) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e6) throw NumericError("weibull: shape diverged while bracketing");
        eval(hi, g, dg);
    }
    eval(lo, g, dg);
    if (g > 0) throw NumericError("weibull: shape below bracket (" + std::to_string(lo) + ")");

    double k = 0.5 * (lo + hi);
    WeibullFit fit;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        eval(k, g, dg);
        fit.iterations = it;
        if (g < 0) lo = k;
        else hi = k;
        double next = k - g / dg;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        const double step = std::abs(next - k);
        k = next;
        if (step <= tol * k || hi - lo <= tol * k) {
            fit.shape = k;
            double s0 = 0.0;
            for (double l : lx) s0 += std::exp(k * l);
            fit.scale = xmax * std::pow(s0 / static_cast<double>(n), 1.0 / k);
            if (!(fit.shape > 0) || !(fit.scale > 0) || !std::isfinite(fit.scale))
                throw NumericError("weibull: fit produced invalid parameters");
            return fit;
        }
    }
    throw NumericError("weibull: no convergence after " + std::to_string(max_iter) + " iterations (shape " +
                       std::to_string(k) + ", bracket [" + std::to_string(lo) + ", " + std::to_string(hi) + "])");
}

struct WeibullTail {
    double tau = 0.0;
    double scale = 1.0;
    double shape = 1.0;
    double tail_fraction = 0.0;
    std::size_t tail_count = 0;
};

// Fits the `tail_count` largest distances, shifted by just under their minimum.
inline WeibullTail fit_weibull_top(std::span<const double> distances, std::size_t tail_count) {
    if (tail_count < 2 || tail_count > distances.size())
        throw DataError("weibull tail: need 2 <= tail size <= n, got tail " + std::to_string(tail_count) + " of " +
                        std::to_string(distances.size()));
    std::vector<double> sorted(distances.begin(), distances.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    sorted.resize(tail_count);
    const double lowest = sorted.back();
    if (sorted.front() == lowest) throw DataError("weibull tail: zero-variance tail");
    WeibullTail tail;
    tail.tau = lowest * (1.0 - 1e-9);
    if (!(lowest > 0)) tail.tau = lowest - 1e-9 * (sorted.front() - lowest);
    std::vector<double> excess(tail_count);
    for (std::size_t i = 0; i < tail_count; ++i) excess[i] = sorted[i] - tail.tau;
    const WeibullFit fit = fit_weibull_mle(excess);
    tail.shape = fit.shape;
    tail.scale = fit.scale;
    tail.tail_count = tail_count;
    tail.tail_fraction = static_cast<double>(tail_count) / static_cast<double>(distances.size());
    return tail;
}

// Tail = the ceil(alpha * n) largest distances.
inline WeibullTail fit_weibull_tail(std::span<const double> distances, double alpha, std::size_t min_tail_count) {
    if (!(alpha > 0 && alpha <= 1)) throw ConfigError("weibull tail: alpha must be in (0, 1]");
    const auto count = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(distances.size()) - 1e-9));
    if (count < min_tail_count)
        throw DataError("weibull tail: tail of " + std::to_string(count) + " distances is below the minimum " +
                        std::to_string(min_tail_count));
    WeibullTail t = fit_weibull_top(distances, count);
    t.tail_fraction = alpha;
    return t;
}

inline double rejection_probability(double d, const WeibullTail& t) {
    const double x = std::max(d - t.tau, 0.0);
    return -std::expm1(-std::pow(x / t.scale, t.shape));
}

}  // namespace fgcrn
