#pragma once

// K-means++ seeding, Lloyd iterations with restarts, and silhouette scoring.
// Points are the rows of an n x H matrix.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "fgcrn/error.hpp"
#include "fgcrn/random.hpp"

namespace fgcrn {

// Indices of K seed points chosen with D^2 weighting. If every remaining point
// coincides with a chosen center, the next one is uniform among unchosen points.
// `first` fixes the initial center.
inline std::vector<std::size_t> kmeanspp_init(const Eigen::MatrixXd& points, std::size_t K, std::size_t first,
                                              Rng& rng) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (K < 1) throw ConfigError("kmeans: K must be >= 1");
    if (n < K) throw DataError("kmeans: " + std::to_string(n) + " points for K=" + std::to_string(K));
    if (first >= n) throw DataError("kmeans: first center index out of range");
    std::vector<std::size_t> chosen{first};
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::vector<char> taken(n, 0);
    taken[chosen[0]] = 1;
    while (chosen.size() < K) {
        const auto last = points.row(static_cast<Eigen::Index>(chosen.back()));
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) - last).squaredNorm());
            total += d2[i];
        }
        std::size_t pick = n;
        if (total > 0) {
            const double u = uniform01(rng) * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0) continue;
                acc += d2[i];
                pick = i;
                if (acc > u) break;
            }
        } else {
            std::vector<std::size_t> free;
            for (std::size_t i = 0; i < n; ++i)
                if (!taken[i]) free.push_back(i);
            pick = free[uniform_index(rng, free.size())];
        }
        taken[pick] = 1;
        chosen.push_back(pick);
    }
    return chosen;
}

inline std::vector<std::size_t> kmeanspp_init(const Eigen::MatrixXd& points, std::size_t K, Rng& rng) {
    if (points.rows() < 1) throw DataError("kmeans: no points");
    const std::size_t first = uniform_index(rng, static_cast<std::size_t>(points.rows()));
    return kmeanspp_init(points, K, first, rng);
}

struct KMeansResult {
    Eigen::MatrixXd centers;  // K x H
    std::vector<std::size_t> assignment;
    double wcss = 0.0;
    std::size_t iterations = 0;
};

inline double wcss_of(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centers,
                      const std::vector<std::size_t>& assignment) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i)
        s += (points.row(i) - centers.row(static_cast<Eigen::Index>(assignment[static_cast<std::size_t>(i)]))).squaredNorm();
    return s;
}

namespace detail {

inline KMeansResult lloyd(const Eigen::MatrixXd& points, Eigen::MatrixXd centers, std::size_t max_iter) {
    const auto n = static_cast<std::size_t>(points.rows());
    const auto K = static_cast<std::size_t>(centers.rows());
    KMeansResult res;
    res.assignment.assign(n, K);  // K = unassigned, forces a first update
    std::vector<double> nearest(n);
    for (std::size_t it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                const double d = (points.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(k))).squaredNorm();
                if (d < bd) {
                    bd = d;
                    best = k;
                }
            }
            nearest[i] = bd;
            if (res.assignment[i] != best) {
                res.assignment[i] = best;
                changed = true;
            }
        }
        res.iterations = it + 1;
        if (!changed) break;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centers.rows(), centers.cols());
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums.row(static_cast<Eigen::Index>(res.assignment[i])) += points.row(static_cast<Eigen::Index>(i));
            ++counts[res.assignment[i]];
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (counts[k] > 0) {
                centers.row(static_cast<Eigen::Index>(k)) = sums.row(static_cast<Eigen::Index>(k)) / static_cast<double>(counts[k]);
                continue;
            }
            // empty cluster: move it to the point worst served by its center
            const auto far = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
            centers.row(static_cast<Eigen::Index>(k)) = points.row(static_cast<Eigen::Index>(far));
            nearest[far] = 0.0;
            res.assignment[far] = k;
        }
    }
    res.centers = std::move(centers);
    res.wcss = wcss_of(points, res.centers, res.assignment);
    return res;
}

// Single-point transfers (Hartigan): move a point to another cluster whenever
// that lowers WCSS, with exact centroid updates, until no move helps.
inline void hartigan_refine(const Eigen::MatrixXd& points, KMeansResult& res, std::size_t max_sweeps) {
    const auto n = static_cast<std::size_t>(points.rows());
    const auto K = static_cast<std::size_t>(res.centers.rows());
    std::vector<double> counts(K, 0.0);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(res.centers.rows(), res.centers.cols());
    for (std::size_t i = 0; i < n; ++i) {
        counts[res.assignment[i]] += 1;
        sums.row(static_cast<Eigen::Index>(res.assignment[i])) += points.row(static_cast<Eigen::Index>(i));
    }
    for (std::size_t k = 0; k < K; ++k)
        if (counts[k] > 0) res.centers.row(static_cast<Eigen::Index>(k)) = sums.row(static_cast<Eigen::Index>(k)) / counts[k];
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        bool moved = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = res.assignment[i];
            if (counts[a] < 2) continue;
            const auto x = points.row(static_cast<Eigen::Index>(i));
            const double remove_gain =
                counts[a] / (counts[a] - 1) * (x - res.centers.row(static_cast<Eigen::Index>(a))).squaredNorm();
            std::size_t best = a;
            double best_cost = remove_gain;
            for (std::size_t b = 0; b < K; ++b) {
                if (b == a) continue;
                const double add_cost =
                    counts[b] / (counts[b] + 1) * (x - res.centers.row(static_cast<Eigen::Index>(b))).squaredNorm();
                if (add_cost < best_cost * (1 - 1e-12)) {
                    best_cost = add_cost;
                    best = b;
                }
            }
            if (best == a) continue;
            sums.row(static_cast<Eigen::Index>(a)) -= x;
            sums.row(static_cast<Eigen::Index>(best)) += x;
            counts[a] -= 1;
            counts[best] += 1;
            res.centers.row(static_cast<Eigen::Index>(a)) = sums.row(static_cast<Eigen::Index>(a)) / counts[a];
            res.centers.row(static_cast<Eigen::Index>(best)) = sums.row(static_cast<Eigen::Index>(best)) / counts[best];
            res.assignment[i] = best;
            moved = true;
        }
        if (!moved) break;
    }
    res.wcss = wcss_of(points, res.centers, res.assignment);
}

}  // namespace detail

// Best of `restarts` seeded runs by within-cluster sum of squares. Each run is
// Lloyd iterations followed by a single-point-transfer refinement.
inline KMeansResult kmeans_fit(const Eigen::MatrixXd& points, std::size_t K, std::uint64_t seed,
                               std::size_t restarts = 10, std::size_t max_iter = 100) {
    if (restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");
    Rng rng(seed);
    KMeansResult best;
    best.wcss = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < restarts; ++r) {
        const auto seeds = kmeanspp_init(points, K, rng);
        Eigen::MatrixXd centers(static_cast<Eigen::Index>(K), points.cols());
        for (std::size_t k = 0; k < K; ++k)
            centers.row(static_cast<Eigen::Index>(k)) = points.row(static_cast<Eigen::Index>(seeds[k]));
        auto res = detail::lloyd(points, std::move(centers), max_iter);
        detail::hartigan_refine(points, res, max_iter);
        if (res.wcss < best.wcss) best = std::move(res);
    }
    return best;
}

// Mean silhouette coefficient; singleton clusters contribute 0.
inline double mean_silhouette(const Eigen::MatrixXd& points, const std::vector<std::size_t>& assignment, std::size_t K) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (K < 2 || n < 2) return 0.0;
    std::vector<std::size_t> counts(K, 0);
    for (auto a : assignment) ++counts[a];
    double total = 0.0;
    std::vector<double> dsum(K);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(dsum.begin(), dsum.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dsum[assignment[j]] += (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
        const std::size_t own = assignment[i];
        if (counts[own] < 2) continue;
        const double a = dsum[own] / static_cast<double>(counts[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k)
            if (k != own && counts[k] > 0) b = std::min(b, dsum[k] / static_cast<double>(counts[k]));
        if (!std::isfinite(b)) continue;
        const double m = std::max(a, b);
        if (m > 0) total += (b - a) / m;
    }
    return total / static_cast<double>(n);
}

}  // namespace fgcrn
