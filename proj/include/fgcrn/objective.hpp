#pragma once

// Cross-entropy, the Mahalanobis compactness loss and the distance primitive
// shared with the fine-grained model.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgcrn/error.hpp"

namespace fgcrn {

struct LossConfig {
    double lambda_dist = 0.1;
    double d0 = 1e-12;
    // eps_reg = eps_scale * trace(sigma) / H, at least eps_floor; eps_fixed > 0 overrides.
    double eps_scale = 1e-3;
    double eps_floor = 1e-6;
    double eps_fixed = 0.0;

    void validate() const {
        if (!(lambda_dist >= 0)) throw ConfigError("lambda_dist must be >= 0");
        if (!(d0 >= 0)) throw ConfigError("d0 must be >= 0");
        if (!(eps_scale >= 0) || !(eps_floor > 0) || !(eps_fixed >= 0))
            throw ConfigError("covariance regularizer settings must be positive");
    }
};

inline double covariance_regularizer(const Eigen::MatrixXd& sigma, const LossConfig& cfg) {
    if (cfg.eps_fixed > 0) return cfg.eps_fixed;
    const double h = static_cast<double>(std::max<Eigen::Index>(1, sigma.rows()));
    return std::max(cfg.eps_scale * sigma.trace() / h, cfg.eps_floor);
}

// Mean and covariance with the Cholesky factor of (sigma + eps I) kept ready.
struct Gaussian {
    Eigen::VectorXd mu;
    Eigen::MatrixXd sigma;
    Eigen::MatrixXd chol;  // lower-triangular L, L L^T = sigma + eps I
    double eps = 0.0;

    static Gaussian make(Eigen::VectorXd mu, Eigen::MatrixXd sigma, double eps) {
        if (mu.size() != sigma.rows() || sigma.rows() != sigma.cols())
            throw ShapeError("Gaussian: mean/covariance shape mismatch");
        Gaussian g;
        g.mu = std::move(mu);
        g.sigma = std::move(sigma);
        g.eps = eps;
        Eigen::MatrixXd reg = g.sigma;
        reg.diagonal().array() += eps;
        Eigen::LLT<Eigen::MatrixXd> llt(reg);
        if (llt.info() != Eigen::Success)
            throw NumericError("covariance factorization failed (ill-conditioned cluster, eps=" + std::to_string(eps) + ")");
        g.chol = llt.matrixL();
        if (!g.chol.allFinite()) throw NumericError("covariance factorization produced non-finite values");
        return g;
    }

    // (r - mu)^T (sigma + eps I)^{-1} (r - mu)
    double quad_form(const Eigen::Ref<const Eigen::VectorXd>& r) const {
        if (r.size() != mu.size()) throw ShapeError("Gaussian: feature dimension mismatch");
        const Eigen::VectorXd z = chol.triangularView<Eigen::Lower>().solve(r - mu);
        return z.squaredNorm();
    }

    double distance(const Eigen::Ref<const Eigen::VectorXd>& r, double d0) const {
        return std::sqrt(std::max(quad_form(r), d0));
    }

    // d distance / d r; zero where the floor is active.
    Eigen::VectorXd distance_grad(const Eigen::Ref<const Eigen::VectorXd>& r, double d0) const {
        const Eigen::VectorXd diff = r - mu;
        const Eigen::VectorXd z = chol.triangularView<Eigen::Lower>().solve(diff);
        const double qf = z.squaredNorm();
        if (qf <= d0) return Eigen::VectorXd::Zero(r.size());
        const Eigen::VectorXd s_inv = chol.transpose().triangularView<Eigen::Upper>().solve(z);
        return s_inv / std::sqrt(qf);
    }
};

inline double mahalanobis(const Eigen::VectorXd& r, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma,
                          double eps, double d0) {
    return Gaussian::make(mu, sigma, eps).distance(r, d0);
}

struct CrossEntropy {
    double value = 0.0;
    std::vector<double> dlogits;  // B x k
};

// Negative mean log-likelihood from logits (B x k, row-major).
inline CrossEntropy cross_entropy(std::span<const double> logits, std::span<const int> labels, std::size_t k) {
    const std::size_t B = labels.size();
    if (logits.size() != B * k) throw ShapeError("cross_entropy: logits must be B x k");
    if (B == 0) throw DataError("cross_entropy: empty batch");
    CrossEntropy out;
    out.dlogits.assign(B * k, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range for k=" + std::to_string(k));
        const double* o = logits.data() + b * k;
        const double mx = *std::max_element(o, o + k);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(o[c] - mx);
        const double lse = mx + std::log(z);
        out.value += lse - o[y];
        for (std::size_t c = 0; c < k; ++c) out.dlogits[b * k + c] = std::exp(o[c] - lse) / static_cast<double>(B);
        out.dlogits[b * k + static_cast<std::size_t>(y)] -= 1.0 / static_cast<double>(B);
    }
    out.value /= static_cast<double>(B);
    return out;
}

struct DistanceLoss {
    double value = 0.0;
    std::size_t n_correct = 0;
    std::vector<double> dfeatures;  // B x H
};

// Mean distance of correctly classified samples to the nearest cluster of
// their class. Cluster parameters are constants.
inline DistanceLoss distance_loss(const Eigen::MatrixXd& features, std::span<const int> labels,
                                  std::span<const int> predictions,
                                  const std::vector<std::vector<Gaussian>>& clusters, double d0) {
    const auto B = static_cast<std::size_t>(features.rows());
    const auto H = static_cast<std::size_t>(features.cols());
    if (labels.size() != B || predictions.size() != B) throw ShapeError("distance_loss: length mismatch");
    DistanceLoss out;
    out.dfeatures.assign(B * H, 0.0);
    std::vector<std::size_t> correct;
    for (std::size_t i = 0; i < B; ++i)
        if (labels[i] == predictions[i]) correct.push_back(i);
    out.n_correct = correct.size();
    if (correct.empty()) return out;
    const double inv = 1.0 / static_cast<double>(correct.size());
    for (std::size_t i : correct) {
        const auto c = static_cast<std::size_t>(labels[i]);
        if (c >= clusters.size() || clusters[c].empty())
            throw StateError("distance_loss: no cluster model for class " + std::to_string(c));
        const Eigen::VectorXd r = features.row(static_cast<Eigen::Index>(i)).transpose();
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_m = 0;
        for (std::size_t m = 0; m < clusters[c].size(); ++m) {
            const double d = clusters[c][m].distance(r, d0);
            if (d < best) {
                best = d;
                best_m = m;
            }
        }
        out.value += inv * best;
        const Eigen::VectorXd g = clusters[c][best_m].distance_grad(r, d0);
        for (std::size_t h = 0; h < H; ++h) out.dfeatures[i * H + h] = inv * g(static_cast<Eigen::Index>(h));
    }
    return out;
}

inline double total_loss(double l1, double l2, const LossConfig& cfg) { return l1 + cfg.lambda_dist * l2; }

}  // namespace fgcrn
