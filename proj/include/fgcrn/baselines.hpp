#pragma once

// Reference open-set scores computed from a closed-set model's logits and
// features. Every score is oriented so that higher means "more likely known".

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fgcrn/error.hpp"
#include "fgcrn/finegrain.hpp"
#include "fgcrn/weibull.hpp"

namespace fgcrn {

enum class Method { Msp, MaxLogit, Gen, KlMatch, OpenMax, Vim, Fgcrn };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::Msp: return "msp";
        case Method::MaxLogit: return "maxlogit";
        case Method::Gen: return "gen";
        case Method::KlMatch: return "klmatch";
        case Method::OpenMax: return "openmax";
        case Method::Vim: return "vim";
        case Method::Fgcrn: return "fgcrn";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (Method m : {Method::Msp, Method::MaxLogit, Method::Gen, Method::KlMatch, Method::OpenMax, Method::Vim, Method::Fgcrn})
        if (method_name(m) == s) return m;
    throw ConfigError("unknown method '" + s + "' (expected msp, maxlogit, gen, klmatch, openmax, vim or fgcrn)");
}

struct BaselineConfig {
    double gen_gamma = 0.1;
    std::size_t gen_top = 10;
    std::size_t openmax_tail = 20;
    std::size_t openmax_revise = 10;
    std::size_t vim_dim = 0;  // 0: H / 4
};

struct BaselineCalibration {
    Method method = Method::Msp;
    BaselineConfig cfg;
    Eigen::MatrixXd templates;  // klmatch: k x k, row c = mean posterior of class c
    std::vector<char> has_template;
    Eigen::MatrixXd mav;  // openmax: k x k mean logit vectors
    std::vector<WeibullTail> tails;
    std::size_t revise = 0;
    Eigen::VectorXd center;  // vim
    Eigen::MatrixXd basis;   // vim: H x d, orthonormal columns
    double vim_alpha = 1.0;
};

// std::exp rather than Eigen's vectorized exp, which clamps far-negative
// arguments instead of underflowing to zero.
inline Eigen::VectorXd log_softmax(const Eigen::Ref<const Eigen::VectorXd>& o) {
    const double mx = o.maxCoeff();
    double z = 0.0;
    for (Eigen::Index i = 0; i < o.size(); ++i) z += std::exp(o(i) - mx);
    return o.array() - (mx + std::log(z));
}

inline Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& o) {
    return log_softmax(o).unaryExpr([](double v) { return std::exp(v); });
}

inline double vim_residual(const BaselineCalibration& cal, const Eigen::Ref<const Eigen::VectorXd>& feature) {
    const Eigen::VectorXd c = feature - cal.center;
    return (c - cal.basis * (cal.basis.transpose() * c)).norm();
}

inline BaselineCalibration calibrate_baseline(Method method, const Eigen::MatrixXd& train_logits,
                                              const Eigen::MatrixXd& train_features, const std::vector<int>& train_labels,
                                              const BaselineConfig& cfg = {}) {
    BaselineCalibration cal;
    cal.method = method;
    cal.cfg = cfg;
    if (method == Method::Msp || method == Method::MaxLogit || method == Method::Gen) return cal;
    if (method == Method::Fgcrn) throw ConfigError("calibrate_baseline: fgcrn is not a baseline");
    const auto n = static_cast<std::size_t>(train_logits.rows());
    const auto k = static_cast<std::size_t>(train_logits.cols());
    if (n == 0 || train_labels.size() != n) throw DataError("calibrate_baseline: empty or mismatched training outputs");
    const auto preds = argmax_rows(train_logits);

    if (method == Method::KlMatch) {
        cal.templates = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
        cal.has_template.assign(k, 0);
        std::vector<double> count(k, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (preds[i] != train_labels[i]) continue;
            const auto c = static_cast<Eigen::Index>(train_labels[i]);
            cal.templates.row(c) += softmax(train_logits.row(static_cast<Eigen::Index>(i)).transpose()).transpose();
            count[static_cast<std::size_t>(c)] += 1;
        }
        for (std::size_t c = 0; c < k; ++c)
            if (count[c] > 0) {
                cal.templates.row(static_cast<Eigen::Index>(c)) /= count[c];
                cal.has_template[c] = 1;
            }
        if (std::none_of(cal.has_template.begin(), cal.has_template.end(), [](char h) { return h; }))
            throw DataError("klmatch: no correctly classified training samples");
        return cal;
    }

    if (method == Method::OpenMax) {
        cal.mav = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
        std::vector<std::vector<std::size_t>> members(k);
        for (std::size_t i = 0; i < n; ++i)
            if (preds[i] == train_labels[i]) members[static_cast<std::size_t>(train_labels[i])].push_back(i);
        for (std::size_t c = 0; c < k; ++c) {
            if (members[c].size() < 3)
                throw DataError("openmax: class " + std::to_string(c) + " has fewer than 3 correct training samples");
            for (auto i : members[c]) cal.mav.row(static_cast<Eigen::Index>(c)) += train_logits.row(static_cast<Eigen::Index>(i));
            cal.mav.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(members[c].size());
            std::vector<double> d;
            for (auto i : members[c])
                d.push_back((train_logits.row(static_cast<Eigen::Index>(i)) - cal.mav.row(static_cast<Eigen::Index>(c))).norm());
            cal.tails.push_back(fit_weibull_top(d, std::min(cfg.openmax_tail, d.size())));
        }
        cal.revise = std::min(k, cfg.openmax_revise);
        return cal;
    }

    // ViM
    const auto H = train_features.cols();
    if (train_features.rows() != static_cast<Eigen::Index>(n)) throw DataError("vim: features/logits row mismatch");
    const Eigen::Index d = std::clamp<Eigen::Index>(cfg.vim_dim ? static_cast<Eigen::Index>(cfg.vim_dim) : H / 4, 1, H);
    cal.center = train_features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = train_features.rowwise() - cal.center.transpose();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("vim: eigen decomposition failed");
    cal.basis = es.eigenvectors().rightCols(d);  // eigenvalues ascend
    double mean_max = 0.0, mean_res = 0.0;
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        mean_max += train_logits.row(i).maxCoeff();
        mean_res += vim_residual(cal, train_features.row(i).transpose());
    }
    mean_max /= static_cast<double>(n);
    mean_res /= static_cast<double>(n);
    cal.vim_alpha = mean_res > 1e-12 ? mean_max / mean_res : 1.0;
    return cal;
}

inline double score_sample(const BaselineCalibration& cal, const Eigen::Ref<const Eigen::VectorXd>& logits,
                           const Eigen::Ref<const Eigen::VectorXd>& feature) {
    switch (cal.method) {
        case Method::Msp: return softmax(logits).maxCoeff();
        case Method::MaxLogit: return logits.maxCoeff();
        case Method::Gen: {
            Eigen::VectorXd p = softmax(logits);
            std::vector<double> v(p.data(), p.data() + p.size());
            std::sort(v.begin(), v.end(), std::greater<>());
            const std::size_t top = std::min(cal.cfg.gen_top, v.size());
            double g = 0.0;
            for (std::size_t i = 0; i < top; ++i)
                g += std::pow(v[i], cal.cfg.gen_gamma) * std::pow(1.0 - v[i], cal.cfg.gen_gamma);
            return -g;
        }
        case Method::KlMatch: {
            if (cal.templates.rows() != logits.size()) throw ShapeError("klmatch: calibration/logit size mismatch");
            const Eigen::VectorXd lp = log_softmax(logits);
            double best = std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < cal.templates.rows(); ++c) {
                if (!cal.has_template[static_cast<std::size_t>(c)]) continue;
                double kl = 0.0;
                for (Eigen::Index i = 0; i < lp.size(); ++i) {
                    const double t = cal.templates(c, i);
                    if (t > 0) kl += t * (std::log(t) - lp(i));
                }
                best = std::min(best, kl);
            }
            return -best;
        }
        case Method::OpenMax: {
            const auto k = static_cast<std::size_t>(logits.size());
            if (cal.mav.rows() != logits.size()) throw ShapeError("openmax: calibration/logit size mismatch");
            std::vector<std::size_t> order(k);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return logits(static_cast<Eigen::Index>(a)) > logits(static_cast<Eigen::Index>(b));
            });
            const double mx = logits.maxCoeff();
            double total = 0.0, unknown = 0.0;
            for (Eigen::Index c = 0; c < logits.size(); ++c) total += std::exp(logits(c) - mx);
            for (std::size_t r = 0; r < cal.revise; ++r) {
                const std::size_t c = order[r];
                const double w = static_cast<double>(cal.revise - r) / static_cast<double>(cal.revise);
                const double dist = (logits.transpose() - cal.mav.row(static_cast<Eigen::Index>(c))).norm();
                const double q = rejection_probability(dist, cal.tails[c]);
                unknown += std::exp(logits(static_cast<Eigen::Index>(c)) - mx) * w * q;
            }
            return 1.0 - unknown / total;
        }
        case Method::Vim: {
            if (cal.center.size() != feature.size()) throw ShapeError("vim: calibration/feature size mismatch");
            const double v = cal.vim_alpha * vim_residual(cal, feature);
            Eigen::VectorXd ext(logits.size() + 1);
            ext.head(logits.size()) = logits;
            ext(logits.size()) = v;
            return 1.0 - std::exp(log_softmax(ext)(logits.size()));
        }
        case Method::Fgcrn: break;
    }
    throw ConfigError("score_sample: method " + method_name(cal.method) + " has no baseline score");
}

inline std::vector<double> score_samples(const BaselineCalibration& cal, const Eigen::MatrixXd& logits,
                                         const Eigen::MatrixXd& features) {
    std::vector<double> s(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Eigen::VectorXd f = features.rows() ? Eigen::VectorXd(features.row(i).transpose()) : Eigen::VectorXd();
        s[static_cast<std::size_t>(i)] = score_sample(cal, logits.row(i).transpose(), f);
    }
    return s;
}

// Score threshold keeping `coverage` of known validation samples at or above it.
inline double threshold_scores(std::vector<double> scores, double coverage) {
    if (scores.empty()) throw DataError("threshold_scores: empty validation scores");
    if (!(coverage > 0 && coverage <= 1)) throw ConfigError("coverage must be in (0, 1]");
    std::sort(scores.begin(), scores.end());
    auto idx = static_cast<std::size_t>(std::floor((1.0 - coverage) * static_cast<double>(scores.size()) + 1e-9));
    idx = std::min(idx, scores.size() - 1);
    return scores[idx];
}

inline std::vector<int> decide_by_score(const std::vector<double>& scores, const Eigen::MatrixXd& logits, double threshold) {
    const auto cls = argmax_rows(logits);
    std::vector<int> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? cls[i] : kUnknown;
    return out;
}

inline nlohmann::json describe(const BaselineCalibration& cal) {
    nlohmann::json j;
    j["method"] = method_name(cal.method);
    switch (cal.method) {
        case Method::Gen:
            j["gamma"] = cal.cfg.gen_gamma;
            j["top"] = cal.cfg.gen_top;
            break;
        case Method::OpenMax:
            j["tail_size"] = cal.cfg.openmax_tail;
            j["revise"] = cal.revise;
            j["distance"] = "euclidean";
            break;
        case Method::Vim:
            j["subspace_dim"] = cal.basis.cols();
            j["alpha"] = cal.vim_alpha;
            j["center"] = "feature_mean";
            break;
        default: break;
    }
    return j;
}

}  // namespace fgcrn
