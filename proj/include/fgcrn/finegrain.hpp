#pragma once

// Per-class multi-cluster feature model: K-means++ clusters of correctly
// classified features, Mahalanobis statistics per cluster and a Weibull model
// of each cluster's distance tail. Decides known class vs unknown.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fgcrn/error.hpp"
#include "fgcrn/kmeans.hpp"
#include "fgcrn/objective.hpp"
#include "fgcrn/random.hpp"
#include "fgcrn/weibull.hpp"

namespace fgcrn {

inline constexpr int kUnknown = -1;

struct FineGrainConfig {
    std::size_t clusters = 0;  // 0: pick by silhouette
    std::size_t max_clusters = 5;
    double silhouette_min = 0.5;
    std::size_t silhouette_sample = 500;
    double alpha = 0.1;
    std::size_t min_tail_count = 20;
    std::size_t min_cluster_size = 0;  // 0: ceil(H / 2)
    std::size_t kmeans_restarts = 10;
    std::size_t kmeans_max_iter = 100;
    LossConfig loss;
    bool fit_tails = true;
    // Strict: too few correct samples is an error. Otherwise warn and fall
    // back to all samples of the class.
    bool strict = true;

    std::size_t cluster_floor(std::size_t hidden) const {
        return min_cluster_size ? min_cluster_size : (hidden + 1) / 2;
    }
};

struct ClusterStat {
    Gaussian gauss;
    std::size_t count = 0;
    bool pooled = false;  // covariance borrowed from the whole class
};

struct ClassModel {
    std::vector<ClusterStat> clusters;
    std::vector<WeibullTail> tails;  // empty when tails were not fitted
};

struct FineGrainedModel {
    std::size_t hidden = 0;
    std::size_t clusters = 1;
    double d0 = 1e-12;
    std::vector<ClassModel> classes;
    std::vector<std::string> warnings;

    std::size_t num_classes() const { return classes.size(); }
    bool has_tails() const {
        return !classes.empty() && std::all_of(classes.begin(), classes.end(), [](const ClassModel& c) {
            return !c.tails.empty() && c.tails.size() == c.clusters.size();
        });
    }

    std::vector<std::vector<Gaussian>> gaussians() const {
        std::vector<std::vector<Gaussian>> out(classes.size());
        for (std::size_t c = 0; c < classes.size(); ++c)
            for (const auto& cs : classes[c].clusters) out[c].push_back(cs.gauss);
        return out;
    }
};

struct OpenSetPrediction {
    int label = kUnknown;  // class id or kUnknown
    int softmax_class = 0;
    std::size_t cluster = 0;
    double distance = 0.0;
    double rejection = 0.0;
};

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

// Unbiased covariance of the rows; zero matrix for fewer than two rows.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
    if (x.rows() < 2) return Eigen::MatrixXd::Zero(x.cols(), x.cols());
    const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
    return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

inline std::vector<int> argmax_rows(const Eigen::MatrixXd& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c)
            if (logits(i, c) > logits(i, best)) best = c;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

namespace detail {

inline std::uint64_t class_seed(std::uint64_t seed, std::size_t c) { return seed * 0x9E3779B97F4A7C15ULL + 1000003ULL * (c + 1); }

// Row indices used to model class c.
inline std::vector<std::size_t> class_rows(std::span<const int> labels, std::span<const int> preds, std::size_t c,
                                           bool correct_only) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == static_cast<int>(c) && (!correct_only || preds[i] == labels[i])) rows.push_back(i);
    return rows;
}

}  // namespace detail

// Cluster count by mean silhouette over each class's correct features: the
// largest per-class best M, or 1 when no M >= 2 reaches `silhouette_min`.
inline std::size_t select_cluster_count(const Eigen::MatrixXd& features, std::span<const int> labels,
                                        std::span<const int> preds, std::size_t num_classes,
                                        const FineGrainConfig& cfg, std::uint64_t seed) {
    std::size_t chosen = 1;
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto rows = detail::class_rows(labels, preds, c, true);
        Rng rng(detail::class_seed(seed, c) ^ 0x5157ULL);
        if (rows.size() > cfg.silhouette_sample) {
            shuffle_in_place(rows, rng);
            rows.resize(cfg.silhouette_sample);
            std::sort(rows.begin(), rows.end());
        }
        const Eigen::MatrixXd pts = select_rows(features, rows);
        double best = -1.0;
        std::size_t best_m = 1;
        for (std::size_t m = 2; m <= cfg.max_clusters && m < rows.size(); ++m) {
            const auto km = kmeans_fit(pts, m, detail::class_seed(seed, c) + m, cfg.kmeans_restarts, cfg.kmeans_max_iter);
            const double s = mean_silhouette(pts, km.assignment, m);
            if (s > best) {
                best = s;
                best_m = m;
            }
        }
        if (best >= cfg.silhouette_min) chosen = std::max(chosen, best_m);
    }
    return chosen;
}

inline FineGrainedModel build_fine_grained_model(const Eigen::MatrixXd& features, std::span<const int> labels,
                                                 std::span<const int> preds, std::size_t num_classes,
                                                 const FineGrainConfig& cfg, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(features.rows());
    const auto H = static_cast<std::size_t>(features.cols());
    if (labels.size() != n || preds.size() != n) throw ShapeError("fine-grained model: length mismatch");
    cfg.loss.validate();
    FineGrainedModel model;
    model.hidden = H;
    model.d0 = cfg.loss.d0;
    model.clusters = cfg.clusters ? cfg.clusters : select_cluster_count(features, labels, preds, num_classes, cfg, seed);
    const std::size_t M = model.clusters;
    const std::size_t floor = cfg.cluster_floor(H);

    std::vector<std::string> short_classes;
    std::vector<std::vector<std::size_t>> rows(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        rows[c] = detail::class_rows(labels, preds, c, true);
        if (rows[c].size() < M * floor) short_classes.push_back(std::to_string(c) + " (" + std::to_string(rows[c].size()) + ")");
    }
    if (!short_classes.empty()) {
        std::string list;
        for (const auto& s : short_classes) list += (list.empty() ? "" : ", ") + s;
        const std::string msg = "classes with fewer than " + std::to_string(M * floor) +
                                " correctly classified samples: " + list;
        if (cfg.strict) throw DataError("fine-grained model: " + msg);
        model.warnings.push_back(msg + "; small clusters use the pooled class covariance");
    }

    model.classes.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto idx = rows[c];
        if (idx.size() < M) {
            if (cfg.strict) throw DataError("fine-grained model: class " + std::to_string(c) + " has too few samples");
            idx = detail::class_rows(labels, preds, c, false);
            model.warnings.push_back("class " + std::to_string(c) + ": clustering all samples, too few correct");
            if (idx.size() < M)
                throw DataError("fine-grained model: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                " samples for " + std::to_string(M) + " clusters");
        }
        const Eigen::MatrixXd pts = select_rows(features, idx);
        const Eigen::VectorXd class_mean = pts.colwise().mean().transpose();
        const Eigen::MatrixXd pooled = covariance(pts, class_mean);
        const auto km = kmeans_fit(pts, M, detail::class_seed(seed, c), cfg.kmeans_restarts, cfg.kmeans_max_iter);

        ClassModel& cm = model.classes[c];
        std::vector<std::vector<std::size_t>> members(M);
        for (std::size_t i = 0; i < idx.size(); ++i) members[km.assignment[i]].push_back(i);
        for (std::size_t m = 0; m < M; ++m) {
            const Eigen::MatrixXd mp = select_rows(pts, members[m]);
            Eigen::VectorXd mu = members[m].empty() ? Eigen::VectorXd(km.centers.row(static_cast<Eigen::Index>(m)).transpose())
                                                    : Eigen::VectorXd(mp.colwise().mean().transpose());
            ClusterStat cs;
            cs.count = members[m].size();
            cs.pooled = cs.count < floor;
            Eigen::MatrixXd sigma = cs.pooled ? pooled : covariance(mp, mu);
            const double eps = covariance_regularizer(sigma, cfg.loss);
            cs.gauss = Gaussian::make(std::move(mu), std::move(sigma), eps);
            cm.clusters.push_back(std::move(cs));
        }
        if (!cfg.fit_tails) continue;
        for (std::size_t m = 0; m < M; ++m) {
            std::vector<double> dist;
            dist.reserve(members[m].size());
            for (std::size_t i : members[m])
                dist.push_back(cm.clusters[m].gauss.distance(pts.row(static_cast<Eigen::Index>(i)).transpose(), cfg.loss.d0));
            try {
                const auto want = static_cast<std::size_t>(std::ceil(cfg.alpha * static_cast<double>(dist.size()) - 1e-9));
                if (!cfg.strict && want < cfg.min_tail_count && dist.size() >= cfg.min_tail_count) {
                    // small cluster: keep the minimum tail size instead of the alpha fraction
                    model.warnings.push_back("class " + std::to_string(c) + " cluster " + std::to_string(m) + ": " +
                                             std::to_string(dist.size()) + " members, tail widened to " +
                                             std::to_string(cfg.min_tail_count));
                    cm.tails.push_back(fit_weibull_top(dist, cfg.min_tail_count));
                } else {
                    cm.tails.push_back(fit_weibull_tail(dist, cfg.alpha, cfg.min_tail_count));
                }
            } catch (const Error& e) {
                throw DataError("fine-grained model: class " + std::to_string(c) + " cluster " + std::to_string(m) +
                                " (" + std::to_string(dist.size()) + " members): " + e.what());
            }
        }
    }
    return model;
}

// Nearest cluster of class c; ties go to the lowest index.
inline std::pair<std::size_t, double> assign_cluster(const Eigen::Ref<const Eigen::VectorXd>& r, std::size_t c,
                                                     const FineGrainedModel& model) {
    if (c >= model.classes.size()) throw DataError("assign_cluster: unknown class " + std::to_string(c));
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    const auto& clusters = model.classes[c].clusters;
    for (std::size_t m = 0; m < clusters.size(); ++m) {
        const double d = clusters[m].gauss.distance(r, model.d0);
        if (d < bd) {
            bd = d;
            best = m;
        }
    }
    return {best, bd};
}

inline OpenSetPrediction predict_open_set(const Eigen::Ref<const Eigen::VectorXd>& feature,
                                          const Eigen::Ref<const Eigen::VectorXd>& logits,
                                          const FineGrainedModel& model, double threshold) {
    if (!model.has_tails()) throw StateError("predict_open_set: model has no fitted tails");
    OpenSetPrediction p;
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.size(); ++c)
        if (logits(c) > logits(best)) best = c;
    p.softmax_class = static_cast<int>(best);
    const auto [m, d] = assign_cluster(feature, static_cast<std::size_t>(best), model);
    p.cluster = m;
    p.distance = d;
    p.rejection = rejection_probability(d, model.classes[static_cast<std::size_t>(best)].tails[m]);
    p.label = p.rejection > threshold ? kUnknown : p.softmax_class;
    return p;
}

inline std::vector<OpenSetPrediction> predict_open_set_batch(const Eigen::MatrixXd& features, const Eigen::MatrixXd& logits,
                                                       const FineGrainedModel& model, double threshold) {
    std::vector<OpenSetPrediction> out;
    out.reserve(static_cast<std::size_t>(features.rows()));
    for (Eigen::Index i = 0; i < features.rows(); ++i)
        out.push_back(predict_open_set(Eigen::VectorXd(features.row(i).transpose()),
                                       Eigen::VectorXd(logits.row(i).transpose()), model, threshold));
    return out;
}

// (1 - target_frr) quantile: at most floor(target_frr * n) values exceed it.
inline double calibrate_threshold(std::vector<double> q, double target_frr) {
    if (q.empty()) throw DataError("calibrate_threshold: empty validation set");
    if (!(target_frr >= 0 && target_frr < 1)) throw ConfigError("target_frr must be in [0, 1)");
    std::sort(q.begin(), q.end());
    const double n = static_cast<double>(q.size());
    auto rank = static_cast<std::ptrdiff_t>(std::ceil((1.0 - target_frr) * n - 1e-9));
    rank = std::clamp<std::ptrdiff_t>(rank, 1, static_cast<std::ptrdiff_t>(q.size()));
    return q[static_cast<std::size_t>(rank - 1)];
}

// JSON form: per (class, cluster) mean, lower Cholesky factor of sigma + eps I,
// eps, count and the tail parameters.
inline nlohmann::json to_json(const FineGrainedModel& m) {
    nlohmann::json j;
    j["format"] = "fgcrn-finegrained";
    j["version"] = 1;
    j["hidden"] = m.hidden;
    j["clusters"] = m.clusters;
    j["d0"] = m.d0;
    j["classes"] = nlohmann::json::array();
    for (const auto& cm : m.classes) {
        nlohmann::json jc = nlohmann::json::array();
        for (std::size_t k = 0; k < cm.clusters.size(); ++k) {
            const auto& cs = cm.clusters[k];
            nlohmann::json e;
            e["mu"] = std::vector<double>(cs.gauss.mu.data(), cs.gauss.mu.data() + cs.gauss.mu.size());
            std::vector<double> lower;
            for (Eigen::Index r = 0; r < cs.gauss.chol.rows(); ++r)
                for (Eigen::Index c = 0; c <= r; ++c) lower.push_back(cs.gauss.chol(r, c));
            e["chol_lower"] = lower;
            e["eps"] = cs.gauss.eps;
            e["count"] = cs.count;
            e["pooled"] = cs.pooled;
            if (k < cm.tails.size()) {
                const auto& t = cm.tails[k];
                e["tail"] = {{"tau", t.tau}, {"scale", t.scale}, {"shape", t.shape},
                             {"tail_fraction", t.tail_fraction}, {"tail_count", t.tail_count}};
            }
            jc.push_back(e);
        }
        j["classes"].push_back(jc);
    }
    return j;
}

inline FineGrainedModel finegrained_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "fgcrn-finegrained" || j.at("version") != 1)
            throw DataError("fine-grained model: unsupported format or version");
        FineGrainedModel m;
        m.hidden = j.at("hidden").get<std::size_t>();
        m.clusters = j.at("clusters").get<std::size_t>();
        m.d0 = j.at("d0").get<double>();
        const auto H = static_cast<Eigen::Index>(m.hidden);
        for (const auto& jc : j.at("classes")) {
            ClassModel cm;
            for (const auto& e : jc) {
                ClusterStat cs;
                const auto mu = e.at("mu").get<std::vector<double>>();
                const auto lower = e.at("chol_lower").get<std::vector<double>>();
                if (static_cast<Eigen::Index>(mu.size()) != H || static_cast<Eigen::Index>(lower.size()) != H * (H + 1) / 2)
                    throw DataError("fine-grained model: array size mismatch");
                cs.gauss.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), H);
                cs.gauss.chol = Eigen::MatrixXd::Zero(H, H);
                std::size_t p = 0;
                for (Eigen::Index r = 0; r < H; ++r)
                    for (Eigen::Index c = 0; c <= r; ++c) cs.gauss.chol(r, c) = lower[p++];
                cs.gauss.eps = e.at("eps").get<double>();
                cs.gauss.sigma = cs.gauss.chol * cs.gauss.chol.transpose();
                cs.gauss.sigma.diagonal().array() -= cs.gauss.eps;
                cs.count = e.at("count").get<std::size_t>();
                cs.pooled = e.at("pooled").get<bool>();
                if (e.contains("tail")) {
                    const auto& t = e["tail"];
                    cm.tails.push_back({t.at("tau").get<double>(), t.at("scale").get<double>(), t.at("shape").get<double>(),
                                        t.at("tail_fraction").get<double>(), t.at("tail_count").get<std::size_t>()});
                }
                cm.clusters.push_back(std::move(cs));
            }
            m.classes.push_back(std::move(cm));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("fine-grained model: malformed JSON: ") + e.what());
    }
}

}  // namespace fgcrn
