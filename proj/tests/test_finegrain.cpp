#include <gtest/gtest.h>

#include "fgcrn/finegrain.hpp"

using namespace fgcrn;

namespace {

struct Blobs {
    Eigen::MatrixXd features;
    std::vector<int> labels;
};

// Class c has `modes` gaussian blobs in 2-D, offsets far apart.
Blobs make_blobs(std::size_t classes, std::size_t modes, std::size_t per_blob, std::uint64_t seed) {
    Rng rng(seed);
    Blobs b;
    b.features.resize(static_cast<Eigen::Index>(classes * modes * per_blob), 2);
    Eigen::Index row = 0;
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t m = 0; m < modes; ++m)
            for (std::size_t i = 0; i < per_blob; ++i) {
                b.features(row, 0) = 100.0 * c + normal01(rng);
                b.features(row, 1) = 50.0 * m + normal01(rng);
                b.labels.push_back(static_cast<int>(c));
                ++row;
            }
    return b;
}

FineGrainConfig config(std::size_t M) {
    FineGrainConfig c;
    c.clusters = M;
    return c;
}

}  // namespace

TEST(FineGrain, RecoversTwoModesPerClass) {
    auto b = make_blobs(2, 2, 300, 1);
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 2, config(2), 3);
    ASSERT_EQ(m.classes.size(), 2u);
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> ys;
        for (const auto& cs : m.classes[c].clusters) {
            EXPECT_NEAR(cs.gauss.mu(0), 100.0 * c, 1.0);
            ys.push_back(cs.gauss.mu(1));
        }
        std::sort(ys.begin(), ys.end());
        EXPECT_NEAR(ys[0], 0.0, 1.0);
        EXPECT_NEAR(ys[1], 50.0, 1.0);
        EXPECT_EQ(m.classes[c].tails.size(), 2u);
    }
}

TEST(FineGrain, SingleClusterIsClassMean) {
    auto b = make_blobs(2, 2, 150, 2);
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 2, config(1), 3);
    for (int c = 0; c < 2; ++c) {
        Eigen::Vector2d mean = Eigen::Vector2d::Zero();
        for (Eigen::Index i = 0; i < b.features.rows(); ++i)
            if (b.labels[i] == c) mean += b.features.row(i).transpose();
        mean /= 300.0;
        EXPECT_NEAR((m.classes[c].clusters[0].gauss.mu - mean).norm(), 0.0, 1e-9);
    }
}

TEST(FineGrain, MisclassifiedSamplesIgnored) {
    auto b = make_blobs(2, 2, 200, 4);
    std::vector<int> preds = b.labels;
    auto ref = build_fine_grained_model(b.features, b.labels, preds, 2, config(2), 9);
    // append wrongly predicted outliers
    const Eigen::Index n = b.features.rows();
    Eigen::MatrixXd f(n + 5, 2);
    f.topRows(n) = b.features;
    std::vector<int> y = b.labels, p = preds;
    for (int i = 0; i < 5; ++i) {
        f.row(n + i) << 1e4 * (i + 1), -1e4;
        y.push_back(0);
        p.push_back(1);
    }
    auto with = build_fine_grained_model(f, y, p, 2, config(2), 9);
    for (int c = 0; c < 2; ++c)
        for (int k = 0; k < 2; ++k) {
            EXPECT_EQ(with.classes[c].clusters[k].gauss.mu, ref.classes[c].clusters[k].gauss.mu);
            EXPECT_EQ(with.classes[c].tails[k].scale, ref.classes[c].tails[k].scale);
        }
    // and moving a misclassified sample changes nothing either
    f(n, 0) = -777;
    auto moved = build_fine_grained_model(f, y, p, 2, config(2), 9);
    EXPECT_EQ(moved.classes[0].clusters[1].gauss.chol, with.classes[0].clusters[1].gauss.chol);
}

TEST(FineGrain, InsufficientSamplesListsClasses) {
    auto b = make_blobs(2, 1, 30, 5);
    Eigen::MatrixXd big(60, 40);
    big.setZero();
    big.leftCols(2) = b.features;
    try {
        build_fine_grained_model(big, b.labels, b.labels, 2, config(2), 1);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("0 (30)"), std::string::npos) << e.what();
    }
    FineGrainConfig lax = config(2);
    lax.strict = false;
    lax.fit_tails = false;
    auto m = build_fine_grained_model(big, b.labels, b.labels, 2, lax, 1);
    EXPECT_FALSE(m.warnings.empty());
    EXPECT_TRUE(m.classes[0].clusters[0].pooled);
}

TEST(FineGrain, SilhouettePicksModeCount) {
    auto b = make_blobs(2, 3, 100, 6);
    FineGrainConfig c = config(0);
    EXPECT_EQ(select_cluster_count(b.features, b.labels, b.labels, 2, c, 1), 3u);
    auto one = make_blobs(2, 1, 200, 6);
    EXPECT_EQ(select_cluster_count(one.features, one.labels, one.labels, 2, c, 1), 1u);
}

TEST(FineGrain, AssignClusterTieGoesLow) {
    FineGrainedModel m;
    m.hidden = 2;
    m.d0 = 1e-12;
    m.classes.resize(1);
    for (double x : {-1.0, 1.0}) {
        ClusterStat cs;
        cs.gauss = Gaussian::make(Eigen::Vector2d(x, 0), Eigen::Matrix2d::Identity(), 1e-6);
        m.classes[0].clusters.push_back(cs);
    }
    auto [k, d] = assign_cluster(Eigen::Vector2d(0, 3), 0, m);
    EXPECT_EQ(k, 0u);
    auto [k2, d2] = assign_cluster(Eigen::Vector2d(1, 0), 0, m);
    EXPECT_EQ(k2, 1u);
    EXPECT_DOUBLE_EQ(d2, std::sqrt(1e-12));
    EXPECT_THROW(assign_cluster(Eigen::Vector2d(0, 0), 3, m), DataError);
}

TEST(FineGrain, PredictionRule) {
    auto b = make_blobs(2, 1, 400, 7);
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 2, config(1), 3);
    Eigen::Vector2d logits(5, 0);
    auto at_center = predict_open_set(m.classes[0].clusters[0].gauss.mu, logits, m, 0.5);
    EXPECT_EQ(at_center.label, 0);
    EXPECT_EQ(at_center.rejection, 0.0);
    // exponential-shaped tail so that 10 scales past tau means q = 1 - e^-10
    auto& t = m.classes[0].tails[0];
    t.shape = 1.0;
    // push far along the first axis until d - tau is at least 10 scales
    Eigen::Vector2d far = m.classes[0].clusters[0].gauss.mu;
    while (assign_cluster(far, 0, m).second - t.tau < 10 * t.scale) far(0) += 1.0;
    auto p = predict_open_set(far, logits, m, 0.9999);
    EXPECT_GT(p.rejection, 0.9999);
    EXPECT_EQ(p.label, kUnknown);
    EXPECT_EQ(predict_open_set(far, logits, m, 1.0).label, 0);
}

TEST(FineGrain, CalibrateThreshold) {
    std::vector<double> q(1000);
    Rng rng(3);
    for (auto& v : q) v = uniform01(rng);
    const double thr = calibrate_threshold(q, 0.01);
    EXPECT_LE(std::count_if(q.begin(), q.end(), [&](double v) { return v > thr; }), 10);
    EXPECT_EQ(calibrate_threshold(q, 0.0), *std::max_element(q.begin(), q.end()));
    EXPECT_EQ(calibrate_threshold(std::vector<double>(10, 0.0), 0.01), 0.0);
    EXPECT_THROW(calibrate_threshold({}, 0.01), DataError);
}

TEST(FineGrain, ClassicEvtOrderingWithOneCluster) {
    // M = 1 and identity covariance: rejection ordering equals ordering by
    // Euclidean distance to the class mean.
    auto b = make_blobs(1, 1, 500, 8);
    FineGrainConfig c = config(1);
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 1, c, 3);
    auto& cs = m.classes[0].clusters[0];
    cs.gauss = Gaussian::make(cs.gauss.mu, Eigen::Matrix2d::Zero(), 1.0);
    Rng rng(1);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 200; ++i) {
        Eigen::Vector2d r = cs.gauss.mu + Eigen::Vector2d(5 * normal01(rng), 5 * normal01(rng));
        const double q = rejection_probability(assign_cluster(r, 0, m).second, m.classes[0].tails[0]);
        pairs.push_back({(r - cs.gauss.mu).norm(), q});
    }
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_GE(pairs[i].second, pairs[i - 1].second);
}

TEST(FineGrain, JsonRoundTrip) {
    auto b = make_blobs(2, 2, 200, 9);
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 2, config(2), 3);
    auto back = finegrained_from_json(nlohmann::json::parse(to_json(m).dump()));
    ASSERT_EQ(back.classes.size(), 2u);
    for (int c = 0; c < 2; ++c)
        for (int k = 0; k < 2; ++k) {
            EXPECT_EQ(back.classes[c].clusters[k].gauss.mu, m.classes[c].clusters[k].gauss.mu);
            EXPECT_EQ(back.classes[c].clusters[k].gauss.chol, m.classes[c].clusters[k].gauss.chol);
            EXPECT_EQ(back.classes[c].tails[k].shape, m.classes[c].tails[k].shape);
            EXPECT_EQ(back.classes[c].tails[k].tau, m.classes[c].tails[k].tau);
        }
}

TEST(FineGrain, SmallClusterTailWidenedWhenLenient) {
    // 100 members per cluster: alpha 0.1 gives 10 < 20
    auto b = make_blobs(1, 2, 100, 8);
    auto cfg = config(2);
    EXPECT_THROW(build_fine_grained_model(b.features, b.labels, b.labels, 1, cfg, 3), DataError);
    cfg.strict = false;
    auto m = build_fine_grained_model(b.features, b.labels, b.labels, 1, cfg, 3);
    ASSERT_EQ(m.classes[0].tails.size(), 2u);
    for (const auto& t : m.classes[0].tails) EXPECT_EQ(t.tail_count, 20u);
    ASSERT_EQ(m.warnings.size(), 2u);
    EXPECT_NE(m.warnings[0].find("tail widened to 20"), std::string::npos);
}

TEST(FineGrain, ClusterBelowMinimumTailStillFails) {
    auto b = make_blobs(1, 1, 15, 9);
    auto cfg = config(1);
    cfg.strict = false;
    EXPECT_THROW(build_fine_grained_model(b.features, b.labels, b.labels, 1, cfg, 3), DataError);
}
