#include <gtest/gtest.h>

#include <functional>
#include <limits>

#include "fgcrn/kmeans.hpp"

using namespace fgcrn;

namespace {

// Optimal WCSS over every assignment of n points to at most K groups.
double brute_force_wcss(const Eigen::MatrixXd& pts, std::size_t K) {
    const auto n = static_cast<std::size_t>(pts.rows());
    std::vector<std::size_t> a(n, 0);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t used) {
        if (i == n) {
            double total = 0;
            for (std::size_t k = 0; k < used; ++k) {
                Eigen::VectorXd mean = Eigen::VectorXd::Zero(pts.cols());
                double cnt = 0;
                for (std::size_t j = 0; j < n; ++j)
                    if (a[j] == k) {
                        mean += pts.row(j).transpose();
                        cnt += 1;
                    }
                mean /= cnt;
                for (std::size_t j = 0; j < n; ++j)
                    if (a[j] == k) total += (pts.row(j).transpose() - mean).squaredNorm();
            }
            best = std::min(best, total);
            return;
        }
        for (std::size_t k = 0; k < std::min(used + 1, K); ++k) {
            a[i] = k;
            rec(i + 1, std::max(used, k + 1));
        }
    };
    rec(0, 0);
    return best;
}

}  // namespace

TEST(KMeansPP, SingleCenterIsAPoint) {
    Eigen::MatrixXd p(3, 1);
    p << 1, 2, 3;
    Rng rng(1);
    auto c = kmeanspp_init(p, 1, rng);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_LT(c[0], 3u);
}

TEST(KMeansPP, DSquaredProbability) {
    Eigen::MatrixXd p(4, 1);
    p << 0, 1, 9, 10;
    Rng rng(7);
    const int trials = 200000;
    int far = 0;
    for (int i = 0; i < trials; ++i) {
        auto c = kmeanspp_init(p, 2, 0, rng);
        if (c[1] >= 2) ++far;
    }
    const double expected = (81.0 + 100.0) / (81.0 + 100.0 + 1.0);
    EXPECT_NEAR(static_cast<double>(far) / trials, expected, 1.5e-3);
}

TEST(KMeansPP, DuplicatePointsFallBackToUniform) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Ones(5, 2);
    Rng rng(3);
    auto c = kmeanspp_init(p, 3, rng);
    std::sort(c.begin(), c.end());
    EXPECT_EQ(std::unique(c.begin(), c.end()), c.end());
}

TEST(KMeansPP, TooFewPoints) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Ones(2, 2);
    Rng rng(3);
    EXPECT_THROW(kmeanspp_init(p, 3, rng), DataError);
}

TEST(KMeans, KEqualsNGivesZeroWcss) {
    Eigen::MatrixXd p(4, 2);
    p << 0, 0, 1, 5, -3, 2, 7, 7;
    auto r = kmeans_fit(p, 4, 11);
    EXPECT_EQ(r.wcss, 0.0);
}

TEST(KMeans, RecoversSeparatedBlobs) {
    Rng rng(21);
    Eigen::MatrixXd p(400, 2);
    for (int i = 0; i < 400; ++i) {
        const double off = i < 200 ? 0.0 : 100.0;
        p(i, 0) = off + normal01(rng);
        p(i, 1) = off + normal01(rng);
    }
    auto r = kmeans_fit(p, 2, 5);
    Eigen::Index lo = r.centers(0, 0) < r.centers(1, 0) ? 0 : 1;
    EXPECT_LT((r.centers.row(lo) - Eigen::RowVector2d(0, 0)).norm(), 1.0);
    EXPECT_LT((r.centers.row(1 - lo) - Eigen::RowVector2d(100, 100)).norm(), 1.0);
}

TEST(KMeans, MatchesBruteForceOnSmallInstances) {
    Rng rng(99);
    for (int inst = 0; inst < 30; ++inst) {
        const std::size_t n = 3 + uniform_index(rng, 6);
        const std::size_t K = 1 + uniform_index(rng, std::min<std::size_t>(3, n));
        Eigen::MatrixXd p(n, 2);
        for (std::size_t i = 0; i < n; ++i) p.row(i) << 10 * uniform01(rng), 10 * uniform01(rng);
        auto r = kmeans_fit(p, K, 1000 + inst);
        EXPECT_NEAR(r.wcss, brute_force_wcss(p, K), 1e-9) << "instance " << inst;
    }
}

TEST(KMeans, DeterministicAndBestOfRestarts) {
    Rng rng(4);
    Eigen::MatrixXd p(60, 3);
    for (int i = 0; i < 60; ++i)
        for (int j = 0; j < 3; ++j) p(i, j) = normal01(rng) + (i % 3) * 4;
    auto a = kmeans_fit(p, 3, 8, 5), b = kmeans_fit(p, 3, 8, 5);
    EXPECT_EQ(a.assignment, b.assignment);
    EXPECT_EQ(a.wcss, b.wcss);
    // each single restart is one of the candidates the best was chosen from
    Rng r2(8);
    for (int rs = 0; rs < 5; ++rs) {
        auto seeds = kmeanspp_init(p, 3, r2);
        Eigen::MatrixXd c(3, 3);
        for (int k = 0; k < 3; ++k) c.row(k) = p.row(seeds[k]);
        auto single = detail::lloyd(p, c, 100);
        EXPECT_LE(a.wcss, single.wcss);
    }
}

TEST(KMeans, EmptyClusterIsReseeded) {
    Eigen::MatrixXd p(4, 1);
    p << 0, 1, 10, 11;
    Eigen::MatrixXd c(2, 1);
    c << 5.5, 100;  // second center attracts nothing
    auto r = detail::lloyd(p, c, 50);
    EXPECT_NEAR(r.wcss, 1.0, 1e-12);
}

TEST(Silhouette, SeparatedBlobsScoreHigh) {
    Eigen::MatrixXd p(6, 1);
    p << 0, 0.1, 0.2, 10, 10.1, 10.2;
    std::vector<std::size_t> a = {0, 0, 0, 1, 1, 1};
    EXPECT_GT(mean_silhouette(p, a, 2), 0.9);
}
