#pragma once

// Open-set confusion tallies and ACC / FAR / FRR.

#include <span>
#include <string>
#include <vector>

#include "fgcrn/error.hpp"
#include "fgcrn/finegrain.hpp"

namespace fgcrn {

// Real labels >= k are unknown faults; predictions are a class id or kUnknown.
struct ConfusionCounts {
    std::size_t num_classes = 0;
    std::vector<std::size_t> tp, fn, fp, tn;
    std::size_t tu = 0;  // unknown predicted unknown
    std::size_t fk = 0;  // unknown predicted as some known class
    std::size_t fu = 0;  // known predicted unknown

    std::size_t known_accepted() const {
        std::size_t s = 0;
        for (std::size_t c = 0; c < num_classes; ++c) s += tp[c] + fn[c];
        return s;
    }
    std::size_t true_positives() const {
        std::size_t s = 0;
        for (auto v : tp) s += v;
        return s;
    }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        if (o.num_classes != num_classes) throw ShapeError("ConfusionCounts: class count mismatch");
        for (std::size_t c = 0; c < num_classes; ++c) {
            tp[c] += o.tp[c];
            fn[c] += o.fn[c];
            fp[c] += o.fp[c];
            tn[c] += o.tn[c];
        }
        tu += o.tu;
        fk += o.fk;
        fu += o.fu;
        return *this;
    }
};

inline ConfusionCounts tally(std::span<const int> real, std::span<const int> pred, std::size_t k) {
    if (real.size() != pred.size()) throw ShapeError("tally: label and prediction counts differ");
    ConfusionCounts cc;
    cc.num_classes = k;
    cc.tp.assign(k, 0);
    cc.fn.assign(k, 0);
    cc.fp.assign(k, 0);
    cc.tn.assign(k, 0);
    const int K = static_cast<int>(k);
    for (std::size_t i = 0; i < real.size(); ++i) {
        const int y = real[i], p = pred[i];
        if (y < 0) throw DataError("tally: negative real label");
        if (p != kUnknown && (p < 0 || p >= K)) throw DataError("tally: prediction " + std::to_string(p) + " out of range");
        const bool known = y < K;
        if (!known) {
            if (p == kUnknown) ++cc.tu;
            else ++cc.fk;
            continue;
        }
        if (p == kUnknown) {
            ++cc.fu;
            continue;
        }
        for (int c = 0; c < K; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            if (y == c && p == c) ++cc.tp[ci];
            else if (y == c) ++cc.fn[ci];
            else if (p == c) ++cc.fp[ci];
            else ++cc.tn[ci];
        }
    }
    return cc;
}

inline double accuracy_open(const ConfusionCounts& cc) {
    const std::size_t den = cc.known_accepted() + cc.tu + cc.fk + cc.fu;
    if (den == 0) throw DataError("accuracy: no samples");
    return static_cast<double>(cc.true_positives() + cc.tu) / static_cast<double>(den);
}

struct ErrorRates {
    double far = 0.0;
    double frr = 0.0;
};

// FAR is 0 when there are no unknown samples; FRR likewise with no known ones.
inline ErrorRates far_frr(const ConfusionCounts& cc) {
    ErrorRates r;
    if (cc.fk + cc.tu > 0) r.far = static_cast<double>(cc.fk) / static_cast<double>(cc.fk + cc.tu);
    const std::size_t known = cc.known_accepted() + cc.fu;
    if (known > 0) r.frr = static_cast<double>(cc.fu) / static_cast<double>(known);
    return r;
}

// Recall per known class with rejections counted as misses.
inline std::vector<double> per_class_recall(std::span<const int> real, std::span<const int> pred, std::size_t k) {
    std::vector<double> hit(k, 0.0), total(k, 0.0);
    for (std::size_t i = 0; i < real.size(); ++i) {
        if (real[i] < 0 || real[i] >= static_cast<int>(k)) continue;
        total[static_cast<std::size_t>(real[i])] += 1;
        if (pred[i] == real[i]) hit[static_cast<std::size_t>(real[i])] += 1;
    }
    for (std::size_t c = 0; c < k; ++c) hit[c] = total[c] > 0 ? hit[c] / total[c] : 0.0;
    return hit;
}

}  // namespace fgcrn
