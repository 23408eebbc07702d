#pragma once

// Raw multivariate series, fixed-length windows, z-score standardization and
// the known/unknown open-set split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fgcrn/error.hpp"
#include "fgcrn/random.hpp"

namespace fgcrn {

// V channels by N steps, row-major (value(v, n) = values[v * N + n]).
struct RawSeries {
    std::size_t num_vars = 0;
    std::size_t num_steps = 0;
    std::vector<double> values;
    std::vector<int> labels;  // health state per step, 0 = normal
    std::vector<int> modes;   // operating mode per step (metadata only)
    double sample_period = 60.0;

    double value(std::size_t v, std::size_t n) const { return values[v * num_steps + n]; }
    double& value(std::size_t v, std::size_t n) { return values[v * num_steps + n]; }

    void validate() const {
        if (values.size() != num_vars * num_steps) throw ShapeError("RawSeries: value count does not match V*N");
        if (labels.size() != num_steps || modes.size() != num_steps)
            throw ShapeError("RawSeries: labels/modes must have one entry per step");
        for (double v : values)
            if (!std::isfinite(v)) throw DataError("RawSeries: non-finite value");
    }
};

// One model input: V x T, row-major (x[v * T + t]).
struct Window {
    std::size_t num_vars = 0;
    std::size_t length = 0;
    std::vector<double> x;
    int y = 0;
    int mode = 0;

    double at(std::size_t v, std::size_t t) const { return x[v * length + t]; }
};

// Appends series `b` after `a`. Both must have the same channel count.
inline RawSeries concat_series(const RawSeries& a, const RawSeries& b) {
    if (a.num_steps == 0) return b;
    if (a.num_vars != b.num_vars) throw ShapeError("concat_series: channel count mismatch");
    RawSeries out;
    out.num_vars = a.num_vars;
    out.num_steps = a.num_steps + b.num_steps;
    out.sample_period = a.sample_period;
    out.values.resize(out.num_vars * out.num_steps);
    for (std::size_t v = 0; v < out.num_vars; ++v) {
        std::copy_n(a.values.begin() + static_cast<std::ptrdiff_t>(v * a.num_steps), a.num_steps,
                    out.values.begin() + static_cast<std::ptrdiff_t>(v * out.num_steps));
        std::copy_n(b.values.begin() + static_cast<std::ptrdiff_t>(v * b.num_steps), b.num_steps,
                    out.values.begin() + static_cast<std::ptrdiff_t>(v * out.num_steps + a.num_steps));
    }
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.modes = a.modes;
    out.modes.insert(out.modes.end(), b.modes.begin(), b.modes.end());
    return out;
}

// Sliding windows of `length` steps every `stride` steps. A window takes the
// label and mode of its last step; windows spanning a label change or a mode
// change are dropped.
inline std::vector<Window> make_windows(const RawSeries& series, std::size_t length, std::size_t stride) {
    if (length < 1) throw ConfigError("make_windows: window length must be >= 1");
    if (stride < 1) throw ConfigError("make_windows: stride must be >= 1");
    if (series.num_steps < length)
        throw DataError("make_windows: series has " + std::to_string(series.num_steps) +
                        " steps, fewer than window length " + std::to_string(length));
    std::vector<Window> out;
    const std::size_t count = (series.num_steps - length) / stride + 1;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t start = w * stride;
        const std::size_t last = start + length - 1;
        bool mixed = false;
        for (std::size_t n = start; n < last && !mixed; ++n)
            mixed = series.labels[n] != series.labels[last] || series.modes[n] != series.modes[last];
        if (mixed) continue;
        Window win;
        win.num_vars = series.num_vars;
        win.length = length;
        win.x.resize(series.num_vars * length);
        for (std::size_t v = 0; v < series.num_vars; ++v)
            for (std::size_t t = 0; t < length; ++t) win.x[v * length + t] = series.value(v, start + t);
        win.y = series.labels[last];
        win.mode = series.modes[last];
        out.push_back(std::move(win));
    }
    return out;
}

struct Standardizer {
    std::vector<double> mean;
    std::vector<double> std;
    double std_floor = 1e-8;
};

inline Standardizer fit_standardizer(const std::vector<Window>& train, double std_floor = 1e-8) {
    if (train.empty()) throw DataError("fit_standardizer: empty training set");
    const std::size_t V = train.front().num_vars;
    Standardizer s;
    s.std_floor = std_floor;
    s.mean.assign(V, 0.0);
    s.std.assign(V, 0.0);
    double count = 0.0;
    for (const auto& w : train) {
        if (w.num_vars != V) throw ShapeError("fit_standardizer: inconsistent channel count");
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t t = 0; t < w.length; ++t) s.mean[v] += w.at(v, t);
        count += static_cast<double>(w.length);
    }
    for (auto& m : s.mean) m /= count;
    for (const auto& w : train)
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t t = 0; t < w.length; ++t) {
                const double d = w.at(v, t) - s.mean[v];
                s.std[v] += d * d;
            }
    for (auto& sd : s.std) sd = std::max(std::sqrt(sd / count), std_floor);
    return s;
}

inline Window apply_standardizer(const Standardizer& s, const Window& w) {
    if (w.num_vars != s.mean.size())
        throw ShapeError("apply_standardizer: window has " + std::to_string(w.num_vars) + " channels, standardizer " +
                         std::to_string(s.mean.size()));
    Window out = w;
    for (std::size_t v = 0; v < w.num_vars; ++v)
        for (std::size_t t = 0; t < w.length; ++t)
            out.x[v * w.length + t] = (w.at(v, t) - s.mean[v]) / s.std[v];
    return out;
}

inline std::vector<Window> apply_standardizer(const Standardizer& s, const std::vector<Window>& ws) {
    std::vector<Window> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(apply_standardizer(s, w));
    return out;
}

// Known labels are remapped to 0..k-1 in ascending order of the original ids;
// unknown labels follow at k, k+1, ... The *_index vectors point into the
// window list handed to split_open_set.
struct OpenSetTask {
    std::vector<Window> train, val, test;
    std::vector<std::size_t> train_index, val_index, test_index;
    std::vector<int> known_labels;    // original ids, position = class id
    std::vector<int> unknown_labels;  // original ids, position + k = label id

    std::size_t num_known() const { return known_labels.size(); }
};

struct SplitRatios {
    double train = 8.0;
    double val = 1.0;
    double test = 1.0;
};

inline OpenSetTask split_open_set(const std::vector<Window>& windows, const std::vector<int>& known,
                                  const std::vector<int>& unknown, SplitRatios ratios, std::uint64_t seed) {
    std::set<int> known_set(known.begin(), known.end());
    std::set<int> unknown_set(unknown.begin(), unknown.end());
    for (int u : unknown_set)
        if (known_set.count(u)) throw ConfigError("split_open_set: label " + std::to_string(u) + " is both known and unknown");
    if (known_set.empty()) throw ConfigError("split_open_set: no known labels");
    if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0) throw ConfigError("split_open_set: invalid ratios");

    OpenSetTask task;
    task.known_labels.assign(known_set.begin(), known_set.end());
    task.unknown_labels.assign(unknown_set.begin(), unknown_set.end());
    std::map<int, int> remap;
    for (std::size_t i = 0; i < task.known_labels.size(); ++i) remap[task.known_labels[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < task.unknown_labels.size(); ++i)
        remap[task.unknown_labels[i]] = static_cast<int>(task.known_labels.size() + i);

    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    std::map<int, std::size_t> known_counts;
    std::vector<std::size_t> unknown_idx;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const int y = windows[i].y;
        if (known_set.count(y)) {
            groups[{y, windows[i].mode}].push_back(i);
            ++known_counts[y];
        } else if (unknown_set.count(y)) {
            unknown_idx.push_back(i);
        } else {
            throw DataError("split_open_set: label " + std::to_string(y) + " is neither known nor unknown");
        }
    }
    for (int k : known_set)
        if (known_counts[k] < 10)
            throw DataError("split_open_set: known label " + std::to_string(k) + " has " +
                            std::to_string(known_counts[k]) + " windows, need >= 10 to stratify");

    Rng rng(seed);
    const double total = ratios.train + ratios.val + ratios.test;
    for (auto& [key, idx] : groups) {
        shuffle_in_place(idx, rng);
        const double n = static_cast<double>(idx.size());
        const auto n_val = static_cast<std::size_t>(std::floor(n * ratios.val / total + 1e-9));
        const auto n_test = static_cast<std::size_t>(std::floor(n * ratios.test / total + 1e-9));
        const std::size_t n_train = idx.size() - n_val - n_test;
        task.train_index.insert(task.train_index.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        task.val_index.insert(task.val_index.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                              idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        task.test_index.insert(task.test_index.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                               idx.end());
    }
    task.test_index.insert(task.test_index.end(), unknown_idx.begin(), unknown_idx.end());

    auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<Window> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) {
            Window w = windows[i];
            w.y = remap.at(w.y);
            out.push_back(std::move(w));
        }
        return out;
    };
    task.train = gather(task.train_index);
    task.val = gather(task.val_index);
    task.test = gather(task.test_index);
    return task;
}

}  // namespace fgcrn
