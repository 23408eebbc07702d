#pragma once

// Dataset directories (train.csv / val.csv / test.csv + manifest.json) and the
// CSTR scenario file that produces them.
//
// CSV rows are `label,mode,t,<var_1>,...,<var_V>`, one row per time step of
// each window, windows in split order. Labels are task class ids: known
// classes 0..k-1, unknown ones from k upward. Values are raw (not standardized);
// the manifest carries the standardizer fitted on the training split.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgcrn/cstr.hpp"
#include "fgcrn/data.hpp"
#include "fgcrn/error.hpp"
#include "fgcrn/keyvalue.hpp"

namespace fgcrn {

struct DatasetManifest {
    std::size_t num_vars = 0;
    std::size_t window = 20;
    std::size_t stride = 1;
    std::vector<std::string> channels;
    std::vector<int> known_labels;    // source ids, position = class id
    std::vector<int> unknown_labels;  // source ids, position + k = label id
    std::vector<std::string> label_names;  // by task label id
    std::size_t num_modes = 0;  // 0 when the data carries no mode information
    std::uint64_t seed = 0;
    std::string task = "task";
    Standardizer standardizer;
    std::size_t train_windows = 0, val_windows = 0, test_windows = 0;

    std::size_t num_known() const { return known_labels.size(); }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["format"] = "fgcrn-dataset";
    j["version"] = 1;
    j["task"] = m.task;
    j["num_vars"] = m.num_vars;
    j["window"] = m.window;
    j["stride"] = m.stride;
    j["channels"] = m.channels;
    j["known_labels"] = m.known_labels;
    j["unknown_labels"] = m.unknown_labels;
    j["label_names"] = m.label_names;
    j["num_modes"] = m.num_modes;
    j["seed"] = m.seed;
    j["standardizer"] = {{"mean", m.standardizer.mean}, {"std", m.standardizer.std}, {"std_floor", m.standardizer.std_floor}};
    j["windows"] = {{"train", m.train_windows}, {"val", m.val_windows}, {"test", m.test_windows}};
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "fgcrn-dataset") throw DataError("manifest: not an fgcrn dataset");
        if (j.at("version") != 1) throw DataError("manifest: unsupported version");
        DatasetManifest m;
        m.task = j.value("task", std::string("task"));
        m.num_vars = j.at("num_vars");
        m.window = j.at("window");
        m.stride = j.value("stride", std::size_t{1});
        m.channels = j.at("channels").get<std::vector<std::string>>();
        m.known_labels = j.at("known_labels").get<std::vector<int>>();
        m.unknown_labels = j.at("unknown_labels").get<std::vector<int>>();
        m.label_names = j.at("label_names").get<std::vector<std::string>>();
        m.num_modes = j.value("num_modes", std::size_t{0});
        m.seed = j.value("seed", std::uint64_t{0});
        const auto& s = j.at("standardizer");
        m.standardizer.mean = s.at("mean").get<std::vector<double>>();
        m.standardizer.std = s.at("std").get<std::vector<double>>();
        m.standardizer.std_floor = s.at("std_floor");
        if (j.contains("windows")) {
            m.train_windows = j["windows"].value("train", std::size_t{0});
            m.val_windows = j["windows"].value("val", std::size_t{0});
            m.test_windows = j["windows"].value("test", std::size_t{0});
        }
        if (m.channels.size() != m.num_vars || m.standardizer.mean.size() != m.num_vars ||
            m.standardizer.std.size() != m.num_vars)
            throw DataError("manifest: channel lists do not match num_vars");
        if (m.known_labels.empty()) throw DataError("manifest: no known labels");
        if (m.label_names.size() != m.known_labels.size() + m.unknown_labels.size())
            throw DataError("manifest: label_names must cover known and unknown labels");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
}

inline void write_split_csv(const std::string& path, const std::vector<Window>& windows,
                            const std::vector<std::string>& channels) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "label,mode,t";
    for (const auto& c : channels) out << ',' << c;
    out << '\n';
    std::string line;
    for (const auto& w : windows) {
        if (w.num_vars != channels.size()) throw ShapeError("write_split_csv: window channel count mismatch");
        for (std::size_t t = 0; t < w.length; ++t) {
            line = std::to_string(w.y) + ',' + std::to_string(w.mode) + ',' + std::to_string(t);
            for (std::size_t v = 0; v < w.num_vars; ++v) {
                line += ',';
                line += format_double(w.at(v, t));
            }
            line += '\n';
            out << line;
        }
    }
    if (!out) throw DataError("failed writing '" + path + "'");
}

inline std::vector<Window> read_split_csv(const std::string& path, std::size_t num_vars, std::size_t window) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "': empty file");
    const auto header = split(line, ',');
    if (header.size() != 3 + num_vars || header[0] != "label" || header[1] != "mode" || header[2] != "t")
        throw DataError("'" + path + "': expected header label,mode,t and " + std::to_string(num_vars) + " channels");
    std::vector<Window> out;
    Window cur;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto where = [&] { return "'" + path + "' line " + std::to_string(lineno); };
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (fields.size() != 3 + num_vars) throw DataError(where() + ": wrong field count");
        int label = 0, mode = 0;
        std::size_t t = 0;
        try {
            label = static_cast<int>(parse_double(fields[0]));
            mode = static_cast<int>(parse_double(fields[1]));
            t = static_cast<std::size_t>(parse_double(fields[2]));
        } catch (const DataError&) {
            throw DataError(where() + ": malformed label/mode/t");
        }
        if (t == 0) {
            cur = Window{};
            cur.num_vars = num_vars;
            cur.length = window;
            cur.x.assign(num_vars * window, 0.0);
            cur.y = label;
            cur.mode = mode;
        } else if (cur.length == 0 || label != cur.y || mode != cur.mode) {
            throw DataError(where() + ": window rows out of order");
        }
        if (t >= window) throw DataError(where() + ": t exceeds window length");
        for (std::size_t v = 0; v < num_vars; ++v) {
            const double x = parse_double(fields[3 + v]);
            if (!std::isfinite(x)) throw DataError(where() + ": non-finite value");
            cur.x[v * window + t] = x;
        }
        if (t + 1 == window) {
            out.push_back(std::move(cur));
            cur = Window{};
        }
    }
    if (cur.length != 0) throw DataError("'" + path + "': trailing partial window");
    return out;
}

struct Dataset {
    DatasetManifest manifest;
    OpenSetTask task;
};

inline void write_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto& m = ds.manifest;
    write_split_csv((fs::path(dir) / "train.csv").string(), ds.task.train, m.channels);
    write_split_csv((fs::path(dir) / "val.csv").string(), ds.task.val, m.channels);
    write_split_csv((fs::path(dir) / "test.csv").string(), ds.task.test, m.channels);
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in '" + dir + "'");
    out << to_json(m).dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto mpath = fs::path(dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw DataError("cannot open '" + mpath.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + mpath.string() + "': " + e.what());
    }
    Dataset ds;
    ds.manifest = manifest_from_json(j);
    const auto& m = ds.manifest;
    ds.task.known_labels = m.known_labels;
    ds.task.unknown_labels = m.unknown_labels;
    ds.task.train = read_split_csv((fs::path(dir) / "train.csv").string(), m.num_vars, m.window);
    ds.task.val = read_split_csv((fs::path(dir) / "val.csv").string(), m.num_vars, m.window);
    ds.task.test = read_split_csv((fs::path(dir) / "test.csv").string(), m.num_vars, m.window);
    const int k = static_cast<int>(m.num_known());
    const int total = k + static_cast<int>(m.unknown_labels.size());
    for (const auto* split : {&ds.task.train, &ds.task.val})
        for (const auto& w : *split)
            if (w.y < 0 || w.y >= k) throw DataError("dataset '" + dir + "': train/val label " + std::to_string(w.y) + " is not a known class");
    for (const auto& w : ds.task.test)
        if (w.y < 0 || w.y >= total) throw DataError("dataset '" + dir + "': test label " + std::to_string(w.y) + " out of range");
    if (ds.task.train.empty() || ds.task.val.empty()) throw DataError("dataset '" + dir + "': empty train or val split");
    return ds;
}

// Scenario file for a simulated open-set task: the CstrScenario fields shared
// by every run, plus which faults are known / unknown and how to window them.
struct DatasetScenario {
    cstr::Scenario base;
    std::vector<cstr::Fault> known{cstr::Fault::N, cstr::Fault::F1, cstr::Fault::F2, cstr::Fault::F3,
                                   cstr::Fault::F4, cstr::Fault::F5, cstr::Fault::F6, cstr::Fault::F7};
    std::vector<cstr::Fault> unknown{cstr::Fault::F8};
    std::size_t window = 20;
    std::size_t stride = 1;
    std::uint64_t split_seed = 0;
    std::string task = "cstr";

    void validate() const {
        base.validate();
        if (known.empty()) throw ConfigError("scenario: no known faults");
        if (window < 1 || stride < 1) throw ConfigError("scenario: window and stride must be >= 1");
        std::set<cstr::Fault> seen;
        for (auto f : known)
            if (!seen.insert(f).second) throw ConfigError("scenario: fault " + cstr::fault_name(f) + " listed twice");
        for (auto f : unknown)
            if (!seen.insert(f).second) throw ConfigError("scenario: fault " + cstr::fault_name(f) + " listed twice");
    }
};

inline DatasetScenario parse_dataset_scenario(const KeyValues& kv) {
    kv.require_known({"mode_setpoints", "duration_min", "fault_start_min", "noise_std", "seed", "known", "unknown",
                      "window", "stride", "split_seed", "task"});
    DatasetScenario s;
    s.base.mode_setpoints = kv.get_doubles("mode_setpoints", s.base.mode_setpoints);
    s.base.duration_min = kv.get_double("duration_min", s.base.duration_min);
    s.base.fault_start_min = kv.get_double("fault_start_min", s.base.fault_start_min);
    s.base.noise_std = kv.get_doubles("noise_std", s.base.noise_std);
    const auto seed = kv.get_int("seed", 0);
    if (seed < 0) throw ConfigError("key 'seed': must be >= 0");
    s.base.seed = static_cast<std::uint64_t>(seed);
    auto faults = [&](const std::string& key, const std::vector<cstr::Fault>& fallback) {
        if (!kv.has(key)) return fallback;
        std::vector<cstr::Fault> out;
        for (const auto& name : kv.get_strings(key, {})) out.push_back(cstr::parse_fault(name));
        return out;
    };
    s.known = faults("known", s.known);
    s.unknown = faults("unknown", s.unknown);
    const auto window = kv.get_int("window", 20), stride = kv.get_int("stride", 1);
    if (window < 1 || stride < 1) throw ConfigError("scenario: window and stride must be >= 1");
    s.window = static_cast<std::size_t>(window);
    s.stride = static_cast<std::size_t>(stride);
    const auto split_seed = kv.get_int("split_seed", seed);
    if (split_seed < 0) throw ConfigError("key 'split_seed': must be >= 0");
    s.split_seed = static_cast<std::uint64_t>(split_seed);
    s.task = kv.get_string("task", s.task);
    s.validate();
    return s;
}

// One simulation per listed fault, each with its own noise stream. The normal
// run contributes all of its windows; a fault run only its post-injection
// windows, so class N is not flooded with near-duplicates.
inline Dataset build_cstr_dataset(const DatasetScenario& sc) {
    sc.validate();
    std::vector<Window> windows;
    auto add_run = [&](cstr::Fault f) {
        cstr::Scenario run = sc.base;
        run.fault = f;
        run.seed = sc.base.seed * 1000003ULL + static_cast<std::uint64_t>(f) + 1;
        const auto series = cstr::simulate(run);
        for (auto& w : make_windows(series, sc.window, sc.stride))
            if (f == cstr::Fault::N || w.y == static_cast<int>(f)) windows.push_back(std::move(w));
    };
    for (auto f : sc.known) add_run(f);
    for (auto f : sc.unknown) add_run(f);

    std::vector<int> known, unknown;
    for (auto f : sc.known) known.push_back(static_cast<int>(f));
    for (auto f : sc.unknown) unknown.push_back(static_cast<int>(f));
    Dataset ds;
    ds.task = split_open_set(windows, known, unknown, {}, sc.split_seed);
    auto& m = ds.manifest;
    m.task = sc.task;
    m.num_vars = cstr::kNumChannels;
    m.window = sc.window;
    m.stride = sc.stride;
    for (const char* c : cstr::kChannelNames) m.channels.emplace_back(c);
    m.known_labels = ds.task.known_labels;
    m.unknown_labels = ds.task.unknown_labels;
    for (int id : m.known_labels) m.label_names.push_back(cstr::fault_name(static_cast<cstr::Fault>(id)));
    for (int id : m.unknown_labels) m.label_names.push_back(cstr::fault_name(static_cast<cstr::Fault>(id)));
    m.num_modes = sc.base.mode_setpoints.size();
    m.seed = sc.base.seed;
    m.standardizer = fit_standardizer(ds.task.train);
    m.train_windows = ds.task.train.size();
    m.val_windows = ds.task.val.size();
    m.test_windows = ds.task.test.size();
    return ds;
}

}  // namespace fgcrn
