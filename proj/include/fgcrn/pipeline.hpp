#pragma once

// Training, evaluation and projection export: the workflow behind the CLI.
//
// A model directory holds
//   checkpoint.bin     network + optimizer state of the selected epoch
//   finegrained.json   cluster/tail model, threshold and standardizer
//   run_config.txt     canonical config (its FNV-1a hash stamps every artifact)
//   train_log.csv      epoch,L,L1,L2,lr,train_acc,val_acc

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fgcrn/baselines.hpp"
#include "fgcrn/checkpoint.hpp"
#include "fgcrn/dataset_io.hpp"
#include "fgcrn/finegrain.hpp"
#include "fgcrn/keyvalue.hpp"
#include "fgcrn/metrics.hpp"
#include "fgcrn/net.hpp"
#include "fgcrn/objective.hpp"

namespace fgcrn {

struct RunConfig {
    std::size_t epochs = 50;
    std::size_t batch = 512;
    std::size_t hidden = 100;
    double lr = 0.01;
    double lr_decay = 0.3;
    std::size_t lr_step = 3;
    double lambda_dist = 0.1;
    double alpha = 0.1;
    double d0 = 1e-12;
    double eps_scale = 1e-3;
    double eps_floor = 1e-6;
    double eps_fixed = 0.0;
    std::size_t clusters = 0;  // 0 = auto
    std::size_t max_clusters = 5;
    std::size_t min_tail_count = 20;
    double target_frr = 0.01;
    std::size_t window = 20;
    std::size_t stride = 1;
    std::uint64_t seed = 0;
    net::NormMode norm = net::NormMode::Both;
    bool tam = true;
    bool bidirectional = true;
    BaselineConfig baselines;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch < 2) throw ConfigError("batch must be >= 2");
        if (hidden < 1) throw ConfigError("hidden must be >= 1");
        if (!(lr > 0) || !(lr_decay > 0) || lr_step < 1) throw ConfigError("learning-rate schedule must be positive");
        if (!(alpha > 0 && alpha <= 1)) throw ConfigError("alpha must be in (0, 1]");
        if (!(target_frr >= 0 && target_frr < 1)) throw ConfigError("target_frr must be in [0, 1)");
        if (max_clusters < 1 || clusters > max_clusters) throw ConfigError("clusters must be auto or in 1..max_clusters");
        if (min_tail_count < 2) throw ConfigError("min_tail_count must be >= 2");
        if (window < 1 || stride < 1) throw ConfigError("window and stride must be >= 1");
        if (!(baselines.gen_gamma > 0) || baselines.gen_top < 1 || baselines.openmax_tail < 2 || baselines.openmax_revise < 1)
            throw ConfigError("baseline settings out of range");
        loss().validate();
    }

    LossConfig loss() const {
        LossConfig l;
        l.lambda_dist = lambda_dist;
        l.d0 = d0;
        l.eps_scale = eps_scale;
        l.eps_floor = eps_floor;
        l.eps_fixed = eps_fixed;
        return l;
    }

    // One `key = value` line per setting, sorted, numbers in shortest
    // round-trip form. Hashing this text gives the config hash.
    std::string canonical() const {
        std::map<std::string, std::string> kv;
        auto num = [](double v) { return format_double(v); };
        kv["epochs"] = std::to_string(epochs);
        kv["batch"] = std::to_string(batch);
        kv["hidden"] = std::to_string(hidden);
        kv["lr"] = num(lr);
        kv["lr_decay"] = num(lr_decay);
        kv["lr_step"] = std::to_string(lr_step);
        kv["lambda_dist"] = num(lambda_dist);
        kv["alpha"] = num(alpha);
        kv["d0"] = num(d0);
        kv["eps_scale"] = num(eps_scale);
        kv["eps_floor"] = num(eps_floor);
        kv["eps_fixed"] = num(eps_fixed);
        kv["clusters"] = clusters ? std::to_string(clusters) : "auto";
        kv["max_clusters"] = std::to_string(max_clusters);
        kv["min_tail_count"] = std::to_string(min_tail_count);
        kv["target_frr"] = num(target_frr);
        kv["window"] = std::to_string(window);
        kv["stride"] = std::to_string(stride);
        kv["seed"] = std::to_string(seed);
        kv["norm"] = net::to_string(norm);
        kv["tam"] = tam ? "true" : "false";
        kv["bidirectional"] = bidirectional ? "true" : "false";
        kv["gen_gamma"] = num(baselines.gen_gamma);
        kv["gen_top"] = std::to_string(baselines.gen_top);
        kv["openmax_tail"] = std::to_string(baselines.openmax_tail);
        kv["openmax_revise"] = std::to_string(baselines.openmax_revise);
        kv["vim_dim"] = baselines.vim_dim ? std::to_string(baselines.vim_dim) : "auto";
        std::string out;
        for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
        return out;
    }

    std::string hash() const { return hex64(fnv1a64(canonical())); }
};

inline RunConfig parse_run_config(const KeyValues& kv) {
    kv.require_known({"epochs", "batch", "hidden", "lr", "lr_decay", "lr_step", "lambda_dist", "alpha", "d0",
                      "eps_scale", "eps_floor", "eps_fixed", "clusters", "max_clusters", "min_tail_count",
                      "target_frr", "window", "stride", "seed", "norm", "tam", "bidirectional", "gen_gamma",
                      "gen_top", "openmax_tail", "openmax_revise", "vim_dim"});
    RunConfig c;
    auto count = [&](const std::string& key, std::size_t fallback) {
        const auto v = kv.get_int(key, static_cast<long long>(fallback));
        if (v < 0) throw ConfigError("key '" + key + "': must be >= 0");
        return static_cast<std::size_t>(v);
    };
    auto count_or_auto = [&](const std::string& key, std::size_t fallback) {
        if (kv.get_string(key, "") == "auto") return std::size_t{0};
        const auto v = count(key, fallback);
        if (kv.has(key) && v == 0) throw ConfigError("key '" + key + "': use 'auto' or a positive count");
        return v;
    };
    c.epochs = count("epochs", c.epochs);
    c.batch = count("batch", c.batch);
    c.hidden = count("hidden", c.hidden);
    c.lr = kv.get_double("lr", c.lr);
    c.lr_decay = kv.get_double("lr_decay", c.lr_decay);
    c.lr_step = count("lr_step", c.lr_step);
    c.lambda_dist = kv.get_double("lambda_dist", c.lambda_dist);
    c.alpha = kv.get_double("alpha", c.alpha);
    c.d0 = kv.get_double("d0", c.d0);
    c.eps_scale = kv.get_double("eps_scale", c.eps_scale);
    c.eps_floor = kv.get_double("eps_floor", c.eps_floor);
    c.eps_fixed = kv.get_double("eps_fixed", c.eps_fixed);
    c.clusters = count_or_auto("clusters", 0);
    c.max_clusters = count("max_clusters", c.max_clusters);
    c.min_tail_count = count("min_tail_count", c.min_tail_count);
    c.target_frr = kv.get_double("target_frr", c.target_frr);
    c.window = count("window", c.window);
    c.stride = count("stride", c.stride);
    c.seed = count("seed", 0);
    c.norm = net::parse_norm_mode(kv.get_string("norm", "both"));
    c.tam = kv.get_bool("tam", c.tam);
    c.bidirectional = kv.get_bool("bidirectional", c.bidirectional);
    c.baselines.gen_gamma = kv.get_double("gen_gamma", c.baselines.gen_gamma);
    c.baselines.gen_top = count("gen_top", c.baselines.gen_top);
    c.baselines.openmax_tail = count("openmax_tail", c.baselines.openmax_tail);
    c.baselines.openmax_revise = count("openmax_revise", c.baselines.openmax_revise);
    c.baselines.vim_dim = count_or_auto("vim_dim", 0);
    c.validate();
    return c;
}

struct TrainingLogRow {
    std::size_t epoch = 0;
    double loss = 0, l1 = 0, l2 = 0, lr = 0, train_acc = 0, val_acc = 0;
    double wall_seconds = 0;  // progress output only, never written to artifacts
};

struct TrainResult {
    Checkpoint checkpoint;
    FineGrainedModel finegrained;
    Standardizer standardizer;
    double threshold = 0.0;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
    std::vector<TrainingLogRow> log;
    std::string config_hash;
};

inline net::ModelConfig model_config(const RunConfig& cfg, std::size_t num_vars, std::size_t num_classes) {
    net::ModelConfig m;
    m.num_vars = num_vars;
    m.window = cfg.window;
    m.hidden = cfg.hidden;
    m.num_classes = num_classes;
    m.norm = cfg.norm;
    m.bidirectional = cfg.bidirectional;
    m.use_tam = cfg.tam;
    return m;
}

inline FineGrainConfig finegrain_config(const RunConfig& cfg, std::size_t clusters) {
    FineGrainConfig f;
    f.clusters = clusters;
    f.max_clusters = cfg.max_clusters;
    f.alpha = cfg.alpha;
    f.min_tail_count = cfg.min_tail_count;
    f.loss = cfg.loss();
    f.strict = false;
    return f;
}

inline std::vector<int> labels_of(const std::vector<Window>& ws) {
    std::vector<int> y;
    y.reserve(ws.size());
    for (const auto& w : ws) y.push_back(w.y);
    return y;
}

inline double closed_set_accuracy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
    const auto pred = argmax_rows(logits);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
    return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Cluster count used for training: explicit, else the number of simulated
// modes, else chosen by silhouette on the first refit (and then kept).
inline std::size_t resolve_clusters(const RunConfig& cfg, const DatasetManifest& m) {
    if (cfg.clusters) return cfg.clusters;
    if (m.num_modes) return std::min(m.num_modes, cfg.max_clusters);
    return 0;
}

using LogSink = std::function<void(const TrainingLogRow&)>;

inline TrainResult run_training(const OpenSetTask& task, const DatasetManifest& manifest, const RunConfig& cfg,
                                const LogSink& sink = {}) {
    cfg.validate();
    if (cfg.window != manifest.window)
        throw ConfigError("config window " + std::to_string(cfg.window) + " does not match the dataset's " +
                          std::to_string(manifest.window));
    if (cfg.stride != manifest.stride)
        throw ConfigError("config stride " + std::to_string(cfg.stride) + " does not match the dataset's " +
                          std::to_string(manifest.stride));
    const std::size_t k = manifest.num_known();
    for (const auto* split : {&task.train, &task.val})
        for (const auto& w : *split)
            if (w.y < 0 || w.y >= static_cast<int>(k)) throw DataError("training data contains a non-known label");
    if (task.train.size() < 2) throw DataError("training split has fewer than 2 windows");

    TrainResult res;
    res.config_hash = cfg.hash();
    res.standardizer = fit_standardizer(task.train);
    const auto train = apply_standardizer(res.standardizer, task.train);
    const auto val = apply_standardizer(res.standardizer, task.val);
    const auto train_y = labels_of(train);
    const auto val_y = labels_of(val);

    net::Model model = net::Model::create(model_config(cfg, manifest.num_vars, k), cfg.seed);
    net::AdamState adam = net::make_adam(model);
    Rng shuffle_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
    std::size_t clusters = resolve_clusters(cfg, manifest);
    std::vector<std::vector<Gaussian>> gaussians;  // empty until the first refit

    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t H = cfg.hidden;
    Checkpoint best;
    double best_acc = -1.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = net::learning_rate(epoch, cfg.lr, cfg.lr_decay, cfg.lr_step);
        shuffle_in_place(order, shuffle_rng);
        double sum_l = 0, sum_l1 = 0, sum_l2 = 0, seen = 0, hits = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
            if (b1 - b0 < 2) break;  // batch statistics need two samples
            const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
            const std::size_t B = idx.size();
            const auto input = net::pack_batch(train, idx);
            std::vector<int> y(B);
            for (std::size_t i = 0; i < B; ++i) y[i] = train_y[idx[i]];

            const net::Trace tr = net::forward(model, input, B, true);
            const CrossEntropy ce = cross_entropy(tr.logits, y, k);
            std::vector<int> pred(B);
            for (std::size_t i = 0; i < B; ++i) {
                const double* o = tr.logits.data() + i * k;
                pred[i] = static_cast<int>(std::max_element(o, o + k) - o);
                hits += pred[i] == y[i];
            }
            double l2 = 0.0;
            std::vector<double> dfeat(B * H, 0.0);
            if (!gaussians.empty() && cfg.lambda_dist > 0) {
                const Eigen::MatrixXd feats =
                    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                        tr.features.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(H));
                const DistanceLoss dl = distance_loss(feats, y, pred, gaussians, cfg.d0);
                l2 = dl.value;
                for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] = cfg.lambda_dist * dl.dfeatures[i];
            }
            const double loss = ce.value + cfg.lambda_dist * l2;
            if (!std::isfinite(loss))
                throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b0 / cfg.batch) + ": L1=" + std::to_string(ce.value) +
                                   " L2=" + std::to_string(l2) + " lr=" + std::to_string(lr));
            model.zero_grad();
            net::backward(model, tr, ce.dlogits, dfeat);
            net::commit_batch_stats(model, tr);
            net::adam_step(model, adam, lr);
            sum_l += loss * static_cast<double>(B);
            sum_l1 += ce.value * static_cast<double>(B);
            sum_l2 += l2 * static_cast<double>(B);
            seen += static_cast<double>(B);
        }

        // refit clusters on the epoch's final weights; they drive next epoch's L2
        const auto train_out = net::infer(model, train);
        const auto train_pred = argmax_rows(train_out.logits);
        if (cfg.lambda_dist > 0 || clusters == 0) {
            auto fcfg = finegrain_config(cfg, clusters);
            fcfg.fit_tails = false;
            const auto fg = build_fine_grained_model(train_out.features, train_y, train_pred, k, fcfg, cfg.seed + epoch);
            clusters = fg.clusters;
            gaussians = fg.gaussians();
        }
        const auto val_out = net::infer(model, val);
        TrainingLogRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.loss = sum_l / seen;
        row.l1 = sum_l1 / seen;
        row.l2 = sum_l2 / seen;
        row.train_acc = hits / seen;
        row.val_acc = closed_set_accuracy(val_out.logits, val_y);
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.log.push_back(row);
        if (sink) sink(row);
        if (row.val_acc > best_acc) {
            best_acc = row.val_acc;
            best.model = model;
            best.adam = adam;
            best.epoch = epoch;
        }
    }

    best.config_hash = res.config_hash;
    res.checkpoint = std::move(best);
    res.best_epoch = res.checkpoint.epoch;
    res.best_val_acc = best_acc;

    const net::Model& final_model = res.checkpoint.model;
    const auto train_out = net::infer(final_model, train);
    res.finegrained = build_fine_grained_model(train_out.features, train_y, argmax_rows(train_out.logits), k,
                                               finegrain_config(cfg, clusters), cfg.seed);
    const auto val_out = net::infer(final_model, val);
    std::vector<double> q;
    for (const auto& p : predict_open_set_batch(val_out.features, val_out.logits, res.finegrained, 1.0))
        q.push_back(p.rejection);
    res.threshold = calibrate_threshold(q, cfg.target_frr);
    return res;
}

inline std::string format_log_csv(const std::vector<TrainingLogRow>& log) {
    std::string out = "epoch,L,L1,L2,lr,train_acc,val_acc\n";
    for (const auto& r : log)
        out += std::to_string(r.epoch) + ',' + format_double(r.loss) + ',' + format_double(r.l1) + ',' +
               format_double(r.l2) + ',' + format_double(r.lr) + ',' + format_double(r.train_acc) + ',' +
               format_double(r.val_acc) + '\n';
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw DataError("failed writing '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "': " + e.what());
    }
}

inline void save_model_dir(const std::string& dir, const TrainResult& r, const RunConfig& cfg,
                           const DatasetManifest& manifest) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), r.checkpoint);
    nlohmann::json j;
    j["config_hash"] = r.config_hash;
    j["threshold"] = r.threshold;
    j["target_frr"] = cfg.target_frr;
    j["best_epoch"] = r.best_epoch;
    j["best_val_acc"] = r.best_val_acc;
    j["label_names"] = manifest.label_names;
    j["standardizer"] = {{"mean", r.standardizer.mean}, {"std", r.standardizer.std}, {"std_floor", r.standardizer.std_floor}};
    j["warnings"] = r.finegrained.warnings;
    j["model"] = to_json(r.finegrained);
    write_text(fs::path(dir) / "finegrained.json", j.dump(2) + "\n");
    write_text(fs::path(dir) / "run_config.txt", cfg.canonical());
    write_text(fs::path(dir) / "train_log.csv", format_log_csv(r.log));
}

struct LoadedModel {
    Checkpoint checkpoint;
    FineGrainedModel finegrained;
    Standardizer standardizer;
    double threshold = 0.0;
    RunConfig cfg;
    std::string config_hash;
};

inline LoadedModel load_model_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    LoadedModel m;
    m.cfg = parse_run_config(KeyValues::parse(read_text(fs::path(dir) / "run_config.txt")));
    m.config_hash = m.cfg.hash();
    m.checkpoint = load_checkpoint((fs::path(dir) / "checkpoint.bin").string());
    const auto j = parse_json_file(fs::path(dir) / "finegrained.json");
    try {
        const std::string fg_hash = j.at("config_hash");
        if (m.checkpoint.config_hash != fg_hash)
            throw ConfigError("config hash mismatch: checkpoint " + m.checkpoint.config_hash + ", fine-grained model " + fg_hash);
        if (fg_hash != m.config_hash)
            throw ConfigError("config hash mismatch: run_config.txt hashes to " + m.config_hash + ", artifacts carry " + fg_hash);
        m.threshold = j.at("threshold");
        m.standardizer.mean = j.at("standardizer").at("mean").get<std::vector<double>>();
        m.standardizer.std = j.at("standardizer").at("std").get<std::vector<double>>();
        m.standardizer.std_floor = j.at("standardizer").at("std_floor");
        m.finegrained = finegrained_from_json(j.at("model"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + (fs::path(dir) / "finegrained.json").string() + "': " + e.what());
    }
    if (m.finegrained.hidden != m.checkpoint.model.cfg.hidden ||
        m.finegrained.num_classes() != m.checkpoint.model.cfg.num_classes)
        throw DataError("model directory '" + dir + "': fine-grained model does not match the network");
    return m;
}

struct MethodResult {
    Method method = Method::Fgcrn;
    double acc = 0, far = 0, frr = 0, threshold = 0;
    std::vector<double> recall;
    nlohmann::json calibration;
};

struct EvaluationReport {
    std::string task;
    std::string config_hash;
    std::vector<MethodResult> rows;
    std::vector<std::string> label_names;
    std::size_t num_known = 0;
    std::size_t test_known = 0, test_unknown = 0;
};

inline std::vector<Method> parse_methods(const std::string& list) {
    std::vector<Method> out;
    for (const auto& name : split(list, ','))
        if (!name.empty()) out.push_back(parse_method(name));
    if (out.empty()) throw ConfigError("no evaluation methods given");
    return out;
}

inline EvaluationReport run_evaluation(const LoadedModel& model, const Dataset& data, const std::vector<Method>& methods) {
    const auto& net_cfg = model.checkpoint.model.cfg;
    const std::size_t k = data.manifest.num_known();
    if (net_cfg.num_vars != data.manifest.num_vars || net_cfg.window != data.manifest.window || net_cfg.num_classes != k)
        throw DataError("evaluation: dataset shape does not match the trained model");
    const auto train = apply_standardizer(model.standardizer, data.task.train);
    const auto val = apply_standardizer(model.standardizer, data.task.val);
    const auto test = apply_standardizer(model.standardizer, data.task.test);
    const auto& net = model.checkpoint.model;
    const auto train_out = net::infer(net, train);
    const auto val_out = net::infer(net, val);
    const auto test_out = net::infer(net, test);
    const auto train_y = labels_of(train);
    const auto test_y = labels_of(test);

    EvaluationReport rep;
    rep.task = data.manifest.task;
    rep.config_hash = model.config_hash;
    rep.label_names = data.manifest.label_names;
    rep.num_known = k;
    for (int y : test_y) (y < static_cast<int>(k) ? rep.test_known : rep.test_unknown) += 1;

    auto finish = [&](MethodResult r, const std::vector<int>& pred) {
        const auto cc = tally(test_y, pred, k);
        r.acc = accuracy_open(cc);
        const auto e = far_frr(cc);
        r.far = e.far;
        r.frr = e.frr;
        r.recall = per_class_recall(test_y, pred, k);
        rep.rows.push_back(std::move(r));
    };
    for (Method method : methods) {
        MethodResult r;
        r.method = method;
        if (method == Method::Fgcrn) {
            r.threshold = model.threshold;
            std::vector<int> pred;
            for (const auto& p : predict_open_set_batch(test_out.features, test_out.logits, model.finegrained, model.threshold))
                pred.push_back(p.label);
            r.calibration = {{"method", "fgcrn"},
                             {"clusters", model.finegrained.clusters},
                             {"alpha", model.cfg.alpha},
                             {"target_frr", model.cfg.target_frr}};
            finish(std::move(r), pred);
            continue;
        }
        const auto cal = calibrate_baseline(method, train_out.logits, train_out.features, train_y, model.cfg.baselines);
        r.threshold = threshold_scores(score_samples(cal, val_out.logits, val_out.features), 1.0 - model.cfg.target_frr);
        r.calibration = describe(cal);
        const auto pred = decide_by_score(score_samples(cal, test_out.logits, test_out.features), test_out.logits, r.threshold);
        finish(std::move(r), pred);
    }
    return rep;
}

inline nlohmann::json to_json(const EvaluationReport& rep) {
    nlohmann::json j;
    j["task"] = rep.task;
    j["config_hash"] = rep.config_hash;
    j["label_names"] = rep.label_names;
    j["num_known"] = rep.num_known;
    j["test_known"] = rep.test_known;
    j["test_unknown"] = rep.test_unknown;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rep.rows)
        j["rows"].push_back({{"task", rep.task},
                             {"method", method_name(r.method)},
                             {"ACC", r.acc},
                             {"FAR", r.far},
                             {"FRR", r.frr},
                             {"threshold", r.threshold},
                             {"per_class_recall", r.recall},
                             {"calibration", r.calibration}});
    return j;
}

inline std::string report_csv(const EvaluationReport& rep) {
    std::string out = "task,method,ACC,FAR,FRR,threshold\n";
    for (const auto& r : rep.rows)
        out += rep.task + ',' + method_name(r.method) + ',' + format_double(r.acc) + ',' + format_double(r.far) + ',' +
               format_double(r.frr) + ',' + format_double(r.threshold) + '\n';
    return out;
}

// Writes <stem>.json and <stem>.csv next to each other.
inline void write_report(const std::string& path, const EvaluationReport& rep) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_text(std::filesystem::path(p).replace_extension(".json"), to_json(rep).dump(2) + "\n");
    write_text(std::filesystem::path(p).replace_extension(".csv"), report_csv(rep));
}

struct Projection {
    Eigen::VectorXd mean;
    Eigen::MatrixXd basis;  // H x 2
};

// Top-2 principal axes of `fit`; each axis is signed so its largest-magnitude
// entry is positive.
inline Projection fit_projection(const Eigen::MatrixXd& fit) {
    if (fit.rows() < 3) throw DataError("projection: need at least 3 samples");
    if (fit.cols() < 2) throw DataError("projection: need at least 2 feature dimensions");
    Projection p;
    p.mean = fit.colwise().mean().transpose();
    const Eigen::MatrixXd centered = fit.rowwise() - p.mean.transpose();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(fit.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("projection: eigen decomposition failed");
    const auto H = cov.rows();
    p.basis.resize(H, 2);
    for (int j = 0; j < 2; ++j) {
        Eigen::VectorXd v = es.eigenvectors().col(H - 1 - j);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        p.basis.col(j) = v;
    }
    return p;
}

inline Eigen::MatrixXd project(const Projection& p, const Eigen::MatrixXd& x) {
    return (x.rowwise() - p.mean.transpose()) * p.basis;
}

// CSV `label,mode,pc1,pc2`: test windows, then every cluster center with mode -1.
inline std::string export_projection(const LoadedModel& model, const Dataset& data) {
    const auto& net = model.checkpoint.model;
    const auto train_out = net::infer(net, apply_standardizer(model.standardizer, data.task.train));
    const auto test = apply_standardizer(model.standardizer, data.task.test);
    const auto test_out = net::infer(net, test);
    const Projection p = fit_projection(train_out.features);
    std::string out = "label,mode,pc1,pc2\n";
    const Eigen::MatrixXd z = project(p, test_out.features);
    for (std::size_t i = 0; i < test.size(); ++i)
        out += std::to_string(test[i].y) + ',' + std::to_string(test[i].mode) + ',' +
               format_double(z(static_cast<Eigen::Index>(i), 0)) + ',' + format_double(z(static_cast<Eigen::Index>(i), 1)) + '\n';
    for (std::size_t c = 0; c < model.finegrained.num_classes(); ++c)
        for (const auto& cs : model.finegrained.classes[c].clusters) {
            const Eigen::RowVectorXd zc = (cs.gauss.mu - p.mean).transpose() * p.basis;
            out += std::to_string(c) + ",-1," + format_double(zc(0)) + ',' + format_double(zc(1)) + '\n';
        }
    return out;
}

}  // namespace fgcrn
