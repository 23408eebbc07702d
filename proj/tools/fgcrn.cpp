// fgcrn: simulate / train / eval / project.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 1 other.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fgcrn/dataset_io.hpp"
#include "fgcrn/pipeline.hpp"

namespace {

int run_simulate(const std::string& scenario, const std::string& out) {
    const auto sc = fgcrn::parse_dataset_scenario(fgcrn::KeyValues::load(scenario));
    const auto ds = fgcrn::build_cstr_dataset(sc);
    fgcrn::write_dataset(out, ds);
    std::cerr << "wrote " << out << ": " << ds.task.train.size() << " train, " << ds.task.val.size() << " val, "
              << ds.task.test.size() << " test windows\n";
    return 0;
}

int run_train(const std::string& data, const std::string& config, const std::string& out,
              const fgcrn::KeyValues& overrides) {
    auto kv = config.empty() ? fgcrn::KeyValues{} : fgcrn::KeyValues::load(config);
    for (const auto& [k, v] : overrides.entries()) kv.set(k, v);
    const auto cfg = fgcrn::parse_run_config(kv);
    const auto ds = fgcrn::load_dataset(data);
    std::fprintf(stderr, "config %s, %zu train / %zu val windows\n", cfg.hash().c_str(), ds.task.train.size(),
                 ds.task.val.size());
    const auto res = fgcrn::run_training(ds.task, ds.manifest, cfg, [](const fgcrn::TrainingLogRow& r) {
        std::fprintf(stderr, "epoch %3zu  L %.5f  L1 %.5f  L2 %.5f  lr %.2e  train %.4f  val %.4f  (%.1fs)\n", r.epoch,
                     r.loss, r.l1, r.l2, r.lr, r.train_acc, r.val_acc, r.wall_seconds);
    });
    fgcrn::save_model_dir(out, res, cfg, ds.manifest);
    for (const auto& w : res.finegrained.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::fprintf(stderr, "selected epoch %zu (val acc %.4f), M=%zu, threshold %.6g\n", res.best_epoch,
                 res.best_val_acc, res.finegrained.clusters, res.threshold);
    return 0;
}

int run_eval(const std::string& model_dir, const std::string& data, const std::string& methods,
             const std::string& report) {
    const auto model = fgcrn::load_model_dir(model_dir);
    const auto ds = fgcrn::load_dataset(data);
    const auto rep = fgcrn::run_evaluation(model, ds, fgcrn::parse_methods(methods));
    fgcrn::write_report(report, rep);
    std::cout << fgcrn::report_csv(rep);
    return 0;
}

int run_project(const std::string& model_dir, const std::string& data, const std::string& out) {
    const auto model = fgcrn::load_model_dir(model_dir);
    const auto ds = fgcrn::load_dataset(data);
    const std::filesystem::path p(out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    fgcrn::write_text(p, fgcrn::export_projection(model, ds));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Open-set fault diagnosis with fine-grained cluster models"};
    app.require_subcommand(1);

    std::string scenario, out, data, config, model, methods = "msp,maxlogit,gen,klmatch,openmax,vim,fgcrn", report;

    auto* sim = app.add_subcommand("simulate", "simulate a CSTR open-set dataset");
    sim->add_option("--scenario", scenario, "scenario key-value file")->required();
    sim->add_option("--out", out, "output dataset directory")->required();

    // ablation switches; each overrides the matching config key
    std::string norm, clusters;
    double lambda_dist = -1;
    bool no_tam = false, unidirectional = false;
    long long seed = -1, epochs = -1;
    auto* train = app.add_subcommand("train", "train a model on a dataset directory");
    train->add_option("--data", data, "dataset directory")->required();
    train->add_option("--config", config, "run config key-value file");
    train->add_option("--out", out, "output model directory")->required();
    train->add_option("--norm", norm, "both | bn | sain");
    train->add_option("--clusters", clusters, "clusters per class or 'auto'");
    train->add_option("--lambda-dist", lambda_dist, "weight of the distance loss");
    train->add_flag("--no-tam", no_tam, "drop the temporal attention block");
    train->add_flag("--gru-unidirectional", unidirectional, "forward GRU only");
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--epochs", epochs, "override the config epoch count");

    auto* eval = app.add_subcommand("eval", "evaluate FGCRN and the baselines on the test split");
    eval->add_option("--model", model, "model directory")->required();
    eval->add_option("--data", data, "dataset directory")->required();
    eval->add_option("--methods", methods, "comma-separated methods");
    eval->add_option("--report", report, "report path (.json and .csv are written)")->required();

    auto* proj = app.add_subcommand("project", "export a 2-D PCA projection of test features");
    proj->add_option("--model", model, "model directory")->required();
    proj->add_option("--data", data, "dataset directory")->required();
    proj->add_option("--out", out, "output CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*sim) return run_simulate(scenario, out);
        if (*train) {
            fgcrn::KeyValues ov;
            if (!norm.empty()) ov.set("norm", norm);
            if (!clusters.empty()) ov.set("clusters", clusters);
            if (lambda_dist >= 0) ov.set("lambda_dist", fgcrn::format_double(lambda_dist));
            if (no_tam) ov.set("tam", "false");
            if (unidirectional) ov.set("bidirectional", "false");
            if (seed >= 0) ov.set("seed", std::to_string(seed));
            if (epochs >= 0) ov.set("epochs", std::to_string(epochs));
            return run_train(data, config, out, ov);
        }
        if (*eval) return run_eval(model, data, methods, report);
        if (*proj) return run_project(model, data, out);
    } catch (const fgcrn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const fgcrn::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const fgcrn::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
