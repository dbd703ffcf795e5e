// dorl: command-line surface over the synthetic benchmark generator, the
// segmentation/CAE training stages, and the evaluation protocol.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dorl/harness.hpp"

namespace fs = std::filesystem;
using namespace dorl;

namespace {

struct GlobalOpts {
    uint64_t seed = 0;
    bool seed_set = false;
    std::string profile;
    std::string config_path;
    std::string out;
};

// config file first, then explicit flags on top
ExperimentConfig resolve_config(const GlobalOpts& g) {
    ExperimentConfig cfg;
    if (!g.config_path.empty()) cfg = config_from_file(g.config_path);
    if (g.seed_set) cfg.seed = g.seed;
    if (!g.profile.empty()) cfg.profile = g.profile;
    if (!g.out.empty()) cfg.out_dir = g.out;
    return cfg;
}

void print_report_summary(const EvalReport& r) {
    std::cout << "variant " << r.variant << ", profile " << r.profile << ", seed " << r.seed << "\n";
    for (size_t c = 0; c < r.classifiers.size(); ++c) {
        std::cout << "  " << r.classifiers[c] << ": average accuracy " << r.classifier_average(c) << "\n";
        for (size_t tr = 0; tr < r.train_domains.size(); ++tr)
            for (size_t te = 0; te < r.test_domains.size(); ++te) {
                const CellResult& cell = r.cells[c][tr][te];
                std::cout << "    " << r.train_domains[tr] << " -> " << r.test_domains[te] << ": " << cell.mean
                          << " +- " << cell.stddev << "\n";
            }
    }
    std::cout << "overall average: " << r.overall_average() << " (wall " << r.wall_seconds << "s)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DoRL pipeline: domain-invariant representation learning on synthetic cell images"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "global random seed")->each([&](const std::string&) { g.seed_set = true; });
    app.add_option("--profile", g.profile, "model profile: desk|full (also bench, tiny)");
    app.add_option("--config", g.config_path, "experiment config file (dorl-config 1 key=value format)");
    app.add_option("--out", g.out, "output directory");

    // ---- gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the multi-domain synthetic benchmark");
    int gen_classes = 8, gen_per_class = 60;
    gen->add_option("--classes", gen_classes, "number of cell classes");
    gen->add_option("--per-class", gen_per_class, "samples per class per domain");

    // ---- staged pipeline commands
    auto* train_seg_cmd = app.add_subcommand("train-seg", "fine-tune the LoRA segmentation stage");
    auto* embed_cmd = app.add_subcommand("embed", "cache image embeddings and segmented images");
    auto* train_cae_cmd = app.add_subcommand("train-cae", "train the cross-domain autoencoder");
    auto* extract_cmd = app.add_subcommand("extract", "export per-sample feature vectors");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "run the full evaluation protocol");

    // ---- classify (standalone, over exported feature files)
    auto* classify_cmd = app.add_subcommand("classify", "fit classifiers on exported feature files");
    std::vector<std::string> clf_features;
    std::string clf_algos = "logreg,svm-linear,svm-poly,rf,mlp,gbt";
    classify_cmd->add_option("--features", clf_features, "feature file(s) from `extract`")->required();
    classify_cmd->add_option("--algos", clf_algos, "comma-separated classifier list");

    // ---- ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "run ablation variants");
    std::string ablate_variants = "M1,M2,M3,M4,M5";
    ablate_cmd->add_option("--variants", ablate_variants, "comma-separated variant tags");

    // ---- sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "beta/lambda grid sweep");
    std::string sweep_betas = "0.25,0.5,1.0", sweep_lambdas = "1.0,2.0,4.0";
    sweep_cmd->add_option("--betas", sweep_betas, "comma-separated beta grid");
    sweep_cmd->add_option("--lambdas", sweep_lambdas, "comma-separated lambda grid");

    // ---- histogram
    auto* hist_cmd = app.add_subcommand("histogram", "grayscale histogram of a dataset");
    std::string hist_data;
    int hist_bins = 256;
    hist_cmd->add_option("--data", hist_data, "dataset directory")->required();
    hist_cmd->add_option("--bins", hist_bins, "histogram bin count");

    // allow the global flags to appear after the subcommand name
    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto split_doubles = [](const std::string& s) {
        std::vector<double> out;
        std::stringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(std::stod(tok));
        return out;
    };

    try {
        if (gen->parsed()) {
            if (g.out.empty()) throw ConfigError("gen-data: --out is required");
            uint64_t seed = g.seed_set ? g.seed : 0;
            for (const auto& dom : default_domains()) {
                Dataset d = gen_domain(dom, default_classes(gen_classes), gen_per_class, seed);
                save_dataset(d, (fs::path(g.out) / dom.id).string());
                std::cout << "wrote " << d.size() << " samples to " << (fs::path(g.out) / dom.id).string() << "\n";
            }
        } else if (train_seg_cmd->parsed()) {
            run_pipeline(resolve_config(g), "train_seg");
            std::cout << "segmentation checkpoints written\n";
        } else if (embed_cmd->parsed()) {
            run_pipeline(resolve_config(g), "embed");
            std::cout << "embedding caches written\n";
        } else if (train_cae_cmd->parsed()) {
            run_pipeline(resolve_config(g), "train_cae");
            std::cout << "CAE checkpoints written\n";
        } else if (extract_cmd->parsed()) {
            run_pipeline(resolve_config(g), "extract");
            std::cout << "feature files written\n";
        } else if (evaluate_cmd->parsed()) {
            EvalReport r = run_pipeline(resolve_config(g));
            print_report_summary(r);
        } else if (classify_cmd->parsed()) {
            if (g.out.empty()) throw ConfigError("classify: --out is required");
            fs::create_directories(g.out);
            std::vector<FeatureRecord> records;
            for (const auto& f : clf_features) {
                auto part = import_features(f);
                records.insert(records.end(), part.begin(), part.end());
            }
            if (records.empty()) throw DataError("classify: no feature records");
            LabeledFeatures data;
            int n_classes = 0;
            for (const auto& r : records) n_classes = std::max(n_classes, r.label + 1);
            data.n_classes = n_classes;
            const int64_t d = (int64_t)records[0].values.size();
            data.x = TensorD({(int64_t)records.size(), d});
            for (size_t i = 0; i < records.size(); ++i) {
                for (int64_t j = 0; j < d; ++j) data.x[(int64_t)i * d + j] = (double)records[i].values[(size_t)j];
                data.y.push_back(records[i].label);
            }
            uint64_t seed = g.seed_set ? g.seed : 0;
            std::stringstream ss(clf_algos);
            std::string name;
            while (std::getline(ss, name, ',')) {
                Algo a = algo_from_name(name);
                auto model = fit_classifier(a, data, seed);
                const std::string path = (fs::path(g.out) / ("clf_" + name + ".ckpt")).string();
                save_classifier(*model, path);
                double acc = top1_accuracy(model->predict(data.x), data.y);
                std::cout << name << ": training accuracy " << acc << ", saved to " << path << "\n";
            }
        } else if (ablate_cmd->parsed()) {
            ExperimentConfig cfg = resolve_config(g);
            std::stringstream ss(ablate_variants);
            std::string tag;
            while (std::getline(ss, tag, ',')) {
                EvalReport r = run_ablation(cfg, tag);
                std::cout << tag << ": overall average " << r.overall_average() << "\n";
            }
        } else if (sweep_cmd->parsed()) {
            SweepResult res = sweep(resolve_config(g), split_doubles(sweep_betas), split_doubles(sweep_lambdas));
            std::cout << res.csv();
            std::cout << "best: beta=" << res.best_beta << " lambda=" << res.best_lambda << " accuracy "
                      << res.best_accuracy << "\n";
        } else if (hist_cmd->parsed()) {
            Dataset d = load_dataset(hist_data);
            auto counts = grayscale_histogram(d, hist_bins);
            std::cout << "samples " << d.size() << ", mean gray level " << histogram_mean(counts) << "\n";
            if (!g.out.empty()) {
                fs::create_directories(g.out);
                std::ofstream os(fs::path(g.out) / "histogram.csv", std::ios::trunc);
                os << "bin,count\n";
                for (size_t b = 0; b < counts.size(); ++b) os << b << "," << counts[b] << "\n";
                std::cout << "histogram written to " << (fs::path(g.out) / "histogram.csv").string() << "\n";
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ModelStateError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
