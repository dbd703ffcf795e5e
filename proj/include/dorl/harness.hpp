#pragma once

// Experiment harness: stratified evaluation protocol (20% hold-out + 5-fold
// CV), the staged pipeline train_seg -> embed -> train_cae -> extract ->
// classify, ablation variants M1..M5, the beta/lambda sweep, and canonical
// JSON/CSV reports. Every stage writes an immutable artifact into the output
// directory and is skipped on rerun when the artifact already exists.

#include <map>
#include <string>
#include <vector>

#include "dorl/cae.hpp"
#include "dorl/classifiers.hpp"
#include "dorl/lora.hpp"
#include "dorl/synthcells.hpp"

namespace dorl {

// ---------------------------------------------------------------- splits

struct SplitPair {
    std::vector<int64_t> train, test;  // disjoint index sets, sorted
};

// per-class proportions preserved to +-1 sample; deterministic in seed
SplitPair stratified_split(const std::vector<int>& labels, double test_fraction, uint64_t seed);
SplitPair stratified_split(const Dataset& data, double test_fraction, uint64_t seed);

// k (train, validation) pairs; validation folds partition the index set
std::vector<SplitPair> stratified_kfold(const std::vector<int>& labels, int k, uint64_t seed);
std::vector<SplitPair> stratified_kfold(const Dataset& data, int k, uint64_t seed);

// --------------------------------------------------------------- profiles

// model-size profile; "desk" is the CPU-scale default, "full" widens the
// backbone, "bench" and "tiny" shrink it for the ablation benchmark and unit
// tests respectively
struct Profile {
    std::string name;
    ViTConfig vit;
    int64_t cae_enc_depth = 12, cae_dec_depth = 4;
    int64_t proj_dim = 64;
};

Profile make_profile(const std::string& name);

// ------------------------------------------------------------ experiment

struct ExperimentConfig {
    std::vector<std::string> domain_paths;  // dataset directories (synthcells layout)
    std::vector<int> train_domains;         // indices into domain_paths; empty = all
    std::string out_dir;                    // artifact root
    std::string profile = "desk";
    std::string variant = "full";  // full | M1 | M2 | M3 | M4 | M5
    uint64_t seed = 0;
    double beta = 0.5, lambda = 2.0, rho = 0.75;
    int64_t seg_epochs = 85, cae_epochs = 10;
    double annotated_fraction = 0.01;
    double test_fraction = 0.2;
    int k_folds = 5;
    std::vector<Algo> classifiers = {Algo::logreg,    Algo::svm_linear, Algo::svm_poly,
                                     Algo::rf,        Algo::mlp,        Algo::gbt};

    void validate() const;
};

// flat key=value text format with a "dorl-config 1" version header
ExperimentConfig config_from_file(const std::string& path);
void config_to_file(const ExperimentConfig& cfg, const std::string& path);

struct CellResult {
    std::vector<double> fold_acc;  // raw per-fold accuracies
    double mean = 0, stddev = 0;
};

struct EvalReport {
    std::string profile, variant;
    uint64_t seed = 0;
    double beta = 0, lambda = 0, rho = 0;
    std::vector<std::string> train_domains, test_domains, classifiers;
    std::vector<std::vector<std::vector<CellResult>>> cells;  // [clf][train][test]
    bool label_intersection = false;  // true when domains declare differing class lists
    std::map<std::string, std::string> config_snapshot;
    double wall_seconds = 0;  // informational only; excluded from canonical JSON

    double classifier_average(size_t clf) const;  // mean over all (train, test) cells
    double overall_average() const;               // mean over classifiers as well
};

// canonical form: sorted keys, shortest-roundtrip floats, no wall clock --
// byte-identical across reruns with equal config and seed
std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report, size_t clf);

// stop_after: "" runs everything; "train_seg", "embed", "train_cae" or
// "extract" halts after that stage's artifacts are persisted (the returned
// report then carries no accuracies)
EvalReport run_pipeline(const ExperimentConfig& cfg, const std::string& stop_after = "");
EvalReport run_ablation(const ExperimentConfig& cfg, const std::string& variant);

struct SweepRow {
    double beta = 0, lambda = 0;
    std::string classifier;
    double accuracy = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // |betas| * |lambdas| * |classifiers| rows
    double best_beta = 0, best_lambda = 0, best_accuracy = 0;

    std::string csv() const;
};

SweepResult sweep(const ExperimentConfig& cfg, const std::vector<double>& betas, const std::vector<double>& lambdas);

// --------------------------------------------------------- feature export

// one record per sample: dataset id, sample id, label, domain, D little-endian
// f32 values; sidecar <path>.manifest.json records D and the record count
struct FeatureRecord {
    std::string dataset, id;
    int label = 0;
    std::string domain;
    std::vector<float> values;
};

void export_features(const std::vector<FeatureRecord>& records, const std::string& path);
std::vector<FeatureRecord> import_features(const std::string& path);

}  // namespace dorl
