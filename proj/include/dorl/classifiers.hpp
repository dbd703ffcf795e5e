#pragma once

// Classical classifiers over extracted feature vectors, behind one
// fit/predict contract: multinomial logistic regression, one-vs-rest SVM
// (linear primal / degree-3 poly dual), random forest, one-hidden-layer MLP,
// and gradient-boosted trees. All deterministic given their seed.

#include <memory>
#include <string>
#include <vector>

#include "dorl/optim.hpp"
#include "dorl/tensor.hpp"

namespace dorl {

struct LabeledFeatures {
    TensorD x;           // [N, D]
    std::vector<int> y;  // class ids in [0, n_classes)
    int n_classes = 0;

    int64_t n() const { return x.rows(); }
    int64_t dim() const { return x.cols(); }
    void validate() const;
};

// per-feature z-score; zero-variance features pass through unscaled
struct Standardizer {
    std::vector<double> mean, stddev;

    static Standardizer fit(const TensorD& x);
    TensorD apply(const TensorD& x) const;
};

enum class Algo { logreg, svm_linear, svm_poly, rf, mlp, gbt };

const char* algo_name(Algo a);
Algo algo_from_name(const std::string& name);

class Classifier {
  public:
    virtual ~Classifier() = default;

    Algo algo() const { return algo_; }
    int n_classes() const { return n_classes_; }
    int64_t dim() const { return dim_; }
    // single-class training data collapsed to a prior predictor
    bool degenerate() const { return degenerate_; }

    // [N, L] per-class scores (standardization applied internally)
    TensorD scores(const TensorD& x) const;
    // argmax over scores; exact ties broken toward the lowest class id
    std::vector<int> predict(const TensorD& x) const;

    // model + algorithm tag + hyperparameters in the checkpoint container
    virtual ParamStore<double> serialize() const = 0;

    void set_base(Algo a, int64_t dim, int n_classes, bool degenerate, Standardizer s) {
        algo_ = a;
        dim_ = dim;
        n_classes_ = n_classes;
        degenerate_ = degenerate;
        std_ = std::move(s);
    }

  protected:
    virtual TensorD raw_scores(const TensorD& xs) const = 0;

    Algo algo_ = Algo::logreg;
    int64_t dim_ = 0;
    int n_classes_ = 0;
    bool degenerate_ = false;
    Standardizer std_;
};

struct LogRegConfig {
    int max_iter = 500;
    double lr = 0.1;
    uint64_t seed = 0;
};

struct SvmConfig {
    bool poly = false;    // false: linear primal (Pegasos-style); true: degree-3 dual
    int degree = 3;
    double coef0 = 1.0;
    double c = 1.0;       // soft-margin constant
    int epochs = 200;
    uint64_t seed = 0;
};

struct RfConfig {
    int n_trees = 200;
    int max_depth = 16;
    uint64_t seed = 0;
};

struct MlpConfig {
    int hidden = 100;
    int max_iter = 1000;
    double lr = 1e-2;
    double weight_decay = 1e-4;
    uint64_t seed = 0;
};

struct GbtConfig {
    int rounds = 100;
    int max_depth = 6;
    double eta = 0.3;
    double lambda = 1.0;
    uint64_t seed = 0;
};

std::unique_ptr<Classifier> fit_logreg(const LabeledFeatures& data, const LogRegConfig& cfg = {});
std::unique_ptr<Classifier> fit_svm(const LabeledFeatures& data, const SvmConfig& cfg = {});
std::unique_ptr<Classifier> fit_rf(const LabeledFeatures& data, const RfConfig& cfg = {});
std::unique_ptr<Classifier> fit_mlp(const LabeledFeatures& data, const MlpConfig& cfg = {});
std::unique_ptr<Classifier> fit_gbt(const LabeledFeatures& data, const GbtConfig& cfg = {});

// default-configured dispatch used by the evaluation harness
std::unique_ptr<Classifier> fit_classifier(Algo algo, const LabeledFeatures& data, uint64_t seed);

void save_classifier(const Classifier& model, const std::string& path);
std::unique_ptr<Classifier> load_classifier(const std::string& path);

double top1_accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

}  // namespace dorl
