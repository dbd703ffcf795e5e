#include "dorl/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dorl/checkpoint.hpp"

namespace dorl {

void LabeledFeatures::validate() const {
    if (x.shape().size() != 2 || x.rows() < 1) throw DataError("features: X must be [N, D] with N >= 1");
    if ((int64_t)y.size() != x.rows()) throw DataError("features: label count does not match row count");
    if (n_classes < 1) throw DataError("features: class count must be >= 1");
    if (!x.all_finite()) throw DataError("features: non-finite value in X");
    for (int c : y)
        if (c < 0 || c >= n_classes) throw DataError("features: class id " + std::to_string(c) + " out of range");
}

Standardizer Standardizer::fit(const TensorD& x) {
    Standardizer s;
    const int64_t n = x.rows(), d = x.cols();
    s.mean.resize((size_t)d);
    s.stddev.resize((size_t)d);
    for (int64_t j = 0; j < d; ++j) {
        double mu = x.mat().col(j).mean();
        double var = (x.mat().col(j).array() - mu).square().sum() / (double)n;
        s.mean[(size_t)j] = mu;
        double sd = std::sqrt(var);
        s.stddev[(size_t)j] = sd > 0 ? sd : 1.0;
    }
    return s;
}

TensorD Standardizer::apply(const TensorD& x) const {
    if (x.cols() != (int64_t)mean.size()) throw ShapeError("standardizer: feature dim mismatch");
    TensorD out(x.shape());
    for (int64_t j = 0; j < x.cols(); ++j)
        out.mat().col(j) = (x.mat().col(j).array() - mean[(size_t)j]) / stddev[(size_t)j];
    return out;
}

const char* algo_name(Algo a) {
    switch (a) {
        case Algo::logreg: return "logreg";
        case Algo::svm_linear: return "svm-linear";
        case Algo::svm_poly: return "svm-poly";
        case Algo::rf: return "rf";
        case Algo::mlp: return "mlp";
        case Algo::gbt: return "gbt";
    }
    throw ConfigError("unknown algorithm tag");
}

Algo algo_from_name(const std::string& name) {
    for (Algo a : {Algo::logreg, Algo::svm_linear, Algo::svm_poly, Algo::rf, Algo::mlp, Algo::gbt})
        if (name == algo_name(a)) return a;
    throw ConfigError("unknown classifier algorithm: " + name);
}

TensorD Classifier::scores(const TensorD& x) const {
    if (x.shape().size() != 2 || x.cols() != dim_)
        throw ShapeError("predict: feature dim " + shape_str(x.shape()) + " does not match training dim " +
                         std::to_string(dim_));
    return raw_scores(std_.apply(x));
}

std::vector<int> Classifier::predict(const TensorD& x) const {
    TensorD s = scores(x);
    std::vector<int> out((size_t)s.rows());
    for (int64_t i = 0; i < s.rows(); ++i) {
        int best = 0;
        for (int c = 1; c < n_classes_; ++c)
            if (s[i * n_classes_ + c] > s[i * n_classes_ + best]) best = c;  // ties keep the lower id
        out[(size_t)i] = best;
    }
    return out;
}

double top1_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty()) throw DataError("top1_accuracy: length mismatch or empty");
    size_t hits = 0;
    for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
    return (double)hits / (double)pred.size();
}

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int majority_class(const std::vector<int>& y, int n_classes) {
    std::vector<int64_t> counts((size_t)n_classes, 0);
    for (int c : y) ++counts[(size_t)c];
    return (int)(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

bool single_class(const std::vector<int>& y) {
    for (int c : y)
        if (c != y[0]) return false;
    return true;
}

void softmax_rows(Mat& m) {
    for (int64_t i = 0; i < m.rows(); ++i) {
        double mx = m.row(i).maxCoeff();
        m.row(i) = (m.row(i).array() - mx).exp();
        m.row(i) /= m.row(i).sum();
    }
}

void put_meta(ParamStore<double>& ps, Algo algo, const Classifier& m, const Standardizer& std_s,
              std::vector<double> extra = {}) {
    std::vector<double> meta = {(double)(int)algo, (double)m.dim(), (double)m.n_classes(),
                                m.degenerate() ? 1.0 : 0.0};
    meta.insert(meta.end(), extra.begin(), extra.end());
    const int64_t meta_n = (int64_t)meta.size();
    ps.add("clf.meta", TensorD({meta_n}, std::move(meta)));
    ps.add("clf.std.mean", TensorD({(int64_t)std_s.mean.size()}, std::vector<double>(std_s.mean)));
    ps.add("clf.std.stddev", TensorD({(int64_t)std_s.stddev.size()}, std::vector<double>(std_s.stddev)));
}

// ---- shared decision tree ----

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1, right = -1;
    std::vector<double> value;
};

struct Tree {
    std::vector<TreeNode> nodes;

    const std::vector<double>& eval(const double* x) const {
        int i = 0;
        while (nodes[i].feature >= 0) i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
        return nodes[i].value;
    }

    TensorD serialize(int64_t payload) const {
        TensorD t({(int64_t)nodes.size(), 4 + payload});
        for (size_t i = 0; i < nodes.size(); ++i) {
            double* row = t.data() + (int64_t)i * (4 + payload);
            row[0] = nodes[i].feature;
            row[1] = nodes[i].threshold;
            row[2] = nodes[i].left;
            row[3] = nodes[i].right;
            for (int64_t j = 0; j < payload; ++j) row[4 + j] = nodes[i].feature < 0 ? nodes[i].value[(size_t)j] : 0.0;
        }
        return t;
    }

    static Tree deserialize(const TensorD& t) {
        Tree tree;
        const int64_t payload = t.cols() - 4;
        for (int64_t i = 0; i < t.rows(); ++i) {
            const double* row = t.data() + i * t.cols();
            TreeNode n;
            n.feature = (int)row[0];
            n.threshold = row[1];
            n.left = (int)row[2];
            n.right = (int)row[3];
            if (n.feature < 0) n.value.assign(row + 4, row + 4 + payload);
            tree.nodes.push_back(std::move(n));
        }
        return tree;
    }
};

// ---- linear scorer (logreg, linear SVM, prior-collapse fallbacks) ----

class LinearModel : public Classifier {
  public:
    TensorD w;  // [D, L]
    TensorD b;  // [L]

    TensorD raw_scores(const TensorD& xs) const override {
        TensorD out({xs.rows(), (int64_t)n_classes_});
        out.mat() = xs.mat() * w.mat();
        out.mat().rowwise() += b.vec().transpose();
        return out;
    }

    ParamStore<double> serialize() const override {
        ParamStore<double> ps;
        put_meta(ps, algo_, *this, std_);
        ps.add("clf.w", w.clone());
        ps.add("clf.b", b.clone());
        return ps;
    }
};

std::unique_ptr<LinearModel> make_prior_model(Algo algo, const LabeledFeatures& data, const Standardizer& s) {
    auto m = std::make_unique<LinearModel>();
    m->set_base(algo, data.dim(), data.n_classes, true, s);
    m->w = TensorD({data.dim(), (int64_t)data.n_classes});
    m->b = TensorD({(int64_t)data.n_classes});
    m->b[majority_class(data.y, data.n_classes)] = 1.0;
    return m;
}

// ---- kernel SVM ----

class PolySvmModel : public Classifier {
  public:
    TensorD support;  // [N, D] standardized training points
    TensorD coef;     // [L, N] alpha_i * y_i per one-vs-rest head
    int degree = 3;
    double coef0 = 1.0;

    TensorD raw_scores(const TensorD& xs) const override {
        TensorD out({xs.rows(), (int64_t)n_classes_});
        Mat base = (xs.mat() * support.mat().transpose()).array() + coef0;
        Mat k = base;
        for (int p = 1; p < degree; ++p) k.array() *= base.array();
        out.mat() = k * coef.mat().transpose();
        return out;
    }

    ParamStore<double> serialize() const override {
        ParamStore<double> ps;
        put_meta(ps, algo_, *this, std_, {(double)degree, coef0});
        ps.add("clf.support", support.clone());
        ps.add("clf.coef", coef.clone());
        return ps;
    }
};

// ---- forest-style models ----

class ForestModel : public Classifier {
  public:
    std::vector<Tree> trees;

    TensorD raw_scores(const TensorD& xs) const override {
        TensorD out({xs.rows(), (int64_t)n_classes_});
        for (int64_t i = 0; i < xs.rows(); ++i) {
            const double* row = xs.data() + i * xs.cols();
            for (const Tree& t : trees) {
                const auto& votes = t.eval(row);
                int best = 0;
                for (int c = 1; c < n_classes_; ++c)
                    if (votes[(size_t)c] > votes[(size_t)best]) best = c;
                out[i * n_classes_ + best] += 1.0;
            }
        }
        return out;
    }

    ParamStore<double> serialize() const override {
        ParamStore<double> ps;
        put_meta(ps, algo_, *this, std_, {(double)trees.size()});
        for (size_t t = 0; t < trees.size(); ++t)
            ps.add("clf.tree" + std::to_string(t), trees[t].serialize(n_classes_));
        return ps;
    }
};

class GbtModel : public Classifier {
  public:
    std::vector<std::vector<Tree>> rounds;  // [round][class], leaf payload = weight
    std::vector<double> base;               // log class priors
    double eta = 0.3;

    TensorD raw_scores(const TensorD& xs) const override {
        TensorD out({xs.rows(), (int64_t)n_classes_});
        for (int64_t i = 0; i < xs.rows(); ++i) {
            const double* row = xs.data() + i * xs.cols();
            for (int c = 0; c < n_classes_; ++c) {
                double f = base[(size_t)c];
                for (const auto& r : rounds) f += eta * r[(size_t)c].eval(row)[0];
                out[i * n_classes_ + c] = f;
            }
        }
        return out;
    }

    ParamStore<double> serialize() const override {
        ParamStore<double> ps;
        put_meta(ps, algo_, *this, std_, {(double)rounds.size(), eta});
        ps.add("clf.gbt.base", TensorD({(int64_t)base.size()}, std::vector<double>(base)));
        for (size_t r = 0; r < rounds.size(); ++r)
            for (size_t c = 0; c < rounds[r].size(); ++c)
                ps.add("clf.gbt.r" + std::to_string(r) + ".c" + std::to_string(c), rounds[r][c].serialize(1));
        return ps;
    }
};

// ---- MLP ----

class MlpModel : public Classifier {
  public:
    TensorD w1, b1, w2, b2;

    TensorD raw_scores(const TensorD& xs) const override {
        Mat h = (xs.mat() * w1.mat()).rowwise() + b1.vec().transpose();
        h = h.cwiseMax(0.0);
        TensorD out({xs.rows(), (int64_t)n_classes_});
        out.mat() = (h * w2.mat()).rowwise() + b2.vec().transpose();
        return out;
    }

    ParamStore<double> serialize() const override {
        ParamStore<double> ps;
        put_meta(ps, algo_, *this, std_, {(double)w1.cols()});
        ps.add("clf.w1", w1.clone());
        ps.add("clf.b1", b1.clone());
        ps.add("clf.w2", w2.clone());
        ps.add("clf.b2", b2.clone());
        return ps;
    }
};

// greedy CART split: Gini for classification (g/h empty) or second-order
// gain for boosting; features restricted to `feats`
struct SplitResult {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    std::vector<int> left, right;  // sample indices
};

SplitResult best_gini_split(const TensorD& xs, const std::vector<int>& y, int n_classes,
                            const std::vector<int>& samples, const std::vector<int>& feats) {
    SplitResult best;
    const size_t n = samples.size();
    std::vector<double> total((size_t)n_classes, 0.0);
    for (int i : samples) total[(size_t)y[(size_t)i]] += 1.0;
    auto gini = [&](const std::vector<double>& counts, double m) {
        if (m == 0) return 0.0;
        double s = 0;
        for (double c : counts) s += c * c;
        return 1.0 - s / (m * m);
    };
    const double parent = gini(total, (double)n);
    double best_gain = 1e-12;

    std::vector<std::pair<double, int>> vals(n);
    for (int f : feats) {
        for (size_t k = 0; k < n; ++k) vals[k] = {xs[samples[k] * xs.cols() + f], samples[k]};
        std::sort(vals.begin(), vals.end());
        if (vals.front().first == vals.back().first) continue;  // constant feature in this node
        std::vector<double> left_c((size_t)n_classes, 0.0);
        for (size_t k = 0; k + 1 < n; ++k) {
            left_c[(size_t)y[(size_t)vals[k].second]] += 1.0;
            if (vals[k].first == vals[k + 1].first) continue;
            double nl = (double)(k + 1), nr = (double)(n - k - 1);
            std::vector<double> right_c((size_t)n_classes);
            for (int c = 0; c < n_classes; ++c) right_c[(size_t)c] = total[(size_t)c] - left_c[(size_t)c];
            double gain = parent - (nl / (double)n) * gini(left_c, nl) - (nr / (double)n) * gini(right_c, nr);
            if (gain > best_gain) {
                best_gain = gain;
                best.found = true;
                best.feature = f;
                best.threshold = 0.5 * (vals[k].first + vals[k + 1].first);
            }
        }
    }
    if (best.found) {
        for (int i : samples)
            (xs[i * xs.cols() + best.feature] <= best.threshold ? best.left : best.right).push_back(i);
    }
    return best;
}

int build_rf_node(Tree& tree, const TensorD& xs, const std::vector<int>& y, int n_classes,
                  const std::vector<int>& samples, int depth, const RfConfig& cfg, Rng& rng) {
    auto leaf = [&]() {
        TreeNode n;
        n.value.assign((size_t)n_classes, 0.0);
        std::vector<double> counts((size_t)n_classes, 0.0);
        for (int i : samples) counts[(size_t)y[(size_t)i]] += 1.0;
        int best = (int)(std::max_element(counts.begin(), counts.end()) - counts.begin());
        n.value[(size_t)best] = 1.0;  // one tree, one vote
        tree.nodes.push_back(std::move(n));
        return (int)tree.nodes.size() - 1;
    };
    bool pure = true;
    for (int i : samples)
        if (y[(size_t)i] != y[(size_t)samples[0]]) {
            pure = false;
            break;
        }
    if (pure || depth >= cfg.max_depth || samples.size() < 2) return leaf();

    // sqrt(D) feature subsample, drawn fresh per node
    const int d = (int)xs.cols();
    const int mtry = std::max(1, (int)std::ceil(std::sqrt((double)d)));
    std::vector<int> feats((size_t)d);
    std::iota(feats.begin(), feats.end(), 0);
    for (int k = 0; k < mtry; ++k) std::swap(feats[(size_t)k], feats[k + (int)rng.below((uint64_t)(d - k))]);
    feats.resize((size_t)mtry);

    SplitResult split = best_gini_split(xs, y, n_classes, samples, feats);
    if (!split.found) return leaf();

    int self = (int)tree.nodes.size();
    tree.nodes.emplace_back();
    tree.nodes[(size_t)self].feature = split.feature;
    tree.nodes[(size_t)self].threshold = split.threshold;
    int l = build_rf_node(tree, xs, y, n_classes, split.left, depth + 1, cfg, rng);
    int r = build_rf_node(tree, xs, y, n_classes, split.right, depth + 1, cfg, rng);
    tree.nodes[(size_t)self].left = l;
    tree.nodes[(size_t)self].right = r;
    return self;
}

// second-order boosting tree on (g, h) with leaf weight -G/(H+lambda)
int build_gbt_node(Tree& tree, const TensorD& xs, const std::vector<double>& g, const std::vector<double>& h,
                   const std::vector<int>& samples, int depth, const GbtConfig& cfg) {
    double gs = 0, hs = 0;
    for (int i : samples) {
        gs += g[(size_t)i];
        hs += h[(size_t)i];
    }
    auto leaf = [&]() {
        TreeNode n;
        n.value = {-gs / (hs + cfg.lambda)};
        tree.nodes.push_back(std::move(n));
        return (int)tree.nodes.size() - 1;
    };
    if (depth >= cfg.max_depth || samples.size() < 2) return leaf();

    const double parent_score = gs * gs / (hs + cfg.lambda);
    SplitResult best;
    double best_gain = 1e-12;
    const size_t n = samples.size();
    std::vector<std::pair<double, int>> vals(n);
    for (int f = 0; f < (int)xs.cols(); ++f) {
        for (size_t k = 0; k < n; ++k) vals[k] = {xs[samples[k] * xs.cols() + f], samples[k]};
        std::sort(vals.begin(), vals.end());
        if (vals.front().first == vals.back().first) continue;
        double gl = 0, hl = 0;
        for (size_t k = 0; k + 1 < n; ++k) {
            gl += g[(size_t)vals[k].second];
            hl += h[(size_t)vals[k].second];
            if (vals[k].first == vals[k + 1].first) continue;
            double gr = gs - gl, hr = hs - hl;
            double gain = 0.5 * (gl * gl / (hl + cfg.lambda) + gr * gr / (hr + cfg.lambda) - parent_score);
            if (gain > best_gain) {
                best_gain = gain;
                best.found = true;
                best.feature = f;
                best.threshold = 0.5 * (vals[k].first + vals[k + 1].first);
            }
        }
    }
    if (!best.found) {
        // On symmetric interactions (XOR-like) every single-feature split has
        // exactly zero gain and greedy search stalls at the root. If the node
        // still carries mixed gradient signs and there is depth to spare, take
        // a zero-gain median split so the children can expose the interaction.
        bool mixed = false;
        for (int i : samples) mixed |= (g[(size_t)i] > 0) != (g[(size_t)samples[0]] > 0);
        if (mixed && depth + 2 <= cfg.max_depth) {
            for (int f = 0; f < (int)xs.cols() && !best.found; ++f) {
                for (size_t k = 0; k < n; ++k) vals[k] = {xs[samples[k] * xs.cols() + f], samples[k]};
                std::sort(vals.begin(), vals.end());
                // median position, nudged to the nearest strict value change
                for (size_t off = 0; off < n && !best.found; ++off) {
                    for (size_t k : {n / 2 >= off ? n / 2 - off : n, n / 2 + off}) {
                        if (k + 1 >= n || vals[k].first == vals[k + 1].first) continue;
                        best.found = true;
                        best.feature = f;
                        best.threshold = 0.5 * (vals[k].first + vals[k + 1].first);
                        break;
                    }
                }
            }
        }
        if (!best.found) return leaf();
    }
    for (int i : samples) (xs[i * xs.cols() + best.feature] <= best.threshold ? best.left : best.right).push_back(i);

    int self = (int)tree.nodes.size();
    tree.nodes.emplace_back();
    tree.nodes[(size_t)self].feature = best.feature;
    tree.nodes[(size_t)self].threshold = best.threshold;
    int l = build_gbt_node(tree, xs, g, h, best.left, depth + 1, cfg);
    int r = build_gbt_node(tree, xs, g, h, best.right, depth + 1, cfg);
    tree.nodes[(size_t)self].left = l;
    tree.nodes[(size_t)self].right = r;
    return self;
}

}  // namespace

std::unique_ptr<Classifier> fit_logreg(const LabeledFeatures& data, const LogRegConfig& cfg) {
    data.validate();
    Standardizer s = Standardizer::fit(data.x);
    if (single_class(data.y)) return make_prior_model(Algo::logreg, data, s);

    const int64_t n = data.n(), d = data.dim(), l = data.n_classes;
    TensorD xs = s.apply(data.x);
    Mat w = Mat::Zero(d, l);
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(l);
    Mat onehot = Mat::Zero(n, l);
    for (int64_t i = 0; i < n; ++i) onehot(i, data.y[(size_t)i]) = 1.0;

    for (int it = 0; it < cfg.max_iter; ++it) {
        Mat p = (xs.mat() * w).rowwise() + b;
        softmax_rows(p);
        Mat diff = (p - onehot) / (double)n;
        Mat gw = xs.mat().transpose() * diff;
        Eigen::RowVectorXd gb = diff.colwise().sum();
        if (gw.cwiseAbs().maxCoeff() < 1e-10 && gb.cwiseAbs().maxCoeff() < 1e-10) break;
        w -= cfg.lr * gw;
        b -= cfg.lr * gb;
    }

    auto m = std::make_unique<LinearModel>();
    m->set_base(Algo::logreg, d, (int)l, false, s);
    m->w = TensorD({d, l});
    m->w.mat() = w;
    m->b = TensorD({l});
    m->b.vec() = b.transpose();
    return m;
}

std::unique_ptr<Classifier> fit_svm(const LabeledFeatures& data, const SvmConfig& cfg) {
    data.validate();
    Standardizer s = Standardizer::fit(data.x);
    const Algo algo = cfg.poly ? Algo::svm_poly : Algo::svm_linear;
    if (single_class(data.y)) return make_prior_model(algo, data, s);
    const int64_t n = data.n(), d = data.dim(), l = data.n_classes;
    TensorD xs = s.apply(data.x);

    if (!cfg.poly) {
        // one-vs-rest Pegasos, cyclic deterministic order
        auto m = std::make_unique<LinearModel>();
        m->set_base(algo, d, (int)l, false, s);
        m->w = TensorD({d, l});
        m->b = TensorD({l});
        const double lambda = 1.0 / (cfg.c * (double)n);
        for (int64_t c = 0; c < l; ++c) {
            Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
            double b = 0.0;
            int64_t t = 1;
            for (int ep = 0; ep < cfg.epochs; ++ep) {
                for (int64_t i = 0; i < n; ++i, ++t) {
                    const double yi = data.y[(size_t)i] == (int)c ? 1.0 : -1.0;
                    const double eta = 1.0 / (lambda * (double)t);
                    const double margin = yi * ((xs.mat().row(i) * w)(0) + b);
                    w *= (1.0 - eta * lambda);
                    if (margin < 1.0) {
                        w += eta * yi * xs.mat().row(i).transpose();
                        b += eta * yi;
                    }
                }
            }
            m->w.mat().col(c) = w;
            m->b[c] = b;
        }
        return m;
    }

    if (n > 8000)
        throw ConfigError("svm: kernel matrix for N=" + std::to_string(n) +
                          " exceeds the memory budget; use the linear kernel");
    Mat k = (xs.mat() * xs.mat().transpose()).array() + cfg.coef0;
    Mat base = k;
    for (int p = 1; p < cfg.degree; ++p) k.array() *= base.array();

    auto m = std::make_unique<PolySvmModel>();
    m->set_base(algo, d, (int)l, false, s);
    m->degree = cfg.degree;
    m->coef0 = cfg.coef0;
    m->support = xs.clone();
    m->coef = TensorD({l, n});
    for (int64_t c = 0; c < l; ++c) {
        // dual coordinate ascent on the L1-loss SVM without an explicit bias
        // (coef0 provides the affine term through the kernel)
        Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd yv(n);
        for (int64_t i = 0; i < n; ++i) yv(i) = data.y[(size_t)i] == (int)c ? 1.0 : -1.0;
        Eigen::VectorXd f = Eigen::VectorXd::Zero(n);  // f_i = sum_j alpha_j y_j K_ij
        for (int ep = 0; ep < cfg.epochs; ++ep) {
            double max_delta = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const double grad = yv(i) * f(i) - 1.0;
                double next = std::min(std::max(alpha(i) - grad / k(i, i), 0.0), cfg.c);
                double delta = next - alpha(i);
                if (delta != 0.0) {
                    alpha(i) = next;
                    f += delta * yv(i) * k.col(i);
                    max_delta = std::max(max_delta, std::abs(delta));
                }
            }
            if (max_delta < 1e-12) break;
        }
        m->coef.mat().row(c) = (alpha.array() * yv.array()).matrix().transpose();
    }
    return m;
}

std::unique_ptr<Classifier> fit_rf(const LabeledFeatures& data, const RfConfig& cfg) {
    data.validate();
    if (cfg.n_trees < 1 || cfg.max_depth < 1) throw ConfigError("rf: trees and depth must be >= 1");
    Standardizer s = Standardizer::fit(data.x);
    TensorD xs = s.apply(data.x);
    const int64_t n = data.n();

    auto m = std::make_unique<ForestModel>();
    m->set_base(Algo::rf, data.dim(), data.n_classes, single_class(data.y), s);
    for (int t = 0; t < cfg.n_trees; ++t) {
        Rng rng(cfg.seed, "rf.tree", (uint64_t)t);
        std::vector<int> boot((size_t)n);
        for (auto& i : boot) i = (int)rng.below((uint64_t)n);
        Tree tree;
        build_rf_node(tree, xs, data.y, data.n_classes, boot, 0, cfg, rng);
        m->trees.push_back(std::move(tree));
    }
    return m;
}

std::unique_ptr<Classifier> fit_mlp(const LabeledFeatures& data, const MlpConfig& cfg) {
    data.validate();
    Standardizer s = Standardizer::fit(data.x);
    const int64_t n = data.n(), d = data.dim(), l = data.n_classes, hd = cfg.hidden;

    auto m = std::make_unique<MlpModel>();
    m->set_base(Algo::mlp, d, (int)l, single_class(data.y), s);
    if (m->degenerate()) {
        m->w1 = TensorD({d, hd});
        m->b1 = TensorD({hd});
        m->w2 = TensorD({hd, l});
        m->b2 = TensorD({l});
        m->b2[majority_class(data.y, data.n_classes)] = 1.0;
        return m;
    }

    TensorD xs = s.apply(data.x);
    Rng rng(cfg.seed, "mlp.init");
    ParamStore<double> ps;
    TensorD w1({d, hd}), w2({hd, l});
    w1.fill_gaussian(rng, 1.0 / std::sqrt((double)d));
    w2.fill_gaussian(rng, 1.0 / std::sqrt((double)hd));
    ps.add("w1", std::move(w1));
    ps.add("b1", TensorD({hd}));
    ps.add("w2", std::move(w2));
    ps.add("b2", TensorD({l}));

    Mat onehot = Mat::Zero(n, l);
    for (int64_t i = 0; i < n; ++i) onehot(i, data.y[(size_t)i]) = 1.0;

    AdamWConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    AdamW<double> opt(acfg);
    for (int it = 0; it < cfg.max_iter; ++it) {
        Mat pre = (xs.mat() * ps.at("w1").mat()).rowwise() + ps.at("b1").vec().transpose();
        Mat hid = pre.cwiseMax(0.0);
        Mat p = (hid * ps.at("w2").mat()).rowwise() + ps.at("b2").vec().transpose();
        softmax_rows(p);
        Mat d2 = (p - onehot) / (double)n;
        Mat d1 = (d2 * ps.at("w2").mat().transpose()).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());

        std::map<std::string, TensorD> grads;
        grads.emplace("w2", TensorD({hd, l}));
        grads.at("w2").mat() = hid.transpose() * d2;
        grads.emplace("b2", TensorD({l}));
        grads.at("b2").vec() = d2.colwise().sum().transpose();
        grads.emplace("w1", TensorD({d, hd}));
        grads.at("w1").mat() = xs.mat().transpose() * d1;
        grads.emplace("b1", TensorD({hd}));
        grads.at("b1").vec() = d1.colwise().sum().transpose();
        opt.step(ps, grads, cfg.lr);
    }

    m->w1 = ps.at("w1").clone();
    m->b1 = ps.at("b1").clone();
    m->w2 = ps.at("w2").clone();
    m->b2 = ps.at("b2").clone();
    return m;
}

std::unique_ptr<Classifier> fit_gbt(const LabeledFeatures& data, const GbtConfig& cfg) {
    data.validate();
    if (cfg.rounds < 0 || cfg.max_depth < 1 || cfg.lambda < 0 || cfg.eta < 0)
        throw ConfigError("gbt: invalid hyperparameters");
    Standardizer s = Standardizer::fit(data.x);
    TensorD xs = s.apply(data.x);
    const int64_t n = data.n(), l = data.n_classes;

    auto m = std::make_unique<GbtModel>();
    m->set_base(Algo::gbt, data.dim(), (int)l, single_class(data.y), s);
    m->eta = cfg.eta;

    std::vector<double> prior((size_t)l, 0.0);
    for (int c : data.y) prior[(size_t)c] += 1.0 / (double)n;
    m->base.resize((size_t)l);
    for (int64_t c = 0; c < l; ++c) m->base[(size_t)c] = std::log(std::max(prior[(size_t)c], 1e-12));

    Mat f(n, l);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < l; ++c) f(i, c) = m->base[(size_t)c];

    std::vector<int> all((size_t)n);
    std::iota(all.begin(), all.end(), 0);
    for (int r = 0; r < cfg.rounds; ++r) {
        Mat p = f;
        softmax_rows(p);
        std::vector<Tree> round;
        for (int64_t c = 0; c < l; ++c) {
            std::vector<double> g((size_t)n), h((size_t)n);
            for (int64_t i = 0; i < n; ++i) {
                double pic = p(i, c);
                g[(size_t)i] = pic - (data.y[(size_t)i] == (int)c ? 1.0 : 0.0);
                h[(size_t)i] = std::max(pic * (1.0 - pic), 1e-16);
            }
            Tree tree;
            build_gbt_node(tree, xs, g, h, all, 0, cfg);
            for (int64_t i = 0; i < n; ++i) f(i, c) += cfg.eta * tree.eval(xs.data() + i * xs.cols())[0];
            round.push_back(std::move(tree));
        }
        m->rounds.push_back(std::move(round));
    }
    return m;
}

std::unique_ptr<Classifier> fit_classifier(Algo algo, const LabeledFeatures& data, uint64_t seed) {
    switch (algo) {
        case Algo::logreg: {
            LogRegConfig c;
            c.seed = seed;
            return fit_logreg(data, c);
        }
        case Algo::svm_linear: {
            SvmConfig c;
            c.seed = seed;
            return fit_svm(data, c);
        }
        case Algo::svm_poly: {
            SvmConfig c;
            c.poly = true;
            c.seed = seed;
            return fit_svm(data, c);
        }
        case Algo::rf: {
            RfConfig c;
            c.seed = seed;
            return fit_rf(data, c);
        }
        case Algo::mlp: {
            MlpConfig c;
            c.seed = seed;
            return fit_mlp(data, c);
        }
        case Algo::gbt: {
            GbtConfig c;
            c.seed = seed;
            return fit_gbt(data, c);
        }
    }
    throw ConfigError("unknown algorithm tag");
}

void save_classifier(const Classifier& model, const std::string& path) {
    save_checkpoint(path, model.serialize());
}

std::unique_ptr<Classifier> load_classifier(const std::string& path) {
    ParamStore<double> ps = load_checkpoint<double>(path);
    const TensorD& meta = ps.at("clf.meta");
    const Algo algo = (Algo)(int)meta[0];
    const int64_t dim = (int64_t)meta[1];
    const int l = (int)meta[2];

    Standardizer s;
    const TensorD& mu = ps.at("clf.std.mean");
    const TensorD& sd = ps.at("clf.std.stddev");
    s.mean.assign(mu.data(), mu.data() + mu.numel());
    s.stddev.assign(sd.data(), sd.data() + sd.numel());

    auto fill_base = [&](Classifier& m) { m.set_base(algo, dim, l, meta[3] != 0.0, s); };

    switch (algo) {
        case Algo::logreg:
        case Algo::svm_linear: {
            auto m = std::make_unique<LinearModel>();
            fill_base(*m);
            m->w = ps.at("clf.w").clone();
            m->b = ps.at("clf.b").clone();
            return m;
        }
        case Algo::svm_poly: {
            auto m = std::make_unique<PolySvmModel>();
            fill_base(*m);
            if (meta[3] != 0.0) {  // prior collapse stored as a linear model
                auto lm = std::make_unique<LinearModel>();
                fill_base(*lm);
                lm->w = ps.at("clf.w").clone();
                lm->b = ps.at("clf.b").clone();
                return lm;
            }
            m->degree = (int)meta[4];
            m->coef0 = meta[5];
            m->support = ps.at("clf.support").clone();
            m->coef = ps.at("clf.coef").clone();
            return m;
        }
        case Algo::rf: {
            auto m = std::make_unique<ForestModel>();
            fill_base(*m);
            const int trees = (int)meta[4];
            for (int t = 0; t < trees; ++t) m->trees.push_back(Tree::deserialize(ps.at("clf.tree" + std::to_string(t))));
            return m;
        }
        case Algo::mlp: {
            auto m = std::make_unique<MlpModel>();
            fill_base(*m);
            m->w1 = ps.at("clf.w1").clone();
            m->b1 = ps.at("clf.b1").clone();
            m->w2 = ps.at("clf.w2").clone();
            m->b2 = ps.at("clf.b2").clone();
            return m;
        }
        case Algo::gbt: {
            auto m = std::make_unique<GbtModel>();
            fill_base(*m);
            const int rounds = (int)meta[4];
            m->eta = meta[5];
            const TensorD& base = ps.at("clf.gbt.base");
            m->base.assign(base.data(), base.data() + base.numel());
            for (int r = 0; r < rounds; ++r) {
                std::vector<Tree> round;
                for (int c = 0; c < l; ++c)
                    round.push_back(Tree::deserialize(ps.at("clf.gbt.r" + std::to_string(r) + ".c" + std::to_string(c))));
                m->rounds.push_back(std::move(round));
            }
            return m;
        }
    }
    throw DataError("classifier checkpoint: unknown algorithm tag");
}

}  // namespace dorl
