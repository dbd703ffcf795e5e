#include "dorl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dorl/checkpoint.hpp"

namespace dorl {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- splits

SplitPair stratified_split(const std::vector<int>& labels, double test_fraction, uint64_t seed) {
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
        throw ConfigError("stratified_split: test fraction must lie in (0, 1)");
    std::map<int, std::vector<int64_t>> by_class;
    for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back((int64_t)i);
    if (by_class.empty()) throw DataError("stratified_split: empty dataset");

    SplitPair out;
    for (auto& [c, idx] : by_class) {
        if (idx.size() < 2)
            throw DataError("stratified_split: class " + std::to_string(c) + " has a single sample");
        Rng rng(seed, "split.class", (uint64_t)c);
        for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        int64_t n_test = (int64_t)std::llround(test_fraction * (double)idx.size());
        n_test = std::clamp<int64_t>(n_test, 1, (int64_t)idx.size() - 1);
        out.test.insert(out.test.end(), idx.begin(), idx.begin() + n_test);
        out.train.insert(out.train.end(), idx.begin() + n_test, idx.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

std::vector<SplitPair> stratified_kfold(const std::vector<int>& labels, int k, uint64_t seed) {
    if (k < 2) throw ConfigError("stratified_kfold: k must be >= 2");
    std::map<int, std::vector<int64_t>> by_class;
    for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back((int64_t)i);
    if (by_class.empty()) throw DataError("stratified_kfold: empty dataset");

    std::vector<SplitPair> folds((size_t)k);
    for (auto& [c, idx] : by_class) {
        if ((int)idx.size() < k)
            throw DataError("stratified_kfold: class " + std::to_string(c) + " has fewer than k=" +
                            std::to_string(k) + " samples");
        Rng rng(seed, "kfold.class", (uint64_t)c);
        for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        for (size_t j = 0; j < idx.size(); ++j) folds[j % (size_t)k].test.push_back(idx[j]);
    }
    for (int f = 0; f < k; ++f) {
        std::set<int64_t> val(folds[(size_t)f].test.begin(), folds[(size_t)f].test.end());
        for (size_t i = 0; i < labels.size(); ++i)
            if (!val.count((int64_t)i)) folds[(size_t)f].train.push_back((int64_t)i);
        std::sort(folds[(size_t)f].test.begin(), folds[(size_t)f].test.end());
    }
    return folds;
}

namespace {

std::vector<int> dataset_labels(const Dataset& data) {
    std::vector<int> y;
    y.reserve(data.size());
    for (const auto& s : data.samples) y.push_back(s.label);
    return y;
}

}  // namespace

SplitPair stratified_split(const Dataset& data, double test_fraction, uint64_t seed) {
    return stratified_split(dataset_labels(data), test_fraction, seed);
}

std::vector<SplitPair> stratified_kfold(const Dataset& data, int k, uint64_t seed) {
    return stratified_kfold(dataset_labels(data), k, seed);
}

// --------------------------------------------------------------- profiles

Profile make_profile(const std::string& name) {
    Profile p;
    p.name = name;
    if (name == "desk") {
        p.vit = {224, 16, 192, 12, 3};
        p.cae_enc_depth = 12;
        p.cae_dec_depth = 4;
        p.proj_dim = 64;
    } else if (name == "full") {
        p.vit = {224, 16, 384, 12, 6};
        p.cae_enc_depth = 12;
        p.cae_dec_depth = 4;
        p.proj_dim = 64;
    } else if (name == "bench") {
        // shrunk benchmark profile for the ablation experiments
        p.vit = {224, 32, 96, 6, 3};
        p.cae_enc_depth = 6;
        p.cae_dec_depth = 2;
        p.proj_dim = 64;
    } else if (name == "tiny") {
        // unit-test scale
        p.vit = {224, 56, 32, 2, 2};
        p.cae_enc_depth = 2;
        p.cae_dec_depth = 1;
        p.proj_dim = 8;
    } else {
        throw ConfigError("unknown profile: " + name + " (expected desk, full, bench, or tiny)");
    }
    return p;
}

// ------------------------------------------------------------ experiment

void ExperimentConfig::validate() const {
    if (domain_paths.empty()) throw ConfigError("experiment: no domain datasets configured");
    if (out_dir.empty()) throw ConfigError("experiment: output directory not set");
    static const std::set<std::string> variants = {"full", "M1", "M2", "M3", "M4", "M5"};
    if (!variants.count(variant)) throw ConfigError("experiment: unknown variant tag " + variant);
    if (variant != "M1" && domain_paths.size() < 2)
        throw ConfigError("experiment: CAE training needs at least 2 domains");
    if (beta < 0 || lambda < 0) throw ConfigError("experiment: beta and lambda must be non-negative");
    if (rho < 0 || rho >= 1) throw ConfigError("experiment: rho must lie in [0, 1)");
    if (seg_epochs < 1 || cae_epochs < 1) throw ConfigError("experiment: epoch counts must be >= 1");
    if (test_fraction <= 0 || test_fraction >= 1) throw ConfigError("experiment: test fraction must lie in (0, 1)");
    if (k_folds < 2) throw ConfigError("experiment: k_folds must be >= 2");
    if (annotated_fraction <= 0 || annotated_fraction > 1)
        throw ConfigError("experiment: annotated fraction must lie in (0, 1]");
    if (classifiers.empty()) throw ConfigError("experiment: classifier list is empty");
    for (int t : train_domains)
        if (t < 0 || (size_t)t >= domain_paths.size())
            throw ConfigError("experiment: train domain index " + std::to_string(t) + " out of range");
    make_profile(profile);
}

namespace {

std::string join(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// key=value view of the config; everything except the output directory, so
// that two runs of the same experiment snapshot identically
std::map<std::string, std::string> config_to_map(const ExperimentConfig& cfg) {
    std::map<std::string, std::string> m;
    m["domains"] = join(cfg.domain_paths, ',');
    std::vector<std::string> tds;
    for (int t : cfg.train_domains) tds.push_back(std::to_string(t));
    m["train_domains"] = join(tds, ',');
    m["profile"] = cfg.profile;
    m["variant"] = cfg.variant;
    m["seed"] = std::to_string(cfg.seed);
    m["beta"] = fmt_double(cfg.beta);
    m["lambda"] = fmt_double(cfg.lambda);
    m["rho"] = fmt_double(cfg.rho);
    m["seg_epochs"] = std::to_string(cfg.seg_epochs);
    m["cae_epochs"] = std::to_string(cfg.cae_epochs);
    m["annotated_fraction"] = fmt_double(cfg.annotated_fraction);
    m["test_fraction"] = fmt_double(cfg.test_fraction);
    m["k_folds"] = std::to_string(cfg.k_folds);
    std::vector<std::string> cls;
    for (Algo a : cfg.classifiers) cls.push_back(algo_name(a));
    m["classifiers"] = join(cls, ',');
    return m;
}

}  // namespace

ExperimentConfig config_from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string line;
    int line_no = 0;
    bool have_header = false;
    ExperimentConfig cfg;
    cfg.classifiers.clear();
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (!have_header) {
            if (line != "dorl-config 1")
                throw ConfigError("config " + path + " line " + std::to_string(line_no) +
                                  ": expected version header 'dorl-config 1'");
            have_header = true;
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config " + path + " line " + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        try {
            if (key == "domains")
                cfg.domain_paths = split_list(val, ',');
            else if (key == "train_domains") {
                cfg.train_domains.clear();
                for (const auto& t : split_list(val, ',')) cfg.train_domains.push_back(std::stoi(t));
            } else if (key == "out")
                cfg.out_dir = val;
            else if (key == "profile")
                cfg.profile = val;
            else if (key == "variant")
                cfg.variant = val;
            else if (key == "seed")
                cfg.seed = (uint64_t)std::stoull(val);
            else if (key == "beta")
                cfg.beta = std::stod(val);
            else if (key == "lambda")
                cfg.lambda = std::stod(val);
            else if (key == "rho")
                cfg.rho = std::stod(val);
            else if (key == "seg_epochs")
                cfg.seg_epochs = std::stoll(val);
            else if (key == "cae_epochs")
                cfg.cae_epochs = std::stoll(val);
            else if (key == "annotated_fraction")
                cfg.annotated_fraction = std::stod(val);
            else if (key == "test_fraction")
                cfg.test_fraction = std::stod(val);
            else if (key == "k_folds")
                cfg.k_folds = std::stoi(val);
            else if (key == "classifiers") {
                cfg.classifiers.clear();
                for (const auto& n : split_list(val, ',')) cfg.classifiers.push_back(algo_from_name(n));
            } else
                throw ConfigError("unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ConfigError("config " + path + " line " + std::to_string(line_no) + ": bad value for " + key);
        } catch (const std::out_of_range&) {
            throw ConfigError("config " + path + " line " + std::to_string(line_no) + ": value out of range for " + key);
        } catch (const ConfigError& e) {
            throw ConfigError("config " + path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header) throw ConfigError("config " + path + ": missing version header");
    if (cfg.classifiers.empty()) cfg.classifiers = ExperimentConfig{}.classifiers;
    return cfg;
}

void config_to_file(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("config: cannot write " + path);
    os << "dorl-config 1\n";
    for (auto& [k, v] : config_to_map(cfg)) os << k << "=" << v << "\n";
    os << "out=" << cfg.out_dir << "\n";
    if (!os) throw DataError("config: write failed for " + path);
}

// ------------------------------------------------------------- reporting

double EvalReport::classifier_average(size_t clf) const {
    double sum = 0;
    size_t n = 0;
    for (const auto& row : cells.at(clf))
        for (const auto& cell : row) {
            sum += cell.mean;
            ++n;
        }
    if (n == 0) throw DataError("report: no cells");
    return sum / (double)n;
}

double EvalReport::overall_average() const {
    double sum = 0;
    for (size_t c = 0; c < cells.size(); ++c) sum += classifier_average(c);
    if (cells.empty()) throw DataError("report: no classifiers");
    return sum / (double)cells.size();
}

std::string report_to_json(const EvalReport& r) {
    json j;
    j["profile"] = r.profile;
    j["variant"] = r.variant;
    j["seed"] = r.seed;
    j["beta"] = r.beta;
    j["lambda"] = r.lambda;
    j["rho"] = r.rho;
    j["train_domains"] = r.train_domains;
    j["test_domains"] = r.test_domains;
    j["classifiers"] = r.classifiers;
    j["label_intersection"] = r.label_intersection;
    j["config"] = r.config_snapshot;
    json results = json::object();
    json clf_avg = json::object();
    for (size_t c = 0; c < r.classifiers.size(); ++c) {
        json per_tr = json::object();
        for (size_t tr = 0; tr < r.train_domains.size(); ++tr) {
            json per_te = json::object();
            for (size_t te = 0; te < r.test_domains.size(); ++te) {
                const CellResult& cell = r.cells[c][tr][te];
                per_te[r.test_domains[te]] = {{"mean", cell.mean}, {"std", cell.stddev}, {"folds", cell.fold_acc}};
            }
            per_tr[r.train_domains[tr]] = per_te;
        }
        results[r.classifiers[c]] = per_tr;
        clf_avg[r.classifiers[c]] = r.classifier_average(c);
    }
    j["results"] = results;
    j["classifier_average"] = clf_avg;
    j["overall_average"] = r.overall_average();
    return j.dump(2) + "\n";
}

std::string report_to_csv(const EvalReport& r, size_t clf) {
    if (clf >= r.classifiers.size()) throw ConfigError("report_to_csv: classifier index out of range");
    std::ostringstream os;
    os << "train,test,mean,std";
    size_t k = r.cells[clf][0][0].fold_acc.size();
    for (size_t f = 0; f < k; ++f) os << ",fold" << f;
    os << "\n";
    for (size_t tr = 0; tr < r.train_domains.size(); ++tr)
        for (size_t te = 0; te < r.test_domains.size(); ++te) {
            const CellResult& cell = r.cells[clf][tr][te];
            os << r.train_domains[tr] << "," << r.test_domains[te] << "," << cell.mean << "," << cell.stddev;
            for (double a : cell.fold_acc) os << "," << a;
            os << "\n";
        }
    return os.str();
}

// --------------------------------------------------------- feature export

namespace {

constexpr char kFeatMagic[8] = {'D', 'O', 'R', 'L', 'F', 'E', 'A', 'T'};

void write_str(std::ostream& os, const std::string& s) {
    uint16_t len = (uint16_t)s.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(s.data(), (std::streamsize)s.size());
}

std::string read_str(std::istream& is) {
    uint16_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw DataError("features: truncated file");
    return s;
}

}  // namespace

void export_features(const std::vector<FeatureRecord>& records, const std::string& path) {
    if (records.empty()) throw DataError("export_features: no records");
    const size_t dim = records[0].values.size();
    for (const auto& r : records)
        if (r.values.size() != dim) throw ShapeError("export_features: inconsistent feature dimension");

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("export_features: cannot open " + path);
    os.write(kFeatMagic, 8);
    for (const auto& r : records) {
        write_str(os, r.dataset);
        write_str(os, r.id);
        int32_t label = r.label;
        os.write(reinterpret_cast<const char*>(&label), sizeof(label));
        write_str(os, r.domain);
        os.write(reinterpret_cast<const char*>(r.values.data()), (std::streamsize)(dim * sizeof(float)));
    }
    if (!os) throw DataError("export_features: write failed for " + path);

    json manifest = {{"count", records.size()}, {"dim", dim}};
    std::ofstream ms(path + ".manifest.json", std::ios::trunc);
    ms << manifest.dump(2) << "\n";
    if (!ms) throw DataError("export_features: cannot write manifest for " + path);
}

std::vector<FeatureRecord> import_features(const std::string& path) {
    std::ifstream ms(path + ".manifest.json");
    if (!ms) throw DataError("import_features: no manifest for " + path);
    json manifest;
    try {
        ms >> manifest;
    } catch (const json::exception& e) {
        throw DataError("import_features: bad manifest for " + path + ": " + e.what());
    }
    const size_t count = manifest.at("count").get<size_t>();
    const size_t dim = manifest.at("dim").get<size_t>();

    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("import_features: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kFeatMagic, 8) != 0) throw DataError("import_features: bad magic in " + path);
    std::vector<FeatureRecord> out(count);
    for (auto& r : out) {
        r.dataset = read_str(is);
        r.id = read_str(is);
        int32_t label = 0;
        is.read(reinterpret_cast<char*>(&label), sizeof(label));
        r.label = label;
        r.domain = read_str(is);
        r.values.resize(dim);
        is.read(reinterpret_cast<char*>(r.values.data()), (std::streamsize)(dim * sizeof(float)));
        if (!is) throw DataError("import_features: truncated records in " + path);
    }
    return out;
}

// -------------------------------------------------------------- pipeline

namespace {

template <typename F>
auto run_stage(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        throw ConfigError("stage " + name + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError("stage " + name + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError("stage " + name + ": " + e.what());
    } catch (const ModelStateError& e) {
        throw ModelStateError("stage " + name + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError("stage " + name + ": " + e.what());
    }
}

// per-domain cached artifacts of the embed stage, aligned with sample order
struct EmbedCache {
    std::vector<TensorF> e;                 // [T, D] image embeddings
    std::vector<std::vector<uint8_t>> c;    // post-processed segmented images
};

constexpr char kEmbMagic[8] = {'D', 'O', 'R', 'L', 'E', 'M', 'B', '1'};

void save_embed_cache(const EmbedCache& cache, const Dataset& data, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("embed cache: cannot open " + path);
    os.write(kEmbMagic, 8);
    uint64_t n = cache.e.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (size_t i = 0; i < cache.e.size(); ++i) {
        write_str(os, data.samples[i].id);
        int64_t t = cache.e[i].rows(), d = cache.e[i].cols(), img = (int64_t)cache.c[i].size();
        os.write(reinterpret_cast<const char*>(&t), sizeof(t));
        os.write(reinterpret_cast<const char*>(&d), sizeof(d));
        os.write(reinterpret_cast<const char*>(cache.e[i].data()), (std::streamsize)(sizeof(float) * t * d));
        os.write(reinterpret_cast<const char*>(&img), sizeof(img));
        os.write(reinterpret_cast<const char*>(cache.c[i].data()), (std::streamsize)img);
    }
    if (!os) throw DataError("embed cache: write failed for " + path);
}

EmbedCache load_embed_cache(const Dataset& data, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("embed cache: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kEmbMagic, 8) != 0) throw DataError("embed cache: bad magic in " + path);
    uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != data.size()) throw DataError("embed cache: sample count mismatch in " + path);
    EmbedCache cache;
    for (size_t i = 0; i < n; ++i) {
        std::string id = read_str(is);
        if (id != data.samples[i].id) throw DataError("embed cache: sample order mismatch in " + path);
        int64_t t = 0, d = 0, img = 0;
        is.read(reinterpret_cast<char*>(&t), sizeof(t));
        is.read(reinterpret_cast<char*>(&d), sizeof(d));
        TensorF e({t, d});
        is.read(reinterpret_cast<char*>(e.data()), (std::streamsize)(sizeof(float) * t * d));
        is.read(reinterpret_cast<char*>(&img), sizeof(img));
        std::vector<uint8_t> c((size_t)img);
        is.read(reinterpret_cast<char*>(c.data()), (std::streamsize)img);
        if (!is) throw DataError("embed cache: truncated data in " + path);
        cache.e.push_back(std::move(e));
        cache.c.push_back(std::move(c));
    }
    return cache;
}

struct VariantWeights {
    bool use_cae = true;
    double w_mmd = 1.0, w_ssim = 1.0;
};

VariantWeights variant_weights(const std::string& variant) {
    if (variant == "M1") return {false, 0, 0};
    if (variant == "M2") return {true, 0, 0};
    if (variant == "M3") return {true, 1, 0};
    if (variant == "M4") return {true, 0, 1};
    if (variant == "M5" || variant == "full") return {true, 1, 1};
    throw ConfigError("unknown variant tag " + variant);
}

void assert_no_leakage(const Dataset& fit_data, const std::vector<int64_t>& fit_idx, const Dataset& eval_data,
                       const std::vector<int64_t>& eval_idx) {
    std::set<std::string> fit_ids;
    for (int64_t i : fit_idx) fit_ids.insert(fit_data.samples[(size_t)i].id);
    for (int64_t i : eval_idx)
        if (fit_ids.count(eval_data.samples[(size_t)i].id))
            throw ModelStateError("leakage: sample " + eval_data.samples[(size_t)i].id +
                                  " appears in both classifier fit and evaluation sets");
}

LabeledFeatures gather_features(const std::vector<std::vector<float>>& feats, const std::vector<int>& labels,
                                const std::vector<int64_t>& idx, int n_classes) {
    const int64_t d = (int64_t)feats.at(0).size();
    LabeledFeatures out;
    out.n_classes = n_classes;
    out.x = TensorD({(int64_t)idx.size(), d});
    for (size_t r = 0; r < idx.size(); ++r) {
        const auto& v = feats[(size_t)idx[r]];
        for (int64_t j = 0; j < d; ++j) out.x[(int64_t)r * d + j] = (double)v[(size_t)j];
        out.y.push_back(labels[(size_t)idx[r]]);
    }
    return out;
}

}  // namespace

EvalReport run_pipeline(const ExperimentConfig& cfg, const std::string& stop_after) {
    const auto t_start = std::chrono::steady_clock::now();
    cfg.validate();
    static const std::set<std::string> stages = {"", "train_seg", "embed", "train_cae", "extract"};
    if (!stages.count(stop_after)) throw ConfigError("run_pipeline: unknown stage " + stop_after);
    const Profile profile = make_profile(cfg.profile);
    const VariantWeights vw = variant_weights(cfg.variant);
    fs::create_directories(cfg.out_dir);
    auto artifact = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };

    // ---- load datasets
    std::vector<Dataset> domains = run_stage("load", [&] {
        std::vector<Dataset> out;
        for (const auto& p : cfg.domain_paths) {
            Dataset d = load_dataset(p);
            if (d.samples[0].height != profile.vit.image_size || d.samples[0].width != profile.vit.image_size)
                throw DataError("dataset " + p + " image size does not match profile " + profile.name);
            out.push_back(std::move(d));
        }
        return out;
    });

    std::vector<int> train_list = cfg.train_domains;
    if (train_list.empty())
        for (size_t i = 0; i < domains.size(); ++i) train_list.push_back((int)i);

    EvalReport report;
    report.profile = cfg.profile;
    report.variant = cfg.variant;
    report.seed = cfg.seed;
    report.beta = cfg.beta;
    report.lambda = cfg.lambda;
    report.rho = cfg.rho;
    report.config_snapshot = config_to_map(cfg);
    for (int tr : train_list) report.train_domains.push_back(domains[(size_t)tr].domain);
    for (const auto& d : domains) report.test_domains.push_back(d.domain);
    for (Algo a : cfg.classifiers) report.classifiers.push_back(algo_name(a));
    report.cells.assign(cfg.classifiers.size(),
                        std::vector<std::vector<CellResult>>(train_list.size(),
                                                             std::vector<CellResult>(domains.size())));

    for (size_t tri = 0; tri < train_list.size(); ++tri) {
        const size_t tr = (size_t)train_list[tri];
        const Dataset& src = domains[tr];
        const std::string tr_tag = src.domain + "_s" + std::to_string(cfg.seed);
        const int n_classes = (int)src.class_names.size();

        SplitPair holdout = stratified_split(src, cfg.test_fraction, cfg.seed);
        std::vector<int> train_labels;
        for (int64_t i : holdout.train) train_labels.push_back(src.samples[(size_t)i].label);
        std::vector<SplitPair> folds = stratified_kfold(train_labels, cfg.k_folds, cfg.seed);

        // ---- stage: segmentation fine-tuning on the source training split
        SegConfig scfg;
        scfg.vit = profile.vit;
        SegModel seg = run_stage("train_seg", [&] {
            SegModel m = init_seg_model<float>(scfg, cfg.seed);
            const std::string ckpt = artifact("seg_" + tr_tag + ".ckpt");
            if (fs::exists(ckpt)) {
                m.params = load_checkpoint<float>(ckpt);
            } else {
                Dataset sub;
                sub.domain = src.domain;
                sub.class_names = src.class_names;
                for (int64_t i : holdout.train) sub.samples.push_back(src.samples[(size_t)i]);
                SegTrainConfig stc;
                stc.annotated_fraction = cfg.annotated_fraction;
                stc.epochs = cfg.seg_epochs;
                stc.seed = cfg.seed;
                train_seg(m, sub, stc);
                save_checkpoint(ckpt, m.params);
            }
            m.fitted = true;
            return m;
        });
        if (stop_after == "train_seg") continue;

        // ---- stage: embeddings e_i + segmented images c_i for every domain
        std::vector<EmbedCache> caches = run_stage("embed", [&] {
            std::vector<EmbedCache> out;
            for (const auto& dom : domains) {
                const std::string path = artifact("embed_" + tr_tag + "_" + dom.domain + ".bin");
                if (fs::exists(path)) {
                    out.push_back(load_embed_cache(dom, path));
                    continue;
                }
                EmbedCache cache;
                for (const auto& s : dom.samples) {
                    ParamCtx<float> P(seg.params, /*train=*/false);
                    TensorF img = s.pixels_tensor<float>();
                    SegOutputT<float> seg_out = segment(img, seg, P);
                    cache.e.push_back(seg_out.embedding.tokens->value.clone());
                    std::vector<uint8_t> mask_u8((size_t)seg_out.binary_mask.numel());
                    for (int64_t i = 0; i < seg_out.binary_mask.numel(); ++i)
                        mask_u8[(size_t)i] = seg_out.binary_mask[i] != 0.f ? 1 : 0;
                    cache.c.push_back(postprocess_u8(s, mask_u8));
                }
                save_embed_cache(cache, dom, path);
                out.push_back(std::move(cache));
            }
            return out;
        });
        if (stop_after == "embed") continue;

        // ---- stage: cross-domain autoencoder (skipped entirely for M1)
        CAEConfig ccfg;
        ccfg.grid = profile.vit.grid();
        ccfg.embed_dim = profile.vit.embed_dim;
        ccfg.heads = profile.vit.heads;
        ccfg.patch_size = profile.vit.patch_size;
        ccfg.enc_depth = profile.cae_enc_depth;
        ccfg.dec_depth = profile.cae_dec_depth;
        ccfg.proj_dim = profile.proj_dim;
        ccfg.mask_ratio = cfg.rho;
        CAEModel cae = init_cae_model<float>(ccfg, cfg.seed);
        if (vw.use_cae) {
            run_stage("train_cae", [&] {
                const std::string ckpt = artifact("cae_" + tr_tag + "_" + cfg.variant + "_b" + fmt_double(cfg.beta) +
                                                  "_l" + fmt_double(cfg.lambda) + ".ckpt");
                if (fs::exists(ckpt)) {
                    cae.params = load_checkpoint<float>(ckpt);
                    cae.fitted = true;
                    return 0;
                }
                // source: training split only; targets: all samples, unlabeled
                std::vector<CAEDomain> cae_domains;
                CAEDomain src_dom;
                src_dom.name = src.domain;
                for (int64_t i : holdout.train)
                    src_dom.samples.push_back(
                        {src.samples[(size_t)i].id, caches[tr].e[(size_t)i].clone(), caches[tr].c[(size_t)i]});
                cae_domains.push_back(std::move(src_dom));
                for (size_t d = 0; d < domains.size(); ++d) {
                    if (d == tr) continue;
                    CAEDomain t_dom;
                    t_dom.name = domains[d].domain;
                    for (size_t i = 0; i < domains[d].size(); ++i)
                        t_dom.samples.push_back(
                            {domains[d].samples[i].id, caches[d].e[i].clone(), caches[d].c[i]});
                    cae_domains.push_back(std::move(t_dom));
                }
                CAETrainConfig ctc;
                ctc.beta = cfg.beta;
                ctc.lambda = cfg.lambda;
                ctc.rho = cfg.rho;
                ctc.epochs = cfg.cae_epochs;
                ctc.w_mmd = vw.w_mmd;
                ctc.w_ssim = vw.w_ssim;
                ctc.seed = cfg.seed;
                std::vector<LossBreakdown> trace = train_cae(cae, cae_domains, ctc);
                save_checkpoint(ckpt, cae.params);
                std::ofstream ts(artifact("cae_" + tr_tag + "_" + cfg.variant + "_trace.csv"), std::ios::trunc);
                ts << "epoch,l_rec,l_mmd,l_ssim,total\n";
                for (size_t e = 0; e < trace.size(); ++e)
                    ts << e << "," << trace[e].l_rec << "," << trace[e].l_mmd << "," << trace[e].l_ssim << ","
                       << trace[e].total << "\n";
                return 0;
            });
        }
        if (stop_after == "train_cae") continue;

        // ---- stage: per-sample feature vectors s_i
        std::vector<std::vector<std::vector<float>>> feats = run_stage("extract", [&] {
            std::vector<std::vector<std::vector<float>>> out(domains.size());
            for (size_t d = 0; d < domains.size(); ++d) {
                std::vector<FeatureRecord> records;
                for (size_t i = 0; i < domains[d].size(); ++i) {
                    const TensorF& e = caches[d].e[i];
                    std::vector<float> v;
                    if (vw.use_cae) {
                        TensorF s = extract_features(e, cae);
                        v.assign(s.data(), s.data() + s.numel());
                    } else {
                        // M1: global average pooling of the raw image embedding
                        v.resize((size_t)e.cols());
                        Eigen::Matrix<float, 1, Eigen::Dynamic> m = e.mat().colwise().mean();
                        for (int64_t j = 0; j < e.cols(); ++j) v[(size_t)j] = m(j);
                    }
                    records.push_back({domains[d].domain, domains[d].samples[i].id, domains[d].samples[i].label,
                                       domains[d].domain, v});
                    out[d].push_back(std::move(v));
                }
                export_features(records, artifact("features_" + tr_tag + "_" + cfg.variant + "_" +
                                                  domains[d].domain + ".bin"));
            }
            return out;
        });
        if (stop_after == "extract") continue;

        // ---- stage: per-fold classifier fits and evaluations
        run_stage("classify", [&] {
            std::vector<int> src_labels = dataset_labels(src);

            // label mapping per external domain via class names
            std::vector<std::vector<int64_t>> ext_idx(domains.size());
            std::vector<std::vector<int>> ext_labels(domains.size());
            for (size_t d = 0; d < domains.size(); ++d) {
                if (d == tr) continue;
                for (size_t i = 0; i < domains[d].size(); ++i) {
                    const auto& name = domains[d].samples[i].class_name;
                    auto it = std::find(src.class_names.begin(), src.class_names.end(), name);
                    if (it == src.class_names.end()) {
                        report.label_intersection = true;
                        continue;
                    }
                    ext_idx[d].push_back((int64_t)i);
                    ext_labels[d].push_back((int)(it - src.class_names.begin()));
                }
                if (ext_idx[d].empty())
                    throw DataError("evaluation: no shared classes between " + src.domain + " and " +
                                    domains[d].domain);
                if (domains[d].class_names != src.class_names) report.label_intersection = true;
            }

            for (int f = 0; f < cfg.k_folds; ++f) {
                // fold indices are positions within the hold-out training split
                std::vector<int64_t> fit_idx;
                for (int64_t i : folds[(size_t)f].train) fit_idx.push_back(holdout.train[(size_t)i]);
                assert_no_leakage(src, fit_idx, src, holdout.test);
                for (size_t d = 0; d < domains.size(); ++d)
                    if (d != tr) assert_no_leakage(src, fit_idx, domains[d], ext_idx[d]);

                LabeledFeatures fit_data = gather_features(feats[tr], src_labels, fit_idx, n_classes);
                const uint64_t fold_seed = Rng(cfg.seed, "fold", (uint64_t)f).next_u64();
                for (size_t c = 0; c < cfg.classifiers.size(); ++c) {
                    std::unique_ptr<Classifier> model = fit_classifier(cfg.classifiers[c], fit_data, fold_seed);
                    auto eval = [&](const std::vector<std::vector<float>>& fx, const std::vector<int64_t>& idx,
                                    const std::vector<int>& truth) {
                        LabeledFeatures test;
                        test.n_classes = n_classes;
                        test.x = gather_features(fx, std::vector<int>(fx.size(), 0), idx, n_classes).x;
                        return top1_accuracy(model->predict(test.x), truth);
                    };
                    // source hold-out
                    std::vector<int> hold_truth;
                    for (int64_t i : holdout.test) hold_truth.push_back(src.samples[(size_t)i].label);
                    report.cells[c][tri][tr].fold_acc.push_back(eval(feats[tr], holdout.test, hold_truth));
                    // external domains
                    for (size_t d = 0; d < domains.size(); ++d)
                        if (d != tr)
                            report.cells[c][tri][d].fold_acc.push_back(eval(feats[d], ext_idx[d], ext_labels[d]));
                }
            }
            return 0;
        });
    }

    for (auto& per_clf : report.cells)
        for (auto& row : per_clf)
            for (auto& cell : row) {
                double sum = 0;
                for (double a : cell.fold_acc) sum += a;
                cell.mean = cell.fold_acc.empty() ? 0 : sum / (double)cell.fold_acc.size();
                double var = 0;
                for (double a : cell.fold_acc) var += (a - cell.mean) * (a - cell.mean);
                cell.stddev = cell.fold_acc.empty() ? 0 : std::sqrt(var / (double)cell.fold_acc.size());
            }

    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (!stop_after.empty()) return report;

    std::ofstream js(artifact("report_" + cfg.variant + ".json"), std::ios::trunc);
    js << report_to_json(report);
    for (size_t c = 0; c < report.classifiers.size(); ++c) {
        std::ofstream cs(artifact("report_" + cfg.variant + "_" + report.classifiers[c] + ".csv"), std::ios::trunc);
        cs << report_to_csv(report, c);
    }
    json meta = {{"wall_seconds", report.wall_seconds}};
    std::ofstream ms(artifact("run_meta_" + cfg.variant + ".json"), std::ios::trunc);
    ms << meta.dump(2) << "\n";
    return report;
}

EvalReport run_ablation(const ExperimentConfig& cfg, const std::string& variant) {
    if (variant != "M1" && variant != "M2" && variant != "M3" && variant != "M4" && variant != "M5")
        throw ConfigError("run_ablation: unknown variant tag " + variant);
    ExperimentConfig c = cfg;
    c.variant = variant;
    return run_pipeline(c);
}

std::string SweepResult::csv() const {
    std::ostringstream os;
    os << "beta,lambda,classifier,accuracy\n";
    for (const auto& r : rows) os << r.beta << "," << r.lambda << "," << r.classifier << "," << r.accuracy << "\n";
    return os.str();
}

SweepResult sweep(const ExperimentConfig& cfg, const std::vector<double>& betas, const std::vector<double>& lambdas) {
    if (betas.empty() || lambdas.empty()) throw ConfigError("sweep: beta and lambda grids must be non-empty");
    SweepResult res;
    res.best_accuracy = -1;
    for (double b : betas)
        for (double l : lambdas) {
            ExperimentConfig c = cfg;
            c.beta = b;
            c.lambda = l;
            c.out_dir = (fs::path(cfg.out_dir) / ("sweep_b" + fmt_double(b) + "_l" + fmt_double(l))).string();
            EvalReport report = run_pipeline(c);
            double cell_mean = 0;
            for (size_t i = 0; i < report.classifiers.size(); ++i) {
                double acc = report.classifier_average(i);
                res.rows.push_back({b, l, report.classifiers[i], acc});
                cell_mean += acc;
            }
            cell_mean /= (double)report.classifiers.size();
            if (cell_mean > res.best_accuracy) {
                res.best_accuracy = cell_mean;
                res.best_beta = b;
                res.best_lambda = l;
            }
        }
    std::ofstream cs(fs::path(cfg.out_dir) / "sweep.csv", std::ios::trunc);
    cs << res.csv();
    return res;
}

}  // namespace dorl
