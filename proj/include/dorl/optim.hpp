#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "dorl/tensor.hpp"

namespace dorl {

// Named parameter collection. Frozen parameters are never touched by the
// optimizer; the checkpoint records the flag.
template <typename T>
class ParamStore {
  public:
    TensorData<T>& add(const std::string& name, TensorData<T> t, bool frozen = false) {
        if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        if (frozen) frozen_.insert(name);
        return params_[name] = std::move(t);
    }

    TensorData<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const TensorData<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    bool frozen(const std::string& name) const { return frozen_.count(name) != 0; }
    void set_frozen(const std::string& name, bool f) {
        at(name);
        if (f)
            frozen_.insert(name);
        else
            frozen_.erase(name);
    }

    const std::map<std::string, TensorData<T>>& params() const { return params_; }
    std::map<std::string, TensorData<T>>& params() { return params_; }

    size_t size() const { return params_.size(); }

    // deep copy (own buffers), e.g. for freeze-invariant snapshots
    ParamStore clone() const {
        ParamStore out;
        for (auto& [k, v] : params_) out.params_[k] = v.clone();
        out.frozen_ = frozen_;
        return out;
    }

  private:
    std::map<std::string, TensorData<T>> params_;
    std::set<std::string> frozen_;
};

struct ScheduleConfig {
    double base_lr = 5e-4;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double min_lr = 0.0;

    void validate() const {
        if (total_steps <= 0) throw ConfigError("total_steps must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ConfigError("warmup_steps must satisfy 0 <= warmup < total");
        if (min_lr < 0 || min_lr > base_lr) throw ConfigError("min_lr must lie in [0, base_lr]");
    }
};

// linear warmup to base_lr, then cosine decay to min_lr
inline double lr_at(int64_t step, const ScheduleConfig& cfg) {
    cfg.validate();
    if (step < 0 || step > cfg.total_steps) throw ConfigError("lr_at: step out of range");
    if (step < cfg.warmup_steps) return cfg.base_lr * double(step) / double(cfg.warmup_steps);
    double progress = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// 10% warmup unless the caller overrides it
inline ScheduleConfig default_schedule(double base_lr, int64_t total_steps) {
    ScheduleConfig cfg;
    cfg.base_lr = base_lr;
    cfg.total_steps = total_steps;
    cfg.warmup_steps = total_steps / 10;
    cfg.min_lr = 0.0;
    return cfg;
}

struct AdamWConfig {
    double lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    AdamWConfig& config() { return cfg_; }
    int64_t step_count() const { return t_; }

    // grads must cover exactly the non-frozen parameters
    void step(ParamStore<T>& params, const std::map<std::string, TensorData<T>>& grads, double lr_override = -1.0) {
        for (auto& [name, g] : grads) {
            if (!params.has(name)) throw ConfigError("adamw: gradient for unknown parameter " + name);
            if (params.frozen(name)) throw ConfigError("adamw: gradient supplied for frozen parameter " + name);
        }
        ++t_;
        const double lr = lr_override >= 0 ? lr_override : cfg_.lr;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
        for (auto& [name, p] : params.params()) {
            if (params.frozen(name)) continue;
            auto git = grads.find(name);
            if (git == grads.end()) throw ConfigError("adamw: missing gradient for trainable parameter " + name);
            const TensorData<T>& g = git->second;
            if (!g.same_shape(p)) throw ShapeError("adamw: gradient shape mismatch for " + name);
            auto& slot = state_[name];
            if (!slot.m.defined()) {
                slot.m = TensorData<T>(p.shape());
                slot.v = TensorData<T>(p.shape());
            }
            for (int64_t i = 0; i < p.numel(); ++i) {
                double gi = (double)g[i];
                double m = cfg_.beta1 * (double)slot.m[i] + (1.0 - cfg_.beta1) * gi;
                double v = cfg_.beta2 * (double)slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                slot.m[i] = (T)m;
                slot.v[i] = (T)v;
                double mhat = m / bc1;
                double vhat = v / bc2;
                p[i] = (T)((double)p[i] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * (double)p[i]));
            }
        }
    }

  private:
    struct Slot {
        TensorData<T> m, v;
    };
    AdamWConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Slot> state_;
};

}  // namespace dorl
