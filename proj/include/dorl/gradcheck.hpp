#pragma once

// Central finite-difference verification of analytic gradients. Always runs
// in float64; float32 differencing is too noisy to separate real gradient
// bugs from rounding.

#include <functional>
#include <string>
#include <vector>

#include "dorl/autodiff.hpp"

namespace dorl {

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
};

// fn builds a scalar output from the given leaves. Each input coordinate is
// perturbed by +-eps and compared against the analytic gradient.
inline GradCheckReport grad_check_fn(const std::function<Var<double>(const std::vector<Var<double>>&)>& fn,
                                     std::vector<TensorD> inputs, double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3) throw ConfigError("grad_check eps must lie in [1e-7, 1e-3]");
    std::vector<Var<double>> leaves;
    for (auto& t : inputs) leaves.push_back(leaf<double>(t.clone()));
    Var<double> out = fn(leaves);
    if (out->value.numel() != 1) throw ShapeError("grad_check output must be scalar");
    backward(out);

    auto eval = [&](const std::vector<TensorD>& xs) {
        std::vector<Var<double>> ls;
        for (auto& t : xs) ls.push_back(constant<double>(t));
        return fn(ls)->value[0];
    };

    GradCheckReport rep;
    for (size_t k = 0; k < inputs.size(); ++k) {
        TensorD work = inputs[k].clone();
        std::vector<TensorD> xs;
        for (size_t j = 0; j < inputs.size(); ++j) xs.push_back(j == k ? work : inputs[j]);
        for (int64_t i = 0; i < work.numel(); ++i) {
            double orig = work[i];
            work[i] = orig + eps;
            double fp = eval(xs);
            work[i] = orig - eps;
            double fm = eval(xs);
            work[i] = orig;
            double numeric = (fp - fm) / (2 * eps);
            double analytic = leaves[k]->grad.defined() ? leaves[k]->grad[i] : 0.0;
            double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
            rep.max_rel_err = std::max(rep.max_rel_err, std::abs(analytic - numeric) / denom);
            ++rep.coords_checked;
        }
    }
    return rep;
}

inline GradCheckReport grad_check_fn(const std::function<Var<double>(const Var<double>&)>& fn, TensorD input,
                                     double eps = 1e-5) {
    return grad_check_fn([&](const std::vector<Var<double>>& xs) { return fn(xs[0]); }, {std::move(input)}, eps);
}

// Named-op gradient check over random inputs. The scalar probe is
// sum(op(x) .* r) with a fixed random r, which exercises the full Jacobian.
inline GradCheckReport grad_check_op(const std::string& op, const std::vector<Shape>& shapes, uint64_t seed,
                                     double eps = 1e-5) {
    Rng rng(seed, "gradcheck." + op);
    std::vector<TensorD> inputs;
    for (auto& s : shapes) {
        TensorD t(s);
        t.fill_gaussian(rng, 1.0);
        inputs.push_back(t);
    }

    std::function<Var<double>(const std::vector<Var<double>>&)> body;
    if (op == "identity") {
        // gradient is exactly 1 everywhere; snapping inputs to a dyadic grid
        // makes the central difference exact as well, so the reported error
        // is a true zero
        for (int64_t i = 0; i < inputs[0].numel(); ++i) inputs[0][i] = std::round(inputs[0][i] * 1024.0) / 1024.0;
        body = [](const std::vector<Var<double>>& x) { return sum(x[0]); };
    } else if (op == "matmul") {
        body = [](const std::vector<Var<double>>& x) { return matmul(x[0], x[1]); };
    } else if (op == "add") {
        body = [](const std::vector<Var<double>>& x) { return add(x[0], x[1]); };
    } else if (op == "mul") {
        body = [](const std::vector<Var<double>>& x) { return mul(x[0], x[1]); };
    } else if (op == "mean") {
        body = [](const std::vector<Var<double>>& x) { return mean(x[0]); };
    } else if (op == "variance") {
        body = [](const std::vector<Var<double>>& x) { return variance(x[0]); };
    } else if (op == "softmax") {
        body = [](const std::vector<Var<double>>& x) { return softmax(x[0]); };
    } else if (op == "layer_norm") {
        body = [](const std::vector<Var<double>>& x) { return layer_norm(x[0], x[1], x[2]); };
    } else if (op == "gelu") {
        body = [](const std::vector<Var<double>>& x) { return gelu(x[0]); };
    } else if (op == "sigmoid") {
        body = [](const std::vector<Var<double>>& x) { return sigmoid(x[0]); };
    } else if (op == "square") {
        body = [](const std::vector<Var<double>>& x) { return square(x[0]); };
    } else if (op == "sqrt") {
        // shift inputs positive; sqrt near zero defeats finite differences
        for (int64_t i = 0; i < inputs[0].numel(); ++i) inputs[0][i] = std::abs(inputs[0][i]) + 0.5;
        body = [](const std::vector<Var<double>>& x) { return sqrt_op(x[0]); };
    } else if (op == "transpose") {
        body = [](const std::vector<Var<double>>& x) { return transpose(x[0]); };
    } else if (op == "reshape") {
        body = [](const std::vector<Var<double>>& x) { return reshape(x[0], {x[0]->value.numel()}); };
    } else if (op == "gather") {
        body = [&](const std::vector<Var<double>>& x) {
            std::vector<int64_t> idx;
            Rng r2(seed, "gradcheck.gather.idx");
            for (int64_t i = 0; i < x[0]->value.rows(); ++i) idx.push_back((int64_t)r2.below(x[0]->value.rows()));
            return gather_rows(x[0], idx);
        };
    } else if (op == "mean_rows") {
        body = [](const std::vector<Var<double>>& x) { return mean_rows(x[0]); };
    } else if (op == "exp") {
        body = [](const std::vector<Var<double>>& x) { return exp_op(x[0]); };
    } else if (op == "log") {
        for (int64_t i = 0; i < inputs[0].numel(); ++i) inputs[0][i] = std::abs(inputs[0][i]) + 0.5;
        body = [](const std::vector<Var<double>>& x) { return log_op(x[0]); };
    } else {
        throw ConfigError("grad_check: unsupported op '" + op + "'");
    }

    // probe weights fixed per (op, seed)
    std::shared_ptr<TensorD> probe;  // filled lazily once the output shape is known
    auto scalarized = [&, body](const std::vector<Var<double>>& xs) {
        Var<double> y = body(xs);
        if (y->value.numel() == 1) return y;
        if (!probe) {
            auto p = std::make_shared<TensorD>(y->value.shape());
            Rng r(seed, "gradcheck.probe." + op);
            p->fill_gaussian(r, 1.0);
            probe = p;
        }
        return sum(mul(y, constant<double>(*probe)));
    };
    return grad_check_fn(scalarized, std::move(inputs), eps);
}

}  // namespace dorl
