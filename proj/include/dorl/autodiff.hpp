#pragma once

// Reverse-mode automatic differentiation over TensorData. Every op builds a
// node holding the forward value and a closure that routes the incoming
// gradient to its parents; backward() walks the graph in reverse topological
// order. Inputs are never mutated, so a graph can share parameter buffers
// with the ParamStore that owns them.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "dorl/tensor.hpp"

namespace dorl {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    TensorData<T> value;
    TensorData<T> grad;  // allocated on demand during backward
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<Var<T>> parents;
    std::function<void(Node<T>&)> backprop;  // pushes this->grad into parents

    TensorData<T>& ensure_grad() {
        if (!grad.defined()) grad = TensorData<T>(value.shape());
        return grad;
    }
};

template <typename T>
Var<T> leaf(TensorData<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(TensorData<T> value) {
    return leaf<T>(std::move(value), false);
}

namespace detail {

template <typename T>
Var<T> make_node(const char* op, TensorData<T> value, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> backprop) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    auto n = std::make_shared<Node<T>>();
    n->op = op;
    n->value = std::move(value);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

template <typename T>
void check_same_shape(const char* op, const TensorData<T>& a, const TensorData<T>& b) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- binary elementwise ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape("add", a->value, b->value);
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec() + b->value.vec();
    return detail::make_node<T>("add", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
        if (b->requires_grad) b->ensure_grad().vec() += n.grad.vec();
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape("sub", a->value, b->value);
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec() - b->value.vec();
    return detail::make_node<T>("sub", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
        if (b->requires_grad) b->ensure_grad().vec() -= n.grad.vec();
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape("mul", a->value, b->value);
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().cwiseProduct(b->value.vec());
    return detail::make_node<T>("mul", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec().cwiseProduct(b->value.vec());
        if (b->requires_grad) b->ensure_grad().vec() += n.grad.vec().cwiseProduct(a->value.vec());
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    detail::check_same_shape("div", a->value, b->value);
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().cwiseQuotient(b->value.vec());
    return detail::make_node<T>("div", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec().cwiseQuotient(b->value.vec());
        if (b->requires_grad)
            b->ensure_grad().vec() -= n.grad.vec()
                                          .cwiseProduct(a->value.vec())
                                          .cwiseQuotient(b->value.vec().cwiseProduct(b->value.vec()));
    });
}

// broadcast a row vector [n] (or [1,n]) over the rows of a [m,n] matrix
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
    if (a->value.cols() != b->value.numel())
        throw ShapeError("add_rowvec: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
    TensorData<T> out(a->value.shape());
    out.mat() = a->value.mat().rowwise() + b->value.vec().transpose();
    return detail::make_node<T>("add_rowvec", std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
        if (b->requires_grad) b->ensure_grad().vec() += n.grad.mat().colwise().sum().transpose();
    });
}

// ---- scalar-argument ops ----

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec() * s;
    return detail::make_node<T>("scale", std::move(out), {a}, [a, s](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec() * s;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().array() + s;
    return detail::make_node<T>("add_scalar", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

// ---- unary elementwise ----

template <typename T>
Var<T> square(const Var<T>& a) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().array().square();
    return detail::make_node<T>("square", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += T(2) * n.grad.vec().cwiseProduct(a->value.vec());
    });
}

template <typename T>
Var<T> sqrt_op(const Var<T>& a) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().array().sqrt();
    auto saved = out;
    return detail::make_node<T>("sqrt", std::move(out), {a}, [a, saved](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec().cwiseQuotient(T(2) * saved.vec());
    });
}

template <typename T>
Var<T> log_op(const Var<T>& a) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().array().log();
    return detail::make_node<T>("log", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec().cwiseQuotient(a->value.vec());
    });
}

template <typename T>
Var<T> exp_op(const Var<T>& a) {
    TensorData<T> out(a->value.shape());
    out.vec() = a->value.vec().array().exp();
    auto saved = out;
    return detail::make_node<T>("exp", std::move(out), {a}, [a, saved](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec().cwiseProduct(saved.vec());
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    TensorData<T> out(a->value.shape());
    out.vec() = (T(1) / (T(1) + (-a->value.vec().array()).exp())).matrix();
    auto saved = out;
    return detail::make_node<T>("sigmoid", std::move(out), {a}, [a, saved](Node<T>& n) {
        if (a->requires_grad) {
            auto s = saved.vec().array();
            a->ensure_grad().vec() += (n.grad.vec().array() * s * (T(1) - s)).matrix();
        }
    });
}

// exact GELU: x * Phi(x)
template <typename T>
Var<T> gelu(const Var<T>& a) {
    const T inv_sqrt2 = T(0.70710678118654752440L);
    const T inv_sqrt2pi = T(0.39894228040143267794L);
    TensorData<T> out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = a->value[i];
        out[i] = x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
    }
    return detail::make_node<T>("gelu", std::move(out), {a}, [a, inv_sqrt2, inv_sqrt2pi](Node<T>& n) {
        if (!a->requires_grad) return;
        auto& g = a->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            T x = a->value[i];
            T phi = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            g[i] += n.grad[i] * (phi + x * pdf);
        }
    });
}

// ---- matmul / structure ----

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->value.cols() != b->value.rows() || a->value.rows() < 0 || b->value.rows() < 0)
        throw ShapeError("matmul: " + shape_str(a->value.shape()) + " x " + shape_str(b->value.shape()));
    const int64_t m = a->value.rows(), k = a->value.cols(), n2 = b->value.cols();
    matmul_mac_counter() += uint64_t(m) * k * n2;
    TensorData<T> out({m, n2});
    out.mat().noalias() = a->value.mat() * b->value.mat();
    return detail::make_node<T>("matmul", std::move(out), {a, b}, [a, b, m, k, n2](Node<T>& n) {
        if (a->requires_grad) {
            matmul_mac_counter() += uint64_t(m) * k * n2;
            a->ensure_grad().mat().noalias() += n.grad.mat() * b->value.mat().transpose();
        }
        if (b->requires_grad) {
            matmul_mac_counter() += uint64_t(m) * k * n2;
            b->ensure_grad().mat().noalias() += a->value.mat().transpose() * n.grad.mat();
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a->value.rows() < 0) throw ShapeError("transpose requires rank <= 2");
    TensorData<T> out({a->value.cols(), a->value.rows()});
    out.mat() = a->value.mat().transpose();
    return detail::make_node<T>("transpose", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().mat() += n.grad.mat().transpose();
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    TensorData<T> out = a->value.reshaped(std::move(s));
    // shares the buffer; gradient is likewise a plain reshape
    return detail::make_node<T>("reshape", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.vec();
    });
}

// out[i] = a[src_of[i]]; used for pure index rearrangements (e.g. patch grid
// back to pixel grid) where a matmul against a permutation matrix would waste
// O(n^2) work. Gradients scatter back through the same map.
template <typename T>
Var<T> permute_elems(const Var<T>& a, std::vector<int64_t> src_of, Shape out_shape) {
    int64_t out_n = 1;
    for (int64_t d : out_shape) out_n *= d;
    if ((int64_t)src_of.size() != out_n) throw ShapeError("permute_elems: index count does not match output shape");
    for (int64_t i : src_of)
        if (i < 0 || i >= a->value.numel()) throw ShapeError("permute_elems: index out of range");
    TensorData<T> out(std::move(out_shape));
    for (int64_t i = 0; i < out_n; ++i) out[i] = a->value[src_of[i]];
    return detail::make_node<T>("permute_elems", std::move(out), {a}, [a, src_of = std::move(src_of)](Node<T>& n) {
        if (!a->requires_grad) return;
        auto& g = a->ensure_grad();
        for (int64_t i = 0; i < (int64_t)src_of.size(); ++i) g[src_of[i]] += n.grad[i];
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int64_t start, int64_t len) {
    if (a->value.rows() < 0 || start < 0 || start + len > a->value.cols())
        throw ShapeError("slice_cols out of range");
    const int64_t m = a->value.rows();
    TensorData<T> out({m, len});
    out.mat() = a->value.mat().middleCols(start, len);
    return detail::make_node<T>("slice_cols", std::move(out), {a}, [a, start, len](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().mat().middleCols(start, len) += n.grad.mat();
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    const int64_t m = parts[0]->value.rows();
    int64_t total = 0;
    for (auto& p : parts) {
        if (p->value.rows() != m) throw ShapeError("concat_cols: row mismatch");
        total += p->value.cols();
    }
    TensorData<T> out({m, total});
    int64_t off = 0;
    for (auto& p : parts) {
        out.mat().middleCols(off, p->value.cols()) = p->value.mat();
        off += p->value.cols();
    }
    std::vector<Var<T>> ps(parts);
    return detail::make_node<T>("concat_cols", std::move(out), std::move(ps), [parts](Node<T>& n) {
        int64_t off = 0;
        for (auto& p : parts) {
            if (p->requires_grad) p->ensure_grad().mat() += n.grad.mat().middleCols(off, p->value.cols());
            off += p->value.cols();
        }
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    const int64_t c = parts[0]->value.cols();
    int64_t total = 0;
    for (auto& p : parts) {
        if (p->value.cols() != c) throw ShapeError("concat_rows: col mismatch");
        total += p->value.rows();
    }
    TensorData<T> out({total, c});
    int64_t off = 0;
    for (auto& p : parts) {
        out.mat().middleRows(off, p->value.rows()) = p->value.mat();
        off += p->value.rows();
    }
    std::vector<Var<T>> ps(parts);
    return detail::make_node<T>("concat_rows", std::move(out), std::move(ps), [parts](Node<T>& n) {
        int64_t off = 0;
        for (auto& p : parts) {
            if (p->requires_grad) p->ensure_grad().mat() += n.grad.mat().middleRows(off, p->value.rows());
            off += p->value.rows();
        }
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<int64_t> idx) {
    if (a->value.rows() < 0) throw ShapeError("gather_rows requires rank 2");
    for (int64_t i : idx)
        if (i < 0 || i >= a->value.rows()) throw ShapeError("gather_rows: index out of range");
    TensorData<T> out({(int64_t)idx.size(), a->value.cols()});
    for (size_t r = 0; r < idx.size(); ++r) out.mat().row(r) = a->value.mat().row(idx[r]);
    return detail::make_node<T>("gather_rows", std::move(out), {a}, [a, idx = std::move(idx)](Node<T>& n) {
        if (!a->requires_grad) return;
        auto g = a->ensure_grad().mat();
        for (size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += n.grad.mat().row(r);
    });
}

// out has `rows` rows; row j = src[pos of j in idx] where present, else fill
// (a [1,n] row, typically a learned mask token). Gradients flow to both.
template <typename T>
Var<T> scatter_rows(const Var<T>& src, const std::vector<int64_t>& idx, int64_t rows, const Var<T>& fill) {
    if (src->value.rows() != (int64_t)idx.size()) throw ShapeError("scatter_rows: index count mismatch");
    if (fill->value.numel() != src->value.cols()) throw ShapeError("scatter_rows: fill dim mismatch");
    std::vector<int64_t> src_of(rows, -1);
    for (size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= rows) throw ShapeError("scatter_rows: index out of range");
        if (src_of[idx[r]] != -1) throw ShapeError("scatter_rows: duplicate index");
        src_of[idx[r]] = (int64_t)r;
    }
    TensorData<T> out({rows, src->value.cols()});
    for (int64_t j = 0; j < rows; ++j) {
        if (src_of[j] >= 0)
            out.mat().row(j) = src->value.mat().row(src_of[j]);
        else
            out.mat().row(j) = fill->value.vec().transpose();
    }
    return detail::make_node<T>("scatter_rows", std::move(out), {src, fill},
                                [src, fill, src_of = std::move(src_of)](Node<T>& n) {
                                    for (int64_t j = 0; j < (int64_t)src_of.size(); ++j) {
                                        if (src_of[j] >= 0) {
                                            if (src->requires_grad)
                                                src->ensure_grad().mat().row(src_of[j]) += n.grad.mat().row(j);
                                        } else if (fill->requires_grad) {
                                            fill->ensure_grad().vec() += n.grad.mat().row(j).transpose();
                                        }
                                    }
                                });
}

template <typename T>
Var<T> repeat_rows(const Var<T>& a, int64_t times) {
    if (a->value.rows() != 1) throw ShapeError("repeat_rows expects a single row");
    TensorData<T> out({times, a->value.cols()});
    out.mat() = a->value.mat().replicate(times, 1);
    return detail::make_node<T>("repeat_rows", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec() += n.grad.mat().colwise().sum().transpose();
    });
}

// ---- reductions ----

template <typename T>
Var<T> sum(const Var<T>& a) {
    TensorData<T> out = TensorData<T>::scalar(a->value.vec().sum());
    return detail::make_node<T>("sum", std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec().array() += n.grad[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const T inv = T(1) / T(a->value.numel());
    TensorData<T> out = TensorData<T>::scalar(a->value.vec().sum() * inv);
    return detail::make_node<T>("mean", std::move(out), {a}, [a, inv](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().vec().array() += n.grad[0] * inv;
    });
}

// population variance over all elements
template <typename T>
Var<T> variance(const Var<T>& a) {
    const int64_t n_el = a->value.numel();
    const T inv = T(1) / T(n_el);
    T mu = a->value.vec().sum() * inv;
    T var = (a->value.vec().array() - mu).square().sum() * inv;
    TensorData<T> out = TensorData<T>::scalar(var);
    return detail::make_node<T>("variance", std::move(out), {a}, [a, mu, inv](Node<T>& n) {
        if (a->requires_grad)
            a->ensure_grad().vec().array() += n.grad[0] * T(2) * inv * (a->value.vec().array() - mu);
    });
}

// mean over rows: [m,n] -> [1,n] (GAP over tokens)
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
    if (a->value.rows() < 0) throw ShapeError("mean_rows requires rank 2");
    const T inv = T(1) / T(a->value.rows());
    TensorData<T> out({1, a->value.cols()});
    out.mat() = a->value.mat().colwise().sum() * inv;
    return detail::make_node<T>("mean_rows", std::move(out), {a}, [a, inv](Node<T>& n) {
        if (a->requires_grad) a->ensure_grad().mat().rowwise() += (n.grad.mat().row(0) * inv).eval();
    });
}

// rowwise softmax
template <typename T>
Var<T> softmax(const Var<T>& a) {
    if (a->value.rows() < 0) throw ShapeError("softmax requires rank <= 2");
    TensorData<T> out(a->value.shape());
    auto x = a->value.mat();
    auto s = out.mat();
    for (int64_t r = 0; r < x.rows(); ++r) {
        T mx = x.row(r).maxCoeff();
        s.row(r) = (x.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
    auto saved = out;
    return detail::make_node<T>("softmax", std::move(out), {a}, [a, saved](Node<T>& n) {
        if (!a->requires_grad) return;
        auto s = saved.mat();
        auto g = n.grad.mat();
        auto ga = a->ensure_grad().mat();
        for (int64_t r = 0; r < s.rows(); ++r) {
            T dot = (g.row(r).array() * s.row(r).array()).sum();
            ga.row(r) += ((g.row(r).array() - dot) * s.row(r).array()).matrix();
        }
    });
}

// rowwise layer normalization with learned gamma/beta ([n] each)
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    if (x->value.rows() < 0) throw ShapeError("layer_norm requires rank <= 2");
    const int64_t m = x->value.rows(), n_c = x->value.cols();
    if (gamma->value.numel() != n_c || beta->value.numel() != n_c)
        throw ShapeError("layer_norm: gamma/beta dim mismatch");
    TensorData<T> out({m, n_c});
    TensorData<T> xhat({m, n_c});
    std::vector<T> inv_std(m);
    for (int64_t r = 0; r < m; ++r) {
        auto row = x->value.mat().row(r);
        T mu = row.mean();
        T var = (row.array() - mu).square().mean();
        T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        xhat.mat().row(r) = ((row.array() - mu) * is).matrix();
        out.mat().row(r) =
            (xhat.mat().row(r).array() * gamma->value.vec().transpose().array() + beta->value.vec().transpose().array())
                .matrix();
    }
    return detail::make_node<T>(
        "layer_norm", std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, inv_std = std::move(inv_std), n_c](Node<T>& n) {
            auto g = n.grad.mat();
            if (gamma->requires_grad)
                gamma->ensure_grad().vec() += (g.array() * xhat.mat().array()).colwise().sum().transpose().matrix();
            if (beta->requires_grad) beta->ensure_grad().vec() += g.colwise().sum().transpose();
            if (x->requires_grad) {
                auto gx = x->ensure_grad().mat();
                const T invn = T(1) / T(n_c);
                for (int64_t r = 0; r < g.rows(); ++r) {
                    // dL/dxhat
                    Eigen::Array<T, 1, Eigen::Dynamic> dxhat =
                        g.row(r).array() * gamma->value.vec().transpose().array();
                    T m1 = dxhat.sum() * invn;
                    T m2 = (dxhat * xhat.mat().row(r).array()).sum() * invn;
                    gx.row(r) += (inv_std[r] * (dxhat - m1 - xhat.mat().row(r).array() * m2)).matrix();
                }
            }
        });
}

// ---- backward pass ----

template <typename T>
void backward(const Var<T>& out, T seed = T(1)) {
    if (!out->requires_grad) return;
    // reverse topological order via iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack{{out.get(), 0}};
    visited.insert(out.get());
    while (!stack.empty()) {
        auto& [node, i] = stack.back();
        if (i < node->parents.size()) {
            Node<T>* p = node->parents[i++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    out->ensure_grad();
    out->grad.vec().array() += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backprop && node->grad.defined()) node->backprop(*node);
    }
    for (Node<T>* node : order)
        if (node->grad.defined() && !node->grad.all_finite())
            throw NumericError(std::string("non-finite gradient at op '") + node->op + "'");
}

}  // namespace dorl
