#pragma once

// Dense tensor engine with reverse-mode automatic differentiation.
//
// Tensors are n-dimensional row-major arrays templated on the scalar type:
// float for training, double for gradient checking. Every differentiable
// operation records a node (parents + backward closure) onto the output
// tensor when gradient mode is enabled; backward() replays the closures in
// reverse topological order.
//
// Feature maps use the [depth H, width W, channels C] layout, so linear,
// layer_norm and softmax act on the trailing (channel) axis and the 1D
// convolutions/scans walk the leading axes.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "odt/common.hpp"

namespace odt {

template <class S>
class TensorT;

template <class S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;
using TensorD = TensorT<double>;
using TensorPtrD = TensorPtrT<double>;

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling graph recording (inference / oracle evaluations).
struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class S>
class TensorT : public std::enable_shared_from_this<TensorT<S>> {
public:
    using Ptr = TensorPtrT<S>;

    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // same length as data once touched by backward
    bool requires_grad = false;

    // graph node
    std::vector<Ptr> parents;
    std::function<void(const std::vector<S>&)> backward_fn;
    bool consumed = false;

    static Ptr zeros(std::vector<int> shape, bool requires_grad = false) {
        auto t = std::make_shared<TensorT<S>>();
        for (int d : shape)
            if (d <= 0) throw UsageError("tensor extents must be positive, got " + shape_str(shape));
        t->shape = std::move(shape);
        t->data.assign(static_cast<std::size_t>(shape_numel(t->shape)), S(0));
        t->requires_grad = requires_grad;
        return t;
    }

    static Ptr full(std::vector<int> shape, S value, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::fill(t->data.begin(), t->data.end(), value);
        return t;
    }

    static Ptr from_data(std::vector<int> shape, std::vector<S> values, bool requires_grad = false) {
        auto t = std::make_shared<TensorT<S>>();
        t->shape = std::move(shape);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(t->shape))
            throw UsageError("data length does not match shape " + shape_str(t->shape));
        t->data = std::move(values);
        t->requires_grad = requires_grad;
        return t;
    }

    static Ptr scalar(S value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    S item() const {
        if (numel() != 1) throw UsageError("item() requires a scalar tensor");
        return data[0];
    }

    S& at(std::initializer_list<int> idx) {
        if (idx.size() != shape.size()) throw UsageError("index rank mismatch");
        std::int64_t off = 0;
        int axis = 0;
        for (int i : idx) {
            off = off * shape[axis] + i;
            ++axis;
        }
        return data[static_cast<std::size_t>(off)];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }

    Ptr detached_copy() const {
        auto t = std::make_shared<TensorT<S>>();
        t->shape = shape;
        t->data = data;
        return t;
    }
};

// Builds the output node for an op. `fn` receives the output gradient.
template <class S>
void attach_node(const TensorPtrT<S>& out, std::vector<TensorPtrT<S>> parents,
                 std::function<void(const std::vector<S>&)> fn) {
    if (!grad_mode()) return;
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (!any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

// Reverse-mode sweep from a scalar loss. `seed` is the root adjoint
// (1/batch_size when averaging sample losses outside the graph).
template <class S>
void backward(const TensorPtrT<S>& loss, S seed = S(1)) {
    if (loss->numel() != 1) throw UsageError("backward requires a scalar loss");
    if (!loss->requires_grad) throw UsageError("backward on a detached graph");
    if (loss->consumed) throw UsageError("backward already ran for this graph; re-run the forward pass first");

    // iterative post-order DFS over parents
    std::vector<TensorPtrT<S>> order;
    std::unordered_set<TensorT<S>*> seen;
    std::vector<std::pair<TensorPtrT<S>, std::size_t>> stack;
    stack.push_back({loss, 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->consumed) throw UsageError("graph already consumed by a previous backward");
        if (next < node->parents.size()) {
            auto& p = node->parents[next++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = *it;
        if (!node->backward_fn) continue;  // leaves keep accumulating across graphs
        node->consumed = true;
        node->ensure_grad();
        node->backward_fn(node->grad);
        node->backward_fn = nullptr;  // release captured buffers
        node->parents.clear();
    }
}

template <class S>
void check_same_shape(const TensorPtrT<S>& a, const TensorPtrT<S>& b, const char* op) {
    if (a->shape != b->shape)
        throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
}

// ---------------------------------------------------------------------------
// elementwise ops

template <class S>
TensorPtrT<S> add(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    check_same_shape(a, b, "add");
    auto out = TensorT<S>::zeros(a->shape);
    const std::size_t n = a->data.size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    attach_node<S>(out, {a, b}, [a, b](const std::vector<S>& g) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) a->grad[i] += g[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) b->grad[i] += g[i];
        }
    });
    return out;
}

template <class S>
TensorPtrT<S> mul(const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    check_same_shape(a, b, "mul");
    auto out = TensorT<S>::zeros(a->shape);
    const std::size_t n = a->data.size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    attach_node<S>(out, {a, b}, [a, b](const std::vector<S>& g) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) a->grad[i] += g[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) b->grad[i] += g[i] * a->data[i];
        }
    });
    return out;
}

template <class S>
TensorPtrT<S> scale(const TensorPtrT<S>& a, S s) {
    auto out = TensorT<S>::zeros(a->shape);
    for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * s;
    attach_node<S>(out, {a}, [a, s](const std::vector<S>& g) {
        a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) a->grad[i] += g[i] * s;
    });
    return out;
}

template <class S>
TensorPtrT<S> sum(const TensorPtrT<S>& a) {
    auto out = TensorT<S>::zeros({1});
    S acc = S(0);
    for (S v : a->data) acc += v;
    out->data[0] = acc;
    attach_node<S>(out, {a}, [a](const std::vector<S>& g) {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += g[0];
    });
    return out;
}

// Mean squared error over all elements.
template <class S>
TensorPtrT<S> mse_loss(const TensorPtrT<S>& pred, const TensorPtrT<S>& target) {
    check_same_shape(pred, target, "mse_loss");
    auto out = TensorT<S>::zeros({1});
    const std::size_t n = pred->data.size();
    S acc = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        const S d = pred->data[i] - target->data[i];
        acc += d * d;
    }
    out->data[0] = acc / static_cast<S>(n);
    attach_node<S>(out, {pred, target}, [pred, target, n](const std::vector<S>& g) {
        const S c = g[0] * S(2) / static_cast<S>(n);
        if (pred->requires_grad) {
            pred->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                pred->grad[i] += c * (pred->data[i] - target->data[i]);
        }
        if (target->requires_grad) {
            target->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                target->grad[i] -= c * (pred->data[i] - target->data[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// activations

enum class Act { kSilu, kGelu, kSigmoid };

template <class S>
inline S sigmoid_value(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// tanh form of GELU with the usual 0.044715 cubic coefficient.
template <class S>
inline S gelu_value(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S t = std::tanh(c * (x + S(0.044715) * x * x * x));
    return S(0.5) * x * (S(1) + t);
}

template <class S>
inline S gelu_grad_value(S x) {
    const S c = S(0.7978845608028654);
    const S u = c * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(u);
    const S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

template <class S>
TensorPtrT<S> activation(const TensorPtrT<S>& a, Act kind) {
    auto out = TensorT<S>::zeros(a->shape);
    const std::size_t n = a->data.size();
    switch (kind) {
        case Act::kSilu:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * sigmoid_value(a->data[i]);
            break;
        case Act::kGelu:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = gelu_value(a->data[i]);
            break;
        case Act::kSigmoid:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = sigmoid_value(a->data[i]);
            break;
    }
    attach_node<S>(out, {a}, [a, kind](const std::vector<S>& g) {
        a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const S x = a->data[i];
            S d;
            switch (kind) {
                case Act::kSilu: {
                    const S s = sigmoid_value(x);
                    d = s * (S(1) + x * (S(1) - s));
                    break;
                }
                case Act::kGelu:
                    d = gelu_grad_value(x);
                    break;
                default: {
                    const S s = sigmoid_value(x);
                    d = s * (S(1) - s);
                    break;
                }
            }
            a->grad[i] += g[i] * d;
        }
    });
    return out;
}

template <class S>
TensorPtrT<S> silu(const TensorPtrT<S>& a) {
    return activation(a, Act::kSilu);
}
template <class S>
TensorPtrT<S> gelu(const TensorPtrT<S>& a) {
    return activation(a, Act::kGelu);
}

// ---------------------------------------------------------------------------
// softmax over the trailing axis, stabilized by max subtraction

template <class S>
TensorPtrT<S> softmax_lastdim(const TensorPtrT<S>& a) {
    if (a->shape.empty()) throw UsageError("softmax_lastdim: rank-0 tensor");
    const int L = a->shape.back();
    const std::int64_t rows = a->numel() / L;
    auto out = TensorT<S>::zeros(a->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* x = a->data.data() + r * L;
        S* y = out->data.data() + r * L;
        S m = x[0];
        for (int i = 1; i < L; ++i) m = std::max(m, x[i]);
        S z = S(0);
        for (int i = 0; i < L; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        const S inv = S(1) / z;
        for (int i = 0; i < L; ++i) y[i] *= inv;
    }
    attach_node<S>(out, {a}, [a, L, rows, y_saved = out->data](const std::vector<S>& g) {
        a->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* y = y_saved.data() + r * L;
            const S* gy = g.data() + r * L;
            S dot = S(0);
            for (int i = 0; i < L; ++i) dot += gy[i] * y[i];
            S* gx = a->grad.data() + r * L;
            for (int i = 0; i < L; ++i) gx[i] += y[i] * (gy[i] - dot);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear map over the trailing axis: y[..., o] = sum_i x[..., i] w[o,i] + b[o]

template <class S>
TensorPtrT<S> linear(const TensorPtrT<S>& x, const TensorPtrT<S>& w, const TensorPtrT<S>& b) {
    if (x->shape.empty() || w->shape.size() != 2)
        throw UsageError("linear: expects x[..., C_in], w[C_out, C_in]");
    const int cin = x->shape.back();
    const int cout = w->shape[0];
    if (w->shape[1] != cin)
        throw UsageError("linear: C_in mismatch, x has " + std::to_string(cin) + ", w has " +
                         std::to_string(w->shape[1]));
    if (b && (b->shape.size() != 1 || b->shape[0] != cout))
        throw UsageError("linear: bias must have shape [C_out]");
    const std::int64_t rows = x->numel() / cin;

    auto out_shape = x->shape;
    out_shape.back() = cout;
    auto out = TensorT<S>::zeros(out_shape);
    // accumulate over input channels with a transposed weight copy so the
    // inner loop is a unit-stride axpy the compiler can vectorize
    std::vector<S> wt(static_cast<std::size_t>(cin) * cout);
    for (int o = 0; o < cout; ++o)
        for (int i = 0; i < cin; ++i)
            wt[static_cast<std::size_t>(i) * cout + o] = w->data[static_cast<std::size_t>(o) * cin + i];
    for (std::int64_t m = 0; m < rows; ++m) {
        const S* xr = x->data.data() + m * cin;
        S* yr = out->data.data() + m * cout;
        if (b)
            for (int o = 0; o < cout; ++o) yr[o] = b->data[o];
        for (int i = 0; i < cin; ++i) {
            const S xv = xr[i];
            const S* wr = wt.data() + static_cast<std::size_t>(i) * cout;
            for (int o = 0; o < cout; ++o) yr[o] += xv * wr[o];
        }
    }

    std::vector<TensorPtrT<S>> parents = {x, w};
    if (b) parents.push_back(b);
    attach_node<S>(out, parents, [x, w, b, rows, cin, cout](const std::vector<S>& g) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (std::int64_t m = 0; m < rows; ++m) {
                const S* gr = g.data() + m * cout;
                S* gx = x->grad.data() + m * cin;
                for (int o = 0; o < cout; ++o) {
                    const S go = gr[o];
                    const S* wr = w->data.data() + static_cast<std::int64_t>(o) * cin;
                    for (int i = 0; i < cin; ++i) gx[i] += go * wr[i];
                }
            }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (std::int64_t m = 0; m < rows; ++m) {
                const S* gr = g.data() + m * cout;
                const S* xr = x->data.data() + m * cin;
                for (int o = 0; o < cout; ++o) {
                    const S go = gr[o];
                    S* gw = w->grad.data() + static_cast<std::int64_t>(o) * cin;
                    for (int i = 0; i < cin; ++i) gw[i] += go * xr[i];
                }
            }
        }
        if (b && b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t m = 0; m < rows; ++m) {
                const S* gr = g.data() + m * cout;
                for (int o = 0; o < cout; ++o) b->grad[o] += gr[o];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layer norm over the trailing axis (population variance)

template <class S>
TensorPtrT<S> layer_norm(const TensorPtrT<S>& x, const TensorPtrT<S>& gamma,
                         const TensorPtrT<S>& beta, S eps) {
    if (x->shape.empty()) throw UsageError("layer_norm: rank-0 tensor");
    const int C = x->shape.back();
    if (gamma->numel() != C || beta->numel() != C)
        throw UsageError("layer_norm: gamma/beta must have shape [C]");
    const std::int64_t rows = x->numel() / C;

    auto out = TensorT<S>::zeros(x->shape);
    std::vector<S> xhat(x->data.size());
    std::vector<S> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x->data.data() + r * C;
        S mu = S(0);
        for (int i = 0; i < C; ++i) mu += xr[i];
        mu /= static_cast<S>(C);
        S var = S(0);
        for (int i = 0; i < C; ++i) {
            const S d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<S>(C);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        S* xh = xhat.data() + r * C;
        S* yr = out->data.data() + r * C;
        for (int i = 0; i < C; ++i) {
            xh[i] = (xr[i] - mu) * is;
            yr[i] = gamma->data[i] * xh[i] + beta->data[i];
        }
    }

    attach_node<S>(out, {x, gamma, beta},
                   [x, gamma, beta, rows, C, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](const std::vector<S>& g) {
                       for (std::int64_t r = 0; r < rows; ++r) {
                           const S* gy = g.data() + r * C;
                           const S* xh = xhat.data() + r * C;
                           if (gamma->requires_grad) {
                               gamma->ensure_grad();
                               for (int i = 0; i < C; ++i) gamma->grad[i] += gy[i] * xh[i];
                           }
                           if (beta->requires_grad) {
                               beta->ensure_grad();
                               for (int i = 0; i < C; ++i) beta->grad[i] += gy[i];
                           }
                           if (x->requires_grad) {
                               x->ensure_grad();
                               S m1 = S(0), m2 = S(0);
                               for (int i = 0; i < C; ++i) {
                                   const S gi = gy[i] * gamma->data[i];
                                   m1 += gi;
                                   m2 += gi * xh[i];
                               }
                               m1 /= static_cast<S>(C);
                               m2 /= static_cast<S>(C);
                               const S is = inv_std[static_cast<std::size_t>(r)];
                               S* gx = x->grad.data() + r * C;
                               for (int i = 0; i < C; ++i) {
                                   const S gi = gy[i] * gamma->data[i];
                                   gx[i] += (gi - m1 - xh[i] * m2) * is;
                               }
                           }
                       }
                   });
    return out;
}

// ---------------------------------------------------------------------------
// 1D convolution along the depth or width axis of an [H, W, C] feature map.
//
// Cross-correlation with 'same' zero padding; even kernels pad left-heavy
// (pad_left = k/2, pad_right = k/2 - 1). Depthwise kernels have shape
// [C, 1, k]; full kernels [C_out, C_in, k]. No bias term.

enum class ConvAxis { kDepth, kWidth };

template <class S>
TensorPtrT<S> conv1d_axis(const TensorPtrT<S>& x, const TensorPtrT<S>& kernel, ConvAxis axis,
                          bool depthwise) {
    if (x->shape.size() != 3) throw UsageError("conv1d_axis: expects x[H, W, C]");
    if (kernel->shape.size() != 3) throw UsageError("conv1d_axis: expects kernel[C_out, C_in, k]");
    const int H = x->shape[0], W = x->shape[1], C = x->shape[2];
    const int cout = kernel->shape[0], cin = kernel->shape[1], k = kernel->shape[2];
    if (depthwise) {
        if (cout != C || cin != 1)
            throw UsageError("conv1d_axis: depthwise kernel must be [C, 1, k] with C = " +
                             std::to_string(C));
    } else if (cin != C) {
        throw UsageError("conv1d_axis: kernel C_in mismatch");
    }
    const int pad_left = k / 2;
    const int axis_len = axis == ConvAxis::kDepth ? H : W;
    // step between consecutive positions along the conv axis
    const std::int64_t stride = axis == ConvAxis::kDepth ? static_cast<std::int64_t>(W) * C : C;
    const int n_lines = axis == ConvAxis::kDepth ? W : H;
    const std::int64_t line_stride = axis == ConvAxis::kDepth ? C : static_cast<std::int64_t>(W) * C;

    auto out = TensorT<S>::zeros({H, W, depthwise ? C : cout});
    const int co_n = depthwise ? C : cout;
    for (int line = 0; line < n_lines; ++line) {
        const S* xb = x->data.data() + line * line_stride;
        S* yb = out->data.data() + line * line_stride / C * co_n;
        for (int p = 0; p < axis_len; ++p) {
            S* yp = yb + p * (stride / C) * co_n;
            for (int t = 0; t < k; ++t) {
                const int q = p + t - pad_left;
                if (q < 0 || q >= axis_len) continue;
                const S* xq = xb + q * stride;
                if (depthwise) {
                    for (int c = 0; c < C; ++c) yp[c] += kernel->data[c * k + t] * xq[c];
                } else {
                    for (int co = 0; co < cout; ++co) {
                        const S* kr = kernel->data.data() + (static_cast<std::int64_t>(co) * cin) * k + t;
                        S acc = S(0);
                        for (int ci = 0; ci < cin; ++ci) acc += kr[static_cast<std::int64_t>(ci) * k] * xq[ci];
                        yp[co] += acc;
                    }
                }
            }
        }
    }

    attach_node<S>(out, {x, kernel}, [x, kernel, axis, depthwise, H, W, C, cout, cin, k, pad_left,
                                      axis_len, stride, n_lines, line_stride,
                                      co_n](const std::vector<S>& g) {
        if (x->requires_grad) x->ensure_grad();
        if (kernel->requires_grad) kernel->ensure_grad();
        for (int line = 0; line < n_lines; ++line) {
            const S* xb = x->data.data() + line * line_stride;
            S* gxb = x->requires_grad ? x->grad.data() + line * line_stride : nullptr;
            const S* gb = g.data() + line * line_stride / C * co_n;
            for (int p = 0; p < axis_len; ++p) {
                const S* gp = gb + p * (stride / C) * co_n;
                for (int t = 0; t < k; ++t) {
                    const int q = p + t - pad_left;
                    if (q < 0 || q >= axis_len) continue;
                    const S* xq = xb + q * stride;
                    S* gxq = gxb ? gxb + q * stride : nullptr;
                    if (depthwise) {
                        for (int c = 0; c < C; ++c) {
                            if (gxq) gxq[c] += kernel->data[c * k + t] * gp[c];
                            if (kernel->requires_grad) kernel->grad[c * k + t] += gp[c] * xq[c];
                        }
                    } else {
                        for (int co = 0; co < cout; ++co) {
                            const std::int64_t kbase = (static_cast<std::int64_t>(co) * cin) * k + t;
                            const S go = gp[co];
                            for (int ci = 0; ci < cin; ++ci) {
                                if (gxq) gxq[ci] += kernel->data[kbase + static_cast<std::int64_t>(ci) * k] * go;
                                if (kernel->requires_grad)
                                    kernel->grad[kbase + static_cast<std::int64_t>(ci) * k] += go * xq[ci];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// 2D convolution (odd square kernels, 'same' padding) on [H, W, C]

template <class S>
TensorPtrT<S> conv2d(const TensorPtrT<S>& x, const TensorPtrT<S>& kernel, const TensorPtrT<S>& bias,
                     bool depthwise = false) {
    if (x->shape.size() != 3) throw UsageError("conv2d: expects x[H, W, C]");
    if (kernel->shape.size() != 4) throw UsageError("conv2d: expects kernel[C_out, C_in, kh, kw]");
    const int H = x->shape[0], W = x->shape[1], C = x->shape[2];
    const int cout = kernel->shape[0], cin = kernel->shape[1];
    const int kh = kernel->shape[2], kw = kernel->shape[3];
    if (kh % 2 == 0 || kw % 2 == 0) throw UsageError("conv2d: kernel must be odd-sized");
    if (depthwise) {
        if (cout != C || cin != 1) throw UsageError("conv2d: depthwise kernel must be [C, 1, kh, kw]");
    } else if (cin != C) {
        throw UsageError("conv2d: kernel C_in mismatch");
    }
    if (bias && bias->numel() != cout) throw UsageError("conv2d: bias must have shape [C_out]");
    const int ph = kh / 2, pw = kw / 2;

    auto out = TensorT<S>::zeros({H, W, cout});
    // transposed kernel copy [kh*kw*cin][cout] so the inner accumulation is a
    // unit-stride axpy over output channels
    std::vector<S> kt;
    if (!depthwise) {
        kt.resize(static_cast<std::size_t>(kh) * kw * cin * cout);
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci)
                for (int i = 0; i < kh; ++i)
                    for (int j = 0; j < kw; ++j)
                        kt[((static_cast<std::size_t>(i) * kw + j) * cin + ci) * cout + co] =
                            kernel->data[((static_cast<std::size_t>(co) * cin + ci) * kh + i) * kw + j];
    }
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            S* yp = out->data.data() + (static_cast<std::int64_t>(h) * W + w) * cout;
            if (bias)
                for (int co = 0; co < cout; ++co) yp[co] = bias->data[co];
            for (int i = 0; i < kh; ++i) {
                const int hh = h + i - ph;
                if (hh < 0 || hh >= H) continue;
                for (int j = 0; j < kw; ++j) {
                    const int ww = w + j - pw;
                    if (ww < 0 || ww >= W) continue;
                    const S* xp = x->data.data() + (static_cast<std::int64_t>(hh) * W + ww) * C;
                    if (depthwise) {
                        for (int c = 0; c < C; ++c)
                            yp[c] += kernel->data[(static_cast<std::int64_t>(c) * kh + i) * kw + j] * xp[c];
                    } else {
                        const S* kb = kt.data() + (static_cast<std::size_t>(i) * kw + j) * cin * cout;
                        for (int ci = 0; ci < cin; ++ci) {
                            const S xv = xp[ci];
                            const S* kr = kb + static_cast<std::size_t>(ci) * cout;
                            for (int co = 0; co < cout; ++co) yp[co] += xv * kr[co];
                        }
                    }
                }
            }
        }
    }

    std::vector<TensorPtrT<S>> parents = {x, kernel};
    if (bias) parents.push_back(bias);
    attach_node<S>(out, parents, [x, kernel, bias, depthwise, H, W, C, cout, cin, kh, kw, ph,
                                  pw](const std::vector<S>& g) {
        if (x->requires_grad) x->ensure_grad();
        if (kernel->requires_grad) kernel->ensure_grad();
        if (bias && bias->requires_grad) bias->ensure_grad();
        // transposed copies keep the inner loops unit-stride: kt2 holds the
        // kernel as [(i*kw+j)*cout + co][cin] for dX, gwt accumulates dW in the
        // same layout and is scattered back once at the end
        std::vector<S> kt2, gwt;
        const std::size_t taps = static_cast<std::size_t>(kh) * kw * cout * cin;
        if (!depthwise && x->requires_grad) {
            kt2.resize(taps);
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j)
                            kt2[((static_cast<std::size_t>(i) * kw + j) * cout + co) * cin + ci] =
                                kernel->data[((static_cast<std::size_t>(co) * cin + ci) * kh + i) * kw + j];
        }
        if (!depthwise && kernel->requires_grad) gwt.assign(taps, S(0));
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                const S* gp = g.data() + (static_cast<std::int64_t>(h) * W + w) * cout;
                if (bias && bias->requires_grad)
                    for (int co = 0; co < cout; ++co) bias->grad[co] += gp[co];
                for (int i = 0; i < kh; ++i) {
                    const int hh = h + i - ph;
                    if (hh < 0 || hh >= H) continue;
                    for (int j = 0; j < kw; ++j) {
                        const int ww = w + j - pw;
                        if (ww < 0 || ww >= W) continue;
                        const std::int64_t xoff = (static_cast<std::int64_t>(hh) * W + ww) * C;
                        const S* xp = x->data.data() + xoff;
                        S* gxp = x->requires_grad ? x->grad.data() + xoff : nullptr;
                        if (depthwise) {
                            for (int c = 0; c < C; ++c) {
                                const std::int64_t koff = (static_cast<std::int64_t>(c) * kh + i) * kw + j;
                                if (gxp) gxp[c] += kernel->data[koff] * gp[c];
                                if (kernel->requires_grad) kernel->grad[koff] += gp[c] * xp[c];
                            }
                        } else {
                            const std::size_t tap = (static_cast<std::size_t>(i) * kw + j) * cout;
                            if (gxp) {
                                const S* kb = kt2.data() + tap * cin;
                                for (int co = 0; co < cout; ++co) {
                                    const S go = gp[co];
                                    const S* kr = kb + static_cast<std::size_t>(co) * cin;
                                    for (int ci = 0; ci < cin; ++ci) gxp[ci] += go * kr[ci];
                                }
                            }
                            if (!gwt.empty()) {
                                S* gb = gwt.data() + tap * cin;
                                for (int co = 0; co < cout; ++co) {
                                    const S go = gp[co];
                                    S* gr = gb + static_cast<std::size_t>(co) * cin;
                                    for (int ci = 0; ci < cin; ++ci) gr[ci] += go * xp[ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (!gwt.empty())
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j)
                            kernel->grad[((static_cast<std::size_t>(co) * cin + ci) * kh + i) * kw + j] +=
                                gwt[((static_cast<std::size_t>(i) * kw + j) * cout + co) * cin + ci];
    });
    return out;
}

template <class S>
TensorPtrT<S> conv2d(const TensorPtrT<S>& x, const TensorPtrT<S>& kernel, std::nullptr_t,
                     bool depthwise = false) {
    return conv2d(x, kernel, TensorPtrT<S>{}, depthwise);
}

// ---------------------------------------------------------------------------
// axis permutation

template <class S>
TensorPtrT<S> permute(const TensorPtrT<S>& x, const std::vector<int>& axes) {
    const int rank = static_cast<int>(x->shape.size());
    if (static_cast<int>(axes.size()) != rank) throw UsageError("permute: axes rank mismatch");
    std::vector<int> out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = x->shape[axes[i]];

    std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
    for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x->shape[i + 1];
    for (int i = rank - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    auto out = TensorT<S>::zeros(out_shape);
    const std::int64_t n = x->numel();
    std::vector<int> idx(rank, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t src = 0;
        for (int i = 0; i < rank; ++i) src += static_cast<std::int64_t>(idx[i]) * in_strides[axes[i]];
        out->data[lin] = x->data[src];
        for (int i = rank - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }

    attach_node<S>(out, {x}, [x, axes, out_shape, in_strides, rank](const std::vector<S>& g) {
        x->ensure_grad();
        std::vector<int> idx(rank, 0);
        for (std::int64_t lin = 0; lin < static_cast<std::int64_t>(g.size()); ++lin) {
            std::int64_t src = 0;
            for (int i = 0; i < rank; ++i) src += static_cast<std::int64_t>(idx[i]) * in_strides[axes[i]];
            x->grad[src] += g[lin];
            for (int i = rank - 1; i >= 0; --i) {
                if (++idx[i] < out_shape[i]) break;
                idx[i] = 0;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// B-line pixel shuffle: regroups channels into width upsampling.
// [H, W, C*delta] -> [H, W*delta, C] with out[h, w*delta + r, c] = x[h, w, c*delta + r].

template <class S>
TensorPtrT<S> pixel_shuffle_width(const TensorPtrT<S>& x, int delta) {
    if (x->shape.size() != 3) throw UsageError("pixel_shuffle_width: expects x[H, W, C]");
    const int H = x->shape[0], W = x->shape[1], Cd = x->shape[2];
    if (delta < 1 || Cd % delta != 0)
        throw UsageError("pixel_shuffle_width: channel count " + std::to_string(Cd) +
                         " not divisible by delta " + std::to_string(delta));
    const int C = Cd / delta;
    auto out = TensorT<S>::zeros({H, W * delta, C});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            for (int c = 0; c < C; ++c)
                for (int r = 0; r < delta; ++r)
                    out->data[(static_cast<std::int64_t>(h) * W * delta + w * delta + r) * C + c] =
                        x->data[(static_cast<std::int64_t>(h) * W + w) * Cd + c * delta + r];

    attach_node<S>(out, {x}, [x, H, W, C, Cd, delta](const std::vector<S>& g) {
        x->ensure_grad();
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                for (int c = 0; c < C; ++c)
                    for (int r = 0; r < delta; ++r)
                        x->grad[(static_cast<std::int64_t>(h) * W + w) * Cd + c * delta + r] +=
                            g[(static_cast<std::int64_t>(h) * W * delta + w * delta + r) * C + c];
    });
    return out;
}

// Exact inverse of pixel_shuffle_width.
template <class S>
TensorPtrT<S> pixel_unshuffle_width(const TensorPtrT<S>& x, int delta) {
    if (x->shape.size() != 3) throw UsageError("pixel_unshuffle_width: expects x[H, W, C]");
    const int H = x->shape[0], Wd = x->shape[1], C = x->shape[2];
    if (delta < 1 || Wd % delta != 0)
        throw UsageError("pixel_unshuffle_width: width not divisible by delta");
    const int W = Wd / delta;
    auto out = TensorT<S>::zeros({H, W, C * delta});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            for (int c = 0; c < C; ++c)
                for (int r = 0; r < delta; ++r)
                    out->data[(static_cast<std::int64_t>(h) * W + w) * C * delta + c * delta + r] =
                        x->data[(static_cast<std::int64_t>(h) * Wd + w * delta + r) * C + c];

    attach_node<S>(out, {x}, [x, H, W, C, Wd, delta](const std::vector<S>& g) {
        x->ensure_grad();
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                for (int c = 0; c < C; ++c)
                    for (int r = 0; r < delta; ++r)
                        x->grad[(static_cast<std::int64_t>(h) * Wd + w * delta + r) * C + c] +=
                            g[(static_cast<std::int64_t>(h) * W + w) * C * delta + c * delta + r];
    });
    return out;
}

}  // namespace odt
