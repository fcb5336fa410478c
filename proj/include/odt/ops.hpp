#pragma once

// Fused model ops on [H, W, C] feature maps:
//   - a_ss_scan: bidirectional input-dependent (selective) state space scan
//     along the depth axis, one graph node over both directions.
//   - row_attention: multi-head scaled dot-product attention over each row.
// Plus the plain sequential selective-scan oracle used to validate the
// production kernel.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "odt/tensor.hpp"

namespace odt {

// exp(x) for x <= 0, branchless polynomial form so the scan kernel can
// vectorize. Relative error ~1e-7, which is below float rounding noise
// accumulated over a scan; the double instantiation stays bit-faithful to
// std::exp for oracle comparisons.
inline float scan_exp_neg(float x) {
    x = x > 0.0f ? 0.0f : (x < -87.0f ? -87.0f : x);
    const float y = x * 1.44269504088896341f;  // x / ln 2
    const float k = std::floor(y + 0.5f);
    const float g = (y - k) * 0.69314718055994531f;
    float p = 1.0f / 720.0f;
    p = p * g + 1.0f / 120.0f;
    p = p * g + 1.0f / 24.0f;
    p = p * g + 1.0f / 6.0f;
    p = p * g + 0.5f;
    p = p * g + 1.0f;
    p = p * g + 1.0f;
    const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(k) + 127) << 23;
    return p * std::bit_cast<float>(bits);
}

template <class S>
inline S scan_exp(S x);
template <>
inline float scan_exp<float>(float x) {
    return scan_exp_neg(x);
}
template <>
inline double scan_exp<double>(double x) {
    return std::exp(x);
}

template <class S>
inline S softplus_stable(S u) {
    if (u > S(25)) return u;
    if (u < S(-25)) {
        // exp underflow would break the strict positivity contract
        const S e = std::exp(u);
        return e > S(0) ? e : std::numeric_limits<S>::min();
    }
    return std::log1p(std::exp(u));
}

// One direction of selective-scan parameters. `a_log` keeps the state matrix
// in log space, A = -exp(a_log), so A stays negative under optimization.
template <class S>
struct ScanDir {
    TensorPtrT<S> a_log;    // [C, N]
    TensorPtrT<S> delta_w;  // [C, C]
    TensorPtrT<S> delta_b;  // [C]
    TensorPtrT<S> b_w;      // [N, C]
    TensorPtrT<S> c_w;      // [N, C]
    TensorPtrT<S> skip;     // [C]
};

namespace detail {

// Per-direction buffers saved for the backward recurrence, scan-time major.
template <class S>
struct ScanSaved {
    std::vector<S> a;      // [C, N], materialized -exp(a_log)
    std::vector<S> delta;  // [T, W, C]
    std::vector<S> bt;     // [T, W, N]
    std::vector<S> ct;     // [T, W, N]
    std::vector<S> abar;   // [T, W, C, N]
    std::vector<S> hst;    // [T, W, C, N]
};

// Runs one scan direction, accumulating into y; fills `saved` when recording.
template <class S>
void scan_direction_forward(const S* x, int T, int W, int C, const ScanDir<S>& p, bool reverse,
                            S* y, ScanSaved<S>* saved) {
    const int N = p.a_log->shape[1];
    std::vector<S> a(static_cast<std::size_t>(C) * N);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(p.a_log->data[i]);

    // transposed projection weights so the per-position loops below are
    // unit-stride axpy accumulations the compiler can vectorize
    std::vector<S> dwt(static_cast<std::size_t>(C) * C);
    for (int c = 0; c < C; ++c)
        for (int c2 = 0; c2 < C; ++c2)
            dwt[static_cast<std::size_t>(c2) * C + c] = p.delta_w->data[static_cast<std::size_t>(c) * C + c2];
    std::vector<S> bwt(static_cast<std::size_t>(C) * N), cwt(static_cast<std::size_t>(C) * N);
    for (int n = 0; n < N; ++n)
        for (int c2 = 0; c2 < C; ++c2) {
            bwt[static_cast<std::size_t>(c2) * N + n] = p.b_w->data[static_cast<std::size_t>(n) * C + c2];
            cwt[static_cast<std::size_t>(c2) * N + n] = p.c_w->data[static_cast<std::size_t>(n) * C + c2];
        }

    const std::size_t pos_n = static_cast<std::size_t>(T) * W;
    std::vector<S> delta(pos_n * C);
    std::vector<S> bt(pos_n * N);
    std::vector<S> ct(pos_n * N);
    for (int t = 0; t < T; ++t) {
        const int hh = reverse ? T - 1 - t : t;
        for (int w = 0; w < W; ++w) {
            const S* row = x + (static_cast<std::size_t>(hh) * W + w) * C;
            const std::size_t pos = static_cast<std::size_t>(t) * W + w;
            S* dl = delta.data() + pos * C;
            for (int c = 0; c < C; ++c) dl[c] = p.delta_b->data[c];
            for (int c2 = 0; c2 < C; ++c2) {
                const S rv = row[c2];
                const S* wr = dwt.data() + static_cast<std::size_t>(c2) * C;
                for (int c = 0; c < C; ++c) dl[c] += rv * wr[c];
            }
            for (int c = 0; c < C; ++c) dl[c] = softplus_stable(dl[c]);
            S* btp = bt.data() + pos * N;
            S* ctp = ct.data() + pos * N;
            for (int n = 0; n < N; ++n) btp[n] = ctp[n] = 0;
            for (int c2 = 0; c2 < C; ++c2) {
                const S rv = row[c2];
                const S* br = bwt.data() + static_cast<std::size_t>(c2) * N;
                const S* cr = cwt.data() + static_cast<std::size_t>(c2) * N;
                for (int n = 0; n < N; ++n) {
                    btp[n] += rv * br[n];
                    ctp[n] += rv * cr[n];
                }
            }
        }
    }

    const std::size_t state_n = static_cast<std::size_t>(W) * C * N;
    std::vector<S> state(state_n, S(0));
    std::vector<S>* abar_out = nullptr;
    std::vector<S>* hst_out = nullptr;
    if (saved) {
        saved->a = a;
        saved->abar.resize(pos_n * C * N);
        saved->hst.resize(pos_n * C * N);
        abar_out = &saved->abar;
        hst_out = &saved->hst;
    }
    for (int t = 0; t < T; ++t) {
        const int hh = reverse ? T - 1 - t : t;
        for (int w = 0; w < W; ++w) {
            const std::size_t pos = static_cast<std::size_t>(t) * W + w;
            const S* dl = delta.data() + pos * C;
            const S* btp = bt.data() + pos * N;
            const S* ctp = ct.data() + pos * N;
            const S* xr = x + (static_cast<std::size_t>(hh) * W + w) * C;
            S* yr = y + (static_cast<std::size_t>(hh) * W + w) * C;
            for (int c = 0; c < C; ++c) {
                const S d = dl[c];
                const S dxv = d * xr[c];
                const S* ar = a.data() + static_cast<std::size_t>(c) * N;
                S* st = state.data() + (static_cast<std::size_t>(w) * C + c) * N;
                S acc = 0;
                if (saved) {
                    S* ab = abar_out->data() + (pos * C + c) * N;
                    S* hs = hst_out->data() + (pos * C + c) * N;
                    for (int n = 0; n < N; ++n) {
                        const S e = scan_exp<S>(d * ar[n]);
                        const S h = e * st[n] + dxv * btp[n];
                        st[n] = h;
                        ab[n] = e;
                        hs[n] = h;
                        acc += ctp[n] * h;
                    }
                } else {
                    for (int n = 0; n < N; ++n) {
                        const S e = scan_exp<S>(d * ar[n]);
                        const S h = e * st[n] + dxv * btp[n];
                        st[n] = h;
                        acc += ctp[n] * h;
                    }
                }
                yr[c] += acc + p.skip->data[c] * xr[c];
            }
        }
    }
    if (saved) {
        saved->delta = std::move(delta);
        saved->bt = std::move(bt);
        saved->ct = std::move(ct);
    }
}

template <class S>
void add_into(TensorPtrT<S>& t, std::size_t idx, S v) {
    t->grad[idx] += v;
}

// Reverse sweep of one direction; writes dx and parameter gradients.
template <class S>
void scan_direction_backward(const S* x, const S* g, int T, int W, int C, const ScanDir<S>& p,
                             bool reverse, const ScanSaved<S>& sv, std::vector<S>* dx) {
    const int N = p.a_log->shape[1];
    const std::size_t pos_n = static_cast<std::size_t>(T) * W;
    std::vector<S> dh_run(static_cast<std::size_t>(W) * C * N, S(0));
    std::vector<S> ddelta(pos_n * C, S(0));
    std::vector<S> dbt(pos_n * N, S(0));
    std::vector<S> dct(pos_n * N, S(0));
    std::vector<S> da(static_cast<std::size_t>(C) * N, S(0));
    const bool want_x = dx != nullptr;
    const bool want_skip = p.skip->requires_grad;

    for (int t = T - 1; t >= 0; --t) {
        const int hh = reverse ? T - 1 - t : t;
        for (int w = 0; w < W; ++w) {
            const std::size_t pos = static_cast<std::size_t>(t) * W + w;
            const std::size_t spatial = (static_cast<std::size_t>(hh) * W + w) * C;
            const S* dl = sv.delta.data() + pos * C;
            const S* btp = sv.bt.data() + pos * N;
            const S* ctp = sv.ct.data() + pos * N;
            S* dbtp = dbt.data() + pos * N;
            S* dctp = dct.data() + pos * N;
            for (int c = 0; c < C; ++c) {
                const S gy = g[spatial + c];
                const S xv = x[spatial + c];
                const S d = dl[c];
                if (want_skip) p.skip->grad[c] += gy * xv;
                if (want_x) (*dx)[spatial + c] += gy * p.skip->data[c];
                S* dh = dh_run.data() + (static_cast<std::size_t>(w) * C + c) * N;
                const S* ab = sv.abar.data() + (pos * C + c) * N;
                const S* hs = sv.hst.data() + (pos * C + c) * N;
                const S* ab_next =
                    t + 1 < T ? sv.abar.data() + (((pos + W) * C) + c) * N : nullptr;
                const S* hs_prev = t > 0 ? sv.hst.data() + (((pos - W) * C) + c) * N : nullptr;
                const S* ar = sv.a.data() + static_cast<std::size_t>(c) * N;
                S ddelta_acc = 0, dx_rec = 0;
                for (int n = 0; n < N; ++n) {
                    S dhv = dh[n];
                    if (ab_next) dhv *= ab_next[n];
                    dhv += gy * ctp[n];
                    dh[n] = dhv;
                    const S h_prev = hs_prev ? hs_prev[n] : S(0);
                    const S dabar = dhv * h_prev;
                    da[static_cast<std::size_t>(c) * N + n] += dabar * d * ab[n];
                    ddelta_acc += dabar * ar[n] * ab[n] + dhv * btp[n] * xv;
                    dbtp[n] += dhv * d * xv;
                    dx_rec += dhv * d * btp[n];
                    dctp[n] += gy * hs[n];
                }
                ddelta[pos * C + c] = ddelta_acc;
                if (want_x) (*dx)[spatial + c] += dx_rec;
            }
        }
    }

    // projection gradients; sigmoid of the pre-softplus value is 1 - exp(-delta)
    const bool want_dw = p.delta_w->requires_grad;
    const bool want_db = p.delta_b->requires_grad;
    const bool want_bw = p.b_w->requires_grad;
    const bool want_cw = p.c_w->requires_grad;
    for (int t = 0; t < T; ++t) {
        const int hh = reverse ? T - 1 - t : t;
        for (int w = 0; w < W; ++w) {
            const std::size_t pos = static_cast<std::size_t>(t) * W + w;
            const std::size_t spatial = (static_cast<std::size_t>(hh) * W + w) * C;
            const S* row = x + spatial;
            const S* dl = sv.delta.data() + pos * C;
            for (int c = 0; c < C; ++c) {
                const S du = ddelta[pos * C + c] * (S(1) - scan_exp<S>(-dl[c]));
                if (du == S(0)) continue;
                if (want_db) p.delta_b->grad[c] += du;
                const S* wr = p.delta_w->data.data() + static_cast<std::size_t>(c) * C;
                S* gw = want_dw ? p.delta_w->grad.data() + static_cast<std::size_t>(c) * C : nullptr;
                for (int c2 = 0; c2 < C; ++c2) {
                    if (gw) gw[c2] += du * row[c2];
                    if (want_x) (*dx)[spatial + c2] += du * wr[c2];
                }
            }
            for (int n = 0; n < N; ++n) {
                const S dbv = dbt[pos * N + n];
                const S dcv = dct[pos * N + n];
                const S* br = p.b_w->data.data() + static_cast<std::size_t>(n) * C;
                const S* cr = p.c_w->data.data() + static_cast<std::size_t>(n) * C;
                S* gb = want_bw ? p.b_w->grad.data() + static_cast<std::size_t>(n) * C : nullptr;
                S* gc = want_cw ? p.c_w->grad.data() + static_cast<std::size_t>(n) * C : nullptr;
                for (int c2 = 0; c2 < C; ++c2) {
                    if (gb) gb[c2] += dbv * row[c2];
                    if (gc) gc[c2] += dcv * row[c2];
                    if (want_x) (*dx)[spatial + c2] += dbv * br[c2] + dcv * cr[c2];
                }
            }
        }
    }
    if (p.a_log->requires_grad)
        for (std::size_t i = 0; i < da.size(); ++i) p.a_log->grad[i] += da[i] * sv.a[i];
}

}  // namespace detail

// Bidirectional selective scan along the depth axis of [H, W, C]: columns are
// scanned independently, top-to-bottom with `fwd` and bottom-to-top with
// `bwd`, outputs summed.
template <class S>
TensorPtrT<S> a_ss_scan(const TensorPtrT<S>& x, const ScanDir<S>& fwd, const ScanDir<S>& bwd) {
    if (x->shape.size() != 3) throw UsageError("a_ss_scan: expects x[H, W, C]");
    const int T = x->shape[0], W = x->shape[1], C = x->shape[2];
    for (const ScanDir<S>* p : {&fwd, &bwd}) {
        if (p->a_log->shape.size() != 2 || p->a_log->shape[0] != C)
            throw UsageError("a_ss_scan: a_log must be [C, N]");
        const int N = p->a_log->shape[1];
        if (p->delta_w->shape != std::vector<int>{C, C} || p->delta_b->shape != std::vector<int>{C} ||
            p->b_w->shape != std::vector<int>{N, C} || p->c_w->shape != std::vector<int>{N, C} ||
            p->skip->shape != std::vector<int>{C})
            throw UsageError("a_ss_scan: parameter shape mismatch");
    }

    std::vector<TensorPtrT<S>> parents = {x,        fwd.a_log, fwd.delta_w, fwd.delta_b, fwd.b_w,
                                          fwd.c_w,  fwd.skip,  bwd.a_log,   bwd.delta_w, bwd.delta_b,
                                          bwd.b_w,  bwd.c_w,   bwd.skip};
    bool record = grad_mode();
    if (record) {
        record = false;
        for (const auto& p : parents) record = record || p->requires_grad;
    }

    auto out = TensorT<S>::zeros(x->shape);
    auto saved_f = record ? std::make_shared<detail::ScanSaved<S>>() : nullptr;
    auto saved_b = record ? std::make_shared<detail::ScanSaved<S>>() : nullptr;
    detail::scan_direction_forward(x->data.data(), T, W, C, fwd, false, out->data.data(),
                                   saved_f.get());
    detail::scan_direction_forward(x->data.data(), T, W, C, bwd, true, out->data.data(),
                                   saved_b.get());
    if (!record) return out;

    attach_node<S>(out, parents, [x, fwd, bwd, T, W, C, saved_f, saved_b](const std::vector<S>& g) {
        for (const ScanDir<S>* p : {&fwd, &bwd})
            for (const auto& t : {p->a_log, p->delta_w, p->delta_b, p->b_w, p->c_w, p->skip})
                if (t->requires_grad) t->ensure_grad();
        std::vector<S> dx;
        std::vector<S>* dxp = nullptr;
        if (x->requires_grad) {
            dx.assign(x->data.size(), S(0));
            dxp = &dx;
        }
        detail::scan_direction_backward(x->data.data(), g.data(), T, W, C, fwd, false, *saved_f, dxp);
        detail::scan_direction_backward(x->data.data(), g.data(), T, W, C, bwd, true, *saved_b, dxp);
        if (dxp) {
            x->ensure_grad();
            for (std::size_t i = 0; i < dx.size(); ++i) x->grad[i] += dx[i];
        }
    });
    return out;
}

// Plain O(T*N) single-sequence selective scan, the reference oracle for
// a_ss_scan. x is [T, C] row-major; returns y with the same shape.
struct SsmSeqParams {
    int channels = 0;
    int state_dim = 0;
    std::vector<double> a;        // [C, N], entries < 0
    std::vector<double> delta_w;  // [C, C]
    std::vector<double> delta_b;  // [C]
    std::vector<double> b_w;      // [N, C]
    std::vector<double> c_w;      // [N, C]
    std::vector<double> skip;     // [C]
};

inline std::vector<double> selective_scan_sequential(const std::vector<double>& x, int T,
                                                     const SsmSeqParams& p) {
    const int C = p.channels, N = p.state_dim;
    if (static_cast<int>(x.size()) != T * C) throw UsageError("selective_scan_sequential: bad length");
    std::vector<double> y(x.size(), 0.0);
    std::vector<double> h(static_cast<std::size_t>(C) * N, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* xr = x.data() + static_cast<std::size_t>(t) * C;
        double* yr = y.data() + static_cast<std::size_t>(t) * C;
        for (int c = 0; c < C; ++c) {
            double u = p.delta_b[c];
            for (int c2 = 0; c2 < C; ++c2) u += p.delta_w[static_cast<std::size_t>(c) * C + c2] * xr[c2];
            const double d = softplus_stable(u);
            double acc = 0.0;
            for (int n = 0; n < N; ++n) {
                double bt = 0.0, ct = 0.0;
                for (int c2 = 0; c2 < C; ++c2) {
                    bt += p.b_w[static_cast<std::size_t>(n) * C + c2] * xr[c2];
                    ct += p.c_w[static_cast<std::size_t>(n) * C + c2] * xr[c2];
                }
                const double abar = std::exp(d * p.a[static_cast<std::size_t>(c) * N + n]);
                double& hn = h[(static_cast<std::size_t>(c)) * N + n];
                hn = abar * hn + d * bt * xr[c];
                acc += ct * hn;
            }
            yr[c] = acc + p.skip[c] * xr[c];
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Multi-head attention over each row (B-line) of [H, W, C] projected inputs.
// No positional encoding; rows are independent.

template <class S>
TensorPtrT<S> row_attention(const TensorPtrT<S>& q, const TensorPtrT<S>& k, const TensorPtrT<S>& v,
                            int heads) {
    check_same_shape(q, k, "row_attention");
    check_same_shape(q, v, "row_attention");
    if (q->shape.size() != 3) throw UsageError("row_attention: expects [H, W, C]");
    const int H = q->shape[0], W = q->shape[1], C = q->shape[2];
    if (heads < 1 || C % heads != 0)
        throw UsageError("row_attention: channels " + std::to_string(C) +
                         " not divisible by heads " + std::to_string(heads));
    const int hd = C / heads;
    const S inv_scale = S(1) / std::sqrt(static_cast<S>(hd));

    auto out = TensorT<S>::zeros(q->shape);
    bool record = grad_mode() && (q->requires_grad || k->requires_grad || v->requires_grad);
    // probabilities saved per (row, head): [H, heads, W, W]
    auto probs = std::make_shared<std::vector<S>>();
    if (record) probs->resize(static_cast<std::size_t>(H) * heads * W * W);
    std::vector<S> scores(static_cast<std::size_t>(W) * W);

    for (int r = 0; r < H; ++r) {
        const std::size_t row_off = static_cast<std::size_t>(r) * W * C;
        for (int h = 0; h < heads; ++h) {
            const int co = h * hd;
            for (int i = 0; i < W; ++i) {
                const S* qi = q->data.data() + row_off + static_cast<std::size_t>(i) * C + co;
                S* srow = scores.data() + static_cast<std::size_t>(i) * W;
                S mx = std::numeric_limits<S>::lowest();
                for (int j = 0; j < W; ++j) {
                    const S* kj = k->data.data() + row_off + static_cast<std::size_t>(j) * C + co;
                    S s = 0;
                    for (int d = 0; d < hd; ++d) s += qi[d] * kj[d];
                    s *= inv_scale;
                    srow[j] = s;
                    mx = std::max(mx, s);
                }
                S z = 0;
                for (int j = 0; j < W; ++j) {
                    srow[j] = std::exp(srow[j] - mx);
                    z += srow[j];
                }
                const S inv = S(1) / z;
                S* orow = out->data.data() + row_off + static_cast<std::size_t>(i) * C + co;
                for (int j = 0; j < W; ++j) {
                    const S pj = srow[j] * inv;
                    srow[j] = pj;
                    const S* vj = v->data.data() + row_off + static_cast<std::size_t>(j) * C + co;
                    for (int d = 0; d < hd; ++d) orow[d] += pj * vj[d];
                }
                if (record) {
                    S* dst = probs->data() +
                             ((static_cast<std::size_t>(r) * heads + h) * W + i) * W;
                    for (int j = 0; j < W; ++j) dst[j] = srow[j];
                }
            }
        }
    }
    if (!record) return out;

    attach_node<S>(out, {q, k, v}, [q, k, v, probs, H, W, C, heads, hd,
                                    inv_scale](const std::vector<S>& g) {
        if (q->requires_grad) q->ensure_grad();
        if (k->requires_grad) k->ensure_grad();
        if (v->requires_grad) v->ensure_grad();
        std::vector<S> dp(static_cast<std::size_t>(W));
        for (int r = 0; r < H; ++r) {
            const std::size_t row_off = static_cast<std::size_t>(r) * W * C;
            for (int h = 0; h < heads; ++h) {
                const int co = h * hd;
                for (int i = 0; i < W; ++i) {
                    const S* gi = g.data() + row_off + static_cast<std::size_t>(i) * C + co;
                    const S* pi = probs->data() +
                                  ((static_cast<std::size_t>(r) * heads + h) * W + i) * W;
                    // dV and dP
                    S dot = 0;
                    for (int j = 0; j < W; ++j) {
                        const S* vj = v->data.data() + row_off + static_cast<std::size_t>(j) * C + co;
                        S acc = 0;
                        for (int d = 0; d < hd; ++d) acc += gi[d] * vj[d];
                        dp[static_cast<std::size_t>(j)] = acc;
                        dot += acc * pi[j];
                        if (v->requires_grad) {
                            S* gv = v->grad.data() + row_off + static_cast<std::size_t>(j) * C + co;
                            for (int d = 0; d < hd; ++d) gv[d] += pi[j] * gi[d];
                        }
                    }
                    // dS = P o (dP - dot), then dQ/dK
                    const S* qi = q->data.data() + row_off + static_cast<std::size_t>(i) * C + co;
                    for (int j = 0; j < W; ++j) {
                        const S ds = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * inv_scale;
                        if (ds == S(0)) continue;
                        const S* kj = k->data.data() + row_off + static_cast<std::size_t>(j) * C + co;
                        if (q->requires_grad) {
                            S* gq = q->grad.data() + row_off + static_cast<std::size_t>(i) * C + co;
                            for (int d = 0; d < hd; ++d) gq[d] += ds * kj[d];
                        }
                        if (k->requires_grad) {
                            S* gk = k->grad.data() + row_off + static_cast<std::size_t>(j) * C + co;
                            for (int d = 0; d < hd; ++d) gk[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
    });
    return out;
}

}  // namespace odt
