#pragma once

#include <Eigen/Core>

#include "bvfi/tensor.hpp"

namespace bvfi {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    check(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> v(a.numel());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i];
    Tensor<T> out = Tensor<T>::op(a.shape(), std::move(v), {a.node(), b.node()});
    if (out.recording()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        out.set_backward([an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> v(a.numel());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] - pb[i];
    Tensor<T> out = Tensor<T>::op(a.shape(), std::move(v), {a.node(), b.node()});
    if (out.recording()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        out.set_backward([an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> v(a.numel());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * pb[i];
    Tensor<T> out = Tensor<T>::op(a.shape(), std::move(v), {a.node(), b.node()});
    if (out.recording()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        out.set_backward([an, bn, on] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> v(a.numel());
    const T* pa = a.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * s;
    Tensor<T> out = Tensor<T>::op(a.shape(), std::move(v), {a.node()});
    if (out.recording()) {
        auto an = a.node();
        auto on = out.node();
        out.set_backward([an, on, s] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> v(a.numel());
    const T* pa = a.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + s;
    Tensor<T> out = Tensor<T>::op(a.shape(), std::move(v), {a.node()});
    if (out.recording()) {
        auto an = a.node();
        auto on = out.node();
        out.set_backward([an, on] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = px[i] > T(0) ? px[i] : T(0);
    Tensor<T> out = Tensor<T>::op(x.shape(), std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on] {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                if (xn->value[i] > T(0)) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-px[i]));
    Tensor<T> out = Tensor<T>::op(x.shape(), std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on] {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                T s = on->value[i];
                xn->grad[i] += on->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(hi, std::max(lo, px[i]));
    Tensor<T> out = Tensor<T>::op(x.shape(), std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, lo, hi] {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                if (xn->value[i] >= lo && xn->value[i] <= hi) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::op({1}, {acc}, {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on] {
            xn->ensure_grad();
            T g = on->grad[0];
            for (auto& gi : xn->grad) gi += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    T inv = T(1) / T(x.numel());
    Tensor<T> out = Tensor<T>::op({1}, {acc * inv}, {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, inv] {
            xn->ensure_grad();
            T g = on->grad[0] * inv;
            for (auto& gi : xn->grad) gi += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
    Tensor<T> out = Tensor<T>::op(std::move(shape), x.data(), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on] {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    check(!xs.empty(), "concat: empty input list");
    const Shape& s0 = xs[0].shape();
    check(axis >= 0 && axis < (int)s0.size(), "concat: axis out of range");
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (int i = axis + 1; i < (int)s0.size(); ++i) inner *= s0[i];
    int axis_total = 0;
    for (const auto& x : xs) {
        check(x.ndim() == (int)s0.size(), "concat: rank mismatch");
        for (int i = 0; i < (int)s0.size(); ++i)
            if (i != axis) check(x.dim(i) == s0[i], "concat: shape mismatch off the concat axis");
        axis_total += x.dim(axis);
    }
    Shape os = s0;
    os[axis] = axis_total;
    std::vector<T> v((size_t)(outer * axis_total * inner));
    std::vector<typename Tensor<T>::NodePtr> parents;
    long long off = 0;
    for (const auto& x : xs) {
        long long ax = x.dim(axis);
        const T* px = x.ptr();
        for (long long o = 0; o < outer; ++o)
            std::copy(px + o * ax * inner, px + (o + 1) * ax * inner,
                      v.begin() + (o * axis_total + off) * inner);
        off += ax;
        parents.push_back(x.node());
    }
    Tensor<T> out = Tensor<T>::op(std::move(os), std::move(v), parents);
    if (out.recording()) {
        auto on = out.node();
        std::vector<typename Tensor<T>::NodePtr> ps = parents;
        std::vector<long long> axdims;
        for (const auto& x : xs) axdims.push_back(x.dim(axis));
        out.set_backward([on, ps, axdims, outer, inner, axis_total] {
            long long off = 0;
            for (size_t k = 0; k < ps.size(); ++k) {
                long long ax = axdims[k];
                if (ps[k]->requires_grad) {
                    ps[k]->ensure_grad();
                    for (long long o = 0; o < outer; ++o) {
                        const T* g = on->grad.data() + (o * axis_total + off) * inner;
                        T* dst = ps[k]->grad.data() + o * ax * inner;
                        for (long long i = 0; i < ax * inner; ++i) dst[i] += g[i];
                    }
                }
                off += ax;
            }
        });
    }
    return out;
}

/// Zero-pads the bottom/right of a BCHW tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int pad_bottom, int pad_right) {
    check(x.ndim() == 4, "pad2d: expected BCHW");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int OH = H + pad_bottom, OW = W + pad_right;
    std::vector<T> v((size_t)B * C * OH * OW, T(0));
    const T* px = x.ptr();
    for (long long bc = 0; bc < (long long)B * C; ++bc)
        for (int y = 0; y < H; ++y)
            std::copy(px + (bc * H + y) * W, px + (bc * H + y + 1) * W, v.begin() + (bc * OH + y) * OW);
    Tensor<T> out = Tensor<T>::op({B, C, OH, OW}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, B, C, H, W, OH, OW] {
            xn->ensure_grad();
            for (long long bc = 0; bc < (long long)B * C; ++bc)
                for (int y = 0; y < H; ++y) {
                    const T* g = on->grad.data() + (bc * OH + y) * OW;
                    T* dst = xn->grad.data() + (bc * H + y) * W;
                    for (int xcol = 0; xcol < W; ++xcol) dst[xcol] += g[xcol];
                }
        });
    }
    return out;
}

/// Keeps the top-left H×W region of a BCHW tensor.
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int H, int W) {
    check(x.ndim() == 4, "crop2d: expected BCHW");
    int B = x.dim(0), C = x.dim(1), IH = x.dim(2), IW = x.dim(3);
    check(H <= IH && W <= IW, "crop2d: crop larger than input");
    std::vector<T> v((size_t)B * C * H * W);
    const T* px = x.ptr();
    for (long long bc = 0; bc < (long long)B * C; ++bc)
        for (int y = 0; y < H; ++y)
            std::copy(px + (bc * IH + y) * IW, px + (bc * IH + y) * IW + W, v.begin() + (bc * H + y) * W);
    Tensor<T> out = Tensor<T>::op({B, C, H, W}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, B, C, H, W, IH, IW] {
            xn->ensure_grad();
            for (long long bc = 0; bc < (long long)B * C; ++bc)
                for (int y = 0; y < H; ++y) {
                    const T* g = on->grad.data() + (bc * H + y) * W;
                    T* dst = xn->grad.data() + (bc * IH + y) * IW;
                    for (int xcol = 0; xcol < W; ++xcol) dst[xcol] += g[xcol];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    check(axis >= 0 && axis < x.ndim(), "softmax: axis out of range");
    long long outer = 1, inner = 1;
    int n = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (long long o = 0; o < outer; ++o)
        for (long long in = 0; in < inner; ++in) {
            const T* row = px + o * n * inner + in;
            T* orow = v.data() + o * n * inner + in;
            T m = row[0];
            for (int i = 1; i < n; ++i) m = std::max(m, row[i * inner]);
            T z = 0;
            for (int i = 0; i < n; ++i) {
                T e = std::exp(row[i * inner] - m);
                orow[i * inner] = e;
                z += e;
            }
            T iz = T(1) / z;
            for (int i = 0; i < n; ++i) orow[i * inner] *= iz;
        }
    Tensor<T> out = Tensor<T>::op(x.shape(), std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, outer, inner, n] {
            xn->ensure_grad();
            for (long long o = 0; o < outer; ++o)
                for (long long in = 0; in < inner; ++in) {
                    const T* y = on->value.data() + o * n * inner + in;
                    const T* gy = on->grad.data() + o * n * inner + in;
                    T* gx = xn->grad.data() + o * n * inner + in;
                    T dot = 0;
                    for (int i = 0; i < n; ++i) dot += gy[i * inner] * y[i * inner];
                    for (int i = 0; i < n; ++i) gx[i * inner] += y[i * inner] * (gy[i * inner] - dot);
                }
        });
    }
    return out;
}

/// LayerNorm over the channel axis (axis 1) with per-channel gain/bias.
/// Accepts BCHW (normalizes each spatial position) or NC tensors.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    check(x.ndim() == 4 || x.ndim() == 2, "layernorm: expected BCHW or NC");
    int B = x.dim(0), C = x.dim(1);
    long long inner = x.ndim() == 4 ? (long long)x.dim(2) * x.dim(3) : 1;
    check(gain.numel() == C && bias.numel() == C, "layernorm: gain/bias must have C entries");
    std::vector<T> v(x.numel());
    std::vector<T> mu_s((size_t)B * inner), is_s((size_t)B * inner);  // saved stats
    const T* px = x.ptr();
    const T* pg = gain.ptr();
    const T* pb = bias.ptr();
    for (int b = 0; b < B; ++b)
        for (long long p = 0; p < inner; ++p) {
            const T* col = px + ((long long)b * C) * inner + p;
            T mu = 0;
            for (int c = 0; c < C; ++c) mu += col[c * inner];
            mu /= T(C);
            T var = 0;
            for (int c = 0; c < C; ++c) {
                T d = col[c * inner] - mu;
                var += d * d;
            }
            var /= T(C);
            T istd = T(1) / std::sqrt(var + eps);
            mu_s[b * inner + p] = mu;
            is_s[b * inner + p] = istd;
            T* ocol = v.data() + ((long long)b * C) * inner + p;
            for (int c = 0; c < C; ++c) ocol[c * inner] = (col[c * inner] - mu) * istd * pg[c] + pb[c];
        }
    Tensor<T> out = Tensor<T>::op(x.shape(), std::move(v), {x.node(), gain.node(), bias.node()});
    if (out.recording()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        auto mu = std::make_shared<std::vector<T>>(std::move(mu_s));
        auto istd = std::make_shared<std::vector<T>>(std::move(is_s));
        out.set_backward([xn, gn, bn, on, mu, istd, B, C, inner] {
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (long long p = 0; p < inner; ++p) {
                    const T* col = xn->value.data() + ((long long)b * C) * inner + p;
                    const T* go = on->grad.data() + ((long long)b * C) * inner + p;
                    T m = (*mu)[b * inner + p], is = (*istd)[b * inner + p];
                    if (gn->requires_grad || bn->requires_grad) {
                        for (int c = 0; c < C; ++c) {
                            T xhat = (col[c * inner] - m) * is;
                            if (gn->requires_grad) gn->grad[c] += go[c * inner] * xhat;
                            if (bn->requires_grad) bn->grad[c] += go[c * inner];
                        }
                    }
                    if (xn->requires_grad) {
                        // dx = (g/σ̂)·(dXhat − mean(dXhat) − xhat·mean(dXhat∘xhat))
                        T mean_dxhat = 0, mean_dxhat_xhat = 0;
                        for (int c = 0; c < C; ++c) {
                            T dxhat = go[c * inner] * gn->value[c];
                            T xhat = (col[c * inner] - m) * is;
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= T(C);
                        mean_dxhat_xhat /= T(C);
                        T* gx = xn->grad.data() + ((long long)b * C) * inner + p;
                        for (int c = 0; c < C; ++c) {
                            T dxhat = go[c * inner] * gn->value[c];
                            T xhat = (col[c * inner] - m) * is;
                            gx[c * inner] += is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// x: (N, I), w: (O, I), b: (O) or undefined. Returns (N, O).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check(x.ndim() == 2 && w.ndim() == 2, "linear: expected 2-D input and weight");
    int N = x.dim(0), I = x.dim(1), O = w.dim(0);
    check(w.dim(1) == I, "linear: weight in-features " + std::to_string(w.dim(1)) + " != input features " + std::to_string(I));
    std::vector<T> v((size_t)N * O);
    {
        ConstMatMap<T> X(x.ptr(), N, I), W(w.ptr(), O, I);
        MatMap<T> Y(v.data(), N, O);
        Y.noalias() = X * W.transpose();
        if (b.defined()) {
            check(b.numel() == O, "linear: bias size mismatch");
            ConstMatMap<T> Bv(b.ptr(), 1, O);
            Y.rowwise() += Bv.row(0);
        }
    }
    std::vector<typename Tensor<T>::NodePtr> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    Tensor<T> out = Tensor<T>::op({N, O}, std::move(v), parents);
    if (out.recording()) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = b.defined() ? b.node() : nullptr;
        out.set_backward([xn, wn, bn, on, N, I, O] {
            ConstMatMap<T> G(on->grad.data(), N, O);
            if (xn->requires_grad) {
                xn->ensure_grad();
                MatMap<T> GX(xn->grad.data(), N, I);
                ConstMatMap<T> W(wn->value.data(), O, I);
                GX.noalias() += G * W;
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                MatMap<T> GW(wn->grad.data(), O, I);
                ConstMatMap<T> X(xn->value.data(), N, I);
                GW.noalias() += G.transpose() * X;
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) bn->grad[o] += on->grad[(size_t)n * O + o];
            }
        });
    }
    return out;
}

namespace detail {

/// Scatters col rows (C·K·K, OH·OW) back into a zero-padded image gradient.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int K, int stride, int pad, int OH, int OW, T* img) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj) {
                const T* row = col + (((size_t)c * K + ki) * K + kj) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kj;
                        if (ix < 0 || ix >= W) continue;
                        img[((size_t)c * H + iy) * W + ix] += row[(size_t)oy * OW + ox];
                    }
                }
            }
}

template <typename T>
void im2col(const T* img, int C, int H, int W, int K, int stride, int pad, int OH, int OW, T* col) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < K; ++ki)
            for (int kj = 0; kj < K; ++kj) {
                T* row = col + (((size_t)c * K + ki) * K + kj) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) {
                        std::fill(row + (size_t)oy * OW, row + (size_t)(oy + 1) * OW, T(0));
                        continue;
                    }
                    const T* src = img + ((size_t)c * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kj;
                        row[(size_t)oy * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
}

}  // namespace detail

/// Cross-correlation of BCHW input with OIKK weight.
/// Output spatial dims: floor((H + 2·pad − K)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1, int pad = 0) {
    check(x.ndim() == 4, "conv2d: input must be BCHW, got " + shape_str(x.shape()));
    check(w.ndim() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be OIKK with square kernel");
    check(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and padding >= 0");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int O = w.dim(0), K = w.dim(2);
    check(w.dim(1) == C, "conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " + std::to_string(C));
    int OH = (H + 2 * pad - K) / stride + 1;
    int OW = (W + 2 * pad - K) / stride + 1;
    check(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");
    if (b.defined()) check(b.numel() == O, "conv2d: bias size mismatch");

    const bool pointwise = (K == 1 && stride == 1 && pad == 0);
    std::vector<T> v((size_t)B * O * OH * OW);
    std::vector<T> col;
    if (!pointwise) col.resize((size_t)C * K * K * OH * OW);
    ConstMatMap<T> Wm(w.ptr(), O, (long long)C * K * K);
    for (int bi = 0; bi < B; ++bi) {
        const T* img = x.ptr() + (size_t)bi * C * H * W;
        MatMap<T> Y(v.data() + (size_t)bi * O * OH * OW, O, (long long)OH * OW);
        if (pointwise) {
            ConstMatMap<T> Xm(img, C, (long long)H * W);
            Y.noalias() = Wm * Xm;
        } else {
            detail::im2col(img, C, H, W, K, stride, pad, OH, OW, col.data());
            ConstMatMap<T> Cm(col.data(), (long long)C * K * K, (long long)OH * OW);
            Y.noalias() = Wm * Cm;
        }
        if (b.defined()) {
            for (int o = 0; o < O; ++o) {
                T bo = b.ptr()[o];
                T* row = v.data() + ((size_t)bi * O + o) * OH * OW;
                for (long long i = 0; i < (long long)OH * OW; ++i) row[i] += bo;
            }
        }
    }
    std::vector<typename Tensor<T>::NodePtr> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    Tensor<T> out = Tensor<T>::op({B, O, OH, OW}, std::move(v), parents);
    if (out.recording()) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        auto bn = b.defined() ? b.node() : nullptr;
        out.set_backward([xn, wn, bn, on, B, C, H, W, O, K, OH, OW, stride, pad, pointwise] {
            ConstMatMap<T> Wm(wn->value.data(), O, (long long)C * K * K);
            std::vector<T> col, dcol;
            if (!pointwise) {
                if (xn->requires_grad) dcol.resize((size_t)C * K * K * OH * OW);
                if (wn->requires_grad) col.resize((size_t)C * K * K * OH * OW);
            }
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn && bn->requires_grad) bn->ensure_grad();
            for (int bi = 0; bi < B; ++bi) {
                ConstMatMap<T> G(on->grad.data() + (size_t)bi * O * OH * OW, O, (long long)OH * OW);
                if (bn && bn->requires_grad)
                    for (int o = 0; o < O; ++o) bn->grad[o] += G.row(o).sum();
                if (pointwise) {
                    if (wn->requires_grad) {
                        ConstMatMap<T> Xm(xn->value.data() + (size_t)bi * C * H * W, C, (long long)H * W);
                        MatMap<T> GW(wn->grad.data(), O, C);
                        GW.noalias() += G * Xm.transpose();
                    }
                    if (xn->requires_grad) {
                        MatMap<T> GX(xn->grad.data() + (size_t)bi * C * H * W, C, (long long)H * W);
                        GX.noalias() += Wm.transpose() * G;
                    }
                } else {
                    if (wn->requires_grad) {
                        detail::im2col(xn->value.data() + (size_t)bi * C * H * W, C, H, W, K, stride, pad, OH, OW,
                                       col.data());
                        ConstMatMap<T> Cm(col.data(), (long long)C * K * K, (long long)OH * OW);
                        MatMap<T> GW(wn->grad.data(), O, (long long)C * K * K);
                        GW.noalias() += G * Cm.transpose();
                    }
                    if (xn->requires_grad) {
                        MatMap<T> Dc(dcol.data(), (long long)C * K * K, (long long)OH * OW);
                        Dc.noalias() = Wm.transpose() * G;
                        detail::col2im_add(dcol.data(), C, H, W, K, stride, pad, OH, OW,
                                           xn->grad.data() + (size_t)bi * C * H * W);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling and resizing
// ---------------------------------------------------------------------------

namespace detail {

/// 4-neighbor bilinear read with zero contribution from out-of-bounds
/// neighbors. Also emits the sample's derivative w.r.t. y and x.
template <typename T>
struct BilinearTap {
    int y0, x0;
    T wy, wx;       // fractional parts
    bool in00, in01, in10, in11;
    void locate(T y, T x, int H, int W) {
        y0 = (int)std::floor(y);
        x0 = (int)std::floor(x);
        wy = y - T(y0);
        wx = x - T(x0);
        in00 = y0 >= 0 && y0 < H && x0 >= 0 && x0 < W;
        in01 = y0 >= 0 && y0 < H && x0 + 1 >= 0 && x0 + 1 < W;
        in10 = y0 + 1 >= 0 && y0 + 1 < H && x0 >= 0 && x0 < W;
        in11 = y0 + 1 >= 0 && y0 + 1 < H && x0 + 1 >= 0 && x0 + 1 < W;
    }
    bool any() const { return in00 || in01 || in10 || in11; }
    T read(const T* plane, int W) const {
        T v00 = in00 ? plane[y0 * W + x0] : T(0);
        T v01 = in01 ? plane[y0 * W + x0 + 1] : T(0);
        T v10 = in10 ? plane[(y0 + 1) * W + x0] : T(0);
        T v11 = in11 ? plane[(y0 + 1) * W + x0 + 1] : T(0);
        return (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) + wy * ((T(1) - wx) * v10 + wx * v11);
    }
    void grad_coord(const T* plane, int W, T& dy, T& dx) const {
        T v00 = in00 ? plane[y0 * W + x0] : T(0);
        T v01 = in01 ? plane[y0 * W + x0 + 1] : T(0);
        T v10 = in10 ? plane[(y0 + 1) * W + x0] : T(0);
        T v11 = in11 ? plane[(y0 + 1) * W + x0 + 1] : T(0);
        dy = (T(1) - wx) * (v10 - v00) + wx * (v11 - v01);
        dx = (T(1) - wy) * (v01 - v00) + wy * (v11 - v10);
    }
    void scatter(T g, T* plane, int W) const {
        if (in00) plane[y0 * W + x0] += g * (T(1) - wy) * (T(1) - wx);
        if (in01) plane[y0 * W + x0 + 1] += g * (T(1) - wy) * wx;
        if (in10) plane[(y0 + 1) * W + x0] += g * wy * (T(1) - wx);
        if (in11) plane[(y0 + 1) * W + x0 + 1] += g * wy * wx;
    }
};

}  // namespace detail

/// Samples input (BCHW) at absolute pixel coordinates. coords is B×2×H×W
/// with channel 0 the row (y) coordinate and channel 1 the column (x).
/// Out-of-bounds neighbors contribute zero.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& x, const Tensor<T>& coords) {
    check(x.ndim() == 4 && coords.ndim() == 4, "grid_sample: expected BCHW tensors");
    check(coords.dim(1) == 2, "grid_sample: coords must have 2 channels (y, x)");
    check(coords.dim(0) == x.dim(0), "grid_sample: batch mismatch");
    coords.assert_finite("grid_sample coordinates");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int OH = coords.dim(2), OW = coords.dim(3);
    std::vector<T> v((size_t)B * C * OH * OW);
    const T* pc = coords.ptr();
    for (int b = 0; b < B; ++b) {
        const T* cy = pc + ((size_t)b * 2) * OH * OW;
        const T* cx = cy + (size_t)OH * OW;
        for (long long p = 0; p < (long long)OH * OW; ++p) {
            detail::BilinearTap<T> tap;
            tap.locate(cy[p], cx[p], H, W);
            for (int c = 0; c < C; ++c) {
                const T* plane = x.ptr() + ((size_t)b * C + c) * H * W;
                v[((size_t)b * C + c) * OH * OW + p] = tap.any() ? tap.read(plane, W) : T(0);
            }
        }
    }
    Tensor<T> out = Tensor<T>::op({B, C, OH, OW}, std::move(v), {x.node(), coords.node()});
    if (out.recording()) {
        auto xn = x.node(), cn = coords.node(), on = out.node();
        out.set_backward([xn, cn, on, B, C, H, W, OH, OW] {
            if (xn->requires_grad) xn->ensure_grad();
            if (cn->requires_grad) cn->ensure_grad();
            for (int b = 0; b < B; ++b) {
                const T* cy = cn->value.data() + ((size_t)b * 2) * OH * OW;
                const T* cx = cy + (size_t)OH * OW;
                T* gy = cn->requires_grad ? cn->grad.data() + ((size_t)b * 2) * OH * OW : nullptr;
                T* gx = gy ? gy + (size_t)OH * OW : nullptr;
                for (long long p = 0; p < (long long)OH * OW; ++p) {
                    detail::BilinearTap<T> tap;
                    tap.locate(cy[p], cx[p], H, W);
                    if (!tap.any()) continue;
                    for (int c = 0; c < C; ++c) {
                        T g = on->grad[((size_t)b * C + c) * OH * OW + p];
                        if (g == T(0)) continue;
                        const T* plane = xn->value.data() + ((size_t)b * C + c) * H * W;
                        if (cn->requires_grad) {
                            T dy, dx;
                            tap.grad_coord(plane, W, dy, dx);
                            gy[p] += g * dy;
                            gx[p] += g * dx;
                        }
                        if (xn->requires_grad)
                            tap.scatter(g, xn->grad.data() + ((size_t)b * C + c) * H * W, W);
                    }
                }
            }
        });
    }
    return out;
}

/// ×2 bilinear upsampling (align_corners=false, edge-clamped neighbors).
template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
    check(x.ndim() == 4, "bilinear_upsample2x: expected BCHW");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int OH = H * 2, OW = W * 2;
    // Precompute the 1-D taps once; they repeat every output row/col.
    std::vector<int> y0(OH), x0(OW);
    std::vector<T> fy(OH), fx(OW);
    auto taps = [](int o, int n, int& i0, T& f) {
        T pos = (T(o) + T(0.5)) / T(2) - T(0.5);
        T lo = std::floor(pos);
        f = pos - lo;
        i0 = (int)lo;
        if (i0 < 0) { i0 = 0; f = 0; }
        if (i0 >= n - 1) { i0 = n - 1; f = 0; }
    };
    for (int o = 0; o < OH; ++o) taps(o, H, y0[o], fy[o]);
    for (int o = 0; o < OW; ++o) taps(o, W, x0[o], fx[o]);
    std::vector<T> v((size_t)B * C * OH * OW);
    for (long long bc = 0; bc < (long long)B * C; ++bc) {
        const T* plane = x.ptr() + bc * H * W;
        T* oplane = v.data() + bc * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            int iy = y0[oy], iy1 = std::min(iy + 1, H - 1);
            T a = fy[oy];
            for (int ox = 0; ox < OW; ++ox) {
                int ix = x0[ox], ix1 = std::min(ix + 1, W - 1);
                T bfr = fx[ox];
                T top = (T(1) - bfr) * plane[iy * W + ix] + bfr * plane[iy * W + ix1];
                T bot = (T(1) - bfr) * plane[iy1 * W + ix] + bfr * plane[iy1 * W + ix1];
                oplane[(size_t)oy * OW + ox] = (T(1) - a) * top + a * bot;
            }
        }
    }
    Tensor<T> out = Tensor<T>::op({B, C, OH, OW}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        auto sy0 = std::make_shared<std::vector<int>>(std::move(y0));
        auto sx0 = std::make_shared<std::vector<int>>(std::move(x0));
        auto sfy = std::make_shared<std::vector<T>>(std::move(fy));
        auto sfx = std::make_shared<std::vector<T>>(std::move(fx));
        out.set_backward([xn, on, sy0, sx0, sfy, sfx, B, C, H, W, OH, OW] {
            xn->ensure_grad();
            for (long long bc = 0; bc < (long long)B * C; ++bc) {
                T* gplane = xn->grad.data() + bc * H * W;
                const T* go = on->grad.data() + bc * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = (*sy0)[oy], iy1 = std::min(iy + 1, H - 1);
                    T a = (*sfy)[oy];
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = (*sx0)[ox], ix1 = std::min(ix + 1, W - 1);
                        T bfr = (*sfx)[ox];
                        T g = go[(size_t)oy * OW + ox];
                        gplane[iy * W + ix] += g * (T(1) - a) * (T(1) - bfr);
                        gplane[iy * W + ix1] += g * (T(1) - a) * bfr;
                        gplane[iy1 * W + ix] += g * a * (T(1) - bfr);
                        gplane[iy1 * W + ix1] += g * a * bfr;
                    }
                }
            }
        });
    }
    return out;
}

/// ×2 bilinear downsampling; at exactly half scale this is the 2×2 box mean.
template <typename T>
Tensor<T> bilinear_downsample2x(const Tensor<T>& x) {
    check(x.ndim() == 4, "bilinear_downsample2x: expected BCHW");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0, "bilinear_downsample2x: spatial dims must be even");
    int OH = H / 2, OW = W / 2;
    std::vector<T> v((size_t)B * C * OH * OW);
    for (long long bc = 0; bc < (long long)B * C; ++bc) {
        const T* plane = x.ptr() + bc * H * W;
        T* oplane = v.data() + bc * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                const T* p = plane + (size_t)(2 * oy) * W + 2 * ox;
                oplane[(size_t)oy * OW + ox] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
    }
    Tensor<T> out = Tensor<T>::op({B, C, OH, OW}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, B, C, H, W, OH, OW] {
            xn->ensure_grad();
            for (long long bc = 0; bc < (long long)B * C; ++bc) {
                T* gplane = xn->grad.data() + bc * H * W;
                const T* go = on->grad.data() + bc * OH * OW;
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox) {
                        T g = go[(size_t)oy * OW + ox] * T(0.25);
                        T* p = gplane + (size_t)(2 * oy) * W + 2 * ox;
                        p[0] += g;
                        p[1] += g;
                        p[W] += g;
                        p[W + 1] += g;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Window reshapes and attention
// ---------------------------------------------------------------------------

/// BCHW → (B·nWin, C, M, M) over non-overlapping M×M tiles, row-major tile
/// order. Inverse of window_merge.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int M) {
    check(x.ndim() == 4, "window_partition: expected BCHW");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % M == 0 && W % M == 0, "window_partition: spatial dims must be divisible by window size");
    int nh = H / M, nw = W / M;
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < nh; ++wy)
            for (int wx = 0; wx < nw; ++wx) {
                long long wi = ((long long)b * nh + wy) * nw + wx;
                for (int c = 0; c < C; ++c)
                    for (int my = 0; my < M; ++my) {
                        const T* src = px + (((size_t)b * C + c) * H + wy * M + my) * W + wx * M;
                        T* dst = v.data() + ((wi * C + c) * M + my) * M;
                        std::copy(src, src + M, dst);
                    }
            }
    Tensor<T> out = Tensor<T>::op({B * nh * nw, C, M, M}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, B, C, H, W, M, nh, nw] {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int wy = 0; wy < nh; ++wy)
                    for (int wx = 0; wx < nw; ++wx) {
                        long long wi = ((long long)b * nh + wy) * nw + wx;
                        for (int c = 0; c < C; ++c)
                            for (int my = 0; my < M; ++my) {
                                const T* g = on->grad.data() + ((wi * C + c) * M + my) * M;
                                T* dst = xn->grad.data() + (((size_t)b * C + c) * H + wy * M + my) * W + wx * M;
                                for (int i = 0; i < M; ++i) dst[i] += g[i];
                            }
                    }
        });
    }
    return out;
}

/// Inverse of window_partition: (B·nWin, C, M, M) → BCHW.
template <typename T>
Tensor<T> window_merge(const Tensor<T>& x, int B, int H, int W) {
    check(x.ndim() == 4, "window_merge: expected windowed tensor");
    int C = x.dim(1), M = x.dim(2);
    check(x.dim(3) == M, "window_merge: windows must be square");
    check(H % M == 0 && W % M == 0, "window_merge: target dims must be divisible by window size");
    int nh = H / M, nw = W / M;
    check((long long)x.dim(0) == (long long)B * nh * nw, "window_merge: window count mismatch");
    std::vector<T> v(x.numel());
    const T* px = x.ptr();
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < nh; ++wy)
            for (int wx = 0; wx < nw; ++wx) {
                long long wi = ((long long)b * nh + wy) * nw + wx;
                for (int c = 0; c < C; ++c)
                    for (int my = 0; my < M; ++my) {
                        const T* src = px + ((wi * C + c) * M + my) * M;
                        T* dst = v.data() + (((size_t)b * C + c) * H + wy * M + my) * W + wx * M;
                        std::copy(src, src + M, dst);
                    }
            }
    Tensor<T> out = Tensor<T>::op({B, C, H, W}, std::move(v), {x.node()});
    if (out.recording()) {
        auto xn = x.node();
        auto on = out.node();
        out.set_backward([xn, on, B, C, H, W, M, nh, nw] {
            xn->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int wy = 0; wy < nh; ++wy)
                    for (int wx = 0; wx < nw; ++wx) {
                        long long wi = ((long long)b * nh + wy) * nw + wx;
                        for (int c = 0; c < C; ++c)
                            for (int my = 0; my < M; ++my) {
                                const T* g = on->grad.data() + (((size_t)b * C + c) * H + wy * M + my) * W + wx * M;
                                T* dst = xn->grad.data() + ((wi * C + c) * M + my) * M;
                                for (int i = 0; i < M; ++i) dst[i] += g[i];
                            }
                    }
        });
    }
    return out;
}

/// Relative-displacement index for an M×M window: maps (query, key) token
/// pairs to rows of a (2M−1)² bias table.
inline std::vector<int> relative_position_index(int M) {
    int M2 = M * M, span = 2 * M - 1;
    std::vector<int> idx((size_t)M2 * M2);
    for (int q = 0; q < M2; ++q)
        for (int k = 0; k < M2; ++k) {
            int dy = k / M - q / M + M - 1;
            int dx = k % M - q % M + M - 1;
            idx[(size_t)q * M2 + k] = dy * span + dx;
        }
    return idx;
}

/// Scaled dot-product attention inside each window. q,k,v are windowed
/// tensors (NW, C, M, M); bias is a per-head table (heads, (2M−1)²) added to
/// the logits by relative displacement. Softmax rows are max-subtracted.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& bias,
                           int heads) {
    detail::check_same_shape(q, k, "window_attention");
    detail::check_same_shape(q, v, "window_attention");
    check(q.ndim() == 4 && q.dim(2) == q.dim(3), "window_attention: expected (NW, C, M, M) windows");
    int NW = q.dim(0), C = q.dim(1), M = q.dim(2);
    int M2 = M * M;
    check(C % heads == 0, "window_attention: channels not divisible by heads");
    int d = C / heads;
    check(bias.ndim() == 2 && bias.dim(0) == heads && bias.dim(1) == (2 * M - 1) * (2 * M - 1),
          "window_attention: bias table must be (heads, (2M-1)^2)");
    const T scale = T(1) / std::sqrt(T(d));
    std::vector<int> ridx = relative_position_index(M);

    std::vector<T> outv((size_t)NW * C * M2);
    auto probs = std::make_shared<std::vector<T>>((size_t)NW * heads * M2 * M2);
    for (int w = 0; w < NW; ++w)
        for (int h = 0; h < heads; ++h) {
            ConstMatMap<T> Q(q.ptr() + ((size_t)w * C + (size_t)h * d) * M2, d, M2);
            ConstMatMap<T> K(k.ptr() + ((size_t)w * C + (size_t)h * d) * M2, d, M2);
            ConstMatMap<T> V(v.ptr() + ((size_t)w * C + (size_t)h * d) * M2, d, M2);
            RowMat<T> S = (Q.transpose() * K) * scale;
            const T* table = bias.ptr() + (size_t)h * (2 * M - 1) * (2 * M - 1);
            for (int qi = 0; qi < M2; ++qi)
                for (int ki = 0; ki < M2; ++ki) S(qi, ki) += table[ridx[(size_t)qi * M2 + ki]];
            MatMap<T> P(probs->data() + ((size_t)w * heads + h) * M2 * M2, M2, M2);
            for (int qi = 0; qi < M2; ++qi) {
                T m = S.row(qi).maxCoeff();
                T z = 0;
                for (int ki = 0; ki < M2; ++ki) {
                    T e = std::exp(S(qi, ki) - m);
                    P(qi, ki) = e;
                    z += e;
                }
                P.row(qi) *= T(1) / z;
            }
            MatMap<T> Ow(outv.data() + ((size_t)w * C + (size_t)h * d) * M2, d, M2);
            Ow.noalias() = V * P.transpose();
        }
    Tensor<T> out = Tensor<T>::op(q.shape(), std::move(outv), {q.node(), k.node(), v.node(), bias.node()});
    if (out.recording()) {
        auto qn = q.node(), kn = k.node(), vn = v.node(), bn = bias.node(), on = out.node();
        auto sidx = std::make_shared<std::vector<int>>(std::move(ridx));
        out.set_backward([qn, kn, vn, bn, on, probs, sidx, NW, C, M, M2, heads, d, scale] {
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int w = 0; w < NW; ++w)
                for (int h = 0; h < heads; ++h) {
                    size_t base = ((size_t)w * C + (size_t)h * d) * M2;
                    ConstMatMap<T> Q(qn->value.data() + base, d, M2);
                    ConstMatMap<T> K(kn->value.data() + base, d, M2);
                    ConstMatMap<T> V(vn->value.data() + base, d, M2);
                    ConstMatMap<T> P(probs->data() + ((size_t)w * heads + h) * M2 * M2, M2, M2);
                    ConstMatMap<T> GO(on->grad.data() + base, d, M2);
                    if (vn->requires_grad) {
                        MatMap<T> GV(vn->grad.data() + base, d, M2);
                        GV.noalias() += GO * P;
                    }
                    RowMat<T> dP = GO.transpose() * V;  // (M2, M2): d out wrt probs
                    RowMat<T> dS(M2, M2);
                    for (int qi = 0; qi < M2; ++qi) {
                        T dot = 0;
                        for (int ki = 0; ki < M2; ++ki) dot += dP(qi, ki) * P(qi, ki);
                        for (int ki = 0; ki < M2; ++ki) dS(qi, ki) = P(qi, ki) * (dP(qi, ki) - dot);
                    }
                    if (bn->requires_grad) {
                        T* gt = bn->grad.data() + (size_t)h * (2 * M - 1) * (2 * M - 1);
                        for (int qi = 0; qi < M2; ++qi)
                            for (int ki = 0; ki < M2; ++ki) gt[(*sidx)[(size_t)qi * M2 + ki]] += dS(qi, ki);
                    }
                    if (qn->requires_grad) {
                        MatMap<T> GQ(qn->grad.data() + base, d, M2);
                        GQ.noalias() += (K * dS.transpose()) * scale;
                    }
                    if (kn->requires_grad) {
                        MatMap<T> GK(kn->grad.data() + base, d, M2);
                        GK.noalias() += (Q * dS) * scale;
                    }
                }
        });
    }
    return out;
}

}  // namespace bvfi
