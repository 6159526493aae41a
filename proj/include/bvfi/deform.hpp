#pragma once

#include "bvfi/nn.hpp"
#include "bvfi/ops.hpp"

namespace bvfi {

struct DeformConfig {
    int kernel = 3;
    int groups = 8;
    int in_channels = 0;
    int out_channels = 0;
    int padding = -1;  // -1: kernel/2

    int pad() const { return padding < 0 ? kernel / 2 : padding; }
    int offset_channels() const { return 2 * groups * kernel * kernel; }
    int mask_channels() const { return groups * kernel * kernel; }
    void validate() const {
        check(kernel >= 1 && groups >= 1, "deform: kernel and groups must be positive");
        check(in_channels % groups == 0, "deform: in_channels " + std::to_string(in_channels) +
                                             " not divisible by groups " + std::to_string(groups));
    }
};

/// Modulated deformable convolution, stride 1. Offsets are pixel-unit
/// displacements at the field's own resolution. Offset channel layout:
/// (dy, dx) interleaved per sampling tap, taps row-major over the K×K grid,
/// groups outermost — checkpoints depend on this order. Mask values are
/// expected in [0,1] (sigmoid applied by the producer).
template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& mask, const Tensor<T>& w,
                        const Tensor<T>& b, const DeformConfig& cfg) {
    cfg.validate();
    check(x.ndim() == 4, "deform_conv2d: input must be BCHW");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int K = cfg.kernel, G = cfg.groups, pad = cfg.pad();
    check(C == cfg.in_channels, "deform_conv2d: config expects " + std::to_string(cfg.in_channels) +
                                    " input channels, tensor has " + std::to_string(C));
    check(offsets.ndim() == 4 && offsets.dim(1) == cfg.offset_channels() && offsets.dim(2) == H &&
              offsets.dim(3) == W && offsets.dim(0) == B,
          "deform_conv2d: offset field shape " + shape_str(offsets.shape()) + " does not match config/input");
    check(mask.ndim() == 4 && mask.dim(1) == cfg.mask_channels() && mask.dim(2) == H && mask.dim(3) == W &&
              mask.dim(0) == B,
          "deform_conv2d: mask field shape " + shape_str(mask.shape()) + " does not match config/input");
    check(w.ndim() == 4 && w.dim(1) == C && w.dim(2) == K && w.dim(3) == K, "deform_conv2d: weight must be O×C×K×K");
    int O = w.dim(0);
    if (b.defined()) check(b.numel() == O, "deform_conv2d: bias size mismatch");
    const int cpg = C / G;          // channels per offset group
    const long long P = (long long)H * W;  // stride-1, same-size output
    const int K2 = K * K;

    // Modulated deformable im2col: col[(c·K²+tap), p] = m[g,tap,p] · x_c(sample pos)
    // Value capture: the closure is kept alive inside the backward fn.
    auto fill_col = [C, cpg, G, K, K2, P, H, W, pad](int bi, const T* xv, const T* ov, const T* mv, T* col) {
        for (int c = 0; c < C; ++c) {
            int g = c / cpg;
            const T* plane = xv + ((size_t)bi * C + c) * P;
            for (int tap = 0; tap < K2; ++tap) {
                int ki = tap / K, kj = tap % K;
                const T* dy = ov + (((size_t)bi * G + g) * K2 + tap) * 2 * P;
                const T* dx = dy + P;
                const T* mm = mv + (((size_t)bi * G + g) * K2 + tap) * P;
                T* row = col + ((size_t)c * K2 + tap) * P;
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        long long p = (long long)y * W + xx;
                        detail::BilinearTap<T> t;
                        t.locate(T(y - pad + ki) + dy[p], T(xx - pad + kj) + dx[p], H, W);
                        row[p] = t.any() ? mm[p] * t.read(plane, W) : T(0);
                    }
            }
        }
    };

    std::vector<T> col((size_t)C * K2 * P);
    std::vector<T> v((size_t)B * O * P);
    ConstMatMap<T> Wm(w.ptr(), O, (long long)C * K2);
    for (int bi = 0; bi < B; ++bi) {
        fill_col(bi, x.ptr(), offsets.ptr(), mask.ptr(), col.data());
        MatMap<T> Y(v.data() + (size_t)bi * O * P, O, P);
        ConstMatMap<T> Cm(col.data(), (long long)C * K2, P);
        Y.noalias() = Wm * Cm;
        if (b.defined())
            for (int o = 0; o < O; ++o) {
                T bo = b.ptr()[o];
                T* row = v.data() + ((size_t)bi * O + o) * P;
                for (long long i = 0; i < P; ++i) row[i] += bo;
            }
    }

    std::vector<typename Tensor<T>::NodePtr> parents{x.node(), offsets.node(), mask.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    Tensor<T> out = Tensor<T>::op({B, O, H, W}, std::move(v), parents);
    if (out.recording()) {
        auto xn = x.node(), on_off = offsets.node(), mn = mask.node(), wn = w.node(), on = out.node();
        auto bn = b.defined() ? b.node() : nullptr;
        out.set_backward([=] {
            if (xn->requires_grad) xn->ensure_grad();
            if (on_off->requires_grad) on_off->ensure_grad();
            if (mn->requires_grad) mn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn && bn->requires_grad) bn->ensure_grad();
            ConstMatMap<T> Wm(wn->value.data(), O, (long long)C * K2);
            std::vector<T> col((size_t)C * K2 * P), dcol((size_t)C * K2 * P);
            for (int bi = 0; bi < B; ++bi) {
                ConstMatMap<T> Gm(on->grad.data() + (size_t)bi * O * P, O, P);
                if (bn && bn->requires_grad)
                    for (int o = 0; o < O; ++o) bn->grad[o] += Gm.row(o).sum();
                if (wn->requires_grad) {
                    fill_col(bi, xn->value.data(), on_off->value.data(), mn->value.data(), col.data());
                    ConstMatMap<T> Cm(col.data(), (long long)C * K2, P);
                    MatMap<T> GW(wn->grad.data(), O, (long long)C * K2);
                    GW.noalias() += Gm * Cm.transpose();
                }
                MatMap<T> Dc(dcol.data(), (long long)C * K2, P);
                Dc.noalias() = Wm.transpose() * Gm;
                // Scatter column grads back to input, offsets and mask.
                for (int c = 0; c < C; ++c) {
                    int g = c / cpg;
                    const T* plane = xn->value.data() + ((size_t)bi * C + c) * P;
                    T* gplane = xn->requires_grad ? xn->grad.data() + ((size_t)bi * C + c) * P : nullptr;
                    for (int tap = 0; tap < K2; ++tap) {
                        int ki = tap / K, kj = tap % K;
                        const T* dyv = on_off->value.data() + (((size_t)bi * G + g) * K2 + tap) * 2 * P;
                        const T* dxv = dyv + P;
                        const T* mv = mn->value.data() + (((size_t)bi * G + g) * K2 + tap) * P;
                        T* gdy = on_off->requires_grad
                                     ? on_off->grad.data() + (((size_t)bi * G + g) * K2 + tap) * 2 * P
                                     : nullptr;
                        T* gdx = gdy ? gdy + P : nullptr;
                        T* gm = mn->requires_grad ? mn->grad.data() + (((size_t)bi * G + g) * K2 + tap) * P : nullptr;
                        const T* dc = dcol.data() + ((size_t)c * K2 + tap) * P;
                        for (int y = 0; y < H; ++y)
                            for (int xx = 0; xx < W; ++xx) {
                                long long p = (long long)y * W + xx;
                                T gcol = dc[p];
                                if (gcol == T(0)) continue;
                                detail::BilinearTap<T> t;
                                t.locate(T(y - pad + ki) + dyv[p], T(xx - pad + kj) + dxv[p], H, W);
                                if (!t.any()) continue;
                                T m = mv[p];
                                if (gm) gm[p] += gcol * t.read(plane, W);
                                if (gdy) {
                                    T ddy, ddx;
                                    t.grad_coord(plane, W, ddy, ddx);
                                    gdy[p] += gcol * m * ddy;
                                    gdx[p] += gcol * m * ddx;
                                }
                                if (gplane) t.scatter(gcol * m, gplane, W);
                            }
                    }
                }
            }
        });
    }
    return out;
}

/// Backward warping by a dense flow field with an optional occlusion mask.
/// Exactly the G=1, K=1, identity-weight degenerate form of deform_conv2d:
/// flow channel 0 is the row (dy) displacement, channel 1 the column (dx).
template <typename T>
Tensor<T> flow_warp(const Tensor<T>& x, const Tensor<T>& flow, const Tensor<T>& occlusion_mask = {}) {
    check(x.ndim() == 4 && flow.ndim() == 4 && flow.dim(1) == 2, "flow_warp: flow must be B×2×H×W");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(flow.dim(0) == B && flow.dim(2) == H && flow.dim(3) == W, "flow_warp: flow/input shape mismatch");
    Tensor<T> mask = occlusion_mask;
    if (!mask.defined()) mask = Tensor<T>::full({B, 1, H, W}, T(1));
    check(mask.dim(1) == 1 && mask.dim(2) == H && mask.dim(3) == W, "flow_warp: mask must be B×1×H×W");

    DeformConfig cfg;
    cfg.kernel = 1;
    cfg.groups = 1;
    cfg.in_channels = C;
    cfg.out_channels = C;
    cfg.padding = 0;
    // Identity 1×1 weight: out channel o reads in channel o.
    std::vector<T> wv((size_t)C * C, T(0));
    for (int c = 0; c < C; ++c) wv[(size_t)c * C + c] = T(1);
    Tensor<T> w = Tensor<T>::from({C, C, 1, 1}, std::move(wv));
    return deform_conv2d(x, flow, mask, w, Tensor<T>(), cfg);
}

/// Conv stack that predicts a deformable field pair from a feature map.
/// Final offset/mask layers are zero-initialized so sampling starts on the
/// plain grid. The mask head output is sigmoid-activated.
template <typename T>
class FieldPredictor {
  public:
    FieldPredictor() = default;
    FieldPredictor(Params<T>& params, const std::string& name, int in_ch, int mid_ch, int res_blocks,
                   const DeformConfig& cfg, std::mt19937& rng)
        : ingest_(params, name + ".ingest", in_ch, mid_ch, 1, rng),
          conv2_(params, name + ".conv2", mid_ch, mid_ch, 3, rng),
          offset_head_(params, name + ".offset", mid_ch, cfg.offset_channels(), 1, rng, 1, -1, Init::zeros),
          mask_head_(params, name + ".mask", mid_ch, cfg.mask_channels(), 1, rng, 1, -1, Init::zeros) {
        for (int i = 0; i < res_blocks; ++i)
            rbs_.emplace_back(params, name + ".rb" + std::to_string(i), mid_ch, rng);
    }

    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& features) const {
        Tensor<T> h = relu(conv2_.forward(relu(ingest_.forward(features))));
        for (const auto& rb : rbs_) h = rb.forward(h);
        return {offset_head_.forward(h), sigmoid(mask_head_.forward(h))};
    }

  private:
    Conv2d<T> ingest_, conv2_, offset_head_, mask_head_;
    std::vector<ResidualBlock<T>> rbs_;
};

}  // namespace bvfi
