#pragma once

#include <optional>

#include "bvfi/deform.hpp"
#include "bvfi/nn.hpp"

namespace bvfi {

/// Per-frame 3-level feature pyramid; level[0] is full resolution and each
/// level halves the spatial size. Inputs must be divisible by 4.
template <typename T>
struct PyramidFeatures {
    std::array<Tensor<T>, 3> level;
};

template <typename T>
using FieldPair = std::pair<Tensor<T>, Tensor<T>>;  // (offsets Δp, masks Δm)

/// Level 1 is the input feature; levels 2 and 3 come from stride-2 convs,
/// each followed by one residual block.
template <typename T>
class PyramidBuilder {
  public:
    PyramidBuilder() = default;
    PyramidBuilder(Params<T>& params, const std::string& name, int ch, std::mt19937& rng)
        : down2_(params, name + ".down2", ch, ch, 3, rng, 2),
          down3_(params, name + ".down3", ch, ch, 3, rng, 2),
          rb2_(params, name + ".rb2", ch, rng),
          rb3_(params, name + ".rb3", ch, rng) {}

    PyramidFeatures<T> build(const Tensor<T>& f) const {
        check(f.dim(2) % 4 == 0 && f.dim(3) % 4 == 0,
              "build_pyramid: spatial dims must be divisible by 4, got " + shape_str(f.shape()));
        PyramidFeatures<T> pyr;
        pyr.level[0] = f;
        pyr.level[1] = rb2_.forward(relu(down2_.forward(f)));
        pyr.level[2] = rb3_.forward(relu(down3_.forward(pyr.level[1])));
        return pyr;
    }

  private:
    Conv2d<T> down2_, down3_;
    ResidualBlock<T> rb2_, rb3_;
};

/// Temporal PCD: estimates time-conditioned offset/mask fields over three
/// pyramid levels (coarse to fine, cascading the coarser fields), deformably
/// samples the source features toward time t, and fuses the two directions.
/// Both per-direction invocations share this module's parameters.
template <typename T>
class Tpcd {
  public:
    Tpcd() = default;
    Tpcd(Params<T>& params, const std::string& name, int ch, int groups, int kernel, std::mt19937& rng) : ch_(ch) {
        dcfg_.kernel = kernel;
        dcfg_.groups = groups;
        dcfg_.in_channels = ch;
        dcfg_.out_channels = ch;
        int fields_ch = dcfg_.offset_channels() + dcfg_.mask_channels();
        for (int l = 0; l < 3; ++l) {
            int in_ch = 2 * ch + 1 + (l < 2 ? fields_ch : 0);  // top level has no cascade input
            est_[l] = FieldPredictor<T>(params, name + ".est" + std::to_string(l + 1), in_ch, ch, 2, dcfg_, rng);
            dconv_w_[l] = params.create(name + ".dconv" + std::to_string(l + 1) + ".weight", {ch, ch, kernel, kernel},
                                        Init::kaiming, ch * kernel * kernel, rng);
            dconv_b_[l] = params.create(name + ".dconv" + std::to_string(l + 1) + ".bias", {ch}, Init::zeros, 0, rng);
        }
        cf_[0] = Conv2d<T>(params, name + ".cf1", 2 * ch, ch, 1, rng);
        cf_[1] = Conv2d<T>(params, name + ".cf2", 2 * ch, ch, 1, rng);
        fuse_ = FusionHead<T>(params, name + ".fuse", 2 * ch, ch, rng);
    }

    const DeformConfig& deform_config() const { return dcfg_; }

    /// Eq. of the offset estimator: concat [F_src, F_other, t-channel] plus,
    /// below the top level, the ×2-upsampled coarser fields (offset values
    /// doubled with the coordinate rescale).
    FieldPair<T> estimate_offsets(int level, const Tensor<T>& f_src, const Tensor<T>& f_oth, T t,
                                  const std::optional<FieldPair<T>>& coarser) const {
        check(f_src.shape() == f_oth.shape(), "estimate_offsets: source/other shape mismatch");
        int B = f_src.dim(0), H = f_src.dim(2), W = f_src.dim(3);
        std::vector<Tensor<T>> parts{f_src, f_oth, constant_channel<T>(B, H, W, t)};
        if (coarser) {
            auto [dp, dm] = upsample_fields(*coarser);
            parts.push_back(dp);
            parts.push_back(dm);
        } else {
            check(level == 2, "estimate_offsets: only the top level runs without cascaded fields");
        }
        return est_[level].forward(concat(parts, 1));
    }

    /// ×2 cascade rescale: offsets are pixel-unit at their own level, so the
    /// upsampled offset values are doubled; masks only get upsampled.
    static FieldPair<T> upsample_fields(const FieldPair<T>& fields) {
        return {mul_scalar(bilinear_upsample2x(fields.first), T(2)), bilinear_upsample2x(fields.second)};
    }

    /// Aligns `src` toward time t, conditioning on `oth`. Top-down cascade:
    /// deformable sampling per level, 1×1 fusion with the upsampled coarser
    /// aligned feature. Returns the level-1 aligned feature.
    Tensor<T> align(const PyramidFeatures<T>& src, const PyramidFeatures<T>& oth, T t) const {
        auto f3 = estimate_offsets(2, src.level[2], oth.level[2], t, std::nullopt);
        Tensor<T> a = relu(deform_conv2d(src.level[2], f3.first, f3.second, dconv_w_[2], dconv_b_[2], dcfg_));
        std::optional<FieldPair<T>> coarser = f3;
        for (int l = 1; l >= 0; --l) {
            auto fl = estimate_offsets(l, src.level[l], oth.level[l], t, coarser);
            Tensor<T> d = deform_conv2d(src.level[l], fl.first, fl.second, dconv_w_[l], dconv_b_[l], dcfg_);
            a = relu(cf_[l].forward(concat<T>({d, bilinear_upsample2x(a)}, 1)));
            coarser = fl;
        }
        return a;
    }

    /// Eq. of the adaptive fusion: F_t = fuse([align(F0→t), align(F1→t)]).
    Tensor<T> interpolate(const PyramidFeatures<T>& f0, const PyramidFeatures<T>& f1, T t) const {
        check(t >= T(0) && t <= T(1), "interpolate: t must lie in [0,1]");
        Tensor<T> a0 = align(f0, f1, t);
        Tensor<T> a1 = align(f1, f0, T(1) - t);
        return fuse_.forward(a0, a1);
    }

  private:
    int ch_ = 0;
    DeformConfig dcfg_;
    std::array<FieldPredictor<T>, 3> est_;  // index 0 = finest level
    std::array<Tensor<T>, 3> dconv_w_, dconv_b_;
    std::array<Conv2d<T>, 2> cf_;
    FusionHead<T> fuse_;
};

}  // namespace bvfi
