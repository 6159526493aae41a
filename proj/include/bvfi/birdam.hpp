#pragma once

#include "bvfi/deform.hpp"
#include "bvfi/nn.hpp"

namespace bvfi {

/// Uniformly spaced feature sequence. Time indices are in units of the
/// inter-input-frame spacing and exist for bookkeeping only; the recurrence
/// itself is index-based.
template <typename T>
struct SequenceFeatures {
    std::vector<Tensor<T>> features;
    T start = T(0);
    T spacing = T(1);

    void validate() const {
        check(!features.empty(), "sequence must not be empty");
        check(spacing > T(0), "sequence spacing must be positive");
        for (const auto& f : features)
            check(f.shape() == features.front().shape(), "sequence features must share one shape");
    }
    T time_of(size_t i) const { return start + T(i) * spacing; }
};

/// Recurrent deformable alignment unit: estimates fields from
/// [F_t, h_prev], aligns the propagated hidden feature to the current frame
/// with a deformable convolution, and produces the new hidden feature and
/// the current feature through two adaptive-fusion heads.
template <typename T>
class Rdau {
  public:
    Rdau() = default;
    Rdau(Params<T>& params, const std::string& name, int ch, int groups, int kernel, std::mt19937& rng) {
        dcfg_.kernel = kernel;
        dcfg_.groups = groups;
        dcfg_.in_channels = ch;
        dcfg_.out_channels = ch;
        est_ = FieldPredictor<T>(params, name + ".est", 2 * ch, ch, 1, dcfg_, rng);
        dconv_w_ = params.create(name + ".dconv.weight", {ch, ch, kernel, kernel}, Init::kaiming,
                                 ch * kernel * kernel, rng);
        dconv_b_ = params.create(name + ".dconv.bias", {ch}, Init::zeros, 0, rng);
        h_head_ = FusionHead<T>(params, name + ".h", 2 * ch, ch, rng);
        c_head_ = FusionHead<T>(params, name + ".c", 2 * ch, ch, rng);
    }

    struct Out {
        Tensor<T> hidden;
        Tensor<T> current;
    };

    /// `align` off reproduces the no-alignment ablation: the raw hidden
    /// state is fused directly.
    Out step(const Tensor<T>& f_t, const Tensor<T>& h_prev, bool align = true) const {
        check(f_t.shape() == h_prev.shape(), "rdau: feature/hidden shape mismatch");
        Tensor<T> h_in = h_prev;
        if (align) {
            auto [dp, dm] = est_.forward(concat<T>({f_t, h_prev}, 1));
            h_in = deform_conv2d(h_prev, dp, dm, dconv_w_, dconv_b_, dcfg_);
        }
        return {h_head_.forward(f_t, h_in), c_head_.forward(f_t, h_in)};
    }

  private:
    DeformConfig dcfg_;
    FieldPredictor<T> est_;
    Tensor<T> dconv_w_, dconv_b_;
    FusionHead<T> h_head_, c_head_;
};

/// Bi-directional recurrent fusion. One RDAU parameter set serves both
/// directions and every step. The final per-position fusion applies one
/// shared 1×1 conv to each direction's current feature and sums them, so a
/// sequence reversal permutes commutative additions only — reversal
/// equivariance holds bit-exactly.
struct BiRdamOptions {
    bool align = true;      // deformable alignment inside the RDAU
    bool long_term = true;  // false: window-3 fusion (one hop per direction)
};

template <typename T>
class BiRdam {
  public:
    using Options = BiRdamOptions;

    BiRdam() = default;
    BiRdam(Params<T>& params, const std::string& name, int ch, int groups, int kernel, std::mt19937& rng,
           Options opts = {})
        : opts_(opts),
          rdau_(params, name + ".rdau", ch, groups, kernel, rng),
          af_in_(params, name + ".af.c1", ch, ch, 1, rng),
          af_out_(params, name + ".af.c2", ch, ch, 1, rng) {}

    const Rdau<T>& rdau() const { return rdau_; }
    const Options& options() const { return opts_; }

    Tensor<T> fuse_currents(const Tensor<T>& fwd_c, const Tensor<T>& bwd_c) const {
        return af_out_.forward(relu(add(af_in_.forward(fwd_c), af_in_.forward(bwd_c))));
    }

    SequenceFeatures<T> fuse(const SequenceFeatures<T>& seq) const {
        seq.validate();
        const auto& fs = seq.features;
        size_t n = fs.size();
        Tensor<T> zero = Tensor<T>::zeros(fs[0].shape());

        std::vector<Tensor<T>> fwd_c(n), bwd_c(n);
        if (opts_.long_term) {
            Tensor<T> h = zero;
            for (size_t i = 0; i < n; ++i) {
                auto o = rdau_.step(fs[i], h, opts_.align);
                h = o.hidden;
                fwd_c[i] = o.current;
            }
            h = zero;
            for (size_t i = n; i-- > 0;) {
                auto o = rdau_.step(fs[i], h, opts_.align);
                h = o.hidden;
                bwd_c[i] = o.current;
            }
        } else {
            // Short-term: each position sees exactly one neighbor per
            // direction, hidden states restart from zero.
            for (size_t i = 0; i < n; ++i) {
                Tensor<T> h = i > 0 ? rdau_.step(fs[i - 1], zero, opts_.align).hidden : zero;
                fwd_c[i] = rdau_.step(fs[i], h, opts_.align).current;
            }
            for (size_t i = 0; i < n; ++i) {
                Tensor<T> h = i + 1 < n ? rdau_.step(fs[i + 1], zero, opts_.align).hidden : zero;
                bwd_c[i] = rdau_.step(fs[i], h, opts_.align).current;
            }
        }

        SequenceFeatures<T> out;
        out.start = seq.start;
        out.spacing = seq.spacing;
        out.features.reserve(n);
        for (size_t i = 0; i < n; ++i) out.features.push_back(fuse_currents(fwd_c[i], bwd_c[i]));
        return out;
    }

  private:
    Options opts_;
    Rdau<T> rdau_;
    Conv2d<T> af_in_, af_out_;
};

}  // namespace bvfi
