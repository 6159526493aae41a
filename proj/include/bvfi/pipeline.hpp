#pragma once

#include "bvfi/birdam.hpp"
#include "bvfi/deblur.hpp"
#include "bvfi/image.hpp"
#include "bvfi/tpcd.hpp"

namespace bvfi {

struct ModelConfig {
    int channels = 32;
    int factor = 2;  // ×2: one midpoint, ×8: seven intermediates
    int extractor_blocks = 3;
    int deform_groups = 8;
    int deform_kernel = 3;
    TransformerConfig transformer{.window = 4, .heads = 4, .channels = 32, .depth = 2};
    TaylorConfig taylor{};
    DeblurBackbone backbone = DeblurBackbone::transformer;
    int resnet_blocks = 20;
    BiRdamOptions birdam{};

    void validate() const {
        check(channels > 0 && channels % deform_groups == 0, "model: channels must be divisible by deform groups");
        check(factor >= 2, "model: interpolation factor must be >= 2");
        taylor.validate();
    }
    std::vector<double> times() const {
        std::vector<double> ts;
        for (int k = 1; k < factor; ++k) ts.push_back((double)k / factor);
        return ts;
    }
};

/// The full three-stage model: residual-block feature extraction, TPCD
/// interpolation at the requested times, Bi-RDAM fusion over the whole
/// target sequence (with the two context frames as discarded endpoints),
/// Taylor deblurring per target and a reconstruction conv whose output is
/// added to the time-blended input pair.
template <typename T>
class BvfiModel {
  public:
    BvfiModel(const ModelConfig& cfg, unsigned seed) : cfg_(cfg) {
        cfg.validate();
        std::mt19937 rng(seed);
        int C = cfg.channels;
        extract_in_ = Conv2d<T>(params_, "extract.in", 3, C, 3, rng);
        for (int i = 0; i < cfg.extractor_blocks; ++i)
            extract_rbs_.emplace_back(params_, "extract.rb" + std::to_string(i), C, rng);
        pyramid_ = PyramidBuilder<T>(params_, "pyramid", C, rng);
        tpcd_ = Tpcd<T>(params_, "tpcd", C, cfg.deform_groups, cfg.deform_kernel, rng);
        birdam_ = BiRdam<T>(params_, "birdam", C, cfg.deform_groups, cfg.deform_kernel, rng,
                            {.align = cfg.birdam.align, .long_term = cfg.birdam.long_term});
        TransformerConfig xcfg = cfg.transformer;
        xcfg.channels = C;
        taylor_ = TaylorDeblur<T>(params_, "deblur", cfg.taylor, xcfg, rng, cfg.backbone, cfg.resnet_blocks);
        recon_ = Conv2d<T>(params_, "recon", C, 3, 3, rng);
        // Start near the blended-input baseline: small reconstruction head
        // keeps early steps stable while leaving every gradient path live.
        for (auto& w : params_.at("recon.weight").data()) w *= T(0.1);
    }

    const ModelConfig& config() const { return cfg_; }
    Params<T>& params() { return params_; }
    const Params<T>& params() const { return params_; }
    long long param_count() const { return params_.count_scalars(); }

    Tensor<T> extract(const Tensor<T>& frame) const {
        Tensor<T> f = relu(extract_in_.forward(frame));
        for (const auto& rb : extract_rbs_) f = rb.forward(f);
        return f;
    }

    /// Sharp frames at every time in {0} ∪ times ∪ {1}. `times` must be
    /// sorted and inside (0,1). Input frames are B×3×H×W with H,W divisible
    /// by 4. `clamp_output` off returns the raw pre-clamp reconstructions
    /// (training path).
    std::vector<Tensor<T>> forward(const std::array<Tensor<T>, 4>& frames, const std::vector<double>& times,
                                   bool clamp_output = true) const {
        for (const auto& f : frames) {
            check(f.shape() == frames[0].shape(), "forward: frames must share one shape");
            check(f.ndim() == 4 && f.dim(1) == 3, "forward: frames must be B×3×H×W");
        }
        check(frames[0].dim(2) % 4 == 0 && frames[0].dim(3) % 4 == 0,
              "forward: spatial dims must be divisible by 4");
        for (size_t i = 0; i < times.size(); ++i) {
            check(times[i] > 0.0 && times[i] < 1.0, "forward: times must lie in (0,1)");
            if (i) check(times[i] > times[i - 1], "forward: times must be sorted");
        }

        std::array<Tensor<T>, 4> feats;
        for (int i = 0; i < 4; ++i) feats[i] = extract(frames[i]);
        PyramidFeatures<T> p0 = pyramid_.build(feats[1]);
        PyramidFeatures<T> p1 = pyramid_.build(feats[2]);

        // [F_-1, F_0, F_t..., F_1, F_2]; context endpoints are fused but
        // their outputs are discarded.
        SequenceFeatures<T> seq;
        seq.features.push_back(feats[0]);
        seq.features.push_back(feats[1]);
        for (double t : times) seq.features.push_back(tpcd_.interpolate(p0, p1, T(t)));
        seq.features.push_back(feats[2]);
        seq.features.push_back(feats[3]);
        SequenceFeatures<T> fused = birdam_.fuse(seq);

        std::vector<double> target_times{0.0};
        target_times.insert(target_times.end(), times.begin(), times.end());
        target_times.push_back(1.0);

        std::vector<Tensor<T>> outputs;
        for (size_t i = 0; i < target_times.size(); ++i) {
            Tensor<T> d = taylor_.forward(fused.features[1 + i]);
            T t = T(target_times[i]);
            Tensor<T> blend = add(mul_scalar(frames[1], T(1) - t), mul_scalar(frames[2], t));
            Tensor<T> img = add(recon_.forward(d), blend);
            outputs.push_back(clamp_output ? clamp(img, T(0), T(1)) : img);
        }
        return outputs;
    }

    /// Slides a 4-frame window over the video (stride 1) and emits, per
    /// consecutive pair, the deblurred left frame plus factor−1
    /// intermediates; the final pair also emits its right frame. Context at
    /// the video ends is edge-replicated. N input frames, factor f →
    /// (N−1)·f + 1 outputs at f× the input rate.
    FrameSequence interpolate_video(const FrameSequence& video, int factor) const {
        video.validate();
        check(factor >= 2, "interpolate_video: factor must be >= 2");
        int n = (int)video.frames.size();
        check(n >= 4, "interpolate_video: need at least 4 frames, got " + std::to_string(n));
        int H = video.frames[0].dim(1), W = video.frames[0].dim(2);
        int PH = (H + 3) / 4 * 4, PW = (W + 3) / 4 * 4;

        std::vector<double> times;
        for (int k = 1; k < factor; ++k) times.push_back((double)k / factor);

        NoGradGuard ng;
        FrameSequence out;
        out.fps = video.fps * factor;
        auto as_batch = [&](const Tensor<float>& chw) {
            Tensor<T> t = Tensor<T>::zeros({1, 3, PH, PW});
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        t.data()[((size_t)c * PH + y) * PW + x] = (T)chw.ptr()[((size_t)c * H + y) * W + x];
            return t;
        };
        auto to_frame = [&](const Tensor<T>& b) {
            Tensor<float> f = Tensor<float>::zeros({3, H, W});
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        f.data()[((size_t)c * H + y) * W + x] = (float)b.ptr()[((size_t)c * PH + y) * PW + x];
            return f;
        };
        for (int j = 0; j + 1 < n; ++j) {
            std::array<Tensor<T>, 4> window{as_batch(video.frames[std::max(j - 1, 0)]), as_batch(video.frames[j]),
                                            as_batch(video.frames[j + 1]),
                                            as_batch(video.frames[std::min(j + 2, n - 1)])};
            auto outs = forward(window, times, true);
            int keep = (j + 2 == n) ? factor + 1 : factor;
            for (int k = 0; k < keep; ++k) out.frames.push_back(to_frame(outs[k]));
        }
        for (size_t i = 0; i < out.frames.size(); ++i) out.timestamps.push_back((double)i / out.fps);
        return out;
    }

  private:
    ModelConfig cfg_;
    Params<T> params_;
    Conv2d<T> extract_in_;
    std::vector<ResidualBlock<T>> extract_rbs_;
    PyramidBuilder<T> pyramid_;
    Tpcd<T> tpcd_;
    BiRdam<T> birdam_;
    TaylorDeblur<T> taylor_;
    Conv2d<T> recon_;
};

}  // namespace bvfi
