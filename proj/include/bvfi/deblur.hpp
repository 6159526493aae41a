#pragma once

#include <functional>

#include "bvfi/nn.hpp"

namespace bvfi {

struct TransformerConfig {
    int window = 4;
    int heads = 4;
    int channels = 32;
    int depth = 2;          // down stages; bottleneck sits below them
    int ffn_expansion = 2;

    void validate() const {
        check(channels % heads == 0, "transformer: channels not divisible by heads");
        check(window >= 1 && depth >= 0 && ffn_expansion >= 1, "transformer: bad config");
    }
    int pad_multiple() const { return window << depth; }
};

struct TaylorConfig {
    int order = 2;
    bool accumulate = true;          // sum all orders; false: g0 + g^n only
    bool factorial_scaling = false;  // explicit 1/k! weights on the summed orders

    void validate() const { check(order >= 1, "taylor: order must be >= 1"); }
};

enum class DeblurBackbone { transformer, resnet, conv_unet };

/// Windowed multi-head self-attention with a learnable relative-position
/// bias per head. Projections are 1×1 convs; windows are non-overlapping.
template <typename T>
class WindowMsa {
  public:
    WindowMsa() = default;
    WindowMsa(Params<T>& params, const std::string& name, int ch, int window, int heads, std::mt19937& rng)
        : window_(window),
          heads_(heads),
          q_(params, name + ".q", ch, ch, 1, rng),
          k_(params, name + ".k", ch, ch, 1, rng),
          v_(params, name + ".v", ch, ch, 1, rng),
          out_(params, name + ".out", ch, ch, 1, rng) {
        int span = 2 * window - 1;
        bias_ = params.create(name + ".relpos", {heads, span * span}, Init::zeros, 0, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        int B = x.dim(0), H = x.dim(2), W = x.dim(3);
        check(H % window_ == 0 && W % window_ == 0, "window_msa: dims must be divisible by the window (caller pads)");
        auto qw = window_partition(q_.forward(x), window_);
        auto kw = window_partition(k_.forward(x), window_);
        auto vw = window_partition(v_.forward(x), window_);
        auto attn = window_attention(qw, kw, vw, bias_, heads_);
        return out_.forward(window_merge(attn, B, H, W));
    }

  private:
    int window_ = 0, heads_ = 0;
    Conv2d<T> q_, k_, v_, out_;
    Tensor<T> bias_;
};

/// Transformer layer: pre-norm residual MSA plus a pre-norm residual FFN.
template <typename T>
class TransformerLayer {
  public:
    TransformerLayer() = default;
    TransformerLayer(Params<T>& params, const std::string& name, int ch, int window, int heads, int expansion,
                     std::mt19937& rng)
        : ln1_(params, name + ".ln1", ch, rng),
          ln2_(params, name + ".ln2", ch, rng),
          msa_(params, name + ".msa", ch, window, heads, rng),
          ffn1_(params, name + ".ffn1", ch, ch * expansion, 1, rng),
          ffn2_(params, name + ".ffn2", ch * expansion, ch, 1, rng) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = add(x, msa_.forward(ln1_.forward(x)));
        return add(h, ffn2_.forward(relu(ffn1_.forward(ln2_.forward(h)))));
    }

  private:
    LayerNorm<T> ln1_, ln2_;
    WindowMsa<T> msa_;
    Conv2d<T> ffn1_, ffn2_;
};

/// U-shaped deblurring operator G: transformer stages over a strided-conv
/// encoder, resize-conv decoder with additive skips, zero-initialized final
/// projection (fresh-constructed G maps everything to zero).
template <typename T>
class TransformerG {
  public:
    TransformerG() = default;
    TransformerG(Params<T>& params, const std::string& name, const TransformerConfig& cfg, std::mt19937& rng)
        : cfg_(cfg) {
        cfg.validate();
        int ch = cfg.channels;
        for (int d = 0; d < cfg.depth; ++d) {
            enc_.push_back(make_stage(params, name + ".enc" + std::to_string(d), ch, rng));
            downs_.emplace_back(params, name + ".down" + std::to_string(d), ch, ch * 2, 3, rng, 2);
            ch *= 2;
        }
        bottleneck_ = make_stage(params, name + ".bottleneck", ch, rng);
        for (int d = cfg.depth - 1; d >= 0; --d) {
            ups_.emplace_back(params, name + ".up" + std::to_string(d), ch, ch / 2, 3, rng);
            ch /= 2;
            dec_.push_back(make_stage(params, name + ".dec" + std::to_string(d), ch, rng));
        }
        out_ = Conv2d<T>(params, name + ".out", ch, ch, 3, rng, 1, -1, Init::zeros);
    }

    Tensor<T> forward(const Tensor<T>& g) const {
        int H = g.dim(2), W = g.dim(3);
        int m = cfg_.pad_multiple();
        int PH = (H + m - 1) / m * m, PW = (W + m - 1) / m * m;
        Tensor<T> x = (PH != H || PW != W) ? pad2d(g, PH - H, PW - W) : g;
        std::vector<Tensor<T>> skips;
        for (int d = 0; d < cfg_.depth; ++d) {
            x = run_stage(enc_[d], x);
            skips.push_back(x);
            x = relu(downs_[d].forward(x));
        }
        x = run_stage(bottleneck_, x);
        for (int d = 0; d < cfg_.depth; ++d) {
            x = relu(ups_[d].forward(bilinear_upsample2x(x)));
            x = add(x, skips[cfg_.depth - 1 - d]);
            x = run_stage(dec_[d], x);
        }
        x = out_.forward(x);
        return (PH != H || PW != W) ? crop2d(x, H, W) : x;
    }

  private:
    using Stage = std::vector<TransformerLayer<T>>;

    Stage make_stage(Params<T>& params, const std::string& name, int ch, std::mt19937& rng) const {
        Stage s;
        for (int i = 0; i < 2; ++i)
            s.emplace_back(params, name + ".tfl" + std::to_string(i), ch, cfg_.window, cfg_.heads,
                           cfg_.ffn_expansion, rng);
        return s;
    }
    static Tensor<T> run_stage(const Stage& s, Tensor<T> x) {
        for (const auto& tfl : s) x = tfl.forward(x);
        return x;
    }

    TransformerConfig cfg_;
    std::vector<Stage> enc_, dec_;
    Stage bottleneck_;
    std::vector<Conv2d<T>> downs_, ups_;
    Conv2d<T> out_;
};

/// Plain residual-block chain, the ResNet ablation backbone.
template <typename T>
class ResNetBackbone {
  public:
    ResNetBackbone() = default;
    ResNetBackbone(Params<T>& params, const std::string& name, int ch, int blocks, std::mt19937& rng) {
        for (int i = 0; i < blocks; ++i) rbs_.emplace_back(params, name + ".rb" + std::to_string(i), ch, rng);
        out_ = Conv2d<T>(params, name + ".out", ch, ch, 3, rng, 1, -1, Init::zeros);
    }
    Tensor<T> forward(const Tensor<T>& g) const {
        Tensor<T> x = g;
        for (const auto& rb : rbs_) x = rb.forward(x);
        return out_.forward(x);
    }

  private:
    std::vector<ResidualBlock<T>> rbs_;
    Conv2d<T> out_;
};

/// The transformer U-shape with each TFL swapped for conv+ReLU, the UNet
/// ablation backbone.
template <typename T>
class ConvUnetBackbone {
  public:
    ConvUnetBackbone() = default;
    ConvUnetBackbone(Params<T>& params, const std::string& name, const TransformerConfig& cfg, std::mt19937& rng)
        : depth_(cfg.depth) {
        int ch = cfg.channels;
        for (int d = 0; d < depth_; ++d) {
            enc_.emplace_back(params, name + ".enc" + std::to_string(d), ch, rng);
            downs_.emplace_back(params, name + ".down" + std::to_string(d), ch, ch * 2, 3, rng, 2);
            ch *= 2;
        }
        bottleneck_ = ResidualBlock<T>(params, name + ".bottleneck", ch, rng);
        for (int d = depth_ - 1; d >= 0; --d) {
            ups_.emplace_back(params, name + ".up" + std::to_string(d), ch, ch / 2, 3, rng);
            ch /= 2;
            dec_.emplace_back(params, name + ".dec" + std::to_string(d), ch, rng);
        }
        out_ = Conv2d<T>(params, name + ".out", ch, ch, 3, rng, 1, -1, Init::zeros);
        pad_multiple_ = 1 << depth_;
    }
    Tensor<T> forward(const Tensor<T>& g) const {
        int H = g.dim(2), W = g.dim(3);
        int m = pad_multiple_;
        int PH = (H + m - 1) / m * m, PW = (W + m - 1) / m * m;
        Tensor<T> x = (PH != H || PW != W) ? pad2d(g, PH - H, PW - W) : g;
        std::vector<Tensor<T>> skips;
        for (int d = 0; d < depth_; ++d) {
            x = enc_[d].forward(x);
            skips.push_back(x);
            x = relu(downs_[d].forward(x));
        }
        x = bottleneck_.forward(x);
        for (int d = 0; d < depth_; ++d) {
            x = relu(ups_[d].forward(bilinear_upsample2x(x)));
            x = dec_[d].forward(add(x, skips[depth_ - 1 - d]));
        }
        x = out_.forward(x);
        return (PH != H || PW != W) ? crop2d(x, H, W) : x;
    }

  private:
    int depth_ = 0, pad_multiple_ = 1;
    std::vector<ResidualBlock<T>> enc_, dec_;
    ResidualBlock<T> bottleneck_;
    std::vector<Conv2d<T>> downs_, ups_;
    Conv2d<T> out_;
};

/// Runs the unfolding recursion g^{k+1} = G(g^k) + k·g^k for n steps over an
/// arbitrary operator and combines the orders. Exposed for oracle tests.
template <typename T, typename OpG>
Tensor<T> taylor_recursion(const Tensor<T>& g0, OpG&& G, const TaylorConfig& cfg) {
    cfg.validate();
    std::vector<Tensor<T>> orders{g0};
    Tensor<T> g = g0;
    for (int k = 0; k < cfg.order; ++k) {
        Tensor<T> next = G(g);
        if (k > 0) next = add(next, mul_scalar(g, T(k)));
        orders.push_back(next);
        g = next;
    }
    auto weight = [&](int k) { return cfg.factorial_scaling ? T(1) / T(std::tgamma(k + 1.0)) : T(1); };
    Tensor<T> out;
    if (cfg.accumulate) {
        out = orders[0];
        for (int k = 1; k <= cfg.order; ++k)
            out = add(out, cfg.factorial_scaling ? mul_scalar(orders[k], weight(k)) : orders[k]);
    } else {
        out = add(orders[0], cfg.factorial_scaling ? mul_scalar(orders.back(), weight(cfg.order)) : orders.back());
    }
    return out;
}

/// Deep-unfolding Taylor deblurring: one shared operator G evaluated for
/// every recursion, so the parameter count is independent of the order.
template <typename T>
class TaylorDeblur {
  public:
    TaylorDeblur() = default;
    TaylorDeblur(Params<T>& params, const std::string& name, const TaylorConfig& tcfg, const TransformerConfig& xcfg,
                 std::mt19937& rng, DeblurBackbone backbone = DeblurBackbone::transformer, int resnet_blocks = 20)
        : tcfg_(tcfg), backbone_(backbone) {
        tcfg.validate();
        switch (backbone) {
            case DeblurBackbone::transformer:
                transformer_ = TransformerG<T>(params, name + ".g", xcfg, rng);
                break;
            case DeblurBackbone::resnet:
                resnet_ = ResNetBackbone<T>(params, name + ".g", xcfg.channels, resnet_blocks, rng);
                break;
            case DeblurBackbone::conv_unet:
                unet_ = ConvUnetBackbone<T>(params, name + ".g", xcfg, rng);
                break;
        }
    }

    Tensor<T> apply_g(const Tensor<T>& x) const {
        switch (backbone_) {
            case DeblurBackbone::resnet:
                return resnet_.forward(x);
            case DeblurBackbone::conv_unet:
                return unet_.forward(x);
            default:
                return transformer_.forward(x);
        }
    }

    Tensor<T> forward(const Tensor<T>& fused) const {
        return taylor_recursion(fused, [this](const Tensor<T>& g) { return apply_g(g); }, tcfg_);
    }

    const TaylorConfig& config() const { return tcfg_; }

  private:
    TaylorConfig tcfg_;
    DeblurBackbone backbone_ = DeblurBackbone::transformer;
    TransformerG<T> transformer_;
    ResNetBackbone<T> resnet_;
    ConvUnetBackbone<T> unet_;
};

}  // namespace bvfi
