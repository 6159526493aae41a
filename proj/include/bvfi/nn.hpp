#pragma once

#include <map>
#include <random>

#include "bvfi/ops.hpp"

namespace bvfi {

enum class Init {
    kaiming,  // uniform in ±sqrt(6/fan_in)
    zeros,
    ones,
};

/// Ordered registry of named trainable tensors. Iteration order is the
/// lexicographic name order, which makes optimizer sweeps and checkpoint
/// layouts deterministic.
template <typename T>
class Params {
  public:
    Tensor<T> create(const std::string& name, Shape shape, Init init, int fan_in, std::mt19937& rng) {
        check(map_.find(name) == map_.end(), "duplicate parameter name: " + name);
        Tensor<T> t;
        switch (init) {
            case Init::zeros:
                t = Tensor<T>::zeros(shape);
                break;
            case Init::ones:
                t = Tensor<T>::full(shape, T(1));
                break;
            case Init::kaiming: {
                double bound = std::sqrt(6.0 / std::max(1, fan_in));
                std::uniform_real_distribution<double> dist(-bound, bound);
                std::vector<T> v(shape_numel(shape));
                for (auto& x : v) x = T(dist(rng));
                t = Tensor<T>::from(shape, std::move(v));
                break;
            }
        }
        t.set_requires_grad(true);
        map_.emplace(name, t);
        return t;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = map_.find(name);
        check(it != map_.end(), "unknown parameter: " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return map_.count(name) > 0; }

    auto begin() { return map_.begin(); }
    auto end() { return map_.end(); }
    auto begin() const { return map_.begin(); }
    auto end() const { return map_.end(); }
    size_t size() const { return map_.size(); }

    long long count_scalars() const {
        long long n = 0;
        for (const auto& [name, t] : map_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : map_) t.zero_grad();
    }

  private:
    std::map<std::string, Tensor<T>> map_;
};

template <typename T>
class Conv2d {
  public:
    Conv2d() = default;
    Conv2d(Params<T>& params, const std::string& name, int in_ch, int out_ch, int kernel, std::mt19937& rng,
           int stride = 1, int pad = -1, Init init = Init::kaiming)
        : stride_(stride), pad_(pad < 0 ? kernel / 2 : pad) {
        weight_ = params.create(name + ".weight", {out_ch, in_ch, kernel, kernel}, init, in_ch * kernel * kernel, rng);
        bias_ = params.create(name + ".bias", {out_ch}, Init::zeros, 0, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

    Tensor<T> weight() const { return weight_; }
    Tensor<T> bias() const { return bias_; }

  private:
    Tensor<T> weight_, bias_;
    int stride_ = 1, pad_ = 0;
};

template <typename T>
class Linear {
  public:
    Linear() = default;
    Linear(Params<T>& params, const std::string& name, int in_f, int out_f, std::mt19937& rng,
           Init init = Init::kaiming) {
        weight_ = params.create(name + ".weight", {out_f, in_f}, init, in_f, rng);
        bias_ = params.create(name + ".bias", {out_f}, Init::zeros, 0, rng);
    }
    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  private:
    Tensor<T> weight_, bias_;
};

/// conv-relu-conv with identity shortcut, channel-preserving.
template <typename T>
class ResidualBlock {
  public:
    ResidualBlock() = default;
    ResidualBlock(Params<T>& params, const std::string& name, int ch, std::mt19937& rng)
        : c1_(params, name + ".c1", ch, ch, 3, rng), c2_(params, name + ".c2", ch, ch, 3, rng) {}

    Tensor<T> forward(const Tensor<T>& x) const { return add(x, c2_.forward(relu(c1_.forward(x)))); }

  private:
    Conv2d<T> c1_, c2_;
};

/// 1×1 fusion head: concat two same-shape features, conv to C, ReLU, conv.
template <typename T>
class FusionHead {
  public:
    FusionHead() = default;
    FusionHead(Params<T>& params, const std::string& name, int in_ch, int out_ch, std::mt19937& rng)
        : c1_(params, name + ".c1", in_ch, out_ch, 1, rng), c2_(params, name + ".c2", out_ch, out_ch, 1, rng) {}

    Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b) const {
        return c2_.forward(relu(c1_.forward(concat<T>({a, b}, 1))));
    }
    Tensor<T> forward(const Tensor<T>& x) const { return c2_.forward(relu(c1_.forward(x))); }

  private:
    Conv2d<T> c1_, c2_;
};

template <typename T>
class LayerNorm {
  public:
    LayerNorm() = default;
    LayerNorm(Params<T>& params, const std::string& name, int ch, std::mt19937& rng) {
        gain_ = params.create(name + ".gain", {ch}, Init::ones, 0, rng);
        bias_ = params.create(name + ".bias", {ch}, Init::zeros, 0, rng);
    }
    Tensor<T> forward(const Tensor<T>& x) const { return layernorm(x, gain_, bias_); }

  private:
    Tensor<T> gain_, bias_;
};

/// Broadcast a scalar as one constant-valued extra channel.
template <typename T>
inline Tensor<T> constant_channel(int B, int H, int W, T value) {
    return Tensor<T>::full({B, 1, H, W}, value);
}

}  // namespace bvfi
