#include <gtest/gtest.h>

#include <random>

#include "bvfi/gradcheck.hpp"
#include "bvfi/pipeline.hpp"

using namespace bvfi;

namespace {

ModelConfig micro_config(int ch = 8) {
    ModelConfig cfg;
    cfg.channels = ch;
    cfg.deform_groups = 2;
    cfg.extractor_blocks = 1;
    cfg.transformer = {.window = 2, .heads = 2, .channels = ch, .depth = 1};
    cfg.taylor = {.order = 2};
    return cfg;
}

template <typename T>
std::array<Tensor<T>, 4> random_frames(int B, int H, int W, std::mt19937& rng) {
    std::array<Tensor<T>, 4> fr;
    for (auto& f : fr) f = random_tensor<T>({B, 3, H, W}, rng, T(0), T(1));
    return fr;
}

}  // namespace

TEST(Pipeline, Times2ModeProducesThreeFrames) {
    BvfiModel<float> model(micro_config(), 1);
    std::mt19937 rng(2);
    auto frames = random_frames<float>(1, 16, 16, rng);
    auto out = model.forward(frames, {0.5});
    ASSERT_EQ(out.size(), 3u);
    for (const auto& o : out) {
        EXPECT_EQ(o.shape(), (Shape{1, 3, 16, 16}));
        for (long long i = 0; i < o.numel(); ++i) {
            EXPECT_GE(o.ptr()[i], 0.0f);
            EXPECT_LE(o.ptr()[i], 1.0f);
        }
    }
}

TEST(Pipeline, Times8ModeProducesNineFrames) {
    BvfiModel<float> model(micro_config(), 3);
    std::mt19937 rng(4);
    auto frames = random_frames<float>(1, 16, 16, rng);
    std::vector<double> times;
    for (int k = 1; k <= 7; ++k) times.push_back(k / 8.0);
    auto out = model.forward(frames, times);
    EXPECT_EQ(out.size(), 9u);
}

TEST(Pipeline, RejectsBadInputs) {
    BvfiModel<float> model(micro_config(), 5);
    std::mt19937 rng(6);
    auto frames = random_frames<float>(1, 16, 16, rng);
    EXPECT_THROW(model.forward(frames, {1.5}), std::runtime_error);      // t out of range
    EXPECT_THROW(model.forward(frames, {0.75, 0.25}), std::runtime_error);  // unsorted
    auto bad = frames;
    bad[2] = Tensor<float>::zeros({1, 3, 8, 8});
    EXPECT_THROW(model.forward(bad, {0.5}), std::runtime_error);  // shape mismatch
    auto odd = random_frames<float>(1, 10, 10, rng);
    EXPECT_THROW(model.forward(odd, {0.5}), std::runtime_error);  // not divisible by 4
}

TEST(Pipeline, ParameterBudgetUnderPaperFigure) {
    // Desk-scale default must stay below the paper-scale 5.04M parameters.
    BvfiModel<float> model(ModelConfig{}, 7);
    long long n = model.param_count();
    std::printf("default model trainable parameters: %lld\n", n);
    EXPECT_GT(n, 100000);
    EXPECT_LT(n, 5040000);
}

TEST(Pipeline, DeterministicConstructionAndForward) {
    auto run = [] {
        BvfiModel<float> model(micro_config(), 42);
        std::mt19937 rng(43);
        auto frames = random_frames<float>(1, 16, 16, rng);
        return model.forward(frames, {0.5});
    };
    auto a = run(), b = run();
    for (size_t i = 0; i < a.size(); ++i)
        for (long long j = 0; j < a[i].numel(); ++j) ASSERT_EQ(a[i].ptr()[j], b[i].ptr()[j]);
}

TEST(Pipeline, EndToEndGradcheckMicroConfig) {
    ModelConfig cfg = micro_config();
    BvfiModel<double> model(cfg, 8);
    std::mt19937 rng(9);
    auto f0 = random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto f1 = random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto f2 = random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto f3 = random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto rep = gradcheck(
        [&] {
            auto out = model.forward({f0, f1, f2, f3}, {0.5}, /*clamp_output=*/false);
            Tensor<double> loss = projection_loss(out[0], 91);
            loss = add(loss, projection_loss(out[1], 92));
            return add(loss, projection_loss(out[2], 93));
        },
        {f0, f1, f2, f3});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(Pipeline, EveryParameterReceivesGradient) {
    ModelConfig cfg = micro_config();
    BvfiModel<float> model(cfg, 10);
    std::mt19937 rng(11);
    auto frames = random_frames<float>(1, 16, 16, rng);
    auto out = model.forward(frames, {0.5}, false);
    Tensor<float> loss = sum(out[0]);
    for (size_t i = 1; i < out.size(); ++i) loss = add(loss, sum(out[i]));
    backward(loss);
    int dead = 0;
    for (auto& [name, p] : model.params()) {
        bool nonzero = false;
        if (p.has_grad())
            for (float g : p.grad())
                if (g != 0.0f) nonzero = true;
        if (!nonzero) {
            ++dead;
            ADD_FAILURE() << "parameter with no gradient: " << name;
        }
    }
    EXPECT_EQ(dead, 0);
}

TEST(InterpolateVideo, SingleWindowCounts) {
    BvfiModel<float> model(micro_config(), 12);
    std::mt19937 rng(13);
    FrameSequence video;
    video.fps = 30;
    for (int i = 0; i < 4; ++i) {
        video.frames.push_back(random_tensor<float>({3, 16, 16}, rng, 0.0f, 1.0f));
        video.timestamps.push_back(i / 30.0);
    }
    auto out = model.interpolate_video(video, 2);
    // 3 pairs × 2 + trailing endpoint.
    EXPECT_EQ(out.frames.size(), 7u);
    EXPECT_DOUBLE_EQ(out.fps, 60.0);
    // Timestamps uniformly spaced at 1/factor of the input spacing.
    for (size_t i = 1; i < out.timestamps.size(); ++i)
        EXPECT_NEAR(out.timestamps[i] - out.timestamps[i - 1], 1.0 / 60.0, 1e-12);
}

TEST(InterpolateVideo, TooShortSequenceThrows) {
    BvfiModel<float> model(micro_config(), 14);
    FrameSequence video;
    for (int i = 0; i < 3; ++i) video.frames.push_back(Tensor<float>::zeros({3, 16, 16}));
    EXPECT_THROW(model.interpolate_video(video, 2), std::runtime_error);
}

TEST(InterpolateVideo, NonMultipleOfFourSizesArePaddedInternally) {
    BvfiModel<float> model(micro_config(), 15);
    std::mt19937 rng(16);
    FrameSequence video;
    for (int i = 0; i < 4; ++i) video.frames.push_back(random_tensor<float>({3, 14, 18}, rng, 0.0f, 1.0f));
    auto out = model.interpolate_video(video, 2);
    EXPECT_EQ(out.frames.size(), 7u);
    EXPECT_EQ(out.frames[0].shape(), (Shape{3, 14, 18}));
}
