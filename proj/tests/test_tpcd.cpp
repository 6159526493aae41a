#include <gtest/gtest.h>

#include <random>

#include "bvfi/gradcheck.hpp"
#include "bvfi/tpcd.hpp"

using namespace bvfi;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (long long i = 0; i < a.numel(); ++i) m = std::max(m, (double)std::abs(a.ptr()[i] - b.ptr()[i]));
    return m;
}

template <typename T>
struct TpcdRig {
    Params<T> params;
    PyramidBuilder<T> pyramid;
    Tpcd<T> tpcd;
    TpcdRig(int ch, int groups, unsigned seed) {
        std::mt19937 rng(seed);
        pyramid = PyramidBuilder<T>(params, "pyr", ch, rng);
        tpcd = Tpcd<T>(params, "tpcd", ch, groups, 3, rng);
    }
};

}  // namespace

TEST(Pyramid, LevelShapesHalve) {
    TpcdRig<float> rig(8, 2, 1);
    std::mt19937 rng(2);
    auto f = random_tensor<float>({1, 8, 16, 16}, rng);
    auto pyr = rig.pyramid.build(f);
    EXPECT_EQ(pyr.level[0].shape(), (Shape{1, 8, 16, 16}));
    EXPECT_EQ(pyr.level[1].shape(), (Shape{1, 8, 8, 8}));
    EXPECT_EQ(pyr.level[2].shape(), (Shape{1, 8, 4, 4}));
}

TEST(Pyramid, ConstantInputStaysFinite) {
    TpcdRig<float> rig(8, 2, 3);
    auto f = Tensor<float>::full({1, 8, 16, 16}, 0.5f);
    auto pyr = rig.pyramid.build(f);
    for (int l = 0; l < 3; ++l) EXPECT_TRUE(pyr.level[l].all_finite());
}

TEST(Pyramid, IndivisibleDimsThrow) {
    TpcdRig<float> rig(8, 2, 4);
    auto f = Tensor<float>::zeros({1, 8, 10, 16});
    EXPECT_THROW(rig.pyramid.build(f), std::runtime_error);
}

TEST(Pyramid, GradcheckThroughAllLevels) {
    TpcdRig<double> rig(4, 2, 5);
    std::mt19937 rng(6);
    auto f = random_tensor<double>({1, 4, 8, 8}, rng);
    auto rep = gradcheck(
        [&] {
            auto pyr = rig.pyramid.build(f);
            return add(add(projection_loss(pyr.level[0], 31), projection_loss(pyr.level[1], 32)),
                       projection_loss(pyr.level[2], 33));
        },
        {f});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(EstimateOffsets, OffsetChannelCountIs144ForPaperConfig) {
    // 8 groups × 3×3 kernel = 72 offset vectors = 144 scalar channels.
    TpcdRig<float> rig(16, 8, 7);
    std::mt19937 rng(8);
    auto f = random_tensor<float>({1, 16, 16, 16}, rng);
    auto pyr = rig.pyramid.build(f);
    for (int l = 0; l < 3; ++l) {
        auto fields = rig.tpcd.estimate_offsets(l, pyr.level[l], pyr.level[l], 0.5f,
                                                l == 2 ? std::nullopt
                                                       : std::make_optional(FieldPair<float>{
                                                             Tensor<float>::zeros({1, 144, pyr.level[l].dim(2) / 2,
                                                                                   pyr.level[l].dim(3) / 2}),
                                                             Tensor<float>::zeros({1, 72, pyr.level[l].dim(2) / 2,
                                                                                   pyr.level[l].dim(3) / 2})}));
        EXPECT_EQ(fields.first.dim(1), 144) << "level " << l;
        EXPECT_EQ(fields.second.dim(1), 72) << "level " << l;
    }
}

TEST(EstimateOffsets, OutputDependsOnTimeParameter) {
    TpcdRig<float> rig(8, 2, 9);
    // Zero-initialized heads ignore everything; randomize them so the
    // estimator is a generic function of its input, then vary only t.
    std::mt19937 rng(10);
    for (const char* level : {"1", "2", "3"})
        for (const char* head : {".offset.weight", ".mask.weight"}) {
            auto& w = rig.params.at(std::string("tpcd.est") + level + head);
            std::uniform_real_distribution<double> d(-0.1, 0.1);
            for (auto& v : w.data()) v = (float)d(rng);
        }
    auto f0 = random_tensor<float>({1, 8, 8, 8}, rng);
    auto f1 = random_tensor<float>({1, 8, 8, 8}, rng);
    auto a = rig.tpcd.estimate_offsets(2, f0, f1, 0.0f, std::nullopt);
    auto b = rig.tpcd.estimate_offsets(2, f0, f1, 1.0f, std::nullopt);
    EXPECT_GT(max_abs_diff(a.first, b.first), 1e-6);
}

TEST(EstimateOffsets, CascadeRescalingDoublesOffsets) {
    auto dp = Tensor<float>::full({1, 4, 3, 3}, 1.25f);
    auto dm = Tensor<float>::full({1, 2, 3, 3}, 0.5f);
    auto [up_dp, up_dm] = Tpcd<float>::upsample_fields({dp, dm});
    ASSERT_EQ(up_dp.shape(), (Shape{1, 4, 6, 6}));
    for (long long i = 0; i < up_dp.numel(); ++i) EXPECT_FLOAT_EQ(up_dp.ptr()[i], 2.5f);
    for (long long i = 0; i < up_dm.numel(); ++i) EXPECT_FLOAT_EQ(up_dm.ptr()[i], 0.5f);
}

TEST(TpcdAlign, OutputShapeEqualsLevel1Input) {
    TpcdRig<float> rig(8, 4, 11);
    std::mt19937 rng(12);
    auto f0 = rig.pyramid.build(random_tensor<float>({2, 8, 16, 12}, rng));
    auto f1 = rig.pyramid.build(random_tensor<float>({2, 8, 16, 12}, rng));
    auto a = rig.tpcd.align(f0, f1, 0.25f);
    EXPECT_EQ(a.shape(), (Shape{2, 8, 16, 12}));
}

TEST(TpcdAlign, ZeroInitFieldsBehaveLikePlainConvs) {
    // Freshly constructed offset/mask heads are zero: sampling starts on the
    // plain grid and the cascade must be finite and reproducible.
    TpcdRig<float> rig(8, 4, 13);
    std::mt19937 rng(14);
    auto f0 = rig.pyramid.build(random_tensor<float>({1, 8, 16, 16}, rng));
    auto f1 = rig.pyramid.build(random_tensor<float>({1, 8, 16, 16}, rng));
    auto a = rig.tpcd.align(f0, f1, 0.5f);
    EXPECT_TRUE(a.all_finite());
}

TEST(TpcdAlign, GradcheckEndToEnd) {
    TpcdRig<double> rig(4, 2, 15);
    std::mt19937 rng(16);
    auto x0 = random_tensor<double>({1, 4, 8, 8}, rng);
    auto x1 = random_tensor<double>({1, 4, 8, 8}, rng);
    auto rep = gradcheck(
        [&] {
            auto p0 = rig.pyramid.build(x0);
            auto p1 = rig.pyramid.build(x1);
            return projection_loss(rig.tpcd.align(p0, p1, 0.3), 41);
        },
        {x0, x1}, 1e-4, 1e-4);
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(Interpolate, ArbitraryTimesGiveFixedShapeFiniteFeatures) {
    TpcdRig<float> rig(8, 4, 17);
    std::mt19937 rng(18);
    auto p0 = rig.pyramid.build(random_tensor<float>({1, 8, 16, 16}, rng));
    auto p1 = rig.pyramid.build(random_tensor<float>({1, 8, 16, 16}, rng));
    long long params_before = rig.params.count_scalars();
    // ×8 mode: t ∈ {1/8..7/8}; also probe endpoints and an irrational-ish t.
    std::vector<float> times;
    for (int k = 1; k <= 7; ++k) times.push_back(k / 8.0f);
    times.insert(times.end(), {0.0f, 1.0f, 0.123456f});
    for (float t : times) {
        auto ft = rig.tpcd.interpolate(p0, p1, t);
        EXPECT_EQ(ft.shape(), (Shape{1, 8, 16, 16}));
        EXPECT_TRUE(ft.all_finite());
    }
    // Re-invocation per t: parameter count does not grow with time points.
    EXPECT_EQ(rig.params.count_scalars(), params_before);
}

TEST(Interpolate, OutOfRangeTimeThrows) {
    TpcdRig<float> rig(8, 4, 19);
    std::mt19937 rng(20);
    auto p = rig.pyramid.build(random_tensor<float>({1, 8, 8, 8}, rng));
    EXPECT_THROW(rig.tpcd.interpolate(p, p, 1.5f), std::runtime_error);
}

TEST(Interpolate, GradientsReachBothSourceFrames) {
    TpcdRig<float> rig(8, 4, 21);
    std::mt19937 rng(22);
    auto x0 = random_tensor<float>({1, 8, 8, 8}, rng).set_requires_grad(true);
    auto x1 = random_tensor<float>({1, 8, 8, 8}, rng).set_requires_grad(true);
    auto p0 = rig.pyramid.build(x0);
    auto p1 = rig.pyramid.build(x1);
    backward(sum(rig.tpcd.interpolate(p0, p1, 0.3f)));
    auto nonzero = [](const std::vector<float>& g) {
        for (float v : g)
            if (v != 0.0f) return true;
        return false;
    };
    EXPECT_TRUE(x0.has_grad() && nonzero(x0.grad()));
    EXPECT_TRUE(x1.has_grad() && nonzero(x1.grad()));
}

TEST(Interpolate, SwapSymmetryAtTiedFusionWeights) {
    // With the fusion ingest blocks tied, swapping (F0,F1) and t→1−t
    // permutes the fusion inputs and the output is unchanged.
    TpcdRig<double> rig(4, 2, 23);
    auto& w = rig.params.at("tpcd.fuse.c1.weight");  // (C, 2C, 1, 1)
    int C = 4;
    for (int o = 0; o < C; ++o)
        for (int i = 0; i < C; ++i) w.data()[(size_t)o * 2 * C + C + i] = w.data()[(size_t)o * 2 * C + i];
    std::mt19937 rng(24);
    auto p0 = rig.pyramid.build(random_tensor<double>({1, 4, 8, 8}, rng));
    auto p1 = rig.pyramid.build(random_tensor<double>({1, 4, 8, 8}, rng));
    auto a = rig.tpcd.interpolate(p0, p1, 0.25);
    auto b = rig.tpcd.interpolate(p1, p0, 0.75);
    EXPECT_LT(max_abs_diff(a, b), 1e-12);
}
