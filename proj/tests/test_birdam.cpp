#include <gtest/gtest.h>

#include <random>

#include "bvfi/birdam.hpp"
#include "bvfi/gradcheck.hpp"

using namespace bvfi;

namespace {

template <typename T>
SequenceFeatures<T> random_sequence(int n, Shape shape, std::mt19937& rng) {
    SequenceFeatures<T> seq;
    seq.spacing = T(0.5);
    for (int i = 0; i < n; ++i) seq.features.push_back(random_tensor<T>(shape, rng));
    return seq;
}

template <typename T>
bool any_nonzero(const std::vector<T>& v) {
    for (T x : v)
        if (x != T(0)) return true;
    return false;
}

}  // namespace

TEST(Rdau, ZeroHiddenBoundaryIsFiniteAndShaped) {
    std::mt19937 rng(1);
    Params<float> params;
    Rdau<float> rdau(params, "rdau", 8, 4, 3, rng);
    auto f = random_tensor<float>({2, 8, 8, 8}, rng);
    auto o = rdau.step(f, Tensor<float>::zeros({2, 8, 8, 8}));
    EXPECT_EQ(o.hidden.shape(), f.shape());
    EXPECT_EQ(o.current.shape(), f.shape());
    EXPECT_TRUE(o.hidden.all_finite());
    EXPECT_TRUE(o.current.all_finite());
}

TEST(Rdau, ShapeMismatchThrows) {
    std::mt19937 rng(2);
    Params<float> params;
    Rdau<float> rdau(params, "rdau", 8, 4, 3, rng);
    auto f = Tensor<float>::zeros({1, 8, 8, 8});
    EXPECT_THROW(rdau.step(f, Tensor<float>::zeros({1, 8, 4, 4})), std::runtime_error);
}

TEST(Rdau, GradcheckOneCell) {
    std::mt19937 rng(3);
    Params<double> params;
    Rdau<double> rdau(params, "rdau", 4, 2, 3, rng);
    auto f = random_tensor<double>({1, 4, 6, 6}, rng);
    auto h = random_tensor<double>({1, 4, 6, 6}, rng);
    auto rep = gradcheck(
        [&] {
            auto o = rdau.step(f, h);
            return add(projection_loss(o.hidden, 51), projection_loss(o.current, 52));
        },
        {f, h});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}

TEST(BiRdam, EmptySequenceThrows) {
    std::mt19937 rng(4);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 8, 4, 3, rng);
    SequenceFeatures<float> seq;
    EXPECT_THROW(bi.fuse(seq), std::runtime_error);
}

TEST(BiRdam, LengthOneFusesTheSameCurrentTwice) {
    std::mt19937 rng(5);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 8, 4, 3, rng);
    auto f = random_tensor<float>({1, 8, 8, 8}, rng);
    SequenceFeatures<float> seq;
    seq.features = {f};
    auto out = bi.fuse(seq);
    ASSERT_EQ(out.features.size(), 1u);
    auto c = bi.rdau().step(f, Tensor<float>::zeros(f.shape())).current;
    auto expect = bi.fuse_currents(c, c);
    for (long long i = 0; i < expect.numel(); ++i) ASSERT_EQ(out.features[0].ptr()[i], expect.ptr()[i]);
}

TEST(BiRdam, ReversalEquivarianceIsBitExact) {
    std::mt19937 rng(6);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 8, 4, 3, rng);
    auto seq = random_sequence<float>(4, {1, 8, 8, 8}, rng);
    auto rev = seq;
    std::reverse(rev.features.begin(), rev.features.end());
    auto out = bi.fuse(seq);
    auto out_rev = bi.fuse(rev);
    for (size_t i = 0; i < out.features.size(); ++i) {
        const auto& a = out.features[i];
        const auto& b = out_rev.features[out.features.size() - 1 - i];
        for (long long j = 0; j < a.numel(); ++j)
            ASSERT_EQ(a.ptr()[j], b.ptr()[j]) << "position " << i << " element " << j;
    }
}

TEST(BiRdam, JacobianNonzeroBetweenEveryFramePair) {
    std::mt19937 rng(7);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 4, 2, 3, rng);
    const int n = 5;
    for (int k = 0; k < n; ++k) {
        std::mt19937 seq_rng(100);
        std::vector<Tensor<float>> inputs;
        SequenceFeatures<float> seq;
        for (int i = 0; i < n; ++i) {
            auto f = random_tensor<float>({1, 4, 6, 6}, seq_rng).set_requires_grad(true);
            inputs.push_back(f);
            seq.features.push_back(f);
        }
        backward(sum(bi.fuse(seq).features[k]));
        for (int j = 0; j < n; ++j)
            EXPECT_TRUE(inputs[j].has_grad() && any_nonzero(inputs[j].grad()))
                << "no gradient path from output " << k << " to input " << j;
    }
}

TEST(BiRdam, ParameterCountIndependentOfSequenceLength) {
    std::mt19937 rng(8);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 8, 4, 3, rng);
    long long before = params.count_scalars();
    for (int n : {1, 3, 7}) {
        std::mt19937 r2(9);
        auto seq = random_sequence<float>(n, {1, 8, 8, 8}, r2);
        auto out = bi.fuse(seq);
        EXPECT_EQ(out.features.size(), (size_t)n);
    }
    EXPECT_EQ(params.count_scalars(), before);
}

TEST(BiRdam, AblationVariantsConstructAndRun) {
    // Table-style ablation grid: {short,long} × {no-align,align}.
    struct Case {
        bool long_term, align;
    } cases[] = {{false, false}, {false, true}, {true, false}, {true, true}};
    for (auto c : cases) {
        std::mt19937 rng(10);
        Params<float> params;
        BiRdam<float> bi(params, "bi", 8, 4, 3, rng, {.align = c.align, .long_term = c.long_term});
        std::mt19937 r2(11);
        auto seq = random_sequence<float>(4, {1, 8, 8, 8}, r2);
        auto out = bi.fuse(seq);
        ASSERT_EQ(out.features.size(), 4u);
        for (const auto& f : out.features) EXPECT_TRUE(f.all_finite());
    }
}

TEST(BiRdam, ShortTermLimitsTemporalReach) {
    // Window-3 fusion: output k must not see inputs beyond k±1.
    std::mt19937 rng(12);
    Params<float> params;
    BiRdam<float> bi(params, "bi", 4, 2, 3, rng, {.align = true, .long_term = false});
    const int n = 5, k = 2;
    std::mt19937 seq_rng(13);
    std::vector<Tensor<float>> inputs;
    SequenceFeatures<float> seq;
    for (int i = 0; i < n; ++i) {
        auto f = random_tensor<float>({1, 4, 6, 6}, seq_rng).set_requires_grad(true);
        inputs.push_back(f);
        seq.features.push_back(f);
    }
    backward(sum(bi.fuse(seq).features[k]));
    EXPECT_TRUE(inputs[1].has_grad() && any_nonzero(inputs[1].grad()));
    EXPECT_TRUE(inputs[3].has_grad() && any_nonzero(inputs[3].grad()));
    EXPECT_FALSE(inputs[0].has_grad() && any_nonzero(inputs[0].grad()));
    EXPECT_FALSE(inputs[4].has_grad() && any_nonzero(inputs[4].grad()));
}

TEST(BiRdam, GradcheckThroughShortSequence) {
    std::mt19937 rng(14);
    Params<double> params;
    BiRdam<double> bi(params, "bi", 4, 2, 3, rng);
    auto a = random_tensor<double>({1, 4, 6, 6}, rng);
    auto b = random_tensor<double>({1, 4, 6, 6}, rng);
    auto rep = gradcheck(
        [&] {
            SequenceFeatures<double> seq;
            seq.features = {a, b};
            auto out = bi.fuse(seq);
            return add(projection_loss(out.features[0], 61), projection_loss(out.features[1], 62));
        },
        {a, b});
    EXPECT_TRUE(rep.pass) << rep.max_rel_err << " at " << rep.worst;
}
