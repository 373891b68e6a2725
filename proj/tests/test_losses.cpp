#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <lrq/lrq.hpp>

using namespace lrq;

namespace {

template <typename T>
ForwardCaptureT<T> capture_from(const std::vector<std::vector<T>>& means,
                                const std::vector<std::vector<T>>& sigmas) {
    ForwardCaptureT<T> c;
    for (size_t k = 0; k < means.size(); ++k) {
        c.bn_mean.push_back(TensorT<T>::from_data({static_cast<int64_t>(means[k].size())},
                                                  means[k]));
        c.bn_sigma.push_back(TensorT<T>::from_data({static_cast<int64_t>(sigmas[k].size())},
                                                   sigmas[k]));
    }
    return c;
}

}  // namespace

TEST(StatsLoss, MatchedStatisticsGiveExactZero) {
    std::vector<BNStatsT<float>> target = {{{0.5f, -1.0f}, {1.0f, 2.0f}},
                                           {{3.0f}, {0.25f}}};
    auto cap = capture_from<float>({{0.5f, -1.0f}, {3.0f}}, {{1.0f, 2.0f}, {0.25f}});
    EXPECT_EQ(bns_loss(cap, target).item(), 0.0f);
}

TEST(StatsLoss, SquaredDistanceHandValues) {
    std::vector<BNStatsT<float>> target = {{{1.0f}, {2.0f}}};
    auto cap = capture_from<float>({{4.0f}}, {{2.0f}});
    EXPECT_FLOAT_EQ(bns_loss(cap, target).item(), 9.0f);  // (4-1)^2

    auto cap2 = capture_from<float>({{4.0f}}, {{2.5f}});
    EXPECT_FLOAT_EQ(bns_loss(cap2, target).item(), 9.25f);  // 9 + 0.5^2

    // layers accumulate
    std::vector<BNStatsT<float>> target2 = {{{1.0f}, {2.0f}}, {{0.0f, 0.0f}, {1.0f, 1.0f}}};
    auto cap3 = capture_from<float>({{4.0f}, {1.0f, 2.0f}}, {{2.0f}, {1.0f, 3.0f}});
    EXPECT_FLOAT_EQ(bns_loss(cap3, target2).item(), 9.0f + 1.0f + 4.0f + 4.0f);
}

TEST(StatsLoss, StructureMismatchRejected) {
    std::vector<BNStatsT<float>> target = {{{1.0f}, {2.0f}}};
    auto wrong_layers = capture_from<float>({{1.0f}, {1.0f}}, {{2.0f}, {2.0f}});
    EXPECT_THROW(bns_loss(wrong_layers, target), ConfigError);
    auto wrong_width = capture_from<float>({{1.0f, 1.0f}}, {{2.0f, 2.0f}});
    EXPECT_THROW(bns_loss(wrong_width, target), ConfigError);
}

namespace {

/// Independent double-precision reference for the hinge corridor value of a
/// single feature/center pair.
double ama_reference(const std::vector<double>& f, const std::vector<double>& c, double margin,
                     double lo, double hi) {
    double dot = 0, fn = 0, cn = 0;
    for (size_t i = 0; i < f.size(); ++i) {
        dot += f[i] * c[i];
        fn += f[i] * f[i];
        cn += c[i] * c[i];
    }
    double cosv = dot / (std::sqrt(fn + 1e-24) * std::sqrt(cn + 1e-24));
    cosv = std::clamp(cosv, -(1.0 - 1e-7), 1.0 - 1e-7);
    const double shifted = std::clamp(std::acos(cosv) + margin, 0.0, std::acos(-1.0));
    const double cs = std::cos(shifted);
    return std::max(0.0, lo - cs) + std::max(0.0, cs - hi);
}

ClassCenters<float> single_center(const std::vector<float>& c, int cls, int num_classes) {
    ClassCenters<float> out;
    out.centers = Tensor::from_data({1, static_cast<int64_t>(c.size())}, c);
    out.class_ids = {cls};
    out.counts = {1};
    out.row_of_class.assign(num_classes, -1);
    out.row_of_class[cls] = 0;
    return out;
}

}  // namespace

TEST(MarginLoss, AlignedPairBelowCorridor) {
    // feature on its own center: theta ~ 0, cos(0 + 0.6) = 0.8253 < 0.85
    auto centers = single_center({3.0f, 4.0f}, 1, 3);
    auto f = Tensor::from_data({1, 2}, {3.0f, 4.0f});
    AMAConfig cfg;
    cfg.margin = 0.6f;
    cfg.lambda_lower = 0.85f;
    cfg.lambda_upper = 0.95f;
    const float got = ama_loss(f, centers, {1}, cfg).item();
    EXPECT_NEAR(got, 0.85 - std::cos(0.6), 1e-3);
    // exactly aligned features sit on the acos clamp, where d(acos)/d(cos) is
    // ~2e3: float evaluation can differ from the double reference by ~1e-4
    EXPECT_NEAR(got, ama_reference({3, 4}, {3, 4}, 0.6, 0.85, 0.95), 1e-4);
}

TEST(MarginLoss, InsideCorridorIsExactlyZero) {
    // theta = 45 deg, margin 0.1: cos(0.885) ~ 0.633 inside [0.0, 0.9]
    auto centers = single_center({1.0f, 1.0f}, 0, 2);
    auto f = Tensor::from_data({1, 2}, {1.0f, 0.0f});
    AMAConfig cfg;
    cfg.margin = 0.1f;
    cfg.lambda_lower = 0.0f;
    cfg.lambda_upper = 0.9f;
    EXPECT_EQ(ama_loss(f, centers, {0}, cfg).item(), 0.0f);
}

TEST(MarginLoss, AboveCorridorPenalized) {
    // theta = 45 deg, no margin: cos = 0.7071 > upper bound 0.5
    auto centers = single_center({1.0f, 1.0f}, 0, 2);
    auto f = Tensor::from_data({1, 2}, {1.0f, 0.0f});
    AMAConfig cfg;
    cfg.margin = 0.0f;
    cfg.lambda_lower = -0.5f;
    cfg.lambda_upper = 0.5f;
    EXPECT_NEAR(ama_loss(f, centers, {0}, cfg).item(),
                ama_reference({1, 0}, {1, 1}, 0.0, -0.5, 0.5), 1e-5);
    EXPECT_GT(ama_loss(f, centers, {0}, cfg).item(), 0.0f);
}

TEST(MarginLoss, ScaleInvariance) {
    auto centers = single_center({0.5f, -2.0f, 1.0f}, 0, 1);
    auto f = Tensor::from_data({1, 3}, {1.0f, 0.25f, -0.75f});
    AMAConfig cfg;
    const float base = ama_loss(f, centers, {0}, cfg).item();
    const float scaled = ama_loss(mul_scalar(f, 4.0f), centers, {0}, cfg).item();
    EXPECT_FLOAT_EQ(base, scaled);
}

TEST(MarginLoss, RandomBatchesMatchReferenceAndStayNonnegative) {
    RandomEngine rng(17);
    AMAConfig cfg;
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> fd(4), cd(4);
        std::vector<float> ff(4), cf(4);
        for (int i = 0; i < 4; ++i) {
            fd[i] = rng.normal();
            cd[i] = rng.normal();
            ff[i] = static_cast<float>(fd[i]);
            cf[i] = static_cast<float>(cd[i]);
        }
        auto centers = single_center(cf, 0, 1);
        auto f = Tensor::from_data({1, 4}, ff);
        const float got = ama_loss(f, centers, {0}, cfg).item();
        EXPECT_GE(got, 0.0f);
        EXPECT_NEAR(got, ama_reference(fd, cd, cfg.margin, cfg.lambda_lower, cfg.lambda_upper),
                    2e-4);
    }
}

TEST(MarginLoss, Validation) {
    auto centers = single_center({1.0f, 0.0f}, 0, 2);
    auto f = Tensor::from_data({1, 2}, {1.0f, 0.0f});
    AMAConfig bad;
    bad.margin = -0.1f;
    EXPECT_THROW(ama_loss(f, centers, {0}, bad), ConfigError);
    bad = AMAConfig{};
    bad.lambda_lower = 0.95f;
    bad.lambda_upper = 0.75f;
    EXPECT_THROW(ama_loss(f, centers, {0}, bad), ConfigError);
    bad = AMAConfig{};
    bad.lambda_upper = 1.5f;
    EXPECT_THROW(ama_loss(f, centers, {0}, bad), ConfigError);

    AMAConfig ok;
    EXPECT_THROW(ama_loss(f, centers, {1}, ok), ConfigError);  // class 1 has no center
    EXPECT_THROW(ama_loss(Tensor::from_data({2}, {1.0f, 0.0f}), centers, {0}, ok), ShapeError);
    EXPECT_THROW(ama_loss(f, centers, {0, 0}, ok), ShapeError);
}

TEST(CenterBank, EmaUpdateHandValues) {
    CenterBank<float> bank(3, 2, 0.9f);
    EXPECT_FALSE(bank.has(0));
    bank.update(Tensor::from_data({1, 2}, {1.0f, 2.0f}), {0});
    ASSERT_TRUE(bank.has(0));
    auto snap = bank.snapshot({0});
    EXPECT_FLOAT_EQ(snap.centers.values()[0], 1.0f);  // first sighting copies
    EXPECT_FLOAT_EQ(snap.centers.values()[1], 2.0f);

    bank.update(Tensor::from_data({1, 2}, {3.0f, 4.0f}), {0});
    snap = bank.snapshot({0});
    EXPECT_FLOAT_EQ(snap.centers.values()[0], 0.9f * 1.0f + 0.1f * 3.0f);
    EXPECT_FLOAT_EQ(snap.centers.values()[1], 0.9f * 2.0f + 0.1f * 4.0f);

    // batch mean feeds the update when a class repeats within a batch
    bank.update(Tensor::from_data({2, 2}, {1.0f, 1.0f, 3.0f, 3.0f}), {1, 1});
    snap = bank.snapshot({1});
    EXPECT_FLOAT_EQ(snap.centers.values()[0], 2.0f);

    EXPECT_THROW(bank.snapshot({2}), ConfigError);
    EXPECT_THROW(CenterBank<float>(3, 2, 1.0f), ConfigError);
    EXPECT_THROW(CenterBank<float>(3, 2, -0.1f), ConfigError);
}

namespace {

/// Plain temperature-softened KL divergence KL(p_t || p_s) * T^2, computed
/// directly from the definition.
double kl_reference(const std::vector<double>& t_logits, const std::vector<double>& s_logits,
                    double temp) {
    const size_t k = t_logits.size();
    std::vector<double> pt(k), ps(k);
    auto softmax_into = [&](const std::vector<double>& z, std::vector<double>& p) {
        double mx = z[0] / temp;
        for (size_t j = 1; j < k; ++j) mx = std::max(mx, z[j] / temp);
        double denom = 0;
        for (size_t j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] / temp - mx);
            denom += p[j];
        }
        for (auto& v : p) v /= denom;
    };
    softmax_into(t_logits, pt);
    softmax_into(s_logits, ps);
    double kl = 0;
    for (size_t j = 0; j < k; ++j)
        if (pt[j] > 0) kl += pt[j] * (std::log(pt[j]) - std::log(ps[j]));
    return kl * temp * temp;
}

}  // namespace

TEST(Distillation, DecompositionMatchesPlainKL) {
    RandomEngine rng(23);
    for (double temp : {1.0, 4.0}) {
        DKDConfigT<double> cfg;
        cfg.temperature = temp;
        for (int rep = 0; rep < 10; ++rep) {
            const int64_t bsz = 4, k = 6;
            auto s = TensorT<double>::rand_uniform({bsz, k}, rng, -3.0, 3.0);
            auto t = TensorT<double>::rand_uniform({bsz, k}, rng, -3.0, 3.0);
            std::vector<int> labels(bsz);
            for (auto& y : labels) y = static_cast<int>(rng.uniform_int(0, k - 1));

            auto per = dkd_per_sample(s, t, labels, cfg);
            for (int64_t i = 0; i < bsz; ++i) {
                std::vector<double> sl(s.values().begin() + i * k,
                                       s.values().begin() + (i + 1) * k);
                std::vector<double> tl(t.values().begin() + i * k,
                                       t.values().begin() + (i + 1) * k);
                const double ref = kl_reference(tl, sl, temp);
                const double got = per.tckd.values()[i] +
                                   (1.0 - per.teacher_target_prob[i]) * per.nckd.values()[i];
                EXPECT_NEAR(got, ref, 1e-6) << "temp " << temp << " rep " << rep;
            }
        }
    }
}

TEST(Distillation, IdenticalLogitsGiveZero) {
    RandomEngine rng(29);
    DKDConfigT<double> cfg;
    cfg.temperature = 4.0;
    auto s = TensorT<double>::rand_uniform({5, 4}, rng, -2.0, 2.0);
    auto t = TensorT<double>::from_data(s.shape(), s.values());
    auto per = dkd_per_sample(s, t, {0, 1, 2, 3, 0}, cfg);
    for (int64_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(per.tckd.values()[i], 0.0, 1e-9);
        EXPECT_NEAR(per.nckd.values()[i], 0.0, 1e-9);
    }
    auto terms = dkd_loss(s, t, {0, 1, 2, 3, 0}, cfg);
    EXPECT_NEAR(terms.total.item(), 0.0, 1e-9);
}

TEST(Distillation, TermWeighting) {
    RandomEngine rng(31);
    auto s = TensorT<double>::rand_uniform({3, 5}, rng, -2.0, 2.0);
    auto t = TensorT<double>::rand_uniform({3, 5}, rng, -2.0, 2.0);
    std::vector<int> labels = {0, 2, 4};

    DKDConfigT<double> cfg;
    cfg.alpha = 0.0;
    cfg.beta = 8.0;
    auto only_n = dkd_loss(s, t, labels, cfg);
    EXPECT_NEAR(only_n.total.item(), 8.0 * only_n.nckd_mean.item(), 1e-12);

    cfg.alpha = 1.0;
    cfg.beta = 0.0;
    auto only_t = dkd_loss(s, t, labels, cfg);
    EXPECT_NEAR(only_t.total.item(), only_t.tckd_mean.item(), 1e-12);
}

TEST(Distillation, ConfidentTeacherIsFiniteWithZeroNonTargetTerm) {
    DKDConfigT<float> cfg;
    auto t = Tensor::from_data({1, 3}, {60.0f, 0.0f, 0.0f});  // p_t ~ one-hot
    auto s = Tensor::from_data({1, 3}, {0.5f, 0.2f, -0.1f});
    auto per = dkd_per_sample(s, t, {0}, cfg);
    EXPECT_TRUE(per.tckd.all_finite());
    EXPECT_EQ(per.nckd.values()[0], 0.0f);
    EXPECT_NEAR(per.teacher_target_prob[0], 1.0f, 1e-6);
}

TEST(Distillation, Validation) {
    auto s = Tensor::from_data({2, 3}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
    auto t = Tensor::from_data({2, 3}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
    DKDConfig cfg;
    EXPECT_THROW(dkd_per_sample(s, Tensor::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f}), {0, 1}, cfg),
                 ShapeError);
    EXPECT_THROW(dkd_per_sample(s, t, {0}, cfg), ShapeError);
    EXPECT_THROW(dkd_per_sample(s, t, {0, 3}, cfg), ConfigError);
    DKDConfig bad;
    bad.temperature = 0.0f;
    EXPECT_THROW(dkd_per_sample(s, t, {0, 1}, bad), ConfigError);
    bad = DKDConfig{};
    bad.alpha = -1.0f;
    EXPECT_THROW(dkd_per_sample(s, t, {0, 1}, bad), ConfigError);
}

TEST(CrossEntropy, HandValues) {
    auto logits = Tensor::from_data({2, 3}, {2.0f, 1.0f, 0.0f, 0.0f, 0.0f, 0.0f});
    const float l = ce_loss(logits, {0, 2}).item();
    const double z = std::exp(2.0) + std::exp(1.0) + std::exp(0.0);
    const double ref = 0.5 * ((std::log(z) - 2.0) + std::log(3.0));
    EXPECT_NEAR(l, ref, 1e-6);
}

TEST(CombinedObjectives, GenerationTermToggles) {
    std::vector<BNStatsT<float>> target = {{{1.0f}, {2.0f}}};
    auto cap = capture_from<float>({{4.0f}}, {{2.0f}});
    auto centers = single_center({1.0f, 1.0f}, 0, 2);
    auto f = Tensor::from_data({1, 2}, {1.0f, 0.0f});
    AMAConfig acfg;
    acfg.margin = 0.0f;
    acfg.lambda_lower = -0.5f;
    acfg.lambda_upper = 0.5f;

    auto both = generation_loss(cap, target, f, centers, {0}, acfg, true, true);
    ASSERT_TRUE(both.bns.defined());
    ASSERT_TRUE(both.ama.defined());
    EXPECT_FLOAT_EQ(both.total.item(), both.bns.item() + both.ama.item());
    EXPECT_FLOAT_EQ(both.bns.item(), 9.0f);

    auto only_bns = generation_loss(cap, target, f, centers, {0}, acfg, true, false);
    EXPECT_FALSE(only_bns.ama.defined());
    EXPECT_FLOAT_EQ(only_bns.total.item(), 9.0f);
}

TEST(CombinedObjectives, FinetuneLambdaAndToggle) {
    RandomEngine rng(37);
    auto q = Tensor::rand_uniform({4, 5}, rng, -2.0, 2.0);
    auto fp = Tensor::rand_uniform({4, 5}, rng, -2.0, 2.0);
    std::vector<int> labels = {0, 1, 2, 3};
    DKDConfig dcfg;

    auto plain = finetune_loss(q, fp, labels, 0.0f, dcfg);
    EXPECT_FALSE(plain.tckd.defined());
    EXPECT_FLOAT_EQ(plain.total.item(), plain.ce.item());

    auto off = finetune_loss(q, fp, labels, 0.9f, dcfg, false);
    EXPECT_FLOAT_EQ(off.total.item(), off.ce.item());

    auto on = finetune_loss(q, fp, labels, 0.9f, dcfg);
    ASSERT_TRUE(on.tckd.defined());
    const float expected = on.ce.item() + 0.9f * (dcfg.alpha * on.tckd.item() +
                                                  dcfg.beta * on.nckd.item());
    EXPECT_NEAR(on.total.item(), expected, 1e-5);

    EXPECT_THROW(finetune_loss(q, fp, labels, -0.5f, dcfg), ConfigError);
}
