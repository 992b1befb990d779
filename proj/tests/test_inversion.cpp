#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ginv/inversion.hpp"
#include "support.hpp"

using namespace ginv;
using ginv::testing::max_relative_error;
using ginv::testing::normal_tensor;

namespace {

struct Victim {
    Model model;
    Batch batch;
    GradientBundle bundle;
};

Victim small_victim(std::uint64_t seed, std::size_t k = 2) {
    Model m = model_init(preset_tinier(1, 6, 6, 3, 2), seed);
    SyntheticSource src{1, 6, 6, 3, 0.05, 0};
    Batch b = make_batch(src, k, true, seed + 50);
    auto bundle = compute_bundle(m, b, true);
    return {m, b, bundle};
}

AttackConfig all_terms() {
    AttackConfig cfg;
    cfg.alpha_grad = 0.5;
    cfg.alpha_tv = 0.01;
    cfg.alpha_l2 = 0.02;
    cfg.alpha_bn = 0.3;
    cfg.alpha_group = 0.05;
    return cfg;
}

double objective_value(const Tensor& x, const ObjectiveInput& in) {
    GraphScope scope;
    return objective(scope->leaf(x), in).item();
}

Tensor objective_gradient(const Tensor& x, const ObjectiveInput& in) {
    GraphScope scope;
    Tensor leaf = scope->leaf(x);
    return grad(objective(leaf, in), leaf);
}

// A smooth off-centre blob; distinct enough under translation for registration.
Tensor blob(std::size_t h, std::size_t w) {
    std::vector<double> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - 6.0, dx = static_cast<double>(x) - 9.0;
            v[y * w + x] = std::exp(-(dy * dy + 0.5 * dx * dx) / 8.0) + 0.02 * static_cast<double>(x);
        }
    return Tensor({1, 1, h, w}, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient matching

TEST(GradMatching, VanishesAtGroundTruthForBothKinds) {
    auto v = small_victim(3, 3);
    for (GradLoss kind : {GradLoss::L2, GradLoss::Cosine}) {
        GraphScope scope;
        auto r = grad_matching_loss(scope->leaf(v.batch.images), v.batch.labels, v.bundle, kind);
        EXPECT_NEAR(r.loss.item(), 0.0, 1e-12);
    }
}

TEST(GradMatching, L2IsSumOfPerParameterNorms) {
    auto v = small_victim(4);
    std::mt19937_64 rng(1);
    Tensor x = normal_tensor(v.batch.images.shape(), rng);
    auto g = parameter_gradient(v.model, x, v.batch.labels);
    double plain = 0, squared = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        double sq = 0;
        for (std::size_t j = 0; j < g[i].numel(); ++j) {
            const double d = g[i][j] - v.bundle.gradients[i].value[j];
            sq += d * d;
        }
        plain += std::sqrt(sq);
        squared += sq;
    }
    GraphScope scope;
    Tensor leaf = scope->leaf(x);
    EXPECT_NEAR(grad_matching_loss(leaf, v.batch.labels, v.bundle, GradLoss::L2).loss.item(), plain, 1e-10 * plain);
    EXPECT_NEAR(grad_matching_loss(leaf, v.batch.labels, v.bundle, GradLoss::L2, true).loss.item(), squared, 1e-10 * squared);
}

TEST(GradMatching, CosineLiesInZeroTwo) {
    auto v = small_victim(5);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        GraphScope scope;
        Tensor x = scope->leaf(normal_tensor(v.batch.images.shape(), rng));
        const double d = grad_matching_loss(x, v.batch.labels, v.bundle, GradLoss::Cosine).loss.item();
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 2.0);
    }
}

TEST(GradMatching, RequiresActiveGraphAndMatchingLabels) {
    auto v = small_victim(6);
    EXPECT_THROW(grad_matching_loss(v.batch.images, v.batch.labels, v.bundle, GradLoss::L2), std::logic_error);
    GraphScope scope;
    std::vector<std::size_t> one{0};
    EXPECT_THROW(grad_matching_loss(scope->leaf(v.batch.images), one, v.bundle, GradLoss::L2), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Derivatives of the objective against central differences

class ObjectiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(ObjectiveGradient, MatchesFiniteDifferences) {
    const int which = GetParam();
    auto v = small_victim(10 + static_cast<std::uint64_t>(which));
    std::mt19937_64 rng(static_cast<std::uint64_t>(which));
    AttackConfig cfg = all_terms();
    // Isolate one weighted term per case; case 5 keeps all of them.
    double* weights[] = {&cfg.alpha_grad, &cfg.alpha_tv, &cfg.alpha_l2, &cfg.alpha_bn, &cfg.alpha_group};
    if (which < 5)
        for (int i = 0; i < 5; ++i)
            if (i != which) *weights[i] = 0.0;
    if (which == 0) cfg.alpha_grad = 1.0;
    Tensor consensus = normal_tensor(v.batch.images.shape(), rng);
    ObjectiveInput in{&v.bundle, v.batch.labels, &cfg, &consensus};
    Tensor x = normal_tensor(v.batch.images.shape(), rng);
    Tensor analytic = objective_gradient(x, in);
    Tensor numeric = finite_difference_gradient([&](const Tensor& p) { return objective_value(p, in); }, x, 1e-5);
    EXPECT_LT(max_relative_error(analytic, numeric), which == 0 || which == 5 ? 1e-3 : 1e-4);
}

std::string term_name(const ::testing::TestParamInfo<int>& info) {
    static const char* const names[] = {"GradMatch", "TotalVariation", "L2", "BatchNorm", "Group", "Total"};
    return names[info.param];
}

INSTANTIATE_TEST_SUITE_P(Terms, ObjectiveGradient, ::testing::Range(0, 6), term_name);

TEST(ObjectiveGradient, CosineMatchingSecondOrder) {
    auto v = small_victim(21);
    std::mt19937_64 rng(3);
    AttackConfig cfg = all_terms();
    cfg.grad_loss = GradLoss::Cosine;
    ObjectiveInput in{&v.bundle, v.batch.labels, &cfg, nullptr};
    Tensor x = normal_tensor(v.batch.images.shape(), rng);
    Tensor numeric = finite_difference_gradient([&](const Tensor& p) { return objective_value(p, in); }, x, 1e-5);
    EXPECT_LT(max_relative_error(objective_gradient(x, in), numeric), 1e-3);
}

// ---------------------------------------------------------------------------
// Individual priors

TEST(TvPrior, ConstantImageGivesEpsilonPerCell) {
    Tensor x = Tensor::filled({2, 3, 5, 4}, 0.7);
    EXPECT_NEAR(tv_prior(x, 0.5).item(), 2.0 * 3 * 4 * 3 * 0.5, 1e-12);
    EXPECT_NEAR(tv_prior(x).item(), 2.0 * 3 * 4 * 3 * 1e-8, 1e-20);
}

TEST(TvPrior, StepEdgeCostsOnePerRow) {
    const std::size_t h = 6, w = 8;
    std::vector<double> v(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) v[y * w + x] = x >= 4 ? 1.0 : 0.0;
    EXPECT_NEAR(tv_prior(Tensor({1, 1, h, w}, v)).item(), static_cast<double>(h - 1), 1e-6);
}

TEST(TvPrior, RejectsDegenerateShapes) {
    EXPECT_THROW(tv_prior(Tensor::zeros({1, 1, 1, 4})), ShapeError);
    EXPECT_THROW(tv_prior(Tensor::zeros({4, 4})), ShapeError);
}

TEST(L2Prior, EuclideanNorm) { EXPECT_NEAR(l2_prior(Tensor({1, 1, 1, 2}, {3.0, 4.0})).item(), 5.0, 1e-15); }

TEST(GroupLoss, DistanceToConsensusWithoutGradientToIt) {
    GraphScope scope;
    Tensor x = scope->leaf(Tensor({1, 1, 1, 2}, {1.0, 1.0}));
    Tensor e = scope->leaf(Tensor({1, 1, 1, 2}, {4.0, 5.0}));
    Tensor loss = group_consistency_loss(x, e);
    EXPECT_NEAR(loss.item(), 5.0, 1e-15);
    auto gs = grad(loss, std::vector<Tensor>{x, e});
    EXPECT_NEAR(gs[0][0], -0.6, 1e-15);
    EXPECT_NEAR(gs[0][1], -0.8, 1e-15);
    EXPECT_EQ(gs[1][0], 0.0);
    EXPECT_EQ(gs[1][1], 0.0);
}

TEST(BnPrior, ExactIsZeroAtGroundTruthAndApproxIsNot) {
    auto v = small_victim(30, 3);
    GraphScope scope;
    auto trace = model_forward(v.model, scope->leaf(v.batch.images), BnMode::Batch);
    const double exact = bn_prior(trace.bn_batch, bn_targets(v.bundle, BnRegime::Exact)).item();
    const double approx = bn_prior(trace.bn_batch, bn_targets(v.bundle, BnRegime::Approx)).item();
    EXPECT_NEAR(exact, 0.0, 1e-12);
    EXPECT_GT(approx, exact);
}

TEST(BnPrior, ExactRegimeNeedsLeakedStatistics) {
    auto v = small_victim(31);
    v.bundle.bn_stats.reset();
    EXPECT_THROW(bn_targets(v.bundle, BnRegime::Exact), std::invalid_argument);
    EXPECT_NO_THROW(bn_targets(v.bundle, BnRegime::Approx));
    EXPECT_THROW(bn_prior(v.model.bn_running, {}), ShapeError);
}

// ---------------------------------------------------------------------------
// Objective identities

TEST(Objective, GroundTruthLeavesOnlyImagePriors) {
    auto v = small_victim(40, 3);
    AttackConfig cfg;
    ObjectiveInput in{&v.bundle, v.batch.labels, &cfg, nullptr};
    LossTerms terms;
    GraphScope scope;
    Tensor x = scope->leaf(v.batch.images);
    const double total = objective(x, in, &terms).item();
    const double expected = cfg.alpha_tv * tv_prior(v.batch.images).item() + cfg.alpha_l2 * l2_prior(v.batch.images).item();
    EXPECT_NEAR(total, expected, 1e-6 * expected);
    EXPECT_NEAR(terms.grad, 0.0, 1e-12);
    EXPECT_NEAR(terms.bn, 0.0, 1e-12);
    EXPECT_EQ(terms.group, 0.0);
    EXPECT_DOUBLE_EQ(terms.total, total);
}

TEST(Objective, TermsAreWeightedAndSumToTotal) {
    auto v = small_victim(41);
    std::mt19937_64 rng(4);
    AttackConfig cfg = all_terms();
    Tensor e = normal_tensor(v.batch.images.shape(), rng);
    ObjectiveInput in{&v.bundle, v.batch.labels, &cfg, &e};
    Tensor x0 = normal_tensor(v.batch.images.shape(), rng);
    LossTerms t;
    GraphScope scope;
    Tensor x = scope->leaf(x0);
    objective(x, in, &t);
    EXPECT_NEAR(t.tv, cfg.alpha_tv * tv_prior(x0).item(), 1e-12);
    EXPECT_NEAR(t.l2, cfg.alpha_l2 * l2_prior(x0).item(), 1e-12);
    EXPECT_NEAR(t.group, cfg.alpha_group * l2_prior(sub(x0, e)).item(), 1e-12);
    EXPECT_NEAR(t.grad, cfg.alpha_grad * grad_matching_loss(x, v.batch.labels, v.bundle, GradLoss::L2).loss.item(), 1e-12);
    EXPECT_NEAR(t.total, t.grad + t.tv + t.l2 + t.bn + t.group, 1e-12);
}

TEST(Objective, CheckFiniteNamesTheTerm) {
    LossTerms t;
    t.tv = std::numeric_limits<double>::quiet_NaN();
    try {
        detail::check_finite(t, 7, 1);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.term(), "TV");
        EXPECT_NE(std::string(e.what()).find("iteration 7"), std::string::npos);
    }
    t.tv = 0;
    t.bn = std::numeric_limits<double>::infinity();
    EXPECT_THROW(detail::check_finite(t, 0, 0), NumericalError);
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

TEST(LrSchedule, WarmupThenCosineToZero) {
    AttackConfig cfg;
    cfg.iterations = 2000;
    cfg.warmup = 50;
    EXPECT_EQ(lr_schedule(0, cfg), 0.0);
    EXPECT_NEAR(lr_schedule(25, cfg), 0.05, 1e-15);
    EXPECT_NEAR(lr_schedule(50, cfg), 0.1, 1e-15);
    EXPECT_NEAR(lr_schedule(50 + 975, cfg), 0.05, 1e-12);
    EXPECT_EQ(lr_schedule(2000, cfg), 0.0);
    for (std::size_t t = 51; t <= 2000; ++t) EXPECT_LE(lr_schedule(t, cfg), lr_schedule(t - 1, cfg));
    cfg.warmup = 0;
    EXPECT_NEAR(lr_schedule(0, cfg), 0.1, 1e-15);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
    AdamState a(2);
    std::vector<double> x{1.0, -1.0};
    std::vector<double> g{2.0, -1e-3};
    a.apply(x, g, 0.1);
    EXPECT_NEAR(x[0], 0.9, 1e-7);
    EXPECT_NEAR(x[1], -0.9, 1e-4);
}

TEST(Adam, ZeroGradientKeepsPoint) {
    AdamState a(3);
    std::vector<double> x{1.0, 2.0, 3.0};
    std::vector<double> g(3, 0.0);
    for (int i = 0; i < 10; ++i) a.apply(x, g, 0.1);
    EXPECT_EQ(x, (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(Adam, MinimizesQuadratic) {
    AdamState a(1);
    std::vector<double> x{1.0};
    for (int i = 0; i < 100; ++i) {
        std::vector<double> g{2.0 * x[0]};
        a.apply(x, g, 0.1);
    }
    EXPECT_LT(std::abs(x[0]), 0.2);
    std::vector<double> wrong(2, 0.0);
    EXPECT_THROW(a.apply(x, wrong, 0.1), ShapeError);
}

// ---------------------------------------------------------------------------
// Consensus

TEST(Consensus, IdenticalCandidatesReturnTheCandidate) {
    Tensor i = blob(16, 16);
    for (auto mode : {ConsensusMode::Registered, ConsensusMode::Lazy}) {
        Tensor e = consensus_image({i, i, i}, mode);
        EXPECT_LT(ginv::testing::max_abs_diff(e, i), 1e-15);
    }
}

TEST(Consensus, SingleCandidateIsItsOwnConsensus) {
    Tensor i = blob(16, 16);
    EXPECT_EQ(consensus_image({i}, ConsensusMode::Registered).to_vector(), i.to_vector());
}

TEST(Consensus, RegistrationUndoesAShiftedMinority) {
    Tensor i = blob(16, 16);
    for (auto [dy, dx] : {std::pair{2, -1}, std::pair{-2, 2}, std::pair{0, 1}}) {
        Tensor s = shift_batch(i, dy, dx);
        Tensor reg = consensus_image({i, i, s}, ConsensusMode::Registered);
        EXPECT_LT(ginv::testing::max_abs_diff(reg, i), 1e-12) << dy << "," << dx;
        Tensor lazy = consensus_image({i, i, s}, ConsensusMode::Lazy);
        EXPECT_GT(ginv::testing::max_abs_diff(lazy, i), 1e-2);
    }
}

TEST(Consensus, TwoShiftedCopiesGiveTheUnshiftedImageOnTheOverlap) {
    Tensor i = blob(16, 16);
    for (auto [dy, dx] : {std::pair{2, 0}, std::pair{-2, 1}, std::pair{1, -2}, std::pair{2, 2}}) {
        Tensor e = consensus_image({i, shift_batch(i, dy, dx)}, ConsensusMode::Registered);
        double worst = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                if (y - dy < 0 || y - dy >= 16 || x - dx < 0 || x - dx >= 16) continue;
                worst = std::max(worst, std::abs(e[static_cast<std::size_t>(y * 16 + x)] - i[static_cast<std::size_t>(y * 16 + x)]));
            }
        EXPECT_LT(worst, 1e-12) << dy << "," << dx;
    }
}

TEST(Consensus, RegistersEachBatchSlotSeparately) {
    Tensor a = blob(16, 16), b = shift_batch(blob(16, 16), 1, 1);
    Tensor ab = concat({a, b}, 0);
    Tensor moved = concat({shift_batch(a, -2, 0), b}, 0);
    Tensor e = consensus_image({ab, ab, moved}, ConsensusMode::Registered);
    EXPECT_LT(ginv::testing::max_abs_diff(e, ab), 1e-12);
}

TEST(Consensus, RejectsBadGroups) {
    EXPECT_THROW(consensus_image({}, ConsensusMode::Lazy), std::invalid_argument);
    EXPECT_THROW(consensus_image({blob(16, 16), Tensor::zeros({1, 1, 8, 8})}, ConsensusMode::Lazy), ShapeError);
}

// ---------------------------------------------------------------------------
// Driver

TEST(RunInversion, DeterministicForFixedSeed) {
    auto v = small_victim(50);
    AttackConfig cfg;
    cfg.iterations = 40;
    cfg.warmup = 5;
    cfg.group_size = 2;
    cfg.consensus_interval = 10;
    cfg.seed = 9;
    auto a = run_inversion(cfg, v.bundle), b = run_inversion(cfg, v.bundle);
    ASSERT_EQ(a.candidates.size(), 2u);
    for (std::size_t g = 0; g < 2; ++g) EXPECT_EQ(a.candidates[g].to_vector(), b.candidates[g].to_vector());
    EXPECT_EQ(a.consensus.to_vector(), b.consensus.to_vector());
    cfg.alpha_noise = 0;
    cfg.group_size = 1;
    EXPECT_EQ(run_inversion(cfg, v.bundle).candidates[0].to_vector(), run_inversion(cfg, v.bundle).candidates[0].to_vector());
}

TEST(RunInversion, SeedsAreIndependentWithoutGroupTerm) {
    auto v = small_victim(51);
    AttackConfig cfg;
    cfg.iterations = 30;
    cfg.warmup = 3;
    cfg.alpha_group = 0;
    cfg.group_size = 3;
    auto group = run_inversion(cfg, v.bundle);
    cfg.group_size = 1;
    auto single = run_inversion(cfg, v.bundle);
    EXPECT_EQ(group.candidates[0].to_vector(), single.candidates[0].to_vector());
    EXPECT_NE(group.candidates[1].to_vector(), single.candidates[0].to_vector());
}

TEST(RunInversion, TraceRecordsEveryIteration) {
    auto v = small_victim(52);
    AttackConfig cfg;
    cfg.iterations = 25;
    cfg.warmup = 5;
    cfg.group_size = 2;
    cfg.consensus_start = 10;
    cfg.consensus_interval = 5;
    auto r = run_inversion(cfg, v.bundle);
    ASSERT_EQ(r.traces.size(), 2u);
    for (const auto& tr : r.traces) {
        ASSERT_EQ(tr.size(), 25u);
        for (std::size_t t = 0; t < tr.size(); ++t) {
            EXPECT_EQ(tr[t].t, t);
            EXPECT_DOUBLE_EQ(tr[t].lr, lr_schedule(t + 1, cfg));
            EXPECT_EQ(tr[t].terms.group == 0.0, t < 10);
        }
    }
    EXPECT_EQ(r.labels, restore_labels_min(v.bundle, 2));
    EXPECT_FALSE(std::isnan(r.deviation_at_start));
}

TEST(RunInversion, StartsFromTheDocumentedNoise) {
    auto v = small_victim(56);
    AttackConfig cfg;
    cfg.iterations = 2;
    cfg.warmup = 1;
    cfg.group_size = 2;
    cfg.seed = 4;
    cfg.consensus_start = 10;
    auto r = run_inversion(cfg, v.bundle);
    for (std::size_t g = 0; g < 2; ++g) {
        Tensor x0 = initial_candidate(cfg, v.batch.images.shape(), g);
        ObjectiveInput in{&v.bundle, r.labels, &cfg, nullptr};
        EXPECT_DOUBLE_EQ(objective_value(x0, in), r.traces[g].front().terms.total);
    }
    Tensor a = initial_candidate(cfg, v.batch.images.shape(), 0);
    double mean = 0, sq = 0;
    Tensor big = initial_candidate(cfg, {64, 1, 16, 16}, 0);
    for (double x : big.data()) {
        mean += x / static_cast<double>(big.numel());
        sq += x * x / static_cast<double>(big.numel());
    }
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sq, 1.0, 0.03);
    EXPECT_NE(a.to_vector(), initial_candidate(cfg, v.batch.images.shape(), 1).to_vector());
}

TEST(RunInversion, UsesGivenLabels) {
    auto v = small_victim(53);
    AttackConfig cfg;
    cfg.iterations = 3;
    cfg.warmup = 1;
    auto r = run_inversion(cfg, v.bundle, std::vector<std::size_t>{2, 2});
    EXPECT_EQ(r.labels, (std::vector<std::size_t>{2, 2}));
    EXPECT_THROW(run_inversion(cfg, v.bundle, std::vector<std::size_t>{1}), std::invalid_argument);
}

TEST(RunInversion, SingleImageConverges) {
    Model m = model_init(preset_tinier(), 7);
    Batch b = make_batch(SyntheticSource{}, 1, true, 8);
    auto bundle = compute_bundle(m, b, true);
    AttackConfig cfg;
    cfg.alpha_grad = 0.1;
    cfg.iterations = 400;
    auto r = run_inversion(cfg, bundle);
    const auto& tr = r.traces[0];
    EXPECT_LT(tr.back().terms.total, 0.1 * tr.front().terms.total);
    EXPECT_EQ(r.labels, b.labels);
    EXPECT_GT(image_metrics(r.consensus, b.images, 2).psnr_mean_db, 15.0);
}

TEST(RunInversion, GroupTermShrinksDeviation) {
    auto v = small_victim(54);
    AttackConfig cfg;
    cfg.iterations = 200;
    cfg.warmup = 10;
    cfg.group_size = 3;
    cfg.alpha_group = 0.5;
    cfg.consensus_interval = 20;
    auto r = run_inversion(cfg, v.bundle);
    EXPECT_LE(r.deviation_at_end, r.deviation_at_start);
}

TEST(RunInversion, NonFiniteGradientAbortsNamingTheTerm) {
    auto v = small_victim(55);
    v.bundle.gradients[0].value = Tensor::filled(v.bundle.gradients[0].value.shape(), std::numeric_limits<double>::quiet_NaN());
    AttackConfig cfg;
    cfg.iterations = 5;
    cfg.warmup = 1;
    cfg.group_size = 2;
    try {
        run_inversion(cfg, v.bundle, std::vector<std::size_t>{0, 1});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_EQ(e.term(), "L_grad");
    }
}

TEST(AttackConfig, ValidateRejectsBadValues) {
    AttackConfig ok;
    EXPECT_NO_THROW(ok.validate());
    EXPECT_EQ(ok.consensus_begin(), 500u);
    auto bad = [](auto edit) {
        AttackConfig c;
        edit(c);
        return c;
    };
    EXPECT_THROW(bad([](auto& c) { c.alpha_tv = -1; }).validate(), std::invalid_argument);
    EXPECT_THROW(bad([](auto& c) { c.lr = std::nan(""); }).validate(), std::invalid_argument);
    EXPECT_THROW(bad([](auto& c) { c.iterations = 0; }).validate(), std::invalid_argument);
    EXPECT_THROW(bad([](auto& c) { c.warmup = c.iterations; }).validate(), std::invalid_argument);
    EXPECT_THROW(bad([](auto& c) { c.group_size = 0; }).validate(), std::invalid_argument);
    EXPECT_THROW(bad([](auto& c) { c.consensus_interval = 0; }).validate(), std::invalid_argument);
}
