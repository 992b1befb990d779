#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ginv/cli.hpp"

using namespace ginv;
using namespace ginv::cli;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("ginv_test_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    int run(std::vector<std::string> args) {
        out_.str("");
        err_.str("");
        return run_cli(std::move(args), out_, err_);
    }

    std::string read(const std::string& p) const {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path dir_;
    std::ostringstream out_, err_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(RunConfigText, CommentsBlankLinesAndOverrides) {
    RunConfig cfg;
    parse_config_text(cfg, "# victim\n\n batch_size = 4  # four images\ngrad_loss=cosine\nconsensus_start = 30\nbn_regime = approx\n");
    EXPECT_EQ(cfg.batch_size, 4u);
    EXPECT_EQ(cfg.attack.grad_loss, GradLoss::Cosine);
    EXPECT_EQ(cfg.attack.consensus_start, 30u);
    EXPECT_EQ(cfg.attack.bn_regime, BnRegime::Approx);
    apply_override(cfg, "consensus_start=auto");
    EXPECT_FALSE(cfg.attack.consensus_start.has_value());
    apply_override(cfg, "seed = 17");
    EXPECT_EQ(cfg.seed, 17u);
    EXPECT_EQ(cfg.attack.seed, 17u);
}

TEST(RunConfigText, UnknownKeyNamesTheLine) {
    RunConfig cfg;
    try {
        parse_config_text(cfg, "iterations = 10\n# fine\nalpha_gradient = 1\n", "run.cfg");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("run.cfg:3"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("alpha_gradient"), std::string::npos);
    }
}

TEST(RunConfigText, BadValuesAreRejected) {
    RunConfig cfg;
    EXPECT_THROW(parse_config_text(cfg, "iterations = -5\n"), ConfigError);
    EXPECT_THROW(parse_config_text(cfg, "lr = fast\n"), ConfigError);
    EXPECT_THROW(parse_config_text(cfg, "lr = nan\n"), ConfigError);
    EXPECT_THROW(parse_config_text(cfg, "consensus = median\n"), ConfigError);
    EXPECT_THROW(parse_config_text(cfg, "bn_stats = maybe\n"), ConfigError);
    EXPECT_THROW(parse_config_text(cfg, "just words\n"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "iterations"), ConfigError);
}

TEST(RunConfigText, EchoRoundTrips) {
    RunConfig cfg;
    parse_config_text(cfg, "alpha_grad = 0.1\nalpha_group = 0.001\nconsensus = lazy\nsquared_norm = true\nlr = 0.30000000000000004\n");
    RunConfig back;
    parse_config_text(back, config_to_text(cfg));
    EXPECT_EQ(config_to_text(back), config_to_text(cfg));
    EXPECT_EQ(back.attack.lr, 0.30000000000000004);
    EXPECT_EQ(back.attack.consensus, ConsensusMode::Lazy);
}

TEST(RunConfigText, ValidateCatchesInconsistentSettings) {
    RunConfig cfg;
    EXPECT_NO_THROW(validate(cfg));
    cfg.preset = "resnet";
    EXPECT_THROW(validate(cfg), ConfigError);
    cfg = {};
    cfg.source = "idx";
    EXPECT_THROW(validate(cfg), ConfigError);
    cfg = {};
    cfg.pool_size = 2;
    cfg.batch_size = 4;
    EXPECT_THROW(validate(cfg), ConfigError);
}

// ---------------------------------------------------------------------------
// gen-victim

TEST_F(Cli, GenVictimWritesLoadableBundleAndSeparateGroundTruth) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=3", "--seed", "5"}), 0) << err_.str();
    auto bundle = load_bundle(path("v.ginv"));
    EXPECT_EQ(bundle.batch_size, 3u);
    ASSERT_TRUE(bundle.bn_stats.has_value());
    Batch gt = load_ground_truth(path("v.gt"));
    EXPECT_EQ(gt.size(), 3u);
    auto gallery = load_gallery(path("v.gt"));
    ASSERT_TRUE(gallery.has_value());
    EXPECT_EQ(gallery->size(0), 128u);
    EXPECT_DOUBLE_EQ(label_set_accuracy(restore_labels_min(bundle, 3), gt.labels), 1.0);
}

TEST_F(Cli, GenVictimIsDeterministicPerSeed) {
    ASSERT_EQ(run({"gen-victim", "--out", path("a.ginv"), "--seed", "9", "--set", "batch_size=2"}), 0);
    ASSERT_EQ(run({"gen-victim", "--out", path("b.ginv"), "--seed", "9", "--set", "batch_size=2"}), 0);
    ASSERT_EQ(run({"gen-victim", "--out", path("c.ginv"), "--seed", "10", "--set", "batch_size=2"}), 0);
    EXPECT_EQ(read(path("a.ginv")), read(path("b.ginv")));
    EXPECT_EQ(read(path("a.gt")), read(path("b.gt")));
    EXPECT_NE(read(path("a.ginv")), read(path("c.ginv")));
}

TEST_F(Cli, GenVictimRejectsMoreDistinctLabelsThanClasses) {
    EXPECT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=11"}), 2);
    EXPECT_NE(err_.str().find("distinct"), std::string::npos) << err_.str();
    EXPECT_FALSE(fs::exists(path("v.ginv")));
}

TEST_F(Cli, GenVictimFromIdxFiles) {
    Dataset ds = synthetic_dataset(SyntheticSource{}, 40, 2);
    save_idx(ds, path("img.idx"), path("lab.idx"));
    std::ofstream(path("run.cfg")) << "source = idx\nidx_images = " << path("img.idx") << "\nidx_labels = " << path("lab.idx")
                                   << "\npool_size = 20\nbatch_size = 2\ntrain_steps = 5\n";
    ASSERT_EQ(run({"gen-victim", "--config", path("run.cfg"), "--out", path("v.ginv")}), 0) << err_.str();
    EXPECT_EQ(load_gallery(path("v.gt"))->size(0), 20u);
}

TEST_F(Cli, GenVictimUsageErrors) {
    EXPECT_EQ(run({"gen-victim"}), 2);
    EXPECT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--config", path("missing.cfg")}), 2);
    EXPECT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "nonsense=1"}), 2);
    EXPECT_EQ(run({"frobnicate"}), 2);
    EXPECT_EQ(run({}), 2);
    EXPECT_EQ(run({"--help"}), 0);
    EXPECT_NE(out_.str().find("gen-victim"), std::string::npos);
}

// ---------------------------------------------------------------------------
// labels

TEST_F(Cli, LabelsOfSingleSamplePrintsTheTrueLabel) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--seed", "4"}), 0);
    const auto truth = load_ground_truth(path("v.gt")).labels.at(0);
    ASSERT_EQ(run({"labels", path("v.ginv")}), 0);
    EXPECT_EQ(out_.str(), std::to_string(truth) + "\n");
    ASSERT_EQ(run({"labels", path("v.ginv"), "--truth", path("v.gt")}), 0);
    EXPECT_EQ(out_.str(), std::to_string(truth) + "\naccuracy: 1\n");
}

TEST_F(Cli, LabelsMinAndSumDifferOnFixture) {
    // Same victim as the label-restoration fixture where only the min rule is exact.
    Model m = model_init(preset_tiny(), 0);
    Batch b = make_batch(SyntheticSource{}, 8, true, 0);
    save_bundle(compute_bundle(m, b, false), path("v.ginv"));
    auto printed = [&] {
        std::istringstream in(out_.str());
        std::vector<std::size_t> y;
        for (std::size_t v; in >> v;) y.push_back(v);
        return y;
    };

    ASSERT_EQ(run({"labels", path("v.ginv"), "--rule", "min"}), 0);
    auto min_labels = printed();
    ASSERT_EQ(min_labels.size(), 8u);
    EXPECT_DOUBLE_EQ(label_set_accuracy(min_labels, b.labels), 1.0);
    ASSERT_EQ(run({"labels", path("v.ginv"), "--rule", "sum"}), 0);
    EXPECT_LT(label_set_accuracy(printed(), b.labels), 1.0);
}

TEST_F(Cli, LabelsErrors) {
    EXPECT_EQ(run({"labels", path("absent.ginv")}), 2);
    EXPECT_EQ(run({"labels"}), 2);
    std::ofstream(path("junk.ginv")) << "not a bundle";
    EXPECT_EQ(run({"labels", path("junk.ginv")}), 2);
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv")}), 0);
    EXPECT_EQ(run({"labels", path("v.ginv"), "--rule", "max"}), 2);
}

// ---------------------------------------------------------------------------
// attack

TEST_F(Cli, AttackSmokeRunWritesTheReport) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=2"}), 0);
    const auto t0 = std::chrono::steady_clock::now();
    ASSERT_EQ(run({"attack", path("v.ginv"), "--out", path("rep"), "--set", "iterations=50", "--set", "warmup=5", "--set",
                   "group_size=4", "--set", "consensus_interval=10"}),
              0)
        << err_.str();
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
    for (int g = 0; g < 4; ++g) {
        EXPECT_TRUE(fs::exists(path("rep/seed_" + std::to_string(g) + ".pgm")));
        std::ifstream csv(path("rep/loss_seed" + std::to_string(g) + ".csv"));
        std::string header;
        std::getline(csv, header);
        EXPECT_EQ(header, "t,lr,L_grad,TV,l2,BN,group,total");
        std::size_t rows = 0;
        for (std::string line; std::getline(csv, line);) ++rows;
        EXPECT_EQ(rows, 50u);
    }
    EXPECT_FALSE(fs::exists(path("rep/seed_4.pgm")));
    Raster consensus = read_pnm(path("rep/consensus.pgm"));
    EXPECT_EQ(consensus.width, 2 * 16 + 1u);
    EXPECT_EQ(consensus.height, 16u);
    auto metrics = parse_metrics(read(path("rep/metrics.txt")));
    EXPECT_TRUE(metrics.count("sign_match_pct"));
    auto echoed = load_config(path("rep/config.txt"));
    EXPECT_EQ(echoed.attack.group_size, 4u);
    auto result = load_result(path("rep/result.gres"));
    EXPECT_EQ(result.candidates.size(), 4u);
    EXPECT_EQ(result.consensus.shape(), (Shape{2, 1, 16, 16}));
}

TEST_F(Cli, AttackWithoutNoiseIsReproducible) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv")}), 0);
    std::vector<std::string> common{"--set", "iterations=30", "--set", "warmup=3", "--set", "alpha_noise=0"};
    auto a = std::vector<std::string>{"attack", path("v.ginv"), "--out", path("r1")};
    auto b = std::vector<std::string>{"attack", path("v.ginv"), "--out", path("r2")};
    a.insert(a.end(), common.begin(), common.end());
    b.insert(b.end(), common.begin(), common.end());
    ASSERT_EQ(run(a), 0);
    ASSERT_EQ(run(b), 0);
    EXPECT_EQ(read(path("r1/loss_seed0.csv")), read(path("r2/loss_seed0.csv")));
    EXPECT_EQ(read(path("r1/consensus.pgm")), read(path("r2/consensus.pgm")));
}

TEST_F(Cli, AttackNumericalFailureExitsWithThree) {
    Model m = model_init(preset_tinier(), 1);
    auto bundle = compute_bundle(m, make_batch(SyntheticSource{}, 1, true, 1), true);
    bundle.gradients[0].value = Tensor::filled(bundle.gradients[0].value.shape(), std::numeric_limits<double>::infinity());
    save_bundle(bundle, path("bad.ginv"));
    EXPECT_EQ(run({"attack", path("bad.ginv"), "--out", path("rep"), "--set", "iterations=5", "--set", "warmup=1"}), 3);
    EXPECT_NE(err_.str().find("L_grad"), std::string::npos) << err_.str();
}

TEST_F(Cli, AttackErrors) {
    EXPECT_EQ(run({"attack", path("absent.ginv"), "--out", path("rep")}), 2);
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv")}), 0);
    EXPECT_EQ(run({"attack", path("v.ginv")}), 2);
    EXPECT_EQ(run({"attack", path("v.ginv"), "--out", path("rep"), "--set", "warmup=5000"}), 2);
}

// ---------------------------------------------------------------------------
// eval

TEST_F(Cli, EvalAgainstOwnConsensusHitsThePsnrCap) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=2"}), 0);
    ASSERT_EQ(run({"attack", path("v.ginv"), "--out", path("rep"), "--set", "iterations=20", "--set", "warmup=2"}), 0);
    auto result = load_result(path("rep/result.gres"));
    Batch fake{result.consensus, result.labels};
    save_ground_truth(fake, path("fake.gt"));
    ASSERT_EQ(run({"eval", path("rep"), path("fake.gt")}), 0) << err_.str();
    auto m = parse_metrics(read(path("rep/metrics.txt")));
    EXPECT_DOUBLE_EQ(m.at("psnr_mean_db"), kPsnrCapDb);
    EXPECT_NEAR(m.at("fft2d_mean"), 0.0, 1e-12);
    EXPECT_FALSE(m.count("iip"));
}

TEST_F(Cli, EvalOfNoiseReconstructionIsFarInFrequency) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=4", "--seed", "2"}), 0);
    ASSERT_EQ(run({"attack", path("v.ginv"), "--out", path("rep"), "--set", "iterations=1", "--set", "warmup=0", "--set", "lr=0",
                   "--set", "alpha_noise=0"}),
              0);
    ASSERT_EQ(run({"eval", path("rep"), path("v.gt")}), 0) << err_.str();
    auto m = parse_metrics(out_.str());
    EXPECT_GT(m.at("fft2d_mean"), 0.3);
    EXPECT_LT(m.at("psnr_mean_db"), 12.0);
    EXPECT_TRUE(m.count("iip"));
    EXPECT_TRUE(m.count("grad_l2"));
}

TEST_F(Cli, EvalErrors) {
    ASSERT_EQ(run({"gen-victim", "--out", path("v.ginv"), "--set", "batch_size=2"}), 0);
    ASSERT_EQ(run({"gen-victim", "--out", path("w.ginv"), "--set", "batch_size=3"}), 0);
    ASSERT_EQ(run({"attack", path("v.ginv"), "--out", path("rep"), "--set", "iterations=5", "--set", "warmup=1"}), 0);
    EXPECT_EQ(run({"eval", path("rep"), path("missing.gt")}), 2);
    EXPECT_EQ(run({"eval", path("nowhere"), path("v.gt")}), 2);
    EXPECT_EQ(run({"eval", path("rep"), path("w.gt")}), 2);
    EXPECT_NE(err_.str().find("ground truth"), std::string::npos) << err_.str();
}

// ---------------------------------------------------------------------------
// Image output

TEST_F(Cli, ZeroImageWritesPlainPgm) {
    write_image_grid(Tensor::zeros({1, 1, 16, 16}), path("z.pgm"));
    const std::string bytes = read(path("z.pgm"));
    const std::string header = "P5\n16 16\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 256);
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    EXPECT_EQ(bytes.substr(header.size()), std::string(256, '\0'));
}
