#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "tilewise/cli.hpp"
#include "tilewise/harness.hpp"

using namespace tilewise;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "tilewise");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return rc;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("tilewise_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
    ExperimentConfig c;
    c.out = out.string();
    c.data.slide_size = 128;
    c.data.tile_size = 32;
    c.data.train_slides = 4;
    c.data.val_slides = 2;
    c.data.test_slides = 2;
    c.data.lesion_radius_min = 10;
    c.data.lesion_radius_max = 16;
    c.model.conv_widths = {4, 4};
    c.model.pool_after = {2};
    c.model.hidden1 = 8;
    c.model.hidden2 = 4;
    c.mil.pretrain_epochs = 1;
    c.mil.epochs = 1;
    c.xai.layers = {2};
    return c;
}

}  // namespace

TEST(Harness, ConfigRoundTripAndDigest) {
    ExperimentConfig c;
    c.seed = 11;
    c.xai.thresholds = {0.5, 0.9};
    const auto back = config_from_table(parse_config(resolved_config_text(c)));
    EXPECT_EQ(resolved_config_text(back), resolved_config_text(c));
    EXPECT_EQ(config_digest(back), config_digest(c));

    ExperimentConfig moved = c;
    moved.out = "elsewhere";
    moved.threads = 8;
    EXPECT_EQ(config_digest(moved), config_digest(c));
    moved.seed = 12;
    EXPECT_NE(config_digest(moved), config_digest(c));
}

TEST(Harness, UnknownKeyRejected) {
    EXPECT_THROW(config_from_table(parse_config("[data]\ntile_sise = 64\n")), config_error);
}

TEST(Harness, ValidateRejectsIndivisibleGrid) {
    ExperimentConfig c;
    c.data.tile_size = 60;  // L/4 shifts need L divisible by 4 and S divisible by L
    EXPECT_THROW(c.validate(), config_error);
}

TEST(Harness, SplitsAreDisjointAndBalanced) {
    ExperimentConfig c;
    std::set<std::uint64_t> seeds;
    std::size_t total = 0;
    for (Split s : {Split::train, Split::val, Split::test}) {
        const auto refs = split_slides(c, s);
        std::size_t positives = 0;
        for (const auto& r : refs) {
            seeds.insert(r.seed);
            positives += r.positive;
            if (r.positive) {
                EXPECT_GE(r.lesion_count, 1u);
                EXPECT_LE(r.lesion_count, c.data.max_lesions);
            } else {
                EXPECT_EQ(r.lesion_count, 0u);
            }
        }
        total += refs.size();
        EXPECT_EQ(positives, refs.size() / 2);
    }
    EXPECT_EQ(seeds.size(), total);
}

TEST(Harness, FoldsPartitionPooledSlides) {
    ExperimentConfig c;
    std::set<std::string> train1, test1, test2;
    c.data.fold = 1;
    for (const auto& r : split_slides(c, Split::train)) train1.insert(r.id());
    for (const auto& r : split_slides(c, Split::test)) test1.insert(r.id());
    c.data.fold = 2;
    for (const auto& r : split_slides(c, Split::test)) test2.insert(r.id());
    EXPECT_EQ(train1, test2);
    for (const auto& id : test1) EXPECT_EQ(train1.count(id), 0u);
    EXPECT_EQ(train1.size() + test1.size(), c.data.train_slides + c.data.test_slides);
}

TEST(Harness, OverlapIouCropsAndIsSymmetric) {
    // two 8x8 tiles shifted by (2, 0): overlap is 8 rows x 6 columns
    Tensor a({8, 8}), b({8, 8});
    for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) {
            a[y * 8 + x] = x >= 4 ? 1.0 : 0.0;      // slide columns 4..7
            b[y * 8 + x] = x + 2 <= 5 ? 1.0 : 0.0;  // slide columns 2..5
        }
    }
    const Rect overlap{2, 0, 6, 8};
    EXPECT_DOUBLE_EQ(static_cast<double>(overlap.area()) / 64.0, 0.75);
    std::size_t pa = 0, pb = 0;
    const auto ab = overlap_iou(a, 0, 0, b, 2, 0, overlap, &pa, &pb);
    const auto ba = overlap_iou(b, 2, 0, a, 0, 0, overlap);
    ASSERT_TRUE(ab && ba);
    EXPECT_EQ(pa, 32u);  // columns 4..7 of a, all inside the overlap
    EXPECT_EQ(pb, 32u);  // columns 2..5 of b
    EXPECT_DOUBLE_EQ(*ab, 16.0 / 48.0);
    EXPECT_DOUBLE_EQ(*ab, *ba);

    Tensor empty({8, 8});
    EXPECT_FALSE(overlap_iou(empty, 0, 0, empty, 2, 0, overlap).has_value());
    EXPECT_THROW(overlap_iou(a, 0, 0, b, 2, 0, Rect{0, 0, 0, 0}), invalid_argument);
}

TEST(Harness, FaithfulnessDetectsTrendAndControlDoesNot) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> noise(0.0, 0.1);
    std::vector<ScoreRecord> group;
    for (int i = 0; i < 400; ++i) {
        ScoreRecord r;
        r.prediction = (i + 0.5) / 400.0;
        r.precision = std::clamp(r.prediction + noise(rng), 0.0, 1.0);
        r.intersection_hit = r.precision > 0.5;
        r.annotated_fraction = r.precision;
        r.source = GroundTruthSource::segnet;
        group.push_back(r);
    }
    const auto row = faithfulness_row(group, 99);
    ASSERT_TRUE(row.rho_precision && row.control_rho_precision);
    EXPECT_GT(*row.rho_precision, 0.8);
    EXPECT_LE(std::abs(*row.control_rho_precision), 3.0 / std::sqrt(399.0));
    EXPECT_TRUE(row.flag.empty());

    group.resize(10);
    EXPECT_FALSE(faithfulness_row(group, 1).rho_precision.has_value());
    EXPECT_FALSE(faithfulness_row(group, 1).flag.empty());
}

TEST(Harness, ZeroTestSlidesGivesEmptyReportWithWarning) {
    ExperimentConfig c = tiny_config(scratch("zero"));
    c.data.test_slides = 0;
    TileClassifier model(c.classifier_config(), 1);
    SegNet segnet(c.segnet_config(), 2);
    const auto report = evaluate(c, model, segnet);
    EXPECT_TRUE(report.records.empty());
    EXPECT_FALSE(report.slide_auc.has_value());
    EXPECT_FALSE(report.warnings.empty());
    const auto summary = evaluation_summary(c, report);
    EXPECT_TRUE(summary["slide_auc"].is_null());
}

TEST(Harness, EvaluationRecordsCoverEveryCombination) {
    ExperimentConfig c = tiny_config(scratch("records"));
    c.data.test_slides = 1;
    c.xai.thresholds = {0.5, 0.9};
    TileClassifier model(c.classifier_config(), 3);
    SegNet segnet(c.segnet_config(), 4);
    const auto report = evaluate(c, model, segnet);
    const std::size_t tiles = report.tiles.size();
    ASSERT_GT(tiles, 0u);  // tissue filtering may drop some of the 16 grid tiles
    EXPECT_LE(tiles, 16u);
    EXPECT_EQ(report.records.size(), tiles * 3 * 2 * 2);
    for (const auto& r : report.records) {
        EXPECT_GE(r.precision, 0.0);
        EXPECT_LE(r.precision, 1.0);
        EXPECT_LE(r.popcount, 32u * 32u);  // ties (upsampled blocks) move it off (1 - t) L^2
    }
    EXPECT_EQ(scores_csv(report).rfind("# schema=tilewise.scores/1", 0), 0u);
}

TEST(Cli, BaselinePrintsClosedForm) {
    std::string out;
    ASSERT_EQ(cli({"baseline", "--t", "0.9", "--trials", "20"}, &out), 0);
    EXPECT_NE(out.find("t=0.900000 iou=0.052632 precision=0.100000"), std::string::npos);
}

TEST(Cli, ExitCodes) {
    std::string err;
    EXPECT_EQ(cli({"baseline", "--t", "1.5"}, nullptr, &err), 2);
    EXPECT_EQ(cli({"evaluate", "data.tile_sise=64", "--out", scratch("bad").string()}, nullptr, &err), 2);
    EXPECT_NE(err.find("error: config:"), std::string::npos);
    EXPECT_EQ(cli({"frobnicate"}, nullptr, &err), 2);
    EXPECT_EQ(cli({"explain", "--tile", "/nonexistent/tile.png", "--out", scratch("io").string()}, nullptr, &err), 1);
    EXPECT_NE(err.find("error: io:"), std::string::npos);
}

TEST(Cli, GenDataWritesManifest) {
    const fs::path out = scratch("gendata");
    ASSERT_EQ(cli({"gen-data", "--out", out.string(), "--quiet", "data.slide_size=128", "data.tile_size=32",
                   "data.train_slides=2", "data.val_slides=1", "data.test_slides=1", "data.lesion_radius_min=10",
                   "data.lesion_radius_max=16"}),
              0);
    EXPECT_TRUE(fs::exists(out / "data" / "manifest.json"));
    EXPECT_TRUE(fs::exists(out / "data" / "test" / "test-0000.png"));
    EXPECT_TRUE(fs::exists(out / "data" / "test" / "test-0000_mask.pgm"));
    EXPECT_TRUE(fs::exists(out / "config.resolved.toml"));
}
