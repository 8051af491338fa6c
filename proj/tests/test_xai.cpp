#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_support.hpp"
#include "tilewise/xai.hpp"

using namespace tilewise;

namespace {

ClassifierConfig small_config() {
    ClassifierConfig c;
    c.tile_size = 16;
    c.conv_widths = {4, 4, 6, 6};
    c.pool_after = {2, 4};
    c.hidden1 = 16;
    c.hidden2 = 12;
    return c;
}

Tensor random_tile(std::size_t L, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 255.0);
    Tensor t({L, L, 3});
    for (auto& v : t.values()) v = std::round(u(rng));
    return t;
}

Tensor random_map(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t({h, w});
    for (auto& v : t.values()) v = u(rng);
    return t;
}

AttributionMap raw(Tensor t) { return AttributionMap{std::move(t), false}; }

/// Runs the classifier from the post-ReLU output of conv layer `l` to s.
Var tail_from(const TileClassifier& m, Graph& g, Var x, int l) {
    const auto& cfg = m.config();
    auto pooled = [&](int layer) {
        return std::find(cfg.pool_after.begin(), cfg.pool_after.end(), layer) != cfg.pool_after.end();
    };
    if (pooled(l)) x = g.max_pool2(x);
    for (int j = l + 1; j <= m.conv_layer_count(); ++j) {
        const auto s = std::to_string(j);
        x = g.relu(g.conv2d(x, g.input(m.parameters().at("conv" + s + ".w")),
                            g.input(m.parameters().at("conv" + s + ".b")), 1, 1));
        if (pooled(j)) x = g.max_pool2(x);
    }
    return m.head_forward(g, x).score;
}

}  // namespace

TEST(LayerAttribution, LinearHeadGivesWeightTimesActivation) {
    std::mt19937_64 rng(1);
    Graph g;
    const Tensor psi_value = testing_support::random_tensor({3, 3, 2}, rng, 1.0);
    const Tensor w = testing_support::random_tensor({18, 1}, rng, 1.0);
    Var psi = g.input(psi_value);
    g.tap(psi, 1);
    Var out = g.linear(g.reshape(psi, {18}), g.input(w), std::nullopt);
    g.backward(g.sum(out));
    const auto attr = attribution_from_tap(g.layer_tap(1));
    for (std::size_t i = 0; i < 18; ++i) EXPECT_DOUBLE_EQ(attr.values[i], w[i] * psi_value[i]);
}

TEST(LayerAttribution, LayerDisconnectedFromScoreIsZero) {
    std::mt19937_64 rng(2);
    TileClassifier m(small_config(), 3);
    m.parameters().at("conv3.w").fill(0.0);
    const Tensor tile = random_tile(16, rng);
    const auto attr = layer_attribution(m, tile, 2);
    for (double v : attr.values.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(attr.values.shape(), (Shape{16, 16, 4}));
}

TEST(LayerAttribution, MatchesFiniteDifferenceGradientTimesActivation) {
    std::mt19937_64 rng(3);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const TileClassifier m(small_config(), 10 + seed);
        const Tensor tile = random_tile(16, rng);
        for (int l : {1, 2, 3, 4}) {
            Graph g;
            const int layers[] = {l};
            auto f = m.forward(g, g.input(tile), layers, false);
            g.backward(f.score);
            const LayerTap tap = g.layer_tap(l);
            const auto attr = attribution_from_tap(tap);

            Graph base;
            Var s0 = tail_from(m, base, base.input(tap.activation), l);
            ASSERT_EQ(base.value(s0)[0], g.value(f.score)[0]);
            const auto digest = base.pattern_digest();

            const double h = 1e-6;
            double worst = 0.0;
            std::size_t checked = 0;
            Tensor psi = tap.activation;
            for (std::size_t i = 0; i < psi.size(); ++i) {
                if (psi[i] == 0.0) {
                    EXPECT_EQ(attr.values[i], 0.0);
                    continue;
                }
                const double keep = psi[i];
                psi[i] = keep + h;
                Graph gp;
                const double up = gp.value(tail_from(m, gp, gp.input(psi), l))[0];
                psi[i] = keep - h;
                Graph gm;
                const double down = gm.value(tail_from(m, gm, gm.input(psi), l))[0];
                psi[i] = keep;
                if (gp.pattern_digest() != digest || gm.pattern_digest() != digest) continue;
                const double fd = keep * (up - down) / (2 * h);
                if (std::abs(fd) < 1e-10 && std::abs(attr.values[i]) < 1e-10) continue;
                worst = std::max(worst, std::abs(attr.values[i] - fd) / (std::abs(attr.values[i]) + 1e-12));
                ++checked;
            }
            EXPECT_GT(checked, 10u) << "layer " << l;
            EXPECT_LT(worst, 1e-4) << "layer " << l;
        }
    }
}

TEST(LayerAttribution, InvalidLayerThrows) {
    std::mt19937_64 rng(4);
    const TileClassifier m(small_config(), 3);
    EXPECT_THROW(layer_attribution(m, random_tile(16, rng), 5), invalid_argument);
    EXPECT_THROW(layer_attribution(m, random_tile(16, rng), 0), invalid_argument);
}

TEST(AggregateChannels, CancellationCase) {
    LayerAttribution a{1, Tensor({1, 1, 2}, {1.0, -1.0})};
    EXPECT_EQ(aggregate_channels(a, Aggregator::mean)[0], 0.0);
    EXPECT_EQ(aggregate_channels(a, Aggregator::abs)[0], 1.0);
    EXPECT_EQ(aggregate_channels(a, Aggregator::var)[0], 1.0);
}

TEST(AggregateChannels, SingleChannel) {
    LayerAttribution a{1, Tensor({1, 2, 1}, {-0.5, 2.0})};
    const Tensor mean = aggregate_channels(a, Aggregator::mean);
    const Tensor abs = aggregate_channels(a, Aggregator::abs);
    const Tensor var = aggregate_channels(a, Aggregator::var);
    EXPECT_EQ(mean[0], -0.5);
    EXPECT_EQ(mean[1], 2.0);
    EXPECT_EQ(abs[0], 0.5);
    EXPECT_EQ(abs[1], 2.0);
    EXPECT_EQ(var[0], 0.0);
    EXPECT_EQ(var[1], 0.0);
}

TEST(AggregateChannels, MatchesLoopOracleAndRelations) {
    std::mt19937_64 rng(5);
    LayerAttribution a{1, testing_support::random_tensor({5, 5, 4}, rng, 2.0)};
    const Tensor mean = aggregate_channels(a, Aggregator::mean);
    const Tensor abs = aggregate_channels(a, Aggregator::abs);
    const Tensor var = aggregate_channels(a, Aggregator::var);
    ASSERT_EQ(mean.shape(), (Shape{5, 5}));
    for (std::size_t y = 0; y < 5; ++y) {
        for (std::size_t x = 0; x < 5; ++x) {
            double s = 0, sa = 0, sq = 0;
            for (std::size_t c = 0; c < 4; ++c) {
                const double v = a.values.at(y, x, c);
                s += v;
                sa += std::abs(v);
                sq += v * v;
            }
            const double m = s / 4, ms = sq / 4;
            EXPECT_NEAR(mean.at(y, x), m, 1e-14);
            EXPECT_NEAR(abs.at(y, x), sa / 4, 1e-14);
            EXPECT_NEAR(var.at(y, x), ms - m * m, 1e-12);
            EXPECT_LE(std::abs(mean.at(y, x)), abs.at(y, x));
            EXPECT_GE(var.at(y, x), 0.0);
        }
    }
}

TEST(FuseLayers, SingleFullSizeMapIsUnchanged) {
    std::mt19937_64 rng(6);
    const Tensor m = random_map(8, 8, rng);
    const Tensor maps[] = {m};
    const auto f = fuse_layers(maps, 8);
    EXPECT_FALSE(f.normalized);
    EXPECT_TRUE(f.values == m);
}

TEST(FuseLayers, IdenticalMapsDoubleTheUpscaledMap) {
    std::mt19937_64 rng(7);
    const Tensor m = random_map(4, 4, rng);
    const Tensor maps[] = {m, m};
    const auto f = fuse_layers(maps, 16);
    const Tensor up = resize(m, 16, 16, UpsampleMode::nearest);
    for (std::size_t i = 0; i < f.values.size(); ++i) EXPECT_EQ(f.values[i], 2.0 * up[i]);
}

TEST(FuseLayers, NearestUpscaleReplicatesBlocks) {
    const Tensor m({2, 2}, {1, 2, 3, 4});
    const Tensor maps[] = {m};
    const auto f = fuse_layers(maps, 4);
    const Tensor expect({4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    EXPECT_TRUE(f.values == expect);
}

TEST(FuseLayers, PerLayerMaxNormalizationFlag) {
    const Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {0, 0, 0, -8});
    const Tensor maps[] = {a, b};
    const auto f = fuse_layers(maps, 2, UpsampleMode::nearest, true);
    const Tensor expect({2, 2}, {0.25, 0.5, 0.75, 0.0});
    EXPECT_TRUE(f.values == expect);
}

TEST(FuseLayers, Errors) {
    EXPECT_THROW(fuse_layers(std::span<const Tensor>{}, 8), invalid_argument);
    const Tensor rect[] = {Tensor({2, 3})};
    EXPECT_THROW(fuse_layers(rect, 8), shape_error);
    const Tensor big[] = {Tensor({16, 16})};
    EXPECT_THROW(fuse_layers(big, 8), shape_error);
}

TEST(PercentileNormalize, HandExample) {
    const auto n = percentile_normalize(raw(Tensor({2, 2}, {1, 2, 3, 4})));
    EXPECT_TRUE(n.normalized);
    EXPECT_TRUE(n.values == Tensor({2, 2}, {0, 0.25, 0.5, 0.75}));
}

TEST(PercentileNormalize, ConstantMapIsAllZero) {
    const auto n = percentile_normalize(raw(Tensor({4, 4}, 3.7)));
    for (double v : n.values.values()) EXPECT_EQ(v, 0.0);
}

TEST(PercentileNormalize, TiesShareTheStrictRank) {
    const auto n = percentile_normalize(raw(Tensor({1, 5}, {2, 1, 2, 0, 2})));
    EXPECT_TRUE(n.values == Tensor({1, 5}, {0.4, 0.2, 0.4, 0.0, 0.4}));
}

TEST(PercentileNormalize, DistinctValuesGiveRankPermutation) {
    std::mt19937_64 rng(8);
    const std::size_t L = 16, n = L * L;
    const auto out = percentile_normalize(raw(random_map(L, L, rng)));
    std::vector<double> v(out.values.values().begin(), out.values.values().end());
    std::sort(v.begin(), v.end());
    for (std::size_t r = 0; r < n; ++r) EXPECT_EQ(v[r], static_cast<double>(r) / static_cast<double>(n));
    EXPECT_LE(v.back(), static_cast<double>(n - 1) / static_cast<double>(n));
}

TEST(PercentileNormalize, InvariantUnderMonotoneTransforms) {
    std::mt19937_64 rng(9);
    const Tensor a = random_map(12, 12, rng);
    const auto base = percentile_normalize(raw(a));
    Tensor affine = a, cubic = a;
    for (auto& v : affine.values()) v = 3.5 * v - 7.25;
    for (auto& v : cubic.values()) v = v * v * v + std::exp(v);
    EXPECT_TRUE(percentile_normalize(raw(affine)).values == base.values);
    EXPECT_TRUE(percentile_normalize(raw(cubic)).values == base.values);
}

TEST(PercentileNormalize, RejectsNormalizedInput) {
    EXPECT_THROW(percentile_normalize(AttributionMap{Tensor({2, 2}), true}), invalid_argument);
}

TEST(ThresholdMap, Examples) {
    const AttributionMap n{Tensor({2, 2}, {0, 0.25, 0.5, 0.75}), true};
    EXPECT_TRUE(threshold_map(n, 0.5).values == Tensor({2, 2}, {0, 0, 1, 1}));
    EXPECT_EQ(threshold_map(n, 0.5).threshold, 0.5);
    EXPECT_EQ(threshold_map(n, 0.0).popcount(), 4u);
}

TEST(ThresholdMap, PopcountOnDistinctMap) {
    std::mt19937_64 rng(10);
    const auto n = percentile_normalize(raw(random_map(64, 64, rng)));
    const auto m = threshold_map(n, 0.9);
    EXPECT_GE(m.popcount(), 409u);
    EXPECT_LE(m.popcount(), 410u);
    for (double t : {0.5, 0.8, 0.95}) {
        const double pc = static_cast<double>(threshold_map(n, t).popcount());
        EXPECT_LE(std::abs(pc - (1 - t) * 4096), 1.0) << t;
    }
}

TEST(ThresholdMap, MonotoneInThreshold) {
    std::mt19937_64 rng(11);
    const auto n = percentile_normalize(raw(random_map(20, 20, rng)));
    const double ts[] = {0.0, 0.3, 0.5, 0.8, 0.9, 0.95, 0.99};
    for (std::size_t k = 0; k + 1 < std::size(ts); ++k) {
        const auto lo = threshold_map(n, ts[k]), hi = threshold_map(n, ts[k + 1]);
        for (std::size_t i = 0; i < lo.values.size(); ++i) EXPECT_LE(hi.values[i], lo.values[i]);
    }
}

TEST(ThresholdMap, Errors) {
    const AttributionMap n{Tensor({2, 2}), true};
    EXPECT_THROW(threshold_map(n, 1.0), invalid_argument);
    EXPECT_THROW(threshold_map(n, -0.1), invalid_argument);
    EXPECT_THROW(threshold_map(AttributionMap{Tensor({2, 2}), false}, 0.5), invalid_argument);
}

TEST(ExplainTile, DeterministicAndWellFormed) {
    std::mt19937_64 rng(12);
    const TileClassifier m(small_config(), 5);
    const Tensor tile = random_tile(16, rng);
    XaiConfig cfg;
    cfg.layers = {2, 4};
    const auto a = explain_tile(m, tile, cfg), b = explain_tile(m, tile, cfg);
    EXPECT_TRUE(a.raw.values == b.raw.values);
    EXPECT_TRUE(a.normalized.values == b.normalized.values);
    EXPECT_EQ(a.score, m.classify(tile));
    ASSERT_EQ(a.masks.size(), cfg.thresholds.size());
    for (std::size_t k = 0; k < a.masks.size(); ++k) {
        EXPECT_TRUE(a.masks[k].values == b.masks[k].values);
        EXPECT_EQ(a.masks[k].threshold, cfg.thresholds[k]);
    }
    EXPECT_EQ(a.normalized.values.shape(), (Shape{16, 16}));
}

TEST(ExplainTile, DeepestLayerOnlyAndFullSetAreBothValid) {
    std::mt19937_64 rng(13);
    const TileClassifier m(small_config(), 6);
    const Tensor tile = random_tile(16, rng);
    XaiConfig deep;
    deep.layers = {4};
    XaiConfig all;
    all.layers = {1, 2, 3, 4};
    for (const auto* c : {&deep, &all}) {
        const auto e = explain_tile(m, tile, *c);
        EXPECT_EQ(e.normalized.values.shape(), (Shape{16, 16}));
        for (double v : e.normalized.values.values()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 255.0 / 256.0);
        }
    }
}

TEST(ExplainTile, AggregatorsShareOneBackwardPass) {
    std::mt19937_64 rng(14);
    const TileClassifier m(small_config(), 7);
    const Tensor tile = random_tile(16, rng);
    XaiConfig cfg;
    cfg.layers = {2, 4};
    const auto all = explain_tile_aggregators(m, tile, cfg, kAllAggregators);
    ASSERT_EQ(all.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        XaiConfig single = cfg;
        single.aggregator = kAllAggregators[k];
        const auto e = explain_tile(m, tile, single);
        EXPECT_TRUE(e.normalized.values == all[k].normalized.values);
        // rank-permutation property: sorted values are r/n with shared ranks
        std::vector<double> v(e.normalized.values.values().begin(), e.normalized.values.values().end());
        std::sort(v.begin(), v.end());
        EXPECT_EQ(v.front(), 0.0);
        for (std::size_t i = 1; i < v.size(); ++i) {
            if (v[i] != v[i - 1]) EXPECT_EQ(v[i], static_cast<double>(i) / static_cast<double>(v.size()));
        }
    }
}

TEST(ExplainTile, ZeroAttributionLayerDoesNotChangeFusion) {
    std::mt19937_64 rng(15);
    TileClassifier m(small_config(), 8);
    m.parameters().at("conv3.w").fill(0.0);
    const Tensor tile = random_tile(16, rng);
    XaiConfig with, without;
    with.layers = {2, 4};
    without.layers = {4};
    for (auto agg : kAllAggregators) {
        with.aggregator = without.aggregator = agg;
        EXPECT_TRUE(explain_tile(m, tile, with).raw.values == explain_tile(m, tile, without).raw.values);
    }
}

TEST(ExplainTile, HeadLocalityZeroesDeepAttribution) {
    std::mt19937_64 rng(16);
    double outside = 0.0;
    for (std::uint64_t seed = 9; seed < 14; ++seed) {
        TileClassifier m(small_config(), seed);
        // The deepest tap is 8 x 8 x 6 and is max-pooled into the 4 x 4 x 6
        // head input; cutting the head's dependence on the top-left 2 x 2
        // features must silence the top-left 4 x 4 block of the tap.
        Tensor& w = m.parameters().at("fc1.w");
        const std::size_t width = w.extent(1);
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 2; ++x)
                for (std::size_t c = 0; c < 6; ++c)
                    for (std::size_t j = 0; j < width; ++j) w[((y * 4 + x) * 6 + c) * width + j] = 0.0;
        const auto attr = layer_attribution(m, random_tile(16, rng), 4);
        ASSERT_EQ(attr.values.shape(), (Shape{8, 8, 6}));
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x)
                for (std::size_t c = 0; c < 6; ++c) {
                    if (y < 4 && x < 4) {
                        EXPECT_EQ(attr.values.at(y, x, c), 0.0);
                    } else {
                        outside += std::abs(attr.values.at(y, x, c));
                    }
                }
    }
    EXPECT_GT(outside, 0.0);
}

TEST(XaiConfig, ValidationAndDigest) {
    XaiConfig c;
    EXPECT_NO_THROW(c.validate(8));
    EXPECT_THROW(c.validate(6), invalid_argument);
    XaiConfig empty;
    empty.layers.clear();
    EXPECT_THROW(empty.validate(8), invalid_argument);
    XaiConfig bad_t;
    bad_t.thresholds = {0.5, 1.0};
    EXPECT_THROW(bad_t.validate(8), invalid_argument);

    XaiConfig other = c;
    EXPECT_EQ(c.digest(), other.digest());
    other.upscale = UpsampleMode::bilinear;
    EXPECT_NE(c.digest(), other.digest());
    other = c;
    other.aggregator = Aggregator::var;
    EXPECT_NE(c.digest(), other.digest());
    EXPECT_EQ(c.digest().size(), 16u);
}

TEST(XaiConfig, ParseNames) {
    EXPECT_EQ(parse_aggregator("abs"), Aggregator::abs);
    EXPECT_EQ(parse_aggregator("mean"), Aggregator::mean);
    EXPECT_EQ(parse_aggregator("var"), Aggregator::var);
    EXPECT_THROW(parse_aggregator("max"), invalid_argument);
    EXPECT_EQ(parse_upsample("bilinear"), UpsampleMode::bilinear);
    EXPECT_THROW(parse_upsample("cubic"), invalid_argument);
}

TEST(Heatmap, ByteValues) {
    const AttributionMap n{Tensor({1, 3}, {0.0, 0.5, 0.75}), true};
    EXPECT_TRUE(heatmap_bytes(n) == Tensor({1, 3}, {0.0, 128.0, 191.0}));
    EXPECT_THROW(heatmap_bytes(AttributionMap{Tensor({1, 1}), false}), invalid_argument);
}
