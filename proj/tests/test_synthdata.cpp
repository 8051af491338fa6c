#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tilewise/image_io.hpp"
#include "tilewise/synthdata.hpp"

using namespace tilewise;

namespace {

SlideParams with_lesions(std::size_t n) {
    SlideParams p;
    p.lesion_count = n;
    return p;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

struct ChannelStats {
    double mean[3]{}, sd[3]{};
};

ChannelStats tissue_stats(const Tensor& img, const Tensor& tissue_of) {
    ChannelStats st;
    const std::size_t px = img.extent(0) * img.extent(1);
    std::size_t n = 0;
    for (std::size_t i = 0; i < px; ++i) {
        const double m = (tissue_of[3 * i] + tissue_of[3 * i + 1] + tissue_of[3 * i + 2]) / 3.0;
        if (m > kBackgroundLuminance) continue;
        ++n;
        for (int c = 0; c < 3; ++c) st.mean[c] += img[3 * i + c];
    }
    for (double& m : st.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < px; ++i) {
        const double m = (tissue_of[3 * i] + tissue_of[3 * i + 1] + tissue_of[3 * i + 2]) / 3.0;
        if (m > kBackgroundLuminance) continue;
        for (int c = 0; c < 3; ++c) st.sd[c] += (img[3 * i + c] - st.mean[c]) * (img[3 * i + c] - st.mean[c]);
    }
    for (double& s : st.sd) s = std::sqrt(s / static_cast<double>(n));
    return st;
}

double stats_distance(const ChannelStats& a, const ChannelStats& b) {
    double d = 0.0;
    for (int c = 0; c < 3; ++c) d += std::abs(a.mean[c] - b.mean[c]) + std::abs(a.sd[c] - b.sd[c]);
    return d;
}

Tensor tissue_image(std::size_t L, std::size_t tissue_pixels) {
    Tensor img({L, L, 3}, 250.0);
    for (std::size_t i = 0; i < tissue_pixels; ++i) {
        img[3 * i] = 200.0;
        img[3 * i + 1] = 120.0;
        img[3 * i + 2] = 180.0;
    }
    return img;
}

}  // namespace

TEST(GenerateSlide, SameSeedIsBitIdentical) {
    const auto a = generate_slide(17, with_lesions(2));
    const auto b = generate_slide(17, with_lesions(2));
    EXPECT_TRUE(a.image == b.image);
    EXPECT_TRUE(a.lesion_mask == b.lesion_mask);
    const auto c = generate_slide(18, with_lesions(2));
    EXPECT_FALSE(a.image == c.image);
}

TEST(GenerateSlide, NoLesionsMeansNegative) {
    const auto s = generate_slide(3, with_lesions(0));
    EXPECT_EQ(s.label, 0);
    EXPECT_EQ(s.lesion_mask.sum(), 0.0);
    EXPECT_TRUE(s.lesions.empty());
}

TEST(GenerateSlide, MaskIsUnionOfBlobs) {
    const auto s = generate_slide(5, with_lesions(3));
    ASSERT_EQ(s.lesions.size(), 3u);
    EXPECT_EQ(s.label, 1);
    const std::size_t S = s.params.size;
    std::size_t union_count = 0;
    for (std::size_t r = 0; r < S; ++r) {
        for (std::size_t c = 0; c < S; ++c) {
            bool in = false;
            for (const auto& b : s.lesions) in = in || b.contains(r, c);
            union_count += in;
            ASSERT_EQ(s.lesion_mask.at(r, c), in ? 1.0 : 0.0);
        }
    }
    EXPECT_EQ(static_cast<double>(union_count), s.lesion_mask.sum());
}

TEST(GenerateSlide, ImageRangeAndBackgroundMargin) {
    const auto s = generate_slide(9, {});
    for (double v : s.image.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 255.0);
        ASSERT_EQ(v, std::round(v));
    }
    // corners are outside the tissue
    const Tensor corner = crop(s.image, 0, 0, 16, 16);
    EXPECT_EQ(tissue_fraction(corner), 0.0);
    // lesion pixels are tissue
    const std::size_t px = s.params.size * s.params.size;
    for (std::size_t i = 0; i < px; ++i) {
        if (s.lesion_mask[i] == 0.0) continue;
        ASSERT_LE((s.image[3 * i] + s.image[3 * i + 1] + s.image[3 * i + 2]) / 3.0, kBackgroundLuminance);
    }
}

TEST(GenerateSlide, LesionsKeepClearFromEdges) {
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        const auto s = generate_slide(seed, with_lesions(3));
        for (const auto& b : s.lesions) {
            const double e = b.max_extent(), lim = static_cast<double>(s.params.edge_clearance);
            EXPECT_GE(b.cx - e, lim);
            EXPECT_GE(b.cy - e, lim);
            EXPECT_LE(b.cx + e, static_cast<double>(s.params.size) - lim);
            EXPECT_LE(b.cy + e, static_cast<double>(s.params.size) - lim);
        }
    }
}

TEST(GenerateSlide, InfeasibleParamsThrow) {
    SlideParams small;
    small.size = 200;
    EXPECT_THROW(generate_slide(1, small), invalid_argument);
    SlideParams radii;
    radii.lesion_radius_min = 30;
    radii.lesion_radius_max = 10;
    EXPECT_THROW(generate_slide(1, radii), invalid_argument);
}

TEST(TileGrid, AllBackgroundSlideGivesEmptyBag) {
    Tensor img({256, 256, 3}, 250.0), mask({256, 256});
    EXPECT_TRUE(tile_grid(img, mask, GridSpec{}).tiles.empty());
}

TEST(TileGrid, TissueThresholdBoundary) {
    const std::size_t L = 64, n = L * L;
    Tensor mask({L, L});
    const auto at79 = tile_grid(tissue_image(L, static_cast<std::size_t>(0.79 * n)), mask, GridSpec{});
    EXPECT_TRUE(at79.tiles.empty());
    const auto at80 = tile_grid(tissue_image(L, static_cast<std::size_t>(std::ceil(0.8 * n))), mask, GridSpec{});
    ASSERT_EQ(at80.tiles.size(), 1u);
    EXPECT_GE(at80.tiles[0].tissue_fraction, 0.8);
    const auto below = tile_grid(tissue_image(L, static_cast<std::size_t>(std::ceil(0.8 * n)) - 1), mask, GridSpec{});
    EXPECT_TRUE(below.tiles.empty());
}

TEST(TileGrid, OriginsFollowGridArithmetic) {
    const auto s = generate_slide(21, {});
    for (int dx = 0; dx <= 1; ++dx) {
        for (int dy = 0; dy <= 1; ++dy) {
            GridSpec g{64, dx, dy, 0.0};
            const auto bag = tile_grid(s, g);
            const std::size_t per_axis = (512 - static_cast<std::size_t>(dx) * 16) / 64;
            const std::size_t per_axis_y = (512 - static_cast<std::size_t>(dy) * 16) / 64;
            EXPECT_EQ(bag.tiles.size(), per_axis * per_axis_y);
            for (const auto& t : bag.tiles) {
                EXPECT_EQ(t.x, t.col * 64 + static_cast<std::size_t>(dx) * 16);
                EXPECT_EQ(t.y, t.row * 64 + static_cast<std::size_t>(dy) * 16);
                EXPECT_TRUE(t.image == crop(s.image, t.y, t.x, 64, 64));
                EXPECT_TRUE(t.mask == crop(s.lesion_mask, t.y, t.x, 64, 64));
            }
        }
    }
}

TEST(TileGrid, KeptTilesMeetThresholdAndAreDeterministic) {
    const auto s = generate_slide(22, {});
    const auto a = tile_grid(s, GridSpec{});
    const auto b = tile_grid(s, GridSpec{});
    ASSERT_EQ(a.tiles.size(), b.tiles.size());
    EXPECT_GT(a.tiles.size(), 0u);
    for (const auto& t : a.tiles) EXPECT_GE(t.tissue_fraction, 0.8);
}

TEST(TileGrid, TileLargerThanSlideThrows) {
    Tensor img({32, 32, 3}, 200.0), mask({32, 32});
    EXPECT_THROW(tile_grid(img, mask, GridSpec{64}), invalid_argument);
}

TEST(TileGrid, InvalidGridSpecThrows) {
    Tensor img({128, 128, 3}, 200.0), mask({128, 128});
    EXPECT_THROW(tile_grid(img, mask, GridSpec{62}), invalid_argument);
    EXPECT_THROW(tile_grid(img, mask, GridSpec{64, 2, 0}), invalid_argument);
    EXPECT_THROW(tile_grid(img, mask, GridSpec{64, 0, 0, 1.5}), invalid_argument);
}

TEST(TileOverlap, ShiftedGridFractions) {
    const std::size_t L = 64;
    const auto r10 = tile_overlap(0, 0, L / 4, 0, L);
    EXPECT_EQ(r10.area(), 3 * L / 4 * L);
    EXPECT_DOUBLE_EQ(static_cast<double>(r10.area()) / (L * L), 0.75);
    const auto r11 = tile_overlap(0, 0, L / 4, L / 4, L);
    EXPECT_DOUBLE_EQ(static_cast<double>(r11.area()) / (L * L), 9.0 / 16.0);
    EXPECT_EQ(tile_overlap(0, 0, L, 0, L).area(), 0u);
    const auto r = tile_overlap(64, 0, 16, 16, L);
    EXPECT_EQ(r.x, 64u);
    EXPECT_EQ(r.y, 16u);
    EXPECT_EQ(r.width, 16u);
    EXPECT_EQ(r.height, 48u);
}

TEST(TileOverlap, MatchesGridClosedForm) {
    // Tiles (i, j) of grid a and (k, m) of grid b: overlap along x is
    // max(0, L - |(k - i) L + (bx - ax) L/4|), likewise along y.
    const std::size_t L = 64;
    for (int ax = 0; ax <= 1; ++ax)
        for (int bx = 0; bx <= 1; ++bx)
            for (int i = 0; i < 3; ++i)
                for (int k = 0; k < 3; ++k) {
                    const long ox = i * 64 + ax * 16, px = k * 64 + bx * 16;
                    const long w = std::max(0L, 64L - std::labs(px - ox));
                    const auto r = tile_overlap(static_cast<std::size_t>(ox), 0, static_cast<std::size_t>(px), 0, L);
                    EXPECT_EQ(static_cast<long>(r.area()), w * 64);
                }
}

TEST(TileBag, LabelConsistentWithTileMasks) {
    for (std::uint64_t seed = 200; seed < 230; ++seed) {
        const auto s = generate_slide(seed, with_lesions(seed % 3));
        const auto bag = tile_grid(s, GridSpec{});
        bool any = false;
        for (const auto& t : bag.tiles) any = any || t.mask.sum() > 0;
        EXPECT_EQ(bag.label, s.label);
        EXPECT_EQ(any, s.label == 1) << "seed " << seed;
    }
}

TEST(Macenko, SelfNormalizationIsNearIdentity) {
    const auto s = generate_slide(31, {});
    const auto ref = estimate_stains(s.image);
    const Tensor out = macenko_normalize(s.image, ref);
    EXPECT_LE(mean_abs_diff(out, s.image), 2.0);

    const auto bag = tile_grid(s, GridSpec{});
    ASSERT_FALSE(bag.tiles.empty());
    const Tensor& tile = bag.tiles.front().image;
    const Tensor tout = macenko_normalize(tile, estimate_stains(tile));
    EXPECT_LE(mean_abs_diff(tout, tile), 2.0);
}

TEST(Macenko, EstimatedBasisIsCloseToGeneratingStains) {
    const auto s = generate_slide(32, {});
    const auto ref = estimate_stains(s.image);
    const auto truth = default_stain_matrix();
    for (int c = 0; c < 2; ++c) EXPECT_GT(ref.stains.col(c).dot(truth.col(c)), 0.97);
}

TEST(Macenko, AllWhiteTileFails) {
    Tensor white({64, 64, 3}, 255.0);
    EXPECT_THROW(estimate_stains(white), normalization_error);
    const auto ref = estimate_stains(generate_slide(33, {}).image);
    EXPECT_THROW(macenko_normalize(white, ref), normalization_error);
    const auto r = normalize_or_passthrough(white, ref);
    EXPECT_TRUE(r.failed);
    EXPECT_FALSE(r.warning.empty());
    EXPECT_TRUE(r.image == white);
}

TEST(Macenko, GrayscaleTileIsRankDeficient) {
    Tensor gray({64, 64, 3});
    for (std::size_t i = 0; i < 64 * 64; ++i) {
        const double v = 60.0 + static_cast<double>(i % 97);
        gray[3 * i] = gray[3 * i + 1] = gray[3 * i + 2] = v;
    }
    EXPECT_THROW(estimate_stains(gray), normalization_error);
}

TEST(Macenko, NormalizationUndoesStainPerturbation) {
    for (std::uint64_t seed = 40; seed < 45; ++seed) {
        const auto s = generate_slide(seed, {});
        const auto ref = estimate_stains(s.image);
        const Tensor perturbed = stain_perturb(s.image, seed * 7 + 1, 0.15);
        const Tensor restored = macenko_normalize(perturbed, ref);
        const auto target = tissue_stats(s.image, s.image);
        const double before = stats_distance(tissue_stats(perturbed, s.image), target);
        const double after = stats_distance(tissue_stats(restored, s.image), target);
        EXPECT_LT(after, before) << "seed " << seed;
    }
}

TEST(StainPerturb, DeterministicAndChangesColours) {
    const auto s = generate_slide(50, {});
    const Tensor a = stain_perturb(s.image, 1), b = stain_perturb(s.image, 1), c = stain_perturb(s.image, 2);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
    EXPECT_GT(mean_abs_diff(a, s.image), 1.0);
    for (double v : a.values()) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 255.0);
    }
}

TEST(ImageIo, PngAndPgmRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "tilewise_io_test";
    std::filesystem::create_directories(dir);
    const auto s = generate_slide(60, {});
    write_png(dir / "slide.png", s.image);
    EXPECT_TRUE(read_png(dir / "slide.png") == s.image);
    Tensor mask255 = s.lesion_mask;
    for (auto& v : mask255.values()) v *= 255.0;
    write_pgm(dir / "mask.pgm", mask255);
    EXPECT_TRUE(read_pgm(dir / "mask.pgm") == mask255);
    write_png(dir / "mask.png", mask255);
    EXPECT_TRUE(channel_slice(read_png(dir / "mask.png"), 1) == mask255);
    EXPECT_THROW(read_png(dir / "missing.png"), io_error);
    EXPECT_THROW(read_pgm(dir / "missing.pgm"), io_error);
    std::filesystem::remove_all(dir);
}
