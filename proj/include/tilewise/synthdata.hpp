#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

// ---------------------------------------------------------------------------
// Synthetic slides
// ---------------------------------------------------------------------------

/// Pixels whose RGB mean exceeds this value are background (non-tissue).
inline constexpr double kBackgroundLuminance = 240.0;

struct SlideParams {
    std::size_t size = 512;
    std::size_t lesion_count = 2;
    double lesion_radius_min = 18.0;
    double lesion_radius_max = 40.0;
    /// Width in pixels of the graded lesion boundary band.
    double boundary_band = 8.0;
    /// Lesions stay at least this far from the slide edge.
    std::size_t edge_clearance = 64;
    /// Gap between slide edge and tissue region.
    double tissue_margin = 28.0;
    double nuclei_density = 0.008;
    /// Random rotation applied to the slide's stain vectors (0 disables).
    double stain_variation = 0.0;
};

/// One irregular lesion blob: radius(theta) = r0 (1 + sum_k a_k cos(k theta + phi_k)).
struct LesionBlob {
    double cx = 0.0;
    double cy = 0.0;
    double radius = 0.0;
    std::array<double, 3> amplitude{};
    std::array<double, 3> phase{};

    [[nodiscard]] double boundary_radius(double theta) const noexcept {
        double r = 1.0;
        for (std::size_t k = 0; k < amplitude.size(); ++k) {
            r += amplitude[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
        }
        return radius * r;
    }

    /// Approximate signed distance to the blob edge (negative inside).
    [[nodiscard]] double signed_distance(double x, double y) const noexcept {
        const double dx = x - cx, dy = y - cy;
        return std::hypot(dx, dy) - boundary_radius(std::atan2(dy, dx));
    }

    /// Pixel (row, col) belongs to the blob when its centre lies inside.
    [[nodiscard]] bool contains(std::size_t row, std::size_t col) const noexcept {
        return signed_distance(static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5) < 0.0;
    }

    [[nodiscard]] double max_extent() const noexcept {
        double a = 0.0;
        for (double v : amplitude) a += v;
        return radius * (1.0 + a);
    }
};

struct SyntheticSlide {
    Tensor image;        ///< S x S x 3, integer values in [0,255]
    Tensor lesion_mask;  ///< S x S, entries in {0,1}
    int label = 0;
    std::uint64_t seed = 0;
    SlideParams params;
    std::vector<LesionBlob> lesions;
};

/// Optical-density stain vectors (unit length) for hematoxylin and eosin.
inline Eigen::Matrix<double, 3, 2> default_stain_matrix() {
    Eigen::Matrix<double, 3, 2> m;
    m.col(0) = Eigen::Vector3d(0.65, 0.70, 0.29).normalized();
    m.col(1) = Eigen::Vector3d(0.07, 0.99, 0.11).normalized();
    return m;
}

namespace detail {

/// Smooth value noise in [0,1] on an S x S grid with the given cell size.
inline std::vector<double> value_noise(std::size_t size, double cell, std::mt19937_64& rng) {
    const auto n = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / cell)) + 2;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = u(rng);
    std::vector<double> out(size * size);
    for (std::size_t y = 0; y < size; ++y) {
        const double fy = static_cast<double>(y) / cell;
        const auto iy = static_cast<std::size_t>(fy);
        double ty = fy - static_cast<double>(iy);
        ty = ty * ty * (3 - 2 * ty);
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = static_cast<double>(x) / cell;
            const auto ix = static_cast<std::size_t>(fx);
            double tx = fx - static_cast<double>(ix);
            tx = tx * tx * (3 - 2 * tx);
            const double a = lattice[iy * n + ix], b = lattice[iy * n + ix + 1];
            const double c = lattice[(iy + 1) * n + ix], d = lattice[(iy + 1) * n + ix + 1];
            out[y * size + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

inline Eigen::Vector3d rotate_towards(const Eigen::Vector3d& v, const Eigen::Vector3d& axis, double angle) {
    Eigen::Vector3d r = Eigen::AngleAxisd(angle, axis.normalized()) * v;
    return r.cwiseAbs().normalized();
}

}  // namespace detail

/// Deterministic synthetic slide: near-white margin, a textured H&E tissue
/// region, and `lesion_count` irregular lesions with a graded boundary band
/// that carries a dense rim of nuclei. Colours follow Beer-Lambert mixing of
/// two stains so stain normalization has a well-defined basis.
inline SyntheticSlide generate_slide(std::uint64_t seed, const SlideParams& params) {
    const std::size_t S = params.size;
    if (S < 4 * params.edge_clearance) throw invalid_argument("slide size must be at least 4 tile lengths");
    if (params.lesion_radius_min <= 0 || params.lesion_radius_max < params.lesion_radius_min) {
        throw invalid_argument("invalid lesion radius range");
    }
    if (params.boundary_band <= 0) throw invalid_argument("boundary band must be positive");
    const double half = static_cast<double>(S) / 2.0;
    const double tissue_half = half - params.tissue_margin;
    if (tissue_half <= 0) throw invalid_argument("tissue margin leaves no tissue");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.6);

    // Tissue: superellipse with a low-frequency wobble of the boundary.
    std::array<double, 4> wob_amp{}, wob_phase{};
    for (std::size_t k = 0; k < 4; ++k) {
        wob_amp[k] = 0.03 * u(rng);
        wob_phase[k] = 2 * std::numbers::pi * u(rng);
    }
    auto tissue_level = [&](double x, double y) {
        const double dx = (x - half) / tissue_half, dy = (y - half) / tissue_half;
        const double theta = std::atan2(dy, dx);
        double scale = 1.0;
        for (std::size_t k = 0; k < 4; ++k) scale -= wob_amp[k] * (1 + std::cos((k + 3) * theta + wob_phase[k]));
        return std::pow(std::abs(dx) / scale, 4) + std::pow(std::abs(dy) / scale, 4);
    };

    // Lesions must fit inside the clearance box and inside tissue.
    SyntheticSlide slide;
    slide.seed = seed;
    slide.params = params;
    const double lo = static_cast<double>(params.edge_clearance);
    const double hi = static_cast<double>(S - params.edge_clearance);
    for (std::size_t i = 0; i < params.lesion_count; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            LesionBlob b;
            b.radius = params.lesion_radius_min + (params.lesion_radius_max - params.lesion_radius_min) * u(rng);
            for (std::size_t k = 0; k < 3; ++k) {
                b.amplitude[k] = 0.12 * u(rng);
                b.phase[k] = 2 * std::numbers::pi * u(rng);
            }
            const double ext = b.max_extent() + params.boundary_band;
            if (hi - lo < 2 * ext) continue;
            b.cx = lo + ext + (hi - lo - 2 * ext) * u(rng);
            b.cy = lo + ext + (hi - lo - 2 * ext) * u(rng);
            bool inside = true;
            for (int k = 0; k < 32 && inside; ++k) {
                const double th = 2 * std::numbers::pi * k / 32;
                inside = tissue_level(b.cx + ext * std::cos(th), b.cy + ext * std::sin(th)) < 0.9;
            }
            if (!inside) continue;
            slide.lesions.push_back(b);
            placed = true;
        }
        if (!placed) throw invalid_argument("cannot place lesion " + std::to_string(i) + " inside tissue");
    }

    Eigen::Matrix<double, 3, 2> stains = default_stain_matrix();
    if (params.stain_variation > 0) {
        for (int c = 0; c < 2; ++c) {
            Eigen::Vector3d axis(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
            stains.col(c) = detail::rotate_towards(stains.col(c), axis, params.stain_variation * (2 * u(rng) - 1));
        }
    }

    // Concentration fields.
    const auto tex_coarse = detail::value_noise(S, 48.0, rng);
    const auto tex_fine = detail::value_noise(S, 9.0, rng);
    const auto tex_h = detail::value_noise(S, 16.0, rng);
    std::vector<double> conc_h(S * S), conc_e(S * S), lesion_w(S * S, 0.0);
    std::vector<unsigned char> tissue(S * S, 0);
    slide.lesion_mask = Tensor({S, S});
    const double band = params.boundary_band;
    for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
            const std::size_t i = y * S + x;
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            tissue[i] = tissue_level(px, py) <= 1.0;
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : slide.lesions) best = std::min(best, b.signed_distance(px, py));
            if (best < 0.0) slide.lesion_mask[i] = 1.0;
            lesion_w[i] = std::clamp(0.5 - best / band, 0.0, 1.0);
            const double t = 0.6 * tex_coarse[i] + 0.4 * tex_fine[i];
            const double h_normal = 0.36 + 0.20 * tex_h[i], e_normal = 0.65 + 0.45 * t;
            const double h_lesion = 0.12 + 0.05 * tex_fine[i], e_lesion = 1.40 + 0.25 * tex_fine[i];
            const double w = lesion_w[i];
            conc_h[i] = (1 - w) * h_normal + w * h_lesion;
            conc_e[i] = (1 - w) * e_normal + w * e_lesion;
        }
    }

    auto stamp = [&](double cx, double cy, double r, double strength) {
        const auto rr = static_cast<long>(std::ceil(r));
        const auto xi = static_cast<long>(cx), yi = static_cast<long>(cy);
        for (long dy = -rr; dy <= rr; ++dy) {
            for (long dx = -rr; dx <= rr; ++dx) {
                const long yy = yi + dy, xx = xi + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(S) || xx >= static_cast<long>(S)) continue;
                const double d = std::hypot(static_cast<double>(dx), static_cast<double>(dy));
                if (d > r) continue;
                const std::size_t j = static_cast<std::size_t>(yy) * S + static_cast<std::size_t>(xx);
                if (!tissue[j]) continue;
                conc_h[j] += strength * (1.0 - 0.4 * d / r);
            }
        }
    };

    // Nuclei: dense in parenchyma, sparse small debris inside lesions.
    const auto candidates = static_cast<std::size_t>(params.nuclei_density * static_cast<double>(S * S));
    for (std::size_t n = 0; n < candidates; ++n) {
        const double x = u(rng) * static_cast<double>(S), y = u(rng) * static_cast<double>(S);
        const double accept = u(rng);
        const double r_jitter = u(rng);
        const auto xi = std::min(static_cast<std::size_t>(x), S - 1), yi = std::min(static_cast<std::size_t>(y), S - 1);
        const std::size_t c = yi * S + xi;
        if (!tissue[c]) continue;
        const bool debris = lesion_w[c] > 0.5;
        if (accept > (debris ? 0.35 : 0.6)) continue;
        if (debris) {
            stamp(x, y, 0.8 + 0.6 * r_jitter, 0.7);
        } else {
            stamp(x, y, 1.8 + 1.6 * r_jitter, 1.0);
        }
    }

    // Crowded rim of nuclei along every lesion boundary band.
    for (const auto& b : slide.lesions) {
        const auto count = static_cast<std::size_t>(2.0 * std::numbers::pi * b.radius / 2.2);
        for (std::size_t n = 0; n < count; ++n) {
            const double th = 2 * std::numbers::pi * u(rng);
            const double off = (u(rng) - 0.5) * band;
            const double r = b.boundary_radius(th) + off;
            const double rad = 1.6 + 1.2 * u(rng);
            stamp(b.cx + r * std::cos(th), b.cy + r * std::sin(th), rad, 1.2);
        }
    }

    slide.image = Tensor({S, S, 3});
    for (std::size_t i = 0; i < S * S; ++i) {
        std::array<double, 3> rgb{};
        if (tissue[i]) {
            const Eigen::Vector3d od = stains.col(0) * conc_h[i] + stains.col(1) * conc_e[i];
            for (int c = 0; c < 3; ++c) rgb[c] = 255.0 * std::exp(-od[c]) + noise(rng);
            const double mean = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
            if (mean > kBackgroundLuminance - 5.0) {
                for (auto& v : rgb) v -= mean - (kBackgroundLuminance - 5.0);
            }
        } else {
            for (auto& v : rgb) v = 248.0 + noise(rng);
        }
        for (int c = 0; c < 3; ++c) slide.image[3 * i + static_cast<std::size_t>(c)] = std::clamp(std::round(rgb[c]), 0.0, 255.0);
    }
    slide.label = slide.lesion_mask.sum() > 0.0 ? 1 : 0;
    return slide;
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

struct GridSpec {
    std::size_t tile_size = 64;
    /// Shift in units of tile_size / 4, each in {0, 1}.
    int shift_x = 0;
    int shift_y = 0;
    double tissue_threshold = 0.8;

    void validate() const {
        if (tile_size == 0 || tile_size % 4) throw invalid_argument("tile size must be a positive multiple of 4");
        if ((shift_x != 0 && shift_x != 1) || (shift_y != 0 && shift_y != 1)) {
            throw invalid_argument("grid shift components must be 0 or 1");
        }
        if (!(tissue_threshold >= 0.0 && tissue_threshold <= 1.0)) {
            throw invalid_argument("tissue threshold must lie in [0,1]");
        }
    }
    [[nodiscard]] std::size_t offset_x() const { return static_cast<std::size_t>(shift_x) * tile_size / 4; }
    [[nodiscard]] std::size_t offset_y() const { return static_cast<std::size_t>(shift_y) * tile_size / 4; }
    [[nodiscard]] std::string shift_code() const { return std::to_string(shift_x) + std::to_string(shift_y); }
};

struct Tile {
    Tensor image;  ///< L x L x 3
    Tensor mask;   ///< L x L ground-truth crop
    std::size_t x = 0;  ///< origin column in slide pixels
    std::size_t y = 0;  ///< origin row in slide pixels
    std::size_t col = 0;
    std::size_t row = 0;
    double tissue_fraction = 0.0;
};

struct TileBag {
    std::uint64_t slide_seed = 0;
    int label = 0;
    GridSpec grid;
    std::vector<Tile> tiles;

    [[nodiscard]] std::vector<Tensor> images() const {
        std::vector<Tensor> out;
        out.reserve(tiles.size());
        for (const auto& t : tiles) out.push_back(t.image);
        return out;
    }
};

/// Share of non-background pixels of an H x W x 3 image.
inline double tissue_fraction(const Tensor& image) {
    const std::size_t px = image.extent(0) * image.extent(1);
    std::size_t tissue = 0;
    for (std::size_t i = 0; i < px; ++i) {
        const double mean = (image[3 * i] + image[3 * i + 1] + image[3 * i + 2]) / 3.0;
        if (mean <= kBackgroundLuminance) ++tissue;
    }
    return static_cast<double>(tissue) / static_cast<double>(px);
}

/// Cut the grid with origins (i L + dx L/4, j L + dy L/4) that fit inside the
/// image, keeping tiles whose tissue fraction reaches the threshold.
inline TileBag tile_grid(const Tensor& image, const Tensor& mask, const GridSpec& grid) {
    grid.validate();
    if (image.rank() != 3 || image.extent(2) != 3) throw shape_error("slide image must be S x S x 3");
    if (mask.shape() != Shape{image.extent(0), image.extent(1)}) throw shape_error("mask must match slide extents");
    const std::size_t L = grid.tile_size, H = image.extent(0), W = image.extent(1);
    if (L > H || L > W) throw invalid_argument("tile size larger than slide");
    TileBag bag;
    bag.grid = grid;
    const double need = grid.tissue_threshold * static_cast<double>(L * L);
    for (std::size_t row = 0; grid.offset_y() + (row + 1) * L <= H; ++row) {
        for (std::size_t col = 0; grid.offset_x() + (col + 1) * L <= W; ++col) {
            const std::size_t y = grid.offset_y() + row * L, x = grid.offset_x() + col * L;
            Tensor img = crop(image, y, x, L, L);
            const double frac = tissue_fraction(img);
            if (frac * static_cast<double>(L * L) + 1e-9 < need) continue;
            Tile t;
            t.image = std::move(img);
            t.mask = crop(mask, y, x, L, L);
            t.x = x;
            t.y = y;
            t.col = col;
            t.row = row;
            t.tissue_fraction = frac;
            bag.tiles.push_back(std::move(t));
        }
    }
    return bag;
}

inline TileBag tile_grid(const SyntheticSlide& slide, const GridSpec& grid) {
    TileBag bag = tile_grid(slide.image, slide.lesion_mask, grid);
    bag.slide_seed = slide.seed;
    bag.label = slide.label;
    return bag;
}

struct Rect {
    std::size_t x = 0, y = 0, width = 0, height = 0;
    [[nodiscard]] std::size_t area() const noexcept { return width * height; }
};

/// Intersection of two L x L tiles given their origins; empty if disjoint.
inline Rect tile_overlap(std::size_t ax, std::size_t ay, std::size_t bx, std::size_t by, std::size_t L) {
    const std::size_t x0 = std::max(ax, bx), y0 = std::max(ay, by);
    const std::size_t x1 = std::min(ax + L, bx + L), y1 = std::min(ay + L, by + L);
    if (x1 <= x0 || y1 <= y0) return {};
    return {x0, y0, x1 - x0, y1 - y0};
}

// ---------------------------------------------------------------------------
// Stain perturbation and Macenko normalization
// ---------------------------------------------------------------------------

/// Stain basis (unit OD vectors, hematoxylin first) and robust maximum
/// concentrations of a reference image.
struct StainReference {
    Eigen::Matrix<double, 3, 2> stains = default_stain_matrix();
    std::array<double, 2> max_concentration{1.0, 1.0};
};

struct MacenkoParams {
    double io = 255.0;
    /// Pixels whose OD vector is shorter than this are discarded (near white).
    double od_threshold = 0.15;
    /// Angular percentile for the robust extremes, in percent.
    double alpha = 1.0;
    /// Percentile used for the maximum concentrations.
    double max_percentile = 99.0;
    std::size_t min_pixels = 16;
};

namespace detail {

inline double percentile(std::vector<double> v, double pct) {
    if (v.empty()) throw invalid_argument("percentile of empty sample");
    std::sort(v.begin(), v.end());
    const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline Eigen::Matrix3Xd optical_density(const Tensor& rgb, double io) {
    const std::size_t px = rgb.size() / 3;
    Eigen::Matrix3Xd od(3, static_cast<Eigen::Index>(px));
    for (std::size_t i = 0; i < px; ++i) {
        for (int c = 0; c < 3; ++c) {
            od(c, static_cast<Eigen::Index>(i)) = -std::log(std::max(rgb[3 * i + static_cast<std::size_t>(c)], 1.0) / io);
        }
    }
    return od;
}

}  // namespace detail

/// Estimate the stain basis and maximum concentrations of an RGB image:
/// optical density, drop near-white pixels, project onto the plane of the two
/// leading eigenvectors of the OD covariance, take robust angle extremes as
/// stain vectors, then least-squares concentrations.
inline StainReference estimate_stains(const Tensor& rgb, const MacenkoParams& p = {}) {
    if (rgb.rank() != 3 || rgb.extent(2) != 3) throw shape_error("stain estimation expects H x W x 3");
    const Eigen::Matrix3Xd od = detail::optical_density(rgb, p.io);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < od.cols(); ++i) {
        if (od.col(i).norm() >= p.od_threshold) keep.push_back(i);
    }
    if (keep.size() < p.min_pixels) {
        throw normalization_error("too few stained pixels for stain estimation (" + std::to_string(keep.size()) + ")");
    }
    Eigen::Matrix3Xd tissue(3, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) tissue.col(static_cast<Eigen::Index>(i)) = od.col(keep[i]);

    const Eigen::Vector3d mean = tissue.rowwise().mean();
    const Eigen::Matrix3Xd centered = tissue.colwise() - mean;
    const Eigen::Matrix3d cov = centered * centered.transpose() / static_cast<double>(tissue.cols());
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    const Eigen::Vector3d ev = eig.eigenvalues();  // ascending
    if (!(ev[2] > 0.0) || ev[1] < 1e-6 * ev[2]) {
        throw normalization_error("optical density is rank deficient; cannot separate two stains");
    }
    Eigen::Matrix<double, 3, 2> plane;
    plane.col(0) = eig.eigenvectors().col(2);
    plane.col(1) = eig.eigenvectors().col(1);
    for (int c = 0; c < 2; ++c) {
        if (plane.col(c).sum() < 0) plane.col(c) *= -1.0;
    }

    const Eigen::Matrix2Xd proj = plane.transpose() * tissue;
    std::vector<double> angles(static_cast<std::size_t>(proj.cols()));
    for (Eigen::Index i = 0; i < proj.cols(); ++i) angles[static_cast<std::size_t>(i)] = std::atan2(proj(1, i), proj(0, i));
    const double amin = detail::percentile(angles, p.alpha);
    const double amax = detail::percentile(angles, 100.0 - p.alpha);
    Eigen::Vector3d v1 = plane * Eigen::Vector2d(std::cos(amin), std::sin(amin));
    Eigen::Vector3d v2 = plane * Eigen::Vector2d(std::cos(amax), std::sin(amax));
    if (v1.norm() == 0 || v2.norm() == 0 || (v1.normalized() - v2.normalized()).norm() < 1e-6) {
        throw normalization_error("stain vectors collapsed");
    }
    StainReference ref;
    // Hematoxylin absorbs more red than eosin.
    if (v1[0] >= v2[0]) {
        ref.stains.col(0) = v1.normalized();
        ref.stains.col(1) = v2.normalized();
    } else {
        ref.stains.col(0) = v2.normalized();
        ref.stains.col(1) = v1.normalized();
    }
    const Eigen::Matrix2Xd conc = ref.stains.colPivHouseholderQr().solve(tissue);
    for (int s = 0; s < 2; ++s) {
        std::vector<double> row(static_cast<std::size_t>(conc.cols()));
        for (Eigen::Index i = 0; i < conc.cols(); ++i) row[static_cast<std::size_t>(i)] = conc(s, i);
        ref.max_concentration[static_cast<std::size_t>(s)] = detail::percentile(row, p.max_percentile);
        if (!(ref.max_concentration[static_cast<std::size_t>(s)] > 0)) {
            throw normalization_error("non-positive maximum stain concentration");
        }
    }
    return ref;
}

/// Map an RGB image onto the reference stain basis and concentration range.
/// Throws normalization_error when the image's own basis cannot be estimated.
inline Tensor macenko_normalize(const Tensor& rgb, const StainReference& reference, const MacenkoParams& p = {}) {
    const StainReference source = estimate_stains(rgb, p);
    const Eigen::Matrix3Xd od = detail::optical_density(rgb, p.io);
    Eigen::Matrix2Xd conc = source.stains.colPivHouseholderQr().solve(od);
    for (int s = 0; s < 2; ++s) {
        conc.row(s) *= reference.max_concentration[static_cast<std::size_t>(s)] /
                       source.max_concentration[static_cast<std::size_t>(s)];
    }
    const Eigen::Matrix3Xd out_od = reference.stains * conc;
    Tensor out(rgb.shape());
    for (Eigen::Index i = 0; i < out_od.cols(); ++i) {
        for (int c = 0; c < 3; ++c) {
            out[3 * static_cast<std::size_t>(i) + static_cast<std::size_t>(c)] =
                std::clamp(p.io * std::exp(-out_od(c, i)), 0.0, 255.0);
        }
    }
    return out;
}

struct NormalizedTile {
    Tensor image;
    bool failed = false;
    std::string warning;
};

/// Normalization that passes the input through unchanged, with a warning
/// flag, when the stain basis cannot be estimated.
inline NormalizedTile normalize_or_passthrough(const Tensor& rgb, const StainReference& reference,
                                               const MacenkoParams& p = {}) {
    try {
        return {macenko_normalize(rgb, reference, p), false, {}};
    } catch (const normalization_error& e) {
        return {rgb, true, e.what()};
    }
}

/// Random invertible stain mixing in optical-density space followed by a
/// brightness jitter; `strength` scales both.
inline Tensor stain_perturb(const Tensor& rgb, std::uint64_t seed, double strength = 0.15) {
    if (rgb.rank() != 3 || rgb.extent(2) != 3) throw shape_error("stain_perturb expects H x W x 3");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::Matrix3d mix;
    do {
        mix = Eigen::Matrix3d::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) mix(r, c) += strength * u(rng);
    } while (std::abs(mix.determinant()) < 0.5);
    // Brightness acts on optical density (uniformly lighter or darker
    // staining), which keeps stained pixels on a plane through the origin.
    const double brightness = 1.0 + 0.5 * strength * u(rng);
    const Eigen::Matrix3Xd od = detail::optical_density(rgb, 255.0);
    const Eigen::Matrix3Xd mixed = brightness * mix * od;
    Tensor out(rgb.shape());
    for (Eigen::Index i = 0; i < mixed.cols(); ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = 255.0 * std::exp(-std::max(mixed(c, i), 0.0));
            out[3 * static_cast<std::size_t>(i) + static_cast<std::size_t>(c)] = std::clamp(v, 0.0, 255.0);
        }
    }
    return out;
}

}  // namespace tilewise
