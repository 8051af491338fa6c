#pragma once

// End-to-end experiments: config schema, deterministic data splits, model
// training, explanation sweeps over the test split and the shifted-grid
// stability study. All outputs land under ExperimentConfig::out.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tilewise/checkpoint.hpp"
#include "tilewise/config.hpp"
#include "tilewise/errors.hpp"
#include "tilewise/image_io.hpp"
#include "tilewise/metrics.hpp"
#include "tilewise/nets.hpp"
#include "tilewise/parallel.hpp"
#include "tilewise/synthdata.hpp"
#include "tilewise/xai.hpp"

namespace tilewise {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DataConfig {
    std::size_t slide_size = 512;
    std::size_t tile_size = 64;
    std::size_t train_slides = 40;
    std::size_t val_slides = 10;
    std::size_t test_slides = 60;
    double positive_fraction = 0.5;
    std::size_t max_lesions = 3;
    double lesion_radius_min = 18.0;
    double lesion_radius_max = 40.0;
    double tissue_threshold = 0.8;
    double stain_variation = 0.0;
    bool macenko = false;
    /// 0: fixed train/test split; 1 or 2: one half of the pooled train+test
    /// slides becomes the test split (2-fold mini cross-validation).
    int fold = 0;
};

struct ModelConfig {
    std::vector<std::size_t> conv_widths{8, 8, 16, 16, 32, 32, 32, 32};
    std::vector<int> pool_after{2, 4, 6};
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 32;
};

struct MilConfig {
    /// "frozen": pre-trained backbone kept fixed, head trained by MIL on
    /// cached features. "end-to-end": every weight trained by MIL.
    std::string mode = "frozen";
    std::size_t pretrain_epochs = 12;
    double pretrain_lr = 0.03;
    std::size_t pretrain_batch = 16;
    std::size_t negatives_per_slide = 4;
    /// Tiles with at least this lesion fraction are positives for
    /// pre-training; tiles strictly between 0 and this are skipped.
    double positive_tile_fraction = 0.02;
    std::size_t epochs = 15;
    double lr = 0.01;
};

struct SegTrainConfig {
    std::size_t width1 = 8;
    std::size_t width2 = 16;
    std::size_t width3 = 16;
    std::size_t train_tiles = 200;
    std::size_t val_tiles = 48;
    std::size_t epochs = 8;
    double lr = 0.05;
};

struct XaiSettings {
    std::vector<int> layers{2, 4, 6, 8};
    std::string aggregator = "abs";
    std::string upscale = "nearest";
    bool layer_max_normalize = false;
    std::vector<double> thresholds{0.5, 0.8, 0.9, 0.95};
    std::size_t heatmap_limit = 24;
};

struct StabilityConfig {
    double floor = 0.2;
    double threshold = 0.9;
    std::vector<std::string> shifts{"01", "10", "11"};
    std::vector<double> overlap_edges{0.0, 0.1, 0.2, 0.5, 0.7, 1.0};
    std::vector<double> difference_edges{0.0, 0.1, 0.2, 0.3, 0.5, 1.0};
    std::vector<double> annotation_edges{0.0, 0.05, 0.25, 0.5, 0.75, 1.0};
};

struct ExperimentConfig {
    std::uint64_t seed = 7;
    std::string out = "tilewise_out";
    std::size_t threads = 1;
    DataConfig data;
    ModelConfig model;
    MilConfig mil;
    SegTrainConfig segnet;
    XaiSettings xai;
    StabilityConfig stability;

    /// Calls f(key, field) for every field, in dump order.
    template <typename Self, typename F>
    static void visit(Self& c, F&& f) {
        f("experiment.seed", c.seed);
        f("experiment.out", c.out);
        f("experiment.threads", c.threads);
        f("data.slide_size", c.data.slide_size);
        f("data.tile_size", c.data.tile_size);
        f("data.train_slides", c.data.train_slides);
        f("data.val_slides", c.data.val_slides);
        f("data.test_slides", c.data.test_slides);
        f("data.positive_fraction", c.data.positive_fraction);
        f("data.max_lesions", c.data.max_lesions);
        f("data.lesion_radius_min", c.data.lesion_radius_min);
        f("data.lesion_radius_max", c.data.lesion_radius_max);
        f("data.tissue_threshold", c.data.tissue_threshold);
        f("data.stain_variation", c.data.stain_variation);
        f("data.macenko", c.data.macenko);
        f("data.fold", c.data.fold);
        f("model.conv_widths", c.model.conv_widths);
        f("model.pool_after", c.model.pool_after);
        f("model.hidden1", c.model.hidden1);
        f("model.hidden2", c.model.hidden2);
        f("mil.mode", c.mil.mode);
        f("mil.pretrain_epochs", c.mil.pretrain_epochs);
        f("mil.pretrain_lr", c.mil.pretrain_lr);
        f("mil.pretrain_batch", c.mil.pretrain_batch);
        f("mil.negatives_per_slide", c.mil.negatives_per_slide);
        f("mil.positive_tile_fraction", c.mil.positive_tile_fraction);
        f("mil.epochs", c.mil.epochs);
        f("mil.lr", c.mil.lr);
        f("segnet.width1", c.segnet.width1);
        f("segnet.width2", c.segnet.width2);
        f("segnet.width3", c.segnet.width3);
        f("segnet.train_tiles", c.segnet.train_tiles);
        f("segnet.val_tiles", c.segnet.val_tiles);
        f("segnet.epochs", c.segnet.epochs);
        f("segnet.lr", c.segnet.lr);
        f("xai.layers", c.xai.layers);
        f("xai.aggregator", c.xai.aggregator);
        f("xai.upscale", c.xai.upscale);
        f("xai.layer_max_normalize", c.xai.layer_max_normalize);
        f("xai.thresholds", c.xai.thresholds);
        f("xai.heatmap_limit", c.xai.heatmap_limit);
        f("stability.floor", c.stability.floor);
        f("stability.threshold", c.stability.threshold);
        f("stability.shifts", c.stability.shifts);
        f("stability.overlap_edges", c.stability.overlap_edges);
        f("stability.difference_edges", c.stability.difference_edges);
        f("stability.annotation_edges", c.stability.annotation_edges);
    }

    [[nodiscard]] ClassifierConfig classifier_config() const {
        ClassifierConfig c;
        c.tile_size = data.tile_size;
        c.conv_widths = model.conv_widths;
        c.pool_after = model.pool_after;
        c.hidden1 = model.hidden1;
        c.hidden2 = model.hidden2;
        c.frozen_backbone = mil.mode == "frozen";
        return c;
    }

    [[nodiscard]] SegNetConfig segnet_config() const {
        return {data.tile_size, segnet.width1, segnet.width2, segnet.width3, 2};
    }

    [[nodiscard]] XaiConfig xai_config() const {
        XaiConfig x;
        x.layers = xai.layers;
        x.aggregator = parse_aggregator(xai.aggregator);
        x.upscale = parse_upsample(xai.upscale);
        x.per_layer_max_normalize = xai.layer_max_normalize;
        x.thresholds = xai.thresholds;
        return x;
    }

    [[nodiscard]] GridSpec grid(int shift_x = 0, int shift_y = 0) const {
        GridSpec g;
        g.tile_size = data.tile_size;
        g.shift_x = shift_x;
        g.shift_y = shift_y;
        g.tissue_threshold = data.tissue_threshold;
        return g;
    }

    /// Throws config_error on any inconsistent value.
    void validate() const {
        auto require = [](bool ok, const std::string& what) {
            if (!ok) throw config_error(what);
        };
        require(seed < 1'000'000'000'000ull, "experiment.seed must be below 1e12");
        require(!out.empty(), "experiment.out must not be empty");
        require(data.tile_size >= 8 && data.tile_size % 4 == 0, "data.tile_size must be a multiple of 4 (>= 8)");
        require(data.slide_size >= 4 * data.tile_size, "data.slide_size must be at least 4 tile lengths");
        require(data.train_slides < 300'000 && data.val_slides < 300'000 && data.test_slides < 300'000,
                "slide counts must be below 300000 per split");
        require(data.positive_fraction >= 0.0 && data.positive_fraction <= 1.0,
                "data.positive_fraction must lie in [0,1]");
        require(data.max_lesions >= 1, "data.max_lesions must be >= 1");
        require(data.lesion_radius_min > 0 && data.lesion_radius_max >= data.lesion_radius_min,
                "data.lesion_radius_min/max must satisfy 0 < min <= max");
        require(data.tissue_threshold >= 0.0 && data.tissue_threshold <= 1.0, "data.tissue_threshold must lie in [0,1]");
        require(data.stain_variation >= 0.0, "data.stain_variation must be >= 0");
        require(data.fold >= 0 && data.fold <= 2, "data.fold must be 0, 1 or 2");
        require(mil.mode == "frozen" || mil.mode == "end-to-end", "mil.mode must be \"frozen\" or \"end-to-end\"");
        require(mil.lr > 0 && mil.pretrain_lr > 0 && segnet.lr > 0, "learning rates must be positive");
        require(mil.pretrain_batch >= 1, "mil.pretrain_batch must be >= 1");
        require(mil.positive_tile_fraction > 0.0 && mil.positive_tile_fraction <= 1.0,
                "mil.positive_tile_fraction must lie in (0,1]");
        require(mil.mode == "end-to-end" || mil.pretrain_epochs > 0, "frozen mode needs mil.pretrain_epochs > 0");
        require(xai.heatmap_limit <= 100'000, "xai.heatmap_limit is unreasonably large");
        require(stability.floor >= 0.0 && stability.floor < 1.0, "stability.floor must lie in [0,1)");
        require(stability.threshold >= 0.0 && stability.threshold < 1.0, "stability.threshold must lie in [0,1)");
        for (const auto& s : stability.shifts) {
            require(s == "01" || s == "10" || s == "11", "stability.shifts entries must be \"01\", \"10\" or \"11\"");
        }
        for (const auto* edges : {&stability.overlap_edges, &stability.difference_edges, &stability.annotation_edges}) {
            require(edges->size() >= 2 && std::is_sorted(edges->begin(), edges->end()) &&
                        std::adjacent_find(edges->begin(), edges->end()) == edges->end(),
                    "stability bin edges must be strictly increasing with at least two entries");
        }
        try {
            (void)TileClassifier(classifier_config(), 0);
            (void)SegNet(segnet_config(), 0);
            xai_config().validate(static_cast<int>(model.conv_widths.size()));
        } catch (const error& e) {
            throw config_error(e.what());
        }
    }
};

/// Parse a table into a config; unknown keys and wrong types are errors.
inline ExperimentConfig config_from_table(const ConfigTable& table) {
    ExperimentConfig c;
    ConfigReader reader(table);
    ExperimentConfig::visit(c, [&](const char* key, auto& field) { reader.read(key, field); });
    reader.reject_unknown();
    c.validate();
    return c;
}

inline ConfigTable config_to_table(const ExperimentConfig& config) {
    ConfigTable t;
    ExperimentConfig::visit(config, [&](const char* key, const auto& field) { t[key] = to_config_value(field); });
    return t;
}

inline std::string resolved_config_text(const ExperimentConfig& config) { return format_config(config_to_table(config)); }

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) { return splitmix64(fnv1a(tag, base)); }

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Shortest round-trip decimal form.
inline std::string num(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw io_error("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void check_finite_loss(double loss, const std::string& what) {
    if (!std::isfinite(loss)) throw numeric_error(what + " diverged (loss is not finite)");
}

}  // namespace detail

/// Digest of the resolved config, ignoring keys that cannot change results
/// (output location and worker count).
inline std::string config_digest(const ExperimentConfig& c) {
    auto table = config_to_table(c);
    table.erase("experiment.out");
    table.erase("experiment.threads");
    return detail::hex64(detail::fnv1a(format_config(table)));
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// Progress sink; never part of the persisted outputs.
using LogFn = std::function<void(const std::string&)>;

inline LogFn stderr_log() {
    return [](const std::string& m) { std::cerr << "[tilewise] " << m << '\n'; };
}

inline LogFn silent_log() {
    return [](const std::string&) {};
}

// ---------------------------------------------------------------------------
// Splits and slides
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

/// One slide's identity: its home split and index determine seed and content.
struct SlideRef {
    Split home = Split::train;
    std::size_t index = 0;
    std::uint64_t seed = 0;
    bool positive = false;
    std::size_t lesion_count = 0;

    [[nodiscard]] std::string id() const {
        std::ostringstream os;
        os << to_string(home) << '-' << std::setw(4) << std::setfill('0') << index;
        return os.str();
    }
};

/// Disjoint seed ranges: seed * 1e6 + {0, 3e5, 6e5} + index.
inline SlideRef slide_ref(const ExperimentConfig& c, Split home, std::size_t index) {
    static constexpr std::uint64_t kBase[] = {0, 300'000, 600'000};
    SlideRef r;
    r.home = home;
    r.index = index;
    r.seed = c.seed * 1'000'000ull + kBase[static_cast<int>(home)] + index;
    const double f = c.data.positive_fraction;
    const auto before = static_cast<long long>(std::floor(static_cast<double>(index) * f + 1e-9));
    const auto after = static_cast<long long>(std::floor(static_cast<double>(index + 1) * f + 1e-9));
    r.positive = after > before;
    r.lesion_count = r.positive ? 1 + detail::splitmix64(r.seed) % c.data.max_lesions : 0;
    return r;
}

inline std::vector<SlideRef> natural_split(const ExperimentConfig& c, Split s) {
    const std::size_t n = s == Split::train ? c.data.train_slides : s == Split::val ? c.data.val_slides : c.data.test_slides;
    std::vector<SlideRef> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(slide_ref(c, s, i));
    return out;
}

/// Slides of a split after applying data.fold.
inline std::vector<SlideRef> split_slides(const ExperimentConfig& c, Split s) {
    if (c.data.fold == 0 || s == Split::val) return natural_split(c, s);
    std::vector<SlideRef> pool = natural_split(c, Split::train);
    for (const auto& r : natural_split(c, Split::test)) pool.push_back(r);
    std::vector<SlideRef> out;
    const std::size_t test_parity = static_cast<std::size_t>(c.data.fold - 1);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if ((i % 2 == test_parity) == (s == Split::test)) out.push_back(pool[i]);
    }
    return out;
}

inline SlideParams slide_params(const ExperimentConfig& c, const SlideRef& r) {
    SlideParams p;
    p.size = c.data.slide_size;
    p.lesion_count = r.lesion_count;
    p.lesion_radius_min = c.data.lesion_radius_min;
    p.lesion_radius_max = c.data.lesion_radius_max;
    p.edge_clearance = c.data.tile_size;
    p.stain_variation = c.data.stain_variation;
    return p;
}

inline SyntheticSlide make_slide(const ExperimentConfig& c, const SlideRef& r) {
    return generate_slide(r.seed, slide_params(c, r));
}

/// Stain reference for normalization: the first training slide.
inline std::optional<StainReference> stain_reference(const ExperimentConfig& c) {
    if (!c.data.macenko) return std::nullopt;
    SlideRef r = slide_ref(c, Split::train, 0);
    return estimate_stains(make_slide(c, r).image);
}

/// Tiles of a slide on one grid, stain-normalized when a reference is given.
/// `normalization_failures` counts tiles passed through unchanged.
inline TileBag make_bag(const SyntheticSlide& slide, const GridSpec& grid, const std::optional<StainReference>& ref,
                        std::size_t* normalization_failures = nullptr) {
    TileBag bag = tile_grid(slide, grid);
    if (ref) {
        for (auto& t : bag.tiles) {
            auto n = normalize_or_passthrough(t.image, *ref);
            if (n.failed && normalization_failures) ++*normalization_failures;
            t.image = std::move(n.image);
        }
    }
    return bag;
}

inline double mask_fraction(const Tensor& mask) {
    return mask.size() ? mask.sum() / static_cast<double>(mask.size()) : 0.0;
}

// ---------------------------------------------------------------------------
// Dataset export
// ---------------------------------------------------------------------------

struct GenDataSummary {
    std::size_t slides = 0;
    std::size_t positives = 0;
    std::size_t tiles = 0;
};

/// Writes every slide as PNG + mask PGM + JSON sidecar, plus a manifest.
inline GenDataSummary export_dataset(const ExperimentConfig& c, const LogFn& log = silent_log()) {
    namespace fs = std::filesystem;
    const fs::path root = fs::path(c.out) / "data";
    std::vector<SlideRef> refs;
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (const auto& r : split_slides(c, s)) refs.push_back(r);
    }
    std::vector<nlohmann::ordered_json> entries(refs.size());
    std::vector<std::size_t> tile_counts(refs.size());
    const auto split_of = [&](std::size_t i) -> Split {
        std::size_t n_train = split_slides(c, Split::train).size(), n_val = c.data.val_slides;
        return i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
    };
    parallel_for(refs.size(), c.threads, [&](std::size_t i) {
        const auto& r = refs[i];
        const auto slide = make_slide(c, r);
        const auto bag = tile_grid(slide, c.grid());
        const std::string split(to_string(split_of(i)));
        const fs::path dir = root / split;
        write_png(dir / (r.id() + ".png"), slide.image);
        Tensor mask_bytes = slide.lesion_mask;
        for (auto& v : mask_bytes.values()) v *= 255.0;
        write_pgm(dir / (r.id() + "_mask.pgm"), mask_bytes);
        nlohmann::ordered_json side;
        side["id"] = r.id();
        side["split"] = split;
        side["seed"] = r.seed;
        side["label"] = slide.label;
        side["size"] = c.data.slide_size;
        side["lesion_fraction"] = mask_fraction(slide.lesion_mask);
        side["tiles"] = bag.tiles.size();
        nlohmann::ordered_json lesions = nlohmann::ordered_json::array();
        for (const auto& b : slide.lesions) {
            lesions.push_back({{"cx", b.cx}, {"cy", b.cy}, {"radius", b.radius}});
        }
        side["lesions"] = lesions;
        detail::write_text(dir / (r.id() + ".json"), side.dump(2) + "\n");
        side.erase("lesions");
        side["image"] = split + "/" + r.id() + ".png";
        side["mask"] = split + "/" + r.id() + "_mask.pgm";
        entries[i] = side;
        tile_counts[i] = bag.tiles.size();
    });
    GenDataSummary s;
    nlohmann::ordered_json manifest;
    manifest["schema"] = "tilewise.manifest/1";
    manifest["config_digest"] = config_digest(c);
    manifest["tile_size"] = c.data.tile_size;
    manifest["slides"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < refs.size(); ++i) {
        manifest["slides"].push_back(entries[i]);
        ++s.slides;
        s.positives += refs[i].positive ? 1 : 0;
        s.tiles += tile_counts[i];
    }
    detail::write_text(root / "manifest.json", manifest.dump(2) + "\n");
    log("wrote " + std::to_string(s.slides) + " slides (" + std::to_string(s.tiles) + " tiles) to " + root.string());
    return s;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingLogRow {
    std::size_t epoch = 0;
    double loss = 0.0;
    std::optional<double> val_metric;
};

inline std::string training_log_csv(const std::vector<TrainingLogRow>& rows) {
    std::string s = "epoch,loss,val_metric\n";
    for (const auto& r : rows) s += std::to_string(r.epoch) + "," + detail::num(r.loss) + "," + detail::opt_num(r.val_metric) + "\n";
    return s;
}

/// Labelled tiles cut from a set of slides: every tile touching a lesion plus
/// a few random lesion-free tiles per slide.
struct TileSet {
    std::vector<Tensor> images;
    std::vector<Tensor> masks;
    std::vector<double> lesion_fraction;

    [[nodiscard]] std::size_t size() const { return images.size(); }
};

inline TileSet collect_tiles(const ExperimentConfig& c, const std::vector<SlideRef>& refs,
                             const std::optional<StainReference>& ref, std::size_t negatives_per_slide,
                             std::string_view salt) {
    std::vector<TileSet> per(refs.size());
    parallel_for(refs.size(), c.threads, [&](std::size_t i) {
        const auto slide = make_slide(c, refs[i]);
        const auto bag = make_bag(slide, c.grid(), ref);
        std::vector<std::size_t> negatives;
        for (std::size_t k = 0; k < bag.tiles.size(); ++k) {
            const double f = mask_fraction(bag.tiles[k].mask);
            if (f > 0) {
                per[i].images.push_back(bag.tiles[k].image);
                per[i].masks.push_back(bag.tiles[k].mask);
                per[i].lesion_fraction.push_back(f);
            } else {
                negatives.push_back(k);
            }
        }
        std::mt19937_64 rng(detail::derive_seed(refs[i].seed, salt));
        std::shuffle(negatives.begin(), negatives.end(), rng);
        negatives.resize(std::min(negatives.size(), negatives_per_slide));
        std::sort(negatives.begin(), negatives.end());
        for (std::size_t k : negatives) {
            per[i].images.push_back(bag.tiles[k].image);
            per[i].masks.push_back(bag.tiles[k].mask);
            per[i].lesion_fraction.push_back(0.0);
        }
    });
    TileSet out;
    for (auto& p : per) {
        for (std::size_t k = 0; k < p.size(); ++k) {
            out.images.push_back(std::move(p.images[k]));
            out.masks.push_back(std::move(p.masks[k]));
            out.lesion_fraction.push_back(p.lesion_fraction[k]);
        }
    }
    return out;
}

struct MilTrainingResult {
    TileClassifier classifier;
    std::vector<TrainingLogRow> pretrain_log;
    std::vector<TrainingLogRow> mil_log;
};

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

/// Tile-level pre-training labels: 1 at or above the positive fraction, 0
/// for lesion-free tiles, ambiguous slivers dropped.
inline void pretraining_labels(const TileSet& tiles, double positive_fraction, std::vector<Tensor>& images,
                               std::vector<int>& labels) {
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const double f = tiles.lesion_fraction[i];
        if (f > 0 && f < positive_fraction) continue;
        images.push_back(tiles.images[i]);
        labels.push_back(f > 0 ? 1 : 0);
    }
}

inline std::vector<std::vector<Tensor>> bag_features(const ExperimentConfig& c, const TileClassifier& model,
                                                     const std::vector<SlideRef>& refs,
                                                     const std::optional<StainReference>& ref) {
    std::vector<std::vector<Tensor>> out(refs.size());
    parallel_for(refs.size(), c.threads, [&](std::size_t i) {
        const auto bag = make_bag(make_slide(c, refs[i]), c.grid(), ref);
        for (const auto& t : bag.tiles) out[i].push_back(model.features(t.image));
    });
    return out;
}

inline std::optional<double> slide_auc_from_features(const TileClassifier& model,
                                                     const std::vector<std::vector<Tensor>>& features,
                                                     const std::vector<SlideRef>& refs) {
    std::vector<double> scores;
    std::vector<int> labels;
    MilModel mil(model);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (features[i].empty()) continue;
        scores.push_back(mil.forward_features(features[i]).slide_score);
        labels.push_back(refs[i].positive ? 1 : 0);
    }
    if (scores.empty()) return std::nullopt;
    return roc_auc(scores, labels);
}

}  // namespace detail

/// Pre-trains the backbone on tile-level lesion presence, then trains the
/// MIL model on slide labels only.
inline MilTrainingResult train_mil(const ExperimentConfig& c, const LogFn& log = silent_log()) {
    c.validate();
    const auto ref = stain_reference(c);
    const auto train = split_slides(c, Split::train);
    const auto val = split_slides(c, Split::val);
    if (train.empty()) throw invalid_argument("MIL training needs at least one training slide");
    MilTrainingResult result;
    TileClassifier model(c.classifier_config(), detail::derive_seed(c.seed, "classifier"));

    if (c.mil.pretrain_epochs > 0) {
        const auto tiles = collect_tiles(c, train, ref, c.mil.negatives_per_slide, "pretrain");
        std::vector<Tensor> images;
        std::vector<int> labels;
        detail::pretraining_labels(tiles, c.mil.positive_tile_fraction, images, labels);
        const auto val_tiles = collect_tiles(c, val, ref, c.mil.negatives_per_slide, "pretrain");
        std::vector<Tensor> val_images;
        std::vector<int> val_labels;
        detail::pretraining_labels(val_tiles, c.mil.positive_tile_fraction, val_images, val_labels);
        if (images.empty()) throw invalid_argument("no tiles available for backbone pre-training");
        log("pre-training backbone on " + std::to_string(images.size()) + " tiles");
        model.set_frozen_backbone(false);
        for (std::size_t epoch = 1; epoch <= c.mil.pretrain_epochs; ++epoch) {
            const auto order = detail::shuffled_indices(images.size(), detail::derive_seed(c.seed, "pretrain-" + std::to_string(epoch)));
            double total = 0.0;
            std::size_t batches = 0;
            for (std::size_t b = 0; b < order.size(); b += c.mil.pretrain_batch) {
                std::vector<Tensor> bx;
                std::vector<int> by;
                for (std::size_t k = b; k < std::min(order.size(), b + c.mil.pretrain_batch); ++k) {
                    bx.push_back(images[order[k]]);
                    by.push_back(labels[order[k]]);
                }
                total += train_tile_batch(model, bx, by, c.mil.pretrain_lr);
                ++batches;
            }
            TrainingLogRow row{epoch, total / static_cast<double>(batches), std::nullopt};
            detail::check_finite_loss(row.loss, "backbone pre-training");
            if (!val_images.empty()) {
                std::vector<double> s(val_images.size());
                parallel_for(val_images.size(), c.threads, [&](std::size_t i) { s[i] = model.classify(val_images[i]); });
                row.val_metric = roc_auc(s, val_labels);
            }
            log("pretrain epoch " + std::to_string(epoch) + " loss=" + detail::num(row.loss) +
                " val_tile_auc=" + detail::opt_num(row.val_metric));
            result.pretrain_log.push_back(row);
        }
    }

    const bool frozen = c.mil.mode == "frozen";
    if (frozen) {
        // Fresh head on the fixed backbone, as when starting from an
        // externally pre-trained feature extractor.
        TileClassifier fresh(c.classifier_config(), detail::derive_seed(c.seed, "mil-head"));
        for (auto& [name, p] : fresh.parameters()) {
            if (TileClassifier::is_backbone(name)) p = model.parameters().at(name);
        }
        model = std::move(fresh);
        model.set_frozen_backbone(true);
        const auto train_features = detail::bag_features(c, model, train, ref);
        const auto val_features = detail::bag_features(c, model, val, ref);
        MilModel mil(model);
        for (std::size_t epoch = 1; epoch <= c.mil.epochs; ++epoch) {
            const auto order = detail::shuffled_indices(train.size(), detail::derive_seed(c.seed, "mil-" + std::to_string(epoch)));
            double total = 0.0;
            std::size_t steps = 0;
            for (std::size_t i : order) {
                if (train_features[i].empty()) continue;
                total += mil.train_step_features(train_features[i], train[i].positive ? 1 : 0, c.mil.lr);
                ++steps;
            }
            if (steps == 0) throw invalid_argument("no training slide has tissue tiles");
            TrainingLogRow row{epoch, total / static_cast<double>(steps),
                               detail::slide_auc_from_features(mil.classifier(), val_features, val)};
            detail::check_finite_loss(row.loss, "MIL training");
            log("mil epoch " + std::to_string(epoch) + " loss=" + detail::num(row.loss) +
                " val_slide_auc=" + detail::opt_num(row.val_metric));
            result.mil_log.push_back(row);
        }
        result.classifier = mil.classifier();
    } else {
        model.set_frozen_backbone(false);
        std::vector<std::vector<Tensor>> bags(train.size());
        parallel_for(train.size(), c.threads, [&](std::size_t i) { bags[i] = make_bag(make_slide(c, train[i]), c.grid(), ref).images(); });
        std::vector<std::vector<Tensor>> val_bags(val.size());
        parallel_for(val.size(), c.threads, [&](std::size_t i) { val_bags[i] = make_bag(make_slide(c, val[i]), c.grid(), ref).images(); });
        MilModel mil(model);
        for (std::size_t epoch = 1; epoch <= c.mil.epochs; ++epoch) {
            const auto order = detail::shuffled_indices(train.size(), detail::derive_seed(c.seed, "mil-" + std::to_string(epoch)));
            double total = 0.0;
            std::size_t steps = 0;
            for (std::size_t i : order) {
                if (bags[i].empty()) continue;
                total += mil.train_step(bags[i], train[i].positive ? 1 : 0, c.mil.lr);
                ++steps;
            }
            if (steps == 0) throw invalid_argument("no training slide has tissue tiles");
            TrainingLogRow row{epoch, total / static_cast<double>(steps), std::nullopt};
            detail::check_finite_loss(row.loss, "MIL training");
            std::vector<double> scores;
            std::vector<int> labels;
            for (std::size_t i = 0; i < val.size(); ++i) {
                if (val_bags[i].empty()) continue;
                scores.push_back(mil.forward(val_bags[i]).slide_score);
                labels.push_back(val[i].positive ? 1 : 0);
            }
            if (!scores.empty()) row.val_metric = roc_auc(scores, labels);
            log("mil epoch " + std::to_string(epoch) + " loss=" + detail::num(row.loss) +
                " val_slide_auc=" + detail::opt_num(row.val_metric));
            result.mil_log.push_back(row);
        }
        result.classifier = mil.classifier();
    }
    return result;
}

struct SegTrainingResult {
    SegNet segnet;
    std::vector<TrainingLogRow> log;
};

/// Pixel-level ROC AUC of the lesion probability over a tile set.
inline std::optional<double> pixel_auc(const SegNet& net, const TileSet& tiles, std::size_t threads) {
    std::vector<Tensor> probs(tiles.size());
    parallel_for(tiles.size(), threads, [&](std::size_t i) { probs[i] = net.lesion_probability(tiles.images[i]); });
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        for (std::size_t p = 0; p < probs[i].size(); ++p) {
            s.push_back(probs[i][p]);
            y.push_back(tiles.masks[i][p] > 0.5 ? 1 : 0);
        }
    }
    if (s.empty()) return std::nullopt;
    return roc_auc(s, y);
}

inline SegTrainingResult train_segnet(const ExperimentConfig& c, const LogFn& log = silent_log()) {
    c.validate();
    const auto ref = stain_reference(c);
    auto subset = [&](const TileSet& all, std::size_t n, std::string_view tag) {
        const auto order = detail::shuffled_indices(all.size(), detail::derive_seed(c.seed, tag));
        TileSet out;
        for (std::size_t k = 0; k < std::min(n, order.size()); ++k) {
            out.images.push_back(all.images[order[k]]);
            out.masks.push_back(all.masks[order[k]]);
            out.lesion_fraction.push_back(all.lesion_fraction[order[k]]);
        }
        return out;
    };
    const auto train = subset(collect_tiles(c, split_slides(c, Split::train), ref, c.mil.negatives_per_slide, "segnet"),
                              c.segnet.train_tiles, "segnet-train");
    const auto val = subset(collect_tiles(c, split_slides(c, Split::val), ref, c.mil.negatives_per_slide, "segnet"),
                            c.segnet.val_tiles, "segnet-val");
    if (train.size() == 0) throw invalid_argument("no tiles available for segmentation training");
    log("training segnet on " + std::to_string(train.size()) + " tiles");
    std::vector<Tensor> targets;
    for (const auto& m : train.masks) targets.push_back(onehot_from_mask(m));
    SegTrainingResult result{SegNet(c.segnet_config(), detail::derive_seed(c.seed, "segnet")), {}};
    for (std::size_t epoch = 1; epoch <= c.segnet.epochs; ++epoch) {
        const auto order = detail::shuffled_indices(train.size(), detail::derive_seed(c.seed, "segnet-" + std::to_string(epoch)));
        double total = 0.0;
        for (std::size_t i : order) total += result.segnet.train_step(train.images[i], targets[i], c.segnet.lr);
        TrainingLogRow row{epoch, total / static_cast<double>(order.size()), pixel_auc(result.segnet, val, c.threads)};
        detail::check_finite_loss(row.loss, "segmentation training");
        log("segnet epoch " + std::to_string(epoch) + " dice_loss=" + detail::num(row.loss) +
            " val_pixel_auc=" + detail::opt_num(row.val_metric));
        result.log.push_back(row);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint management
// ---------------------------------------------------------------------------

namespace detail {

inline std::string training_fingerprint(const ExperimentConfig& c, std::string_view what) {
    // Only keys that influence the trained weights.
    const auto table = config_to_table(c);
    std::string text(what);
    for (const auto& [key, v] : table) {
        const bool relevant = key == "experiment.seed" || key.rfind("data.", 0) == 0 ||
                              (what == "classifier" && (key.rfind("model.", 0) == 0 || key.rfind("mil.", 0) == 0)) ||
                              (what == "segnet" && (key.rfind("segnet.", 0) == 0 || key == "mil.negatives_per_slide"));
        if (relevant && key != "data.test_slides") text += "\n" + key + "=" + format_value(v);
    }
    return hex64(fnv1a(text));
}

}  // namespace detail

inline std::filesystem::path checkpoint_dir(const ExperimentConfig& c) { return std::filesystem::path(c.out) / "checkpoints"; }

inline void save_classifier(const ExperimentConfig& c, const MilTrainingResult& r) {
    const auto dir = checkpoint_dir(c);
    r.classifier.save(dir / "classifier");
    detail::write_text(dir / "classifier.fingerprint", detail::training_fingerprint(c, "classifier") + "\n");
    const auto logs = std::filesystem::path(c.out) / "logs";
    detail::write_text(logs / "mil_pretrain.csv", training_log_csv(r.pretrain_log));
    detail::write_text(logs / "mil.csv", training_log_csv(r.mil_log));
}

inline void save_segnet(const ExperimentConfig& c, const SegTrainingResult& r) {
    const auto dir = checkpoint_dir(c);
    r.segnet.save(dir / "segnet");
    detail::write_text(dir / "segnet.fingerprint", detail::training_fingerprint(c, "segnet") + "\n");
    detail::write_text(std::filesystem::path(c.out) / "logs" / "segnet.csv", training_log_csv(r.log));
}

/// Loads the saved classifier when it was trained with this config,
/// otherwise trains and saves a new one.
inline TileClassifier ensure_classifier(const ExperimentConfig& c, const LogFn& log = silent_log()) {
    const auto dir = checkpoint_dir(c);
    const auto fp = detail::read_text(dir / "classifier.fingerprint");
    if (fp == detail::training_fingerprint(c, "classifier") + "\n" && std::filesystem::exists(dir / "classifier.json")) {
        log("using classifier checkpoint " + (dir / "classifier").string());
        return TileClassifier::load(dir / "classifier");
    }
    auto r = train_mil(c, log);
    save_classifier(c, r);
    return r.classifier;
}

inline SegNet ensure_segnet(const ExperimentConfig& c, const LogFn& log = silent_log()) {
    const auto dir = checkpoint_dir(c);
    const auto fp = detail::read_text(dir / "segnet.fingerprint");
    if (fp == detail::training_fingerprint(c, "segnet") + "\n" && std::filesystem::exists(dir / "segnet.json")) {
        log("using segnet checkpoint " + (dir / "segnet").string());
        return SegNet::load(dir / "segnet");
    }
    auto r = train_segnet(c, log);
    save_segnet(c, r);
    return r.segnet;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct SlideResult {
    std::string slide_id;
    std::uint64_t seed = 0;
    int label = 0;
    std::size_t tiles = 0;
    std::optional<double> score;  ///< empty when the slide has no tissue tiles
};

struct TileResult {
    std::string tile_id;
    std::size_t slide = 0;
    std::size_t row = 0, col = 0, x = 0, y = 0;
    double prediction = 0.0;
    double annotated_fraction = 0.0;
    double segnet_fraction = 0.0;
};

struct HeatmapExport {
    std::string name;
    Tensor heatmap;  ///< 0..255
    std::vector<std::pair<double, Tensor>> masks;
};

struct EvaluationReport {
    std::vector<SlideResult> slides;
    std::vector<TileResult> tiles;
    std::vector<ScoreRecord> records;
    std::vector<HeatmapExport> heatmaps;
    std::optional<double> slide_auc;
    std::size_t normalization_failures = 0;
    std::vector<std::string> warnings;
};

/// Scores every test tile for every aggregator and threshold against the
/// synthetic annotation (manual proxy) and the segmentation prediction.
inline EvaluationReport evaluate(const ExperimentConfig& c, const TileClassifier& model, const SegNet& segnet,
                                 const LogFn& log = silent_log()) {
    c.validate();
    const auto ref = stain_reference(c);
    const auto refs = split_slides(c, Split::test);
    XaiConfig xcfg = c.xai_config();
    xcfg.validate(model.conv_layer_count());
    const std::size_t agg_index = static_cast<std::size_t>(xcfg.aggregator);

    struct PerSlide {
        SlideResult slide;
        std::vector<TileResult> tiles;
        std::vector<ScoreRecord> records;
        std::vector<HeatmapExport> heatmaps;
        std::size_t failures = 0;
    };
    std::vector<PerSlide> per(refs.size());
    parallel_for(refs.size(), c.threads, [&](std::size_t si) {
        auto& out = per[si];
        const auto slide = make_slide(c, refs[si]);
        const auto bag = make_bag(slide, c.grid(), ref, &out.failures);
        out.slide = {refs[si].id(), refs[si].seed, slide.label, bag.tiles.size(), std::nullopt};
        for (std::size_t k = 0; k < bag.tiles.size(); ++k) {
            const auto& tile = bag.tiles[k];
            const auto expl = explain_tile_aggregators(model, tile.image, xcfg, kAllAggregators);
            const Tensor seg = segnet.predict_mask(tile.image);
            TileResult tr;
            std::ostringstream id;
            id << refs[si].id() << "-r" << tile.row << "c" << tile.col;
            tr.tile_id = id.str();
            tr.slide = si;
            tr.row = tile.row;
            tr.col = tile.col;
            tr.x = tile.x;
            tr.y = tile.y;
            tr.prediction = expl.front().score;
            tr.annotated_fraction = mask_fraction(tile.mask);
            tr.segnet_fraction = mask_fraction(seg);
            out.slide.score = std::max(out.slide.score.value_or(tr.prediction), tr.prediction);
            for (std::size_t a = 0; a < std::size(kAllAggregators); ++a) {
                for (std::size_t ti = 0; ti < xcfg.thresholds.size(); ++ti) {
                    const double t = xcfg.thresholds[ti];
                    const Tensor& m = expl[a].masks[ti].values;
                    for (auto src : {GroundTruthSource::manual_proxy, GroundTruthSource::segnet}) {
                        const Tensor& g = src == GroundTruthSource::manual_proxy ? tile.mask : seg;
                        ScoreRecord r;
                        r.tile_id = tr.tile_id;
                        r.threshold = t;
                        r.aggregator = kAllAggregators[a];
                        r.intersection_hit = intersection_hit(m, g);
                        r.precision = precision_score(m, g, t);
                        r.popcount = expl[a].masks[ti].popcount();
                        r.prediction = tr.prediction;
                        r.annotated_fraction = src == GroundTruthSource::manual_proxy ? tr.annotated_fraction : tr.segnet_fraction;
                        r.source = src;
                        out.records.push_back(std::move(r));
                    }
                }
            }
            if (tr.prediction > 0.5) {
                HeatmapExport h{tr.tile_id + "_" + std::string(to_string(xcfg.aggregator)), heatmap_bytes(expl[agg_index].normalized), {}};
                for (std::size_t ti = 0; ti < xcfg.thresholds.size(); ++ti) {
                    h.masks.emplace_back(xcfg.thresholds[ti], expl[agg_index].masks[ti].values);
                }
                out.heatmaps.push_back(std::move(h));
            }
            out.tiles.push_back(std::move(tr));
        }
        log("evaluated " + refs[si].id() + " (" + std::to_string(bag.tiles.size()) + " tiles)");
    });

    EvaluationReport report;
    for (auto& p : per) {
        report.slides.push_back(p.slide);
        for (auto& t : p.tiles) report.tiles.push_back(std::move(t));
        for (auto& r : p.records) report.records.push_back(std::move(r));
        for (auto& h : p.heatmaps) {
            if (report.heatmaps.size() < c.xai.heatmap_limit) report.heatmaps.push_back(std::move(h));
        }
        report.normalization_failures += p.failures;
    }
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : report.slides) {
        if (!s.score) continue;
        scores.push_back(*s.score);
        labels.push_back(s.label);
    }
    if (refs.empty()) report.warnings.push_back("no test slides configured; report is empty");
    if (!scores.empty()) report.slide_auc = roc_auc(scores, labels);
    if (!scores.empty() && !report.slide_auc) report.warnings.push_back("slide AUC undefined: test split has one class only");
    if (report.normalization_failures) {
        report.warnings.push_back(std::to_string(report.normalization_failures) +
                                  " tile(s) could not be stain-normalized and were passed through");
    }
    return report;
}

// ---------------------------------------------------------------------------
// Faithfulness and summaries
// ---------------------------------------------------------------------------

/// Records of one (source, aggregator, threshold) group, in record order.
/// Manual-proxy groups keep only annotated tiles.
inline std::vector<ScoreRecord> select_records(const std::vector<ScoreRecord>& records, GroundTruthSource src,
                                               Aggregator agg, double t) {
    std::vector<ScoreRecord> out;
    for (const auto& r : records) {
        if (r.source != src || r.aggregator != agg || r.threshold != t) continue;
        if (src == GroundTruthSource::manual_proxy && !(r.annotated_fraction > 0)) continue;
        out.push_back(r);
    }
    return out;
}

/// Records of tiles the classifier calls positive (s > 0.5).
inline std::vector<ScoreRecord> predicted_positive(const std::vector<ScoreRecord>& records) {
    std::vector<ScoreRecord> out;
    for (const auto& r : records) {
        if (r.prediction > 0.5) out.push_back(r);
    }
    return out;
}

struct FaithfulnessRow {
    GroundTruthSource source = GroundTruthSource::segnet;
    Aggregator aggregator = Aggregator::abs;
    double threshold = 0.0;
    std::size_t n = 0;
    std::optional<double> rho_precision;          ///< rho(s, P_t)
    std::optional<double> rho_hit_rate;           ///< rho(bin centre of s, I within bin)
    std::optional<double> rho_annotated;          ///< rho(annotated fraction, P_t)
    std::optional<double> control_rho_precision;  ///< rho(shuffled s, P_t)
    std::string flag;                             ///< non-empty when degenerate
};

inline constexpr std::size_t kMinFaithfulnessRecords = 30;

/// Spearman correlations of one record group. `seed` drives the shuffled
/// control. Groups below 30 records, or with constant series, are flagged.
inline FaithfulnessRow faithfulness_row(const std::vector<ScoreRecord>& group, std::uint64_t seed) {
    FaithfulnessRow row;
    row.n = group.size();
    if (!group.empty()) {
        row.source = group.front().source;
        row.aggregator = group.front().aggregator;
        row.threshold = group.front().threshold;
    }
    if (group.size() < kMinFaithfulnessRecords) {
        row.flag = "fewer than 30 records";
        return row;
    }
    std::vector<double> s, p, a;
    for (const auto& r : group) {
        s.push_back(r.prediction);
        p.push_back(r.precision);
        a.push_back(r.annotated_fraction);
    }
    row.rho_precision = rank_correlation(s, p);
    row.rho_annotated = rank_correlation(a, p);
    std::vector<double> shuffled = s;
    std::mt19937_64 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    row.control_rho_precision = rank_correlation(shuffled, p);

    std::vector<double> edges;
    for (int i = 0; i <= 10; ++i) edges.push_back(i / 10.0);
    std::vector<double> hits;
    for (const auto& r : group) hits.push_back(r.intersection_hit);
    std::vector<double> centres, rates;
    for (const auto& b : binned_summary(s, hits, edges)) {
        if (!b.mean) continue;
        centres.push_back((b.lo + b.hi) / 2);
        rates.push_back(*b.mean);
    }
    if (centres.size() >= 3) row.rho_hit_rate = rank_correlation(centres, rates);
    if (!row.rho_precision || !row.control_rho_precision) row.flag = "degenerate series (constant input)";
    return row;
}

inline std::vector<FaithfulnessRow> faithfulness_report(const std::vector<ScoreRecord>& records,
                                                        const std::vector<double>& thresholds, std::uint64_t seed) {
    std::vector<FaithfulnessRow> out;
    for (auto src : {GroundTruthSource::manual_proxy, GroundTruthSource::segnet}) {
        for (auto agg : kAllAggregators) {
            for (double t : thresholds) {
                auto row = faithfulness_row(select_records(records, src, agg, t),
                                            detail::derive_seed(seed, std::string(to_string(src)) + std::string(to_string(agg)) + detail::num(t)));
                row.source = src;
                row.aggregator = agg;
                row.threshold = t;
                out.push_back(row);
            }
        }
    }
    return out;
}

namespace detail {

inline nlohmann::ordered_json bins_json(const std::vector<Bin>& bins) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& b : bins) {
        arr.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"mean", opt_json(b.mean)}, {"stddev", opt_json(b.stddev)}});
    }
    return arr;
}

}  // namespace detail

inline constexpr const char* kScoresSchema = "tilewise.scores/1";
inline constexpr const char* kSummarySchema = "tilewise.summary/1";
inline constexpr const char* kStabilitySchema = "tilewise.stability/1";

inline std::string scores_csv(const EvaluationReport& r) {
    std::string s = std::string("# schema=") + kScoresSchema + "\n";
    s += "tile_id,source,aggregator,threshold,prediction,annotated_fraction,intersection_hit,precision,popcount,iou\n";
    for (const auto& rec : r.records) {
        s += rec.tile_id + "," + std::string(to_string(rec.source)) + "," + std::string(to_string(rec.aggregator)) + "," +
             detail::num(rec.threshold) + "," + detail::num(rec.prediction) + "," + detail::num(rec.annotated_fraction) + "," +
             std::to_string(rec.intersection_hit) + "," + detail::num(rec.precision) + "," + std::to_string(rec.popcount) +
             "," + detail::opt_num(rec.iou) + "\n";
    }
    return s;
}

inline std::string tiles_csv(const EvaluationReport& r) {
    std::string s = "tile_id,slide_id,row,col,x,y,prediction,annotated_fraction,segnet_fraction\n";
    for (const auto& t : r.tiles) {
        s += t.tile_id + "," + r.slides[t.slide].slide_id + "," + std::to_string(t.row) + "," + std::to_string(t.col) + "," +
             std::to_string(t.x) + "," + std::to_string(t.y) + "," + detail::num(t.prediction) + "," +
             detail::num(t.annotated_fraction) + "," + detail::num(t.segnet_fraction) + "\n";
    }
    return s;
}

inline nlohmann::ordered_json evaluation_summary(const ExperimentConfig& c, const EvaluationReport& r) {
    using json = nlohmann::ordered_json;
    json j;
    j["schema"] = kSummarySchema;
    j["config_digest"] = config_digest(c);
    j["xai_digest"] = c.xai_config().digest();
    j["xai"] = c.xai_config().description();
    j["test_slides"] = r.slides.size();
    j["test_tiles"] = r.tiles.size();
    j["records"] = r.records.size();
    j["slide_auc"] = detail::opt_json(r.slide_auc);

    // Lesion-free class at a 0.5 slide threshold.
    std::size_t tn = 0, fn = 0, fp = 0;
    for (const auto& s : r.slides) {
        if (!s.score) continue;
        const bool pred_free = *s.score < 0.5;
        if (pred_free && s.label == 0) ++tn;
        if (pred_free && s.label == 1) ++fn;
        if (!pred_free && s.label == 0) ++fp;
    }
    j["lesion_free_class"] = {
        {"precision", tn + fn ? json(static_cast<double>(tn) / static_cast<double>(tn + fn)) : json(nullptr)},
        {"recall", tn + fp ? json(static_cast<double>(tn) / static_cast<double>(tn + fp)) : json(nullptr)}};

    json slides = json::array();
    for (const auto& s : r.slides) {
        slides.push_back({{"slide_id", s.slide_id}, {"seed", s.seed}, {"label", s.label}, {"tiles", s.tiles}, {"score", detail::opt_json(s.score)}});
    }
    j["slides"] = slides;

    const std::vector<double> pred_edges{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    const std::vector<double> area_edges{0.0, 0.1, 0.25, 0.5, 0.75, 1.0};
    json scores = json::array();
    for (auto src : {GroundTruthSource::manual_proxy, GroundTruthSource::segnet}) {
        for (auto agg : kAllAggregators) {
            for (double t : c.xai.thresholds) {
                const auto group = select_records(r.records, src, agg, t);
                json e;
                e["source"] = to_string(src);
                e["aggregator"] = to_string(agg);
                e["threshold"] = t;
                e["n"] = group.size();
                e["intersection"] = detail::opt_json(mean_intersection(group));
                e["precision"] = detail::opt_json(mean_precision(group));
                const auto positive = predicted_positive(group);
                e["n_predicted_positive"] = positive.size();
                e["intersection_predicted_positive"] = detail::opt_json(mean_intersection(positive));
                if (!group.empty()) {
                    std::vector<double> s, p, a;
                    for (const auto& rec : group) {
                        s.push_back(rec.prediction);
                        p.push_back(rec.precision);
                        a.push_back(rec.annotated_fraction);
                    }
                    e["precision_by_prediction"] = detail::bins_json(binned_summary(s, p, pred_edges));
                    e["precision_by_annotated_fraction"] = detail::bins_json(binned_summary(a, p, area_edges));
                }
                scores.push_back(e);
            }
        }
    }
    j["scores"] = scores;

    json faith = json::array();
    for (const auto& f : faithfulness_report(r.records, c.xai.thresholds, c.seed)) {
        faith.push_back({{"source", to_string(f.source)},
                         {"aggregator", to_string(f.aggregator)},
                         {"threshold", f.threshold},
                         {"n", f.n},
                         {"rho_prediction_precision", detail::opt_json(f.rho_precision)},
                         {"rho_prediction_hit_rate", detail::opt_json(f.rho_hit_rate)},
                         {"rho_annotated_precision", detail::opt_json(f.rho_annotated)},
                         {"control_rho_shuffled_prediction", detail::opt_json(f.control_rho_precision)},
                         {"flag", f.flag}});
    }
    j["faithfulness"] = faith;

    json baseline = json::array();
    for (double t : c.xai.thresholds) {
        const auto b = uniform_baseline(t);
        baseline.push_back({{"threshold", t}, {"iou", b.iou}, {"precision", b.precision}});
    }
    j["uniform_baseline"] = baseline;
    j["normalization_failures"] = r.normalization_failures;
    j["warnings"] = r.warnings;
    return j;
}

/// Writes scores.csv, tiles.csv, summary.json and heatmaps/.
inline void write_evaluation(const ExperimentConfig& c, const EvaluationReport& r) {
    namespace fs = std::filesystem;
    const fs::path out(c.out);
    detail::write_text(out / "scores.csv", scores_csv(r));
    detail::write_text(out / "tiles.csv", tiles_csv(r));
    detail::write_text(out / "summary.json", evaluation_summary(c, r).dump(2) + "\n");
    const fs::path hdir = out / "heatmaps";
    for (const auto& h : r.heatmaps) {
        write_pgm(hdir / (h.name + ".pgm"), h.heatmap);
        Tensor rgb({h.heatmap.extent(0), h.heatmap.extent(1), 3});
        for (std::size_t i = 0; i < h.heatmap.size(); ++i) {
            for (std::size_t ch = 0; ch < 3; ++ch) rgb[3 * i + ch] = h.heatmap[i];
        }
        write_png(hdir / (h.name + ".png"), rgb);
        for (const auto& [t, m] : h.masks) {
            Tensor bytes = m;
            for (auto& v : bytes.values()) v *= 255.0;
            std::ostringstream name;
            name << h.name << "_mask_t" << std::fixed << std::setprecision(2) << t << ".pgm";
            write_pgm(hdir / name.str(), bytes);
        }
    }
}

// ---------------------------------------------------------------------------
// Stability study
// ---------------------------------------------------------------------------

enum class PairStatus { included, below_floor, empty_union };

inline std::string_view to_string(PairStatus s) {
    switch (s) {
        case PairStatus::included: return "included";
        case PairStatus::below_floor: return "below_floor";
        case PairStatus::empty_union: return "empty_union";
    }
    return "?";
}

struct OverlapPair {
    std::string slide_id;
    std::string grid_a, grid_b;
    std::size_t row_a = 0, col_a = 0, row_b = 0, col_b = 0;
    int dx = 0, dy = 0;  ///< shift of grid b relative to grid a, in L/4 units
    Rect overlap;
    double overlap_fraction = 0.0;
    double s_a = 0.0, s_b = 0.0;
    double annotated_fraction = 0.0;  ///< ground-truth lesion share of the overlap
    std::size_t popcount_a = 0, popcount_b = 0;
    std::optional<double> iou;
    PairStatus status = PairStatus::included;
};

/// IoU of two tiles' thresholded masks restricted to their overlap. Masks
/// come from the full tiles; they are only cropped, never recomputed.
inline std::optional<double> overlap_iou(const Tensor& mask_a, std::size_t ax, std::size_t ay, const Tensor& mask_b,
                                         std::size_t bx, std::size_t by, const Rect& overlap,
                                         std::size_t* pop_a = nullptr, std::size_t* pop_b = nullptr) {
    if (overlap.area() == 0) throw invalid_argument("tiles do not overlap");
    const Tensor ca = crop(mask_a, overlap.y - ay, overlap.x - ax, overlap.height, overlap.width);
    const Tensor cb = crop(mask_b, overlap.y - by, overlap.x - bx, overlap.height, overlap.width);
    if (pop_a) *pop_a = static_cast<std::size_t>(ca.sum());
    if (pop_b) *pop_b = static_cast<std::size_t>(cb.sum());
    return iou_score(ca, cb);
}

struct StabilityReport {
    std::vector<OverlapPair> pairs;  ///< every candidate pair, with status
    std::size_t included = 0;
    std::size_t below_floor = 0;
    std::size_t empty_union = 0;
    std::vector<Bin> by_overlap;
    std::vector<Bin> by_difference;
    std::vector<Bin> by_annotation;
    double baseline_iou = 0.0;
    std::vector<std::string> warnings;
};

inline StabilityReport run_stability_study(const ExperimentConfig& c, const TileClassifier& model,
                                           const LogFn& log = silent_log()) {
    c.validate();
    const auto ref = stain_reference(c);
    const auto refs = split_slides(c, Split::test);
    XaiConfig xcfg = c.xai_config();
    xcfg.thresholds = {c.stability.threshold};
    xcfg.validate(model.conv_layer_count());
    std::vector<GridSpec> grids{c.grid(0, 0)};
    for (const auto& s : c.stability.shifts) {
        const GridSpec g = c.grid(s[0] - '0', s[1] - '0');
        if (std::none_of(grids.begin(), grids.end(), [&](const GridSpec& h) { return h.shift_code() == g.shift_code(); })) {
            grids.push_back(g);
        }
    }
    const std::size_t L = c.data.tile_size;

    std::vector<std::vector<OverlapPair>> per(refs.size());
    parallel_for(refs.size(), c.threads, [&](std::size_t si) {
        const auto slide = make_slide(c, refs[si]);
        struct Explained {
            double s = 0.0;
            Tensor mask;
        };
        std::vector<TileBag> bags;
        std::vector<std::vector<Explained>> ex;
        for (const auto& g : grids) {
            bags.push_back(make_bag(slide, g, ref));
            std::vector<Explained> e;
            for (const auto& t : bags.back().tiles) {
                Explained x;
                x.s = model.classify(t.image);
                if (x.s > c.stability.floor) x.mask = explain_tile(model, t.image, xcfg).masks.front().values;
                e.push_back(std::move(x));
            }
            ex.push_back(std::move(e));
        }
        for (std::size_t ga = 0; ga < grids.size(); ++ga) {
            for (std::size_t gb = ga + 1; gb < grids.size(); ++gb) {
                for (std::size_t i = 0; i < bags[ga].tiles.size(); ++i) {
                    for (std::size_t j = 0; j < bags[gb].tiles.size(); ++j) {
                        const auto& ta = bags[ga].tiles[i];
                        const auto& tb = bags[gb].tiles[j];
                        const Rect o = tile_overlap(ta.x, ta.y, tb.x, tb.y, L);
                        if (o.area() == 0) continue;
                        OverlapPair p;
                        p.slide_id = refs[si].id();
                        p.grid_a = grids[ga].shift_code();
                        p.grid_b = grids[gb].shift_code();
                        p.row_a = ta.row;
                        p.col_a = ta.col;
                        p.row_b = tb.row;
                        p.col_b = tb.col;
                        p.dx = grids[gb].shift_x - grids[ga].shift_x;
                        p.dy = grids[gb].shift_y - grids[ga].shift_y;
                        p.overlap = o;
                        p.overlap_fraction = static_cast<double>(o.area()) / static_cast<double>(L * L);
                        p.s_a = ex[ga][i].s;
                        p.s_b = ex[gb][j].s;
                        p.annotated_fraction = mask_fraction(crop(slide.lesion_mask, o.y, o.x, o.height, o.width));
                        if (p.s_a <= c.stability.floor || p.s_b <= c.stability.floor) {
                            p.status = PairStatus::below_floor;
                        } else {
                            p.iou = overlap_iou(ex[ga][i].mask, ta.x, ta.y, ex[gb][j].mask, tb.x, tb.y, o, &p.popcount_a,
                                                &p.popcount_b);
                            if (!p.iou) p.status = PairStatus::empty_union;
                        }
                        per[si].push_back(std::move(p));
                    }
                }
            }
        }
        log("stability " + refs[si].id() + ": " + std::to_string(per[si].size()) + " overlapping pairs");
    });

    StabilityReport r;
    r.baseline_iou = uniform_baseline(c.stability.threshold).iou;
    std::vector<double> frac, diff, ann, iou;
    for (auto& v : per) {
        for (auto& p : v) {
            switch (p.status) {
                case PairStatus::included:
                    ++r.included;
                    frac.push_back(p.overlap_fraction);
                    diff.push_back(std::abs(p.s_a - p.s_b));
                    ann.push_back(p.annotated_fraction);
                    iou.push_back(*p.iou);
                    break;
                case PairStatus::below_floor: ++r.below_floor; break;
                case PairStatus::empty_union: ++r.empty_union; break;
            }
            r.pairs.push_back(std::move(p));
        }
    }
    if (refs.empty()) r.warnings.push_back("no test slides configured; study is empty");
    if (r.included == 0) {
        if (!refs.empty()) r.warnings.push_back("no overlapping pair passed the prediction floor");
        return r;
    }
    r.by_overlap = binned_summary(frac, iou, c.stability.overlap_edges);
    r.by_difference = binned_summary(diff, iou, c.stability.difference_edges);
    r.by_annotation = binned_summary(ann, iou, c.stability.annotation_edges);
    return r;
}

inline std::string stability_csv(const StabilityReport& r) {
    std::string s = std::string("# schema=") + kStabilitySchema + "\n";
    s += "slide_id,grid_a,row_a,col_a,grid_b,row_b,col_b,dx,dy,overlap_x,overlap_y,overlap_w,overlap_h,overlap_fraction,"
         "s_a,s_b,prediction_diff,annotated_fraction,popcount_a,popcount_b,iou,status\n";
    for (const auto& p : r.pairs) {
        s += p.slide_id + "," + p.grid_a + "," + std::to_string(p.row_a) + "," + std::to_string(p.col_a) + "," + p.grid_b +
             "," + std::to_string(p.row_b) + "," + std::to_string(p.col_b) + "," + std::to_string(p.dx) + "," +
             std::to_string(p.dy) + "," + std::to_string(p.overlap.x) + "," + std::to_string(p.overlap.y) + "," +
             std::to_string(p.overlap.width) + "," + std::to_string(p.overlap.height) + "," +
             detail::num(p.overlap_fraction) + "," + detail::num(p.s_a) + "," + detail::num(p.s_b) + "," +
             detail::num(std::abs(p.s_a - p.s_b)) + "," + detail::num(p.annotated_fraction) + "," +
             std::to_string(p.popcount_a) + "," + std::to_string(p.popcount_b) + "," + detail::opt_num(p.iou) + "," +
             std::string(to_string(p.status)) + "\n";
    }
    return s;
}

inline nlohmann::ordered_json stability_summary(const ExperimentConfig& c, const StabilityReport& r) {
    nlohmann::ordered_json j;
    j["schema"] = kStabilitySchema;
    j["config_digest"] = config_digest(c);
    j["threshold"] = c.stability.threshold;
    j["floor"] = c.stability.floor;
    j["pairs"] = r.pairs.size();
    j["included"] = r.included;
    j["excluded_below_floor"] = r.below_floor;
    j["excluded_empty_union"] = r.empty_union;
    j["uniform_baseline_iou"] = r.baseline_iou;
    j["iou_by_overlap_fraction"] = detail::bins_json(r.by_overlap);
    j["iou_by_prediction_difference"] = detail::bins_json(r.by_difference);
    j["iou_by_annotated_fraction"] = detail::bins_json(r.by_annotation);
    j["warnings"] = r.warnings;
    return j;
}

inline void write_stability(const ExperimentConfig& c, const StabilityReport& r) {
    const std::filesystem::path out(c.out);
    detail::write_text(out / "stability.csv", stability_csv(r));
    detail::write_text(out / "stability_summary.json", stability_summary(c, r).dump(2) + "\n");
}

inline void write_resolved_config(const ExperimentConfig& c) {
    detail::write_text(std::filesystem::path(c.out) / "config.resolved.toml", resolved_config_text(c));
}

}  // namespace tilewise
