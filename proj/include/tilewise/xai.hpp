#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tilewise/autograd.hpp"
#include "tilewise/errors.hpp"
#include "tilewise/nets.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

/// Reduction of per-channel attributions at each superpixel.
enum class Aggregator { abs, mean, var };

inline constexpr Aggregator kAllAggregators[] = {Aggregator::abs, Aggregator::mean, Aggregator::var};

inline std::string_view to_string(Aggregator a) {
    switch (a) {
        case Aggregator::abs: return "abs";
        case Aggregator::mean: return "mean";
        case Aggregator::var: return "var";
    }
    return "?";
}

inline Aggregator parse_aggregator(std::string_view s) {
    if (s == "abs") return Aggregator::abs;
    if (s == "mean") return Aggregator::mean;
    if (s == "var") return Aggregator::var;
    throw invalid_argument("unknown aggregator '" + std::string(s) + "' (expected abs, mean or var)");
}

inline std::string_view to_string(UpsampleMode m) { return m == UpsampleMode::nearest ? "nearest" : "bilinear"; }

inline UpsampleMode parse_upsample(std::string_view s) {
    if (s == "nearest") return UpsampleMode::nearest;
    if (s == "bilinear") return UpsampleMode::bilinear;
    throw invalid_argument("unknown upscale mode '" + std::string(s) + "'");
}

/// Activation x gradient of one tapped layer, k_l x k_l x C_l.
struct LayerAttribution {
    int layer = 0;
    Tensor values;
};

/// L x L saliency map; `normalized` once percentile ranks replace raw values.
struct AttributionMap {
    Tensor values;
    bool normalized = false;
};

/// Binary L x L mask; `threshold` is set when derived from an AttributionMap.
struct BinaryMask {
    Tensor values;
    std::optional<double> threshold;

    [[nodiscard]] std::size_t popcount() const {
        return static_cast<std::size_t>(std::count_if(values.values().begin(), values.values().end(),
                                                      [](double v) { return v != 0.0; }));
    }
};

struct XaiConfig {
    std::vector<int> layers{2, 4, 6, 8};
    Aggregator aggregator = Aggregator::abs;
    UpsampleMode upscale = UpsampleMode::nearest;
    std::vector<double> thresholds{0.5, 0.8, 0.9, 0.95};
    /// Divide each aggregated layer map by its max |value| before summing.
    bool per_layer_max_normalize = false;

    void validate(int conv_layers) const {
        if (layers.empty()) throw invalid_argument("XAI layer set must not be empty");
        for (int l : layers) {
            if (l < 1 || l > conv_layers) {
                throw invalid_argument("XAI layer " + std::to_string(l) + " is not a conv layer (1.." +
                                       std::to_string(conv_layers) + ")");
            }
        }
        for (double t : thresholds) {
            if (!(t >= 0.0 && t < 1.0)) throw invalid_argument("thresholds must lie in [0,1)");
        }
    }

    /// Stable textual description of every choice that affects the maps,
    /// including the differentiation target.
    [[nodiscard]] std::string description() const {
        std::ostringstream os;
        os << "layers=";
        for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
        os << ";agg=" << to_string(aggregator) << ";upscale=" << to_string(upscale)
           << ";layer_norm=" << (per_layer_max_normalize ? 1 : 0) << ";target=positive_softmax";
        return os.str();
    }

    /// FNV-1a of description(), hex.
    [[nodiscard]] std::string digest() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : description()) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }
};

inline LayerAttribution attribution_from_tap(const LayerTap& tap) {
    LayerAttribution a{tap.layer, tap.activation};
    for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] *= tap.activation_gradient[i];
    return a;
}

struct LayerAttributions {
    std::vector<LayerAttribution> layers;
    double score = 0.0;
};

/// One forward/backward pass of the positive-class score s with taps on
/// `layers`; returns activation x gradient for each.
inline LayerAttributions layer_attributions(const TileClassifier& model, const Tensor& tile, std::span<const int> layers) {
    model.check_tile(tile);
    Graph g;
    auto f = model.forward(g, g.input(tile), layers, false);
    g.backward(f.score);
    LayerAttributions out;
    out.score = g.value(f.score)[0];
    for (int l : layers) out.layers.push_back(attribution_from_tap(g.layer_tap(l)));
    return out;
}

inline LayerAttribution layer_attribution(const TileClassifier& model, const Tensor& tile, int layer) {
    const int layers[] = {layer};
    return std::move(layer_attributions(model, tile, layers).layers.front());
}

/// Per-superpixel reduction across channels: mean, mean of absolute values,
/// or population variance.
inline Tensor aggregate_channels(const LayerAttribution& attr, Aggregator agg) {
    const Tensor& v = attr.values;
    if (v.rank() != 3) throw shape_error("layer attribution must be k x k x C");
    const std::size_t h = v.extent(0), w = v.extent(1), c = v.extent(2);
    Tensor out({h, w});
    const double inv = 1.0 / static_cast<double>(c);
    for (std::size_t p = 0; p < h * w; ++p) {
        const double* a = v.data() + p * c;
        double acc = 0.0;
        switch (agg) {
            case Aggregator::mean:
                for (std::size_t k = 0; k < c; ++k) acc += a[k];
                acc *= inv;
                break;
            case Aggregator::abs:
                for (std::size_t k = 0; k < c; ++k) acc += std::abs(a[k]);
                acc *= inv;
                break;
            case Aggregator::var: {
                double mean = 0.0;
                for (std::size_t k = 0; k < c; ++k) mean += a[k];
                mean *= inv;
                for (std::size_t k = 0; k < c; ++k) acc += (a[k] - mean) * (a[k] - mean);
                acc *= inv;
                break;
            }
        }
        out[p] = acc;
    }
    return out;
}

/// Upscale every square k_l x k_l map to L x L and sum them.
inline AttributionMap fuse_layers(std::span<const Tensor> maps, std::size_t size,
                                  UpsampleMode mode = UpsampleMode::nearest, bool per_layer_max_normalize = false) {
    if (maps.empty()) throw invalid_argument("cannot fuse an empty layer set");
    AttributionMap out{Tensor({size, size}), false};
    for (const auto& m : maps) {
        if (m.rank() != 2 || m.extent(0) != m.extent(1)) throw shape_error("layer maps must be square k x k");
        if (m.extent(0) > size) throw shape_error("layer map larger than the target size");
        Tensor up = m.extent(0) == size ? m : resize(m, size, size, mode);
        double scale = 1.0;
        if (per_layer_max_normalize) {
            double peak = 0.0;
            for (double v : up.values()) peak = std::max(peak, std::abs(v));
            scale = peak > 0.0 ? 1.0 / peak : 0.0;
        }
        for (std::size_t i = 0; i < up.size(); ++i) out.values[i] += scale * up[i];
    }
    return out;
}

/// Replace every entry by the share of entries strictly smaller than it.
/// Ties share a value; the maximum possible value is (n-1)/n.
inline AttributionMap percentile_normalize(const AttributionMap& a) {
    if (a.normalized) throw invalid_argument("attribution map is already normalized");
    const auto& v = a.values;
    std::vector<double> sorted(v.values().begin(), v.values().end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(v.size());
    AttributionMap out{Tensor(v.shape()), true};
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto below = std::lower_bound(sorted.begin(), sorted.end(), v[i]) - sorted.begin();
        out.values[i] = static_cast<double>(below) / n;
    }
    return out;
}

/// 1 where the normalized map is >= t.
inline BinaryMask threshold_map(const AttributionMap& normalized, double t) {
    if (!normalized.normalized) throw invalid_argument("threshold_map expects a percentile-normalized map");
    if (!(t >= 0.0 && t < 1.0)) throw invalid_argument("threshold must lie in [0,1)");
    BinaryMask m{Tensor(normalized.values.shape()), t};
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = normalized.values[i] >= t ? 1.0 : 0.0;
    return m;
}

struct Explanation {
    AttributionMap raw;
    AttributionMap normalized;
    std::vector<BinaryMask> masks;  ///< one per configured threshold
    double score = 0.0;
};

namespace detail {

inline Explanation finish_explanation(const LayerAttributions& la, const XaiConfig& cfg, Aggregator agg,
                                      std::size_t size) {
    std::vector<Tensor> maps;
    maps.reserve(la.layers.size());
    for (const auto& l : la.layers) maps.push_back(aggregate_channels(l, agg));
    Explanation e;
    e.raw = fuse_layers(maps, size, cfg.upscale, cfg.per_layer_max_normalize);
    e.normalized = percentile_normalize(e.raw);
    for (double t : cfg.thresholds) e.masks.push_back(threshold_map(e.normalized, t));
    e.score = la.score;
    return e;
}

}  // namespace detail

/// Attribution, aggregation, fusion, normalization and thresholding of one tile.
inline Explanation explain_tile(const TileClassifier& model, const Tensor& tile, const XaiConfig& config) {
    config.validate(model.conv_layer_count());
    const auto la = layer_attributions(model, tile, config.layers);
    return detail::finish_explanation(la, config, config.aggregator, model.config().tile_size);
}

/// Explanations for several aggregators sharing one backward pass. The
/// config's own aggregator is ignored.
inline std::vector<Explanation> explain_tile_aggregators(const TileClassifier& model, const Tensor& tile,
                                                         const XaiConfig& config, std::span<const Aggregator> aggs) {
    config.validate(model.conv_layer_count());
    const auto la = layer_attributions(model, tile, config.layers);
    std::vector<Explanation> out;
    for (auto a : aggs) out.push_back(detail::finish_explanation(la, config, a, model.config().tile_size));
    return out;
}

/// 8-bit heatmap value round(255 * normalized).
inline Tensor heatmap_bytes(const AttributionMap& normalized) {
    if (!normalized.normalized) throw invalid_argument("heatmap export expects a normalized map");
    Tensor out(normalized.values.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::round(255.0 * normalized.values[i]);
    return out;
}

}  // namespace tilewise
