#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tilewise/autograd.hpp"
#include "tilewise/checkpoint.hpp"
#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

/// Parameter leaves bound into one graph, by parameter name.
using Bindings = std::map<std::string, Var>;

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

inline Var bind(Graph& g, Bindings& b, const NamedTensors& params, const std::string& name, bool trainable) {
    auto v = g.input(params.at(name), trainable);
    b[name] = v;
    return v;
}

/// Plain SGD on every parameter whose name passes `filter`.
template <typename Filter>
void sgd_update(NamedTensors& params, const NamedTensors& grads, double lr, Filter&& filter) {
    for (auto& [name, p] : params) {
        if (!filter(name)) continue;
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * it->second[i];
        if (!p.all_finite()) throw numeric_error("training diverged: parameter " + name + " is not finite");
    }
}

inline void accumulate_grads(NamedTensors& acc, const Graph& g, const Bindings& b, double scale) {
    for (const auto& [name, v] : b) {
        if (!g.requires_grad(v)) continue;
        const auto& gr = g.grad(v);
        auto [it, inserted] = acc.try_emplace(name, gr.shape());
        for (std::size_t i = 0; i < gr.size(); ++i) it->second[i] += scale * gr[i];
    }
}

inline void check_label(int label) {
    if (label != 0 && label != 1) throw invalid_argument("label must be 0 or 1, got " + std::to_string(label));
}

inline void check_lr(double lr) {
    if (!(lr > 0.0)) throw invalid_argument("learning rate must be positive");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tile classifier
// ---------------------------------------------------------------------------

struct ClassifierConfig {
    std::size_t tile_size = 64;
    /// Output channels of conv layers 1..n (3x3, padding 1, ReLU).
    std::vector<std::size_t> conv_widths{8, 8, 16, 16, 32, 32, 32, 32};
    /// 1-based conv layer indices followed by 2x2 max pooling.
    std::vector<int> pool_after{2, 4, 6};
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 32;
    bool frozen_backbone = true;
};

/// Output handles of one classifier forward pass.
struct ClassifierForward {
    Var probs;     ///< length-2 softmax vector
    Var score;     ///< positive-class probability s
    Var features;  ///< backbone output (input of the head)
    Bindings params;
};

/// Conv backbone followed by FC-ReLU-FC-ReLU-FC-softmax. Layer indices of
/// the backbone are 1-based; layer l's tap is the post-ReLU output of conv l.
class TileClassifier {
public:
    TileClassifier() : TileClassifier(ClassifierConfig{}, 0) {}

    TileClassifier(ClassifierConfig config, std::uint64_t seed) : config_(std::move(config)) {
        validate();
        std::mt19937_64 rng(seed);
        std::size_t in_ch = 3;
        for (std::size_t i = 0; i < config_.conv_widths.size(); ++i) {
            const std::size_t out_ch = config_.conv_widths[i];
            const auto l = std::to_string(i + 1);
            params_["conv" + l + ".w"] = detail::he_normal({3, 3, in_ch, out_ch}, 9 * in_ch, rng);
            params_["conv" + l + ".b"] = Tensor({out_ch});
            in_ch = out_ch;
        }
        const std::size_t flat = feature_size();
        params_["fc1.w"] = detail::he_normal({flat, config_.hidden1}, flat, rng);
        params_["fc1.b"] = Tensor({config_.hidden1});
        params_["fc2.w"] = detail::he_normal({config_.hidden1, config_.hidden2}, config_.hidden1, rng);
        params_["fc2.b"] = Tensor({config_.hidden2});
        params_["fc3.w"] = detail::he_normal({config_.hidden2, 2}, config_.hidden2, rng);
        params_["fc3.b"] = Tensor({2});
    }

    [[nodiscard]] const ClassifierConfig& config() const noexcept { return config_; }
    [[nodiscard]] int conv_layer_count() const noexcept { return static_cast<int>(config_.conv_widths.size()); }
    [[nodiscard]] bool frozen_backbone() const noexcept { return config_.frozen_backbone; }
    void set_frozen_backbone(bool frozen) noexcept { config_.frozen_backbone = frozen; }

    [[nodiscard]] NamedTensors& parameters() noexcept { return params_; }
    [[nodiscard]] const NamedTensors& parameters() const noexcept { return params_; }

    static bool is_backbone(const std::string& name) { return name.rfind("conv", 0) == 0; }

    /// Spatial extent k_l and channel count C_l of conv layer l's output.
    [[nodiscard]] std::pair<std::size_t, std::size_t> layer_shape(int layer) const {
        if (layer < 1 || layer > conv_layer_count()) throw invalid_argument("no conv layer " + std::to_string(layer));
        std::size_t k = config_.tile_size;
        for (int l = 1; l < layer; ++l) {
            if (pools_after(l)) k /= 2;
        }
        return {k, config_.conv_widths[static_cast<std::size_t>(layer - 1)]};
    }

    [[nodiscard]] std::size_t feature_size() const {
        std::size_t k = config_.tile_size;
        for (int l = 1; l <= conv_layer_count(); ++l) {
            if (pools_after(l)) k /= 2;
        }
        return k * k * config_.conv_widths.back();
    }

    void check_tile(const Tensor& tile) const {
        if (tile.shape() != Shape{config_.tile_size, config_.tile_size, 3}) {
            throw shape_error("tile shape " + shape_string(tile.shape()) + " does not match classifier input " +
                              shape_string({config_.tile_size, config_.tile_size, 3}));
        }
    }

    /// Build the full forward pass on `tile` (an existing graph node holding
    /// an L x L x 3 image in [0,255]). Layers listed in `taps` are registered
    /// on the graph.
    ClassifierForward forward(Graph& g, Var tile, std::span<const int> taps = {},
                              std::optional<bool> train_backbone = std::nullopt) const {
        check_tile(g.value(tile));
        for (int l : taps) (void)layer_shape(l);
        const bool backbone_trainable = train_backbone.value_or(!config_.frozen_backbone);
        Bindings b;
        Var x = g.affine(tile, 1.0 / 127.5, -1.0);
        for (int l = 1; l <= conv_layer_count(); ++l) {
            const auto s = std::to_string(l);
            Var w = detail::bind(g, b, params_, "conv" + s + ".w", backbone_trainable);
            Var bias = detail::bind(g, b, params_, "conv" + s + ".b", backbone_trainable);
            x = g.relu(g.conv2d(x, w, bias, 1, 1));
            if (std::find(taps.begin(), taps.end(), l) != taps.end()) g.tap(x, l);
            if (pools_after(l)) x = g.max_pool2(x);
        }
        Var features = x;
        auto out = head(g, features, b);
        out.features = features;
        return out;
    }

    /// Head only, applied to precomputed backbone features.
    ClassifierForward head_forward(Graph& g, Var features) const {
        Bindings b;
        auto out = head(g, features, b);
        out.features = features;
        return out;
    }

    /// Positive-class probability s for one tile.
    [[nodiscard]] double classify(const Tensor& tile) const {
        Graph g;
        auto f = forward(g, g.input(tile), {}, false);
        return g.value(f.score)[0];
    }

    [[nodiscard]] Tensor features(const Tensor& tile) const {
        Graph g;
        auto f = forward(g, g.input(tile), {}, false);
        return g.value(f.features);
    }

    [[nodiscard]] double classify_features(const Tensor& features) const {
        Graph g;
        auto f = head_forward(g, g.input(features));
        return g.value(f.score)[0];
    }

    [[nodiscard]] NamedTensors state() const {
        NamedTensors s = params_;
        std::vector<double> widths(config_.conv_widths.begin(), config_.conv_widths.end());
        s["meta.conv_widths"] = Tensor({widths.size()}, widths);
        std::vector<double> pools(config_.pool_after.begin(), config_.pool_after.end());
        if (pools.empty()) pools.push_back(0);
        s["meta.pool_after"] = Tensor({pools.size()}, pools);
        s["meta.dims"] = Tensor({4}, {static_cast<double>(config_.tile_size), static_cast<double>(config_.hidden1),
                                      static_cast<double>(config_.hidden2), config_.frozen_backbone ? 1.0 : 0.0});
        return s;
    }

    static TileClassifier from_state(const NamedTensors& state) {
        ClassifierConfig c;
        const auto& widths = state.at("meta.conv_widths");
        c.conv_widths.clear();
        for (double w : widths.values()) c.conv_widths.push_back(static_cast<std::size_t>(w));
        c.pool_after.clear();
        for (double p : state.at("meta.pool_after").values()) {
            if (p > 0) c.pool_after.push_back(static_cast<int>(p));
        }
        const auto& dims = state.at("meta.dims");
        c.tile_size = static_cast<std::size_t>(dims[0]);
        c.hidden1 = static_cast<std::size_t>(dims[1]);
        c.hidden2 = static_cast<std::size_t>(dims[2]);
        c.frozen_backbone = dims[3] != 0.0;
        TileClassifier model(c, 0);
        for (auto& [name, p] : model.params_) {
            const auto& src = state.at(name);
            if (src.shape() != p.shape()) throw shape_error("checkpoint tensor " + name + " has wrong shape");
            p = src;
        }
        return model;
    }

    void save(const std::filesystem::path& stem) const { save_checkpoint(stem, state()); }
    static TileClassifier load(const std::filesystem::path& stem) { return from_state(load_checkpoint(stem)); }

private:
    [[nodiscard]] bool pools_after(int layer) const {
        return std::find(config_.pool_after.begin(), config_.pool_after.end(), layer) != config_.pool_after.end();
    }

    void validate() const {
        if (config_.conv_widths.empty()) throw invalid_argument("classifier needs at least one conv layer");
        std::set<int> seen;
        std::size_t k = config_.tile_size;
        for (int p : config_.pool_after) {
            if (p < 1 || p > static_cast<int>(config_.conv_widths.size()) || !seen.insert(p).second) {
                throw invalid_argument("invalid pooling layer index " + std::to_string(p));
            }
            if (k % 2) throw invalid_argument("tile size not divisible by the pooling stack");
            k /= 2;
        }
        if (k == 0) throw invalid_argument("tile size too small for the pooling stack");
    }

    ClassifierForward head(Graph& g, Var features, Bindings& b) const {
        Var x = g.reshape(features, {g.value(features).size()});
        x = g.relu(g.linear(x, detail::bind(g, b, params_, "fc1.w", true), detail::bind(g, b, params_, "fc1.b", true)));
        x = g.relu(g.linear(x, detail::bind(g, b, params_, "fc2.w", true), detail::bind(g, b, params_, "fc2.b", true)));
        x = g.linear(x, detail::bind(g, b, params_, "fc3.w", true), detail::bind(g, b, params_, "fc3.b", true));
        Var probs = g.softmax(x);
        ClassifierForward out;
        out.probs = probs;
        out.score = g.select(probs, 1);
        out.params = std::move(b);
        return out;
    }

    ClassifierConfig config_;
    NamedTensors params_;
};

/// Supervised tile-level step (used to pre-train the backbone): mean
/// cross-entropy over the batch, SGD on all parameters. Returns the loss.
inline double train_tile_batch(TileClassifier& model, std::span<const Tensor> tiles, std::span<const int> labels,
                               double lr) {
    detail::check_lr(lr);
    if (tiles.empty() || tiles.size() != labels.size()) throw invalid_argument("tile batch and labels must match");
    NamedTensors acc;
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(tiles.size());
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        detail::check_label(labels[i]);
        Graph g;
        auto f = model.forward(g, g.input(tiles[i]), {}, true);
        Var ce = g.cross_entropy(f.probs, static_cast<std::size_t>(labels[i]));
        g.backward(ce);
        loss += g.value(ce)[0] * scale;
        detail::accumulate_grads(acc, g, f.params, scale);
    }
    detail::sgd_update(model.parameters(), acc, lr, [](const std::string&) { return true; });
    return loss;
}

// ---------------------------------------------------------------------------
// MIL model
// ---------------------------------------------------------------------------

struct MilPrediction {
    double slide_score = 0.0;
    std::size_t argmax = 0;
    std::vector<double> tile_scores;
};

/// Index of the largest value; the lowest index wins ties.
inline std::size_t first_argmax(std::span<const double> xs) {
    if (xs.empty()) throw invalid_argument("argmax of an empty list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[best]) best = i;
    }
    return best;
}

/// Handles of the MIL loss graph over a whole bag.
struct MilGraph {
    Var loss;
    Var slide_score;
    std::size_t argmax = 0;
    std::vector<Var> tile_inputs;
    std::vector<double> tile_scores;
    Bindings params;
};

/// Slide model: max-pooling of tile scores over the bag.
class MilModel {
public:
    MilModel() = default;
    explicit MilModel(TileClassifier classifier) : classifier_(std::move(classifier)) {}

    [[nodiscard]] TileClassifier& classifier() noexcept { return classifier_; }
    [[nodiscard]] const TileClassifier& classifier() const noexcept { return classifier_; }

    [[nodiscard]] MilPrediction forward(std::span<const Tensor> bag) const {
        if (bag.empty()) throw invalid_argument("MIL forward on an empty bag");
        MilPrediction p;
        p.tile_scores.reserve(bag.size());
        for (const auto& t : bag) p.tile_scores.push_back(classifier_.classify(t));
        p.argmax = first_argmax(p.tile_scores);
        p.slide_score = p.tile_scores[p.argmax];
        return p;
    }

    /// MIL forward from precomputed backbone features.
    [[nodiscard]] MilPrediction forward_features(std::span<const Tensor> features) const {
        if (features.empty()) throw invalid_argument("MIL forward on an empty bag");
        MilPrediction p;
        for (const auto& f : features) p.tile_scores.push_back(classifier_.classify_features(f));
        p.argmax = first_argmax(p.tile_scores);
        p.slide_score = p.tile_scores[p.argmax];
        return p;
    }

    /// Full graph: every tile is a gradient-tracking leaf, the slide score
    /// and the loss are routed through the argmax tile only.
    MilGraph build_graph(Graph& g, std::span<const Tensor> bag, int label, bool track_inputs = true) const {
        if (bag.empty()) throw invalid_argument("MIL graph on an empty bag");
        detail::check_label(label);
        MilGraph mg;
        std::vector<Var> probs, scores;
        for (std::size_t i = 0; i < bag.size(); ++i) {
            Var in = g.input(bag[i], track_inputs);
            mg.tile_inputs.push_back(in);
            auto f = classifier_.forward(g, in);
            probs.push_back(f.probs);
            scores.push_back(f.score);
            mg.tile_scores.push_back(g.value(f.score)[0]);
            for (auto& [name, v] : f.params) mg.params.emplace(name + "#" + std::to_string(i), v);
        }
        mg.argmax = first_argmax(mg.tile_scores);
        mg.slide_score = g.route(scores, mg.argmax);
        mg.loss = g.cross_entropy(g.route(probs, mg.argmax), static_cast<std::size_t>(label));
        return mg;
    }

    /// One SGD step on a bag. Only the argmax tile contributes gradients;
    /// backbone parameters are left untouched when the backbone is frozen.
    double train_step(std::span<const Tensor> bag, int label, double lr) {
        detail::check_lr(lr);
        detail::check_label(label);
        auto pred = forward(bag);
        Graph g;
        auto f = classifier_.forward(g, g.input(bag[pred.argmax]));
        Var loss = g.cross_entropy(f.probs, static_cast<std::size_t>(label));
        g.backward(loss);
        NamedTensors grads;
        detail::accumulate_grads(grads, g, f.params, 1.0);
        const bool frozen = classifier_.frozen_backbone();
        detail::sgd_update(classifier_.parameters(), grads, lr,
                           [frozen](const std::string& n) { return !frozen || !TileClassifier::is_backbone(n); });
        return g.value(loss)[0];
    }

    /// Head-only step from cached backbone features (frozen backbone mode).
    double train_step_features(std::span<const Tensor> features, int label, double lr) {
        detail::check_lr(lr);
        detail::check_label(label);
        auto pred = forward_features(features);
        Graph g;
        auto f = classifier_.head_forward(g, g.input(features[pred.argmax]));
        Var loss = g.cross_entropy(f.probs, static_cast<std::size_t>(label));
        g.backward(loss);
        NamedTensors grads;
        detail::accumulate_grads(grads, g, f.params, 1.0);
        detail::sgd_update(classifier_.parameters(), grads, lr, [](const std::string&) { return true; });
        return g.value(loss)[0];
    }

private:
    TileClassifier classifier_;
};

// ---------------------------------------------------------------------------
// Segmentation network
// ---------------------------------------------------------------------------

/// Class index of the lesion channel; channel 1 is parenchyma.
inline constexpr std::size_t kLesionClass = 0;

/// Mean over classes of the soft dice loss of a H x W x C prediction against
/// a one-hot target. A class with empty prediction and target contributes 0.
inline double dice_loss(const Tensor& pred, const Tensor& target_onehot) {
    if (pred.shape() != target_onehot.shape()) {
        throw shape_error("dice_loss shape mismatch: " + shape_string(pred.shape()) + " vs " +
                          shape_string(target_onehot.shape()));
    }
    Graph g;
    return g.value(g.dice_loss(g.input(pred), target_onehot))[0];
}

/// One-hot {lesion, parenchyma} target from a binary lesion mask (H x W).
inline Tensor onehot_from_mask(const Tensor& mask) {
    if (mask.rank() != 2) throw shape_error("mask must be H x W");
    Tensor out({mask.extent(0), mask.extent(1), 2});
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const bool lesion = mask[i] > 0.5;
        out[2 * i + kLesionClass] = lesion ? 1.0 : 0.0;
        out[2 * i + 1 - kLesionClass] = lesion ? 0.0 : 1.0;
    }
    return out;
}

struct SegNetConfig {
    std::size_t tile_size = 64;
    std::size_t width1 = 8;
    std::size_t width2 = 16;
    std::size_t width3 = 16;
    std::size_t classes = 2;
};

/// Small encoder/decoder with skip connections:
/// enc1(L) -> pool -> enc2(L/2) -> pool -> bottleneck(L/4) -> up -> [.., enc2]
/// -> dec2 -> up -> [.., enc1] -> dec1 -> 1x1 conv -> channel softmax.
/// The output conv starts at zero so an untrained net predicts 1/C everywhere.
class SegNet {
public:
    SegNet() : SegNet(SegNetConfig{}, 0) {}

    SegNet(SegNetConfig config, std::uint64_t seed) : config_(config) {
        if (config_.tile_size % 4) throw invalid_argument("segnet tile size must be divisible by 4");
        if (config_.classes < 2) throw invalid_argument("segnet needs at least 2 classes");
        std::mt19937_64 rng(seed);
        auto conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k) {
            params_[name + ".w"] = detail::he_normal({k, k, in, out}, k * k * in, rng);
            params_[name + ".b"] = Tensor({out});
        };
        conv("enc1", 3, config_.width1, 3);
        conv("enc2", config_.width1, config_.width2, 3);
        conv("mid", config_.width2, config_.width3, 3);
        conv("dec2", config_.width3 + config_.width2, config_.width2, 3);
        conv("dec1", config_.width2 + config_.width1, config_.width1, 3);
        params_["out.w"] = Tensor({1, 1, config_.width1, config_.classes});
        params_["out.b"] = Tensor({config_.classes});
    }

    [[nodiscard]] const SegNetConfig& config() const noexcept { return config_; }
    [[nodiscard]] NamedTensors& parameters() noexcept { return params_; }
    [[nodiscard]] const NamedTensors& parameters() const noexcept { return params_; }

    /// Returns the H x W x C probability node.
    Var forward(Graph& g, Var tile, Bindings& b, bool trainable) const {
        const auto& t = g.value(tile);
        if (t.shape() != Shape{config_.tile_size, config_.tile_size, 3}) {
            throw shape_error("segnet input " + shape_string(t.shape()) + " does not match tile size");
        }
        const std::size_t L = config_.tile_size;
        auto conv = [&](Var x, const std::string& name, std::size_t pad) {
            return g.conv2d(x, detail::bind(g, b, params_, name + ".w", trainable),
                            detail::bind(g, b, params_, name + ".b", trainable), 1, pad);
        };
        Var x = g.affine(tile, 1.0 / 127.5, -1.0);
        Var e1 = g.relu(conv(x, "enc1", 1));
        Var e2 = g.relu(conv(g.max_pool2(e1), "enc2", 1));
        Var m = g.relu(conv(g.max_pool2(e2), "mid", 1));
        Var d2 = g.relu(conv(g.concat_channels(g.upsample(m, L / 2, L / 2), e2), "dec2", 1));
        Var d1 = g.relu(conv(g.concat_channels(g.upsample(d2, L, L), e1), "dec1", 1));
        return g.softmax(conv(d1, "out", 0));
    }

    /// Per-pixel class probabilities (H x W x C).
    [[nodiscard]] Tensor predict(const Tensor& tile) const {
        Graph g;
        Bindings b;
        return g.value(forward(g, g.input(tile), b, false));
    }

    /// Lesion-class probability map (H x W).
    [[nodiscard]] Tensor lesion_probability(const Tensor& tile) const {
        return channel_slice(predict(tile), kLesionClass);
    }

    /// Binary lesion mask from the per-pixel argmax.
    [[nodiscard]] Tensor predict_mask(const Tensor& tile) const {
        const Tensor p = predict(tile);
        const std::size_t c = config_.classes;
        Tensor mask({p.extent(0), p.extent(1)});
        for (std::size_t i = 0; i < mask.size(); ++i) {
            const double* row = p.data() + i * c;
            mask[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row) == kLesionClass ? 1.0 : 0.0;
        }
        return mask;
    }

    /// One SGD step on a single tile; returns its dice loss.
    double train_step(const Tensor& tile, const Tensor& target_onehot, double lr) {
        detail::check_lr(lr);
        Graph g;
        Bindings b;
        Var probs = forward(g, g.input(tile), b, true);
        Var loss = g.dice_loss(probs, target_onehot);
        g.backward(loss);
        NamedTensors grads;
        detail::accumulate_grads(grads, g, b, 1.0);
        detail::sgd_update(params_, grads, lr, [](const std::string&) { return true; });
        return g.value(loss)[0];
    }

    /// One pass over the dataset in the given order; returns the mean loss.
    double train_epoch(std::span<const Tensor> tiles, std::span<const Tensor> targets_onehot, double lr) {
        if (tiles.empty() || tiles.size() != targets_onehot.size()) {
            throw invalid_argument("segnet training needs a non-empty dataset with one target per tile");
        }
        double total = 0.0;
        for (std::size_t i = 0; i < tiles.size(); ++i) total += train_step(tiles[i], targets_onehot[i], lr);
        return total / static_cast<double>(tiles.size());
    }

    [[nodiscard]] NamedTensors state() const {
        NamedTensors s = params_;
        s["meta.dims"] = Tensor({5}, {static_cast<double>(config_.tile_size), static_cast<double>(config_.width1),
                                      static_cast<double>(config_.width2), static_cast<double>(config_.width3),
                                      static_cast<double>(config_.classes)});
        return s;
    }

    static SegNet from_state(const NamedTensors& state) {
        const auto& d = state.at("meta.dims");
        SegNetConfig c{static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[1]), static_cast<std::size_t>(d[2]),
                       static_cast<std::size_t>(d[3]), static_cast<std::size_t>(d[4])};
        SegNet net(c, 0);
        for (auto& [name, p] : net.params_) {
            const auto& src = state.at(name);
            if (src.shape() != p.shape()) throw shape_error("checkpoint tensor " + name + " has wrong shape");
            p = src;
        }
        return net;
    }

    void save(const std::filesystem::path& stem) const { save_checkpoint(stem, state()); }
    static SegNet load(const std::filesystem::path& stem) { return from_state(load_checkpoint(stem)); }

private:
    SegNetConfig config_;
    NamedTensors params_;
};

}  // namespace tilewise
