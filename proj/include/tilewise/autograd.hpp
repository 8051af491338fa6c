#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tilewise/errors.hpp"
#include "tilewise/tensor.hpp"

namespace tilewise {

/// Handle to a node of a Graph.
struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
    friend bool operator==(Var, Var) = default;
};

/// An intermediate activation exposed for attribution, together with the
/// gradient of the differentiated output with respect to it.
struct LayerTap {
    int layer = 0;
    Tensor activation;
    Tensor activation_gradient;
};

/// Tape-based reverse-mode differentiation. Nodes are appended in evaluation
/// order, so the node list is already a topological order and backward()
/// walks it in reverse. One graph per forward pass; a graph is not reused.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    // ---- leaves -------------------------------------------------------

    Var input(Tensor value, bool requires_grad = false) {
        if (value.empty()) throw shape_error("graph input must be non-empty");
        return push("input", {}, std::move(value), requires_grad, nullptr);
    }

    Var parameter(Tensor value) { return input(std::move(value), true); }

    // ---- access -------------------------------------------------------

    [[nodiscard]] const Tensor& value(Var v) const { return node(v).value; }
    [[nodiscard]] bool requires_grad(Var v) const { return node(v).requires_grad; }
    [[nodiscard]] std::size_t node_count() const noexcept { return nodes_.size(); }
    [[nodiscard]] bool differentiated() const noexcept { return differentiated_; }

    /// Gradient of the differentiated output with respect to `v`. Nodes that
    /// did not lie on a path to the output get an all-zero gradient.
    [[nodiscard]] const Tensor& grad(Var v) const {
        if (!differentiated_) throw invalid_argument("gradient requested before backward()");
        const auto& n = node(v);
        if (!n.requires_grad) throw invalid_argument("node " + std::to_string(v.id) + " does not track gradients");
        return n.grad;
    }

    /// Register `v` as the activation of layer `layer`. Tapped nodes always
    /// track gradients, even when everything upstream is frozen.
    void tap(Var v, int layer) {
        for (const auto& t : taps_) {
            if (t.first == layer) throw invalid_argument("layer " + std::to_string(layer) + " tapped twice");
        }
        node(v).requires_grad = true;
        taps_.emplace_back(layer, v.id);
    }

    [[nodiscard]] std::optional<Var> tapped(int layer) const {
        for (const auto& [l, id] : taps_) {
            if (l == layer) return Var{id};
        }
        return std::nullopt;
    }

    [[nodiscard]] std::vector<int> tapped_layers() const {
        std::vector<int> out;
        for (const auto& t : taps_) out.push_back(t.first);
        return out;
    }

    [[nodiscard]] LayerTap layer_tap(int layer) const {
        auto v = tapped(layer);
        if (!v) throw invalid_argument("layer " + std::to_string(layer) + " has no registered tap");
        return LayerTap{layer, value(*v), grad(*v)};
    }

    /// Digest of every piecewise decision taken in the forward pass (ReLU
    /// signs, pooling winners, routing choices). Two evaluations with equal
    /// digests lie on the same smooth piece of the function.
    [[nodiscard]] std::uint64_t pattern_digest() const noexcept { return pattern_; }

    // ---- backward -----------------------------------------------------

    void backward(Var output) {
        const auto& out = node(output);
        if (out.value.size() != 1) {
            throw shape_error("backward requires a scalar output, got " + shape_string(out.value.shape()));
        }
        if (differentiated_) throw invalid_argument("backward already run on this graph");
        for (auto& n : nodes_) {
            if (n.requires_grad) n.grad = Tensor(n.value.shape());
        }
        differentiated_ = true;
        if (!out.requires_grad) return;
        nodes_[output.id].grad[0] = 1.0;
        nodes_[output.id].reached = true;
        for (std::size_t i = output.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.reached || !n.backward) continue;
            n.backward(*this, n);
        }
    }

    // ---- operators ----------------------------------------------------

    /// Cross-correlation of an H x W x C_in input with k x k x C_in x C_out
    /// kernels plus an optional bias of length C_out.
    Var conv2d(Var x, Var kernels, std::optional<Var> bias, std::size_t stride, std::size_t padding) {
        const auto& in = value(x);
        const auto& w = value(kernels);
        if (in.rank() != 3) throw shape_error("conv2d input must be HxWxC, got " + shape_string(in.shape()));
        if (w.rank() != 4 || w.extent(0) != w.extent(1)) {
            throw shape_error("conv2d kernels must be k x k x C_in x C_out, got " + shape_string(w.shape()));
        }
        if (w.extent(2) != in.extent(2)) {
            throw shape_error("conv2d channel mismatch: input " + shape_string(in.shape()) + " kernels " +
                              shape_string(w.shape()));
        }
        if (stride < 1) throw invalid_argument("conv2d stride must be >= 1");
        const std::size_t k = w.extent(0), ci = in.extent(2), co = w.extent(3);
        const std::size_t h = in.extent(0), wd = in.extent(1);
        if (k > h + 2 * padding || k > wd + 2 * padding) throw shape_error("conv2d kernel larger than padded input");
        if (bias && (value(*bias).size() != co)) throw shape_error("conv2d bias length must equal C_out");
        const std::size_t oh = (h + 2 * padding - k) / stride + 1;
        const std::size_t ow = (wd + 2 * padding - k) / stride + 1;

        Tensor out({oh, ow, co});
        const double* bp = bias ? value(*bias).data() : nullptr;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double* o = out.data() + (oy * ow + ox) * co;
                if (bp) std::copy(bp, bp + co, o);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        const double* ip = in.data() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * ci;
                        const double* wp = w.data() + (ky * k + kx) * ci * co;
                        for (std::size_t c = 0; c < ci; ++c) {
                            const double v = ip[c];
                            const double* wr = wp + c * co;
                            for (std::size_t j = 0; j < co; ++j) o[j] += v * wr[j];
                        }
                    }
                }
            }
        }

        std::vector<std::size_t> inputs{x.id, kernels.id};
        if (bias) inputs.push_back(bias->id);
        return push("conv2d", std::move(inputs), std::move(out), any_tracks(x, kernels, bias),
                    [=](Graph& g, Node& n) {
                        const auto& in = g.nodes_[x.id].value;
                        const auto& w = g.nodes_[kernels.id].value;
                        const bool gin = g.nodes_[x.id].requires_grad;
                        const bool gw = g.nodes_[kernels.id].requires_grad;
                        const bool gb = bias && g.nodes_[bias->id].requires_grad;
                        double* din = gin ? g.accumulate(x) : nullptr;
                        double* dw = gw ? g.accumulate(kernels) : nullptr;
                        double* db = gb ? g.accumulate(*bias) : nullptr;
                        const double* go = n.grad.data();
                        for (std::size_t oy = 0; oy < oh; ++oy) {
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const double* gr = go + (oy * ow + ox) * co;
                                if (db) {
                                    for (std::size_t j = 0; j < co; ++j) db[j] += gr[j];
                                }
                                for (std::size_t ky = 0; ky < k; ++ky) {
                                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t kx = 0; kx < k; ++kx) {
                                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                        const std::size_t ioff = (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * ci;
                                        const std::size_t woff = (ky * k + kx) * ci * co;
                                        const double* ip = in.data() + ioff;
                                        const double* wp = w.data() + woff;
                                        for (std::size_t c = 0; c < ci; ++c) {
                                            const double* wr = wp + c * co;
                                            if (din) {
                                                double acc = 0.0;
                                                for (std::size_t j = 0; j < co; ++j) acc += gr[j] * wr[j];
                                                din[ioff + c] += acc;
                                            }
                                            if (dw) {
                                                const double v = ip[c];
                                                double* dwr = dw + woff + c * co;
                                                for (std::size_t j = 0; j < co; ++j) dwr[j] += v * gr[j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
    }

    /// max(x, 0); the subgradient at 0 is 0.
    Var relu(Var x) {
        const auto& in = value(x);
        Tensor out(in.shape());
        std::uint64_t h = 0x9e3779b97f4a7c15ull;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const bool on = in[i] > 0.0;
            out[i] = on ? in[i] : 0.0;
            h = mix(h, on ? i : ~i);
        }
        fold_pattern(h);
        return push("relu", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            const auto& in = g.nodes_[x.id].value;
            double* d = g.accumulate(x);
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (in[i] > 0.0) d[i] += n.grad[i];
            }
        });
    }

    /// 2 x 2 max pooling with stride 2 over an H x W x C tensor (H, W even).
    /// Ties go to the first element in row-major window order.
    Var max_pool2(Var x) {
        const auto& in = value(x);
        if (in.rank() != 3) throw shape_error("max_pool2 expects HxWxC");
        const std::size_t h = in.extent(0), w = in.extent(1), c = in.extent(2);
        if (h % 2 || w % 2) throw shape_error("max_pool2 expects even spatial extents, got " + shape_string(in.shape()));
        const std::size_t oh = h / 2, ow = w / 2;
        Tensor out({oh, ow, c});
        std::vector<std::size_t> winner(out.size());
        std::uint64_t hsh = 0x51ed270b27ull;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((2 * oy) * w + 2 * ox) * c + ch;
                    for (std::size_t dy = 0; dy < 2; ++dy) {
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if (in[idx] > in[best]) best = idx;
                        }
                    }
                    const std::size_t o = (oy * ow + ox) * c + ch;
                    out[o] = in[best];
                    winner[o] = best;
                    hsh = mix(hsh, best);
                }
            }
        }
        fold_pattern(hsh);
        return push("max_pool2", {x.id}, std::move(out), tracks(x),
                    [x, winner = std::move(winner)](Graph& g, Node& n) {
                        double* d = g.accumulate(x);
                        for (std::size_t o = 0; o < winner.size(); ++o) d[winner[o]] += n.grad[o];
                    });
    }

    /// Fully-connected affine map: y = x W + b, x flattened to length n,
    /// W of shape n x m, b of length m.
    Var linear(Var x, Var weights, std::optional<Var> bias) {
        const auto& in = value(x);
        const auto& w = value(weights);
        if (w.rank() != 2 || w.extent(0) != in.size()) {
            throw shape_error("linear weights " + shape_string(w.shape()) + " do not match input of length " +
                              std::to_string(in.size()));
        }
        const std::size_t n = w.extent(0), m = w.extent(1);
        if (bias && value(*bias).size() != m) throw shape_error("linear bias length must equal output width");
        Tensor out({m});
        if (bias) std::copy(value(*bias).data(), value(*bias).data() + m, out.data());
        for (std::size_t i = 0; i < n; ++i) {
            const double v = in[i];
            if (v == 0.0) continue;
            const double* wr = w.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) out[j] += v * wr[j];
        }
        std::vector<std::size_t> inputs{x.id, weights.id};
        if (bias) inputs.push_back(bias->id);
        return push("linear", std::move(inputs), std::move(out), any_tracks(x, weights, bias),
                    [=](Graph& g, Node& node) {
                        const auto& in = g.nodes_[x.id].value;
                        const auto& w = g.nodes_[weights.id].value;
                        const double* go = node.grad.data();
                        if (g.nodes_[x.id].requires_grad) {
                            double* d = g.accumulate(x);
                            for (std::size_t i = 0; i < n; ++i) {
                                const double* wr = w.data() + i * m;
                                double acc = 0.0;
                                for (std::size_t j = 0; j < m; ++j) acc += go[j] * wr[j];
                                d[i] += acc;
                            }
                        }
                        if (g.nodes_[weights.id].requires_grad) {
                            double* d = g.accumulate(weights);
                            for (std::size_t i = 0; i < n; ++i) {
                                const double v = in[i];
                                double* dr = d + i * m;
                                for (std::size_t j = 0; j < m; ++j) dr[j] += v * go[j];
                            }
                        }
                        if (bias && g.nodes_[bias->id].requires_grad) {
                            double* d = g.accumulate(*bias);
                            for (std::size_t j = 0; j < m; ++j) d[j] += go[j];
                        }
                    });
    }

    /// Softmax along the last axis.
    Var softmax(Var x) {
        const auto& in = value(x);
        const std::size_t width = in.shape().back();
        const std::size_t rows = in.size() / width;
        Tensor out(in.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* a = in.data() + r * width;
            double* o = out.data() + r * width;
            const double peak = *std::max_element(a, a + width);
            double total = 0.0;
            for (std::size_t j = 0; j < width; ++j) total += (o[j] = std::exp(a[j] - peak));
            for (std::size_t j = 0; j < width; ++j) o[j] /= total;
        }
        return push("softmax", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            double* d = g.accumulate(x);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = n.value.data() + r * width;
                const double* gp = n.grad.data() + r * width;
                double dot = 0.0;
                for (std::size_t j = 0; j < width; ++j) dot += p[j] * gp[j];
                for (std::size_t j = 0; j < width; ++j) d[r * width + j] += p[j] * (gp[j] - dot);
            }
        });
    }

    /// Resize an H x W x C tensor spatially.
    Var upsample(Var x, std::size_t out_h, std::size_t out_w, UpsampleMode mode = UpsampleMode::nearest) {
        const auto& in = value(x);
        if (in.rank() != 3) throw shape_error("upsample expects HxWxC");
        const std::size_t h = in.extent(0), w = in.extent(1), c = in.extent(2);
        auto ty = detail::resize_taps(h, out_h, mode);
        auto tx = detail::resize_taps(w, out_w, mode);
        Tensor out = resize(in, out_h, out_w, mode);
        return push("upsample", {x.id}, std::move(out), tracks(x),
                    [=, ty = std::move(ty), tx = std::move(tx)](Graph& g, Node& n) {
                        double* d = g.accumulate(x);
                        for (std::size_t y = 0; y < out_h; ++y) {
                            for (std::size_t xx = 0; xx < out_w; ++xx) {
                                const double* gp = n.grad.data() + (y * out_w + xx) * c;
                                for (auto [sy, wy] : ty[y]) {
                                    for (auto [sx, wx] : tx[xx]) {
                                        double* dp = d + (sy * w + sx) * c;
                                        for (std::size_t k = 0; k < c; ++k) dp[k] += wy * wx * gp[k];
                                    }
                                }
                            }
                        }
                    });
    }

    /// Concatenate two H x W x C tensors along the channel axis.
    Var concat_channels(Var a, Var b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.extent(0) != tb.extent(0) || ta.extent(1) != tb.extent(1)) {
            throw shape_error("concat_channels spatial mismatch: " + shape_string(ta.shape()) + " vs " +
                              shape_string(tb.shape()));
        }
        const std::size_t px = ta.extent(0) * ta.extent(1), ca = ta.extent(2), cb = tb.extent(2);
        Tensor out({ta.extent(0), ta.extent(1), ca + cb});
        for (std::size_t p = 0; p < px; ++p) {
            std::copy(ta.data() + p * ca, ta.data() + (p + 1) * ca, out.data() + p * (ca + cb));
            std::copy(tb.data() + p * cb, tb.data() + (p + 1) * cb, out.data() + p * (ca + cb) + ca);
        }
        return push("concat_channels", {a.id, b.id}, std::move(out), any_tracks(a, b), [=](Graph& g, Node& n) {
            double* da = g.nodes_[a.id].requires_grad ? g.accumulate(a) : nullptr;
            double* db = g.nodes_[b.id].requires_grad ? g.accumulate(b) : nullptr;
            for (std::size_t p = 0; p < px; ++p) {
                const double* gp = n.grad.data() + p * (ca + cb);
                if (da) {
                    for (std::size_t k = 0; k < ca; ++k) da[p * ca + k] += gp[k];
                }
                if (db) {
                    for (std::size_t k = 0; k < cb; ++k) db[p * cb + k] += gp[ca + k];
                }
            }
        });
    }

    /// scale * x + shift with constant scalars.
    Var affine(Var x, double scale, double shift) {
        Tensor out(value(x).shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * value(x)[i] + shift;
        return push("affine", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            double* d = g.accumulate(x);
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += scale * n.grad[i];
        });
    }

    Var reshape(Var x, Shape shape) {
        Tensor out = value(x).reshaped(std::move(shape));
        return push("reshape", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            double* d = g.accumulate(x);
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
        });
    }

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor out(value(a).shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(a)[i] + value(b)[i];
        return push("add", {a.id, b.id}, std::move(out), any_tracks(a, b), [=](Graph& g, Node& n) {
            for (Var v : {a, b}) {
                if (!g.nodes_[v.id].requires_grad) continue;
                double* d = g.accumulate(v);
                for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
            }
        });
    }

    /// Elementwise product.
    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor out(value(a).shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(a)[i] * value(b)[i];
        return push("mul", {a.id, b.id}, std::move(out), any_tracks(a, b), [=](Graph& g, Node& n) {
            if (g.nodes_[a.id].requires_grad) {
                double* d = g.accumulate(a);
                const auto& vb = g.nodes_[b.id].value;
                for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * vb[i];
            }
            if (g.nodes_[b.id].requires_grad) {
                double* d = g.accumulate(b);
                const auto& va = g.nodes_[a.id].value;
                for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * va[i];
            }
        });
    }

    /// Sum of all entries as a 1-element tensor.
    Var sum(Var x) {
        Tensor out = Tensor::scalar(value(x).sum());
        return push("sum", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            double* d = g.accumulate(x);
            const std::size_t len = g.nodes_[x.id].value.size();
            for (std::size_t i = 0; i < len; ++i) d[i] += n.grad[0];
        });
    }

    /// Single entry (flat index) as a 1-element tensor.
    Var select(Var x, std::size_t index) {
        if (index >= value(x).size()) throw shape_error("select index out of range");
        Tensor out = Tensor::scalar(value(x)[index]);
        return push("select", {x.id}, std::move(out), tracks(x), [=](Graph& g, Node& n) {
            g.accumulate(x)[index] += n.grad[0];
        });
    }

    /// Forward the candidate at `chosen` unchanged; gradient flows to that
    /// candidate only. Realizes max-pooling over a bag once the winner is known.
    Var route(std::span<const Var> candidates, std::size_t chosen) {
        if (candidates.empty()) throw invalid_argument("route over an empty candidate list");
        if (chosen >= candidates.size()) throw invalid_argument("route index out of range");
        const Var pick = candidates[chosen];
        std::vector<std::size_t> inputs;
        bool rg = false;
        for (Var c : candidates) {
            inputs.push_back(c.id);
            rg = rg || tracks(c);
        }
        fold_pattern(mix(0x2545f4914f6cdd1dull, chosen));
        return push("route", std::move(inputs), value(pick), rg, [=](Graph& g, Node& n) {
            if (!g.nodes_[pick.id].requires_grad) return;
            double* d = g.accumulate(pick);
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
        });
    }

    /// -log p[label] of a probability vector, with p floored at 1e-300.
    Var cross_entropy(Var probs, std::size_t label) {
        const auto& p = value(probs);
        if (label >= p.size()) throw invalid_argument("cross_entropy label out of range");
        const double pl = std::max(p[label], 1e-300);
        Tensor out = Tensor::scalar(-std::log(pl));
        return push("cross_entropy", {probs.id}, std::move(out), tracks(probs), [=](Graph& g, Node& n) {
            g.accumulate(probs)[label] += -n.grad[0] / pl;
        });
    }

    /// Multiclass soft dice loss: mean over channels of
    /// 1 - 2 sum(p g) / (sum p^2 + sum g^2); a channel with an empty
    /// denominator contributes 0.
    Var dice_loss(Var probs, const Tensor& target) {
        const auto& p = value(probs);
        if (p.shape() != target.shape()) {
            throw shape_error("dice_loss shape mismatch: " + shape_string(p.shape()) + " vs " +
                              shape_string(target.shape()));
        }
        const std::size_t classes = p.shape().back();
        const std::size_t pixels = p.size() / classes;
        std::vector<double> num(classes, 0.0), den(classes, 0.0);
        for (std::size_t i = 0; i < pixels; ++i) {
            for (std::size_t c = 0; c < classes; ++c) {
                const double pv = p[i * classes + c], gv = target[i * classes + c];
                num[c] += 2.0 * pv * gv;
                den[c] += pv * pv + gv * gv;
            }
        }
        double loss = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (den[c] > 0.0) loss += 1.0 - num[c] / den[c];
        }
        loss /= static_cast<double>(classes);
        return push("dice_loss", {probs.id}, Tensor::scalar(loss), tracks(probs),
                    [=, target = target](Graph& g, Node& n) {
                        const auto& p = g.nodes_[probs.id].value;
                        double* d = g.accumulate(probs);
                        const double scale = n.grad[0] / static_cast<double>(classes);
                        for (std::size_t i = 0; i < pixels; ++i) {
                            for (std::size_t c = 0; c < classes; ++c) {
                                if (den[c] <= 0.0) continue;
                                const std::size_t k = i * classes + c;
                                const double dn = 2.0 * target[k];
                                const double dd = 2.0 * p[k];
                                d[k] += -scale * (dn * den[c] - num[c] * dd) / (den[c] * den[c]);
                            }
                        }
                    });
    }

private:
    struct Node {
        const char* op = "";
        std::vector<std::size_t> inputs;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool reached = false;
        std::function<void(Graph&, Node&)> backward;
    };

    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw invalid_argument("unknown graph node");
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw invalid_argument("unknown graph node");
        return nodes_[v.id];
    }

    bool tracks(Var v) const { return node(v).requires_grad; }
    bool any_tracks(Var a, Var b, std::optional<Var> c = std::nullopt) const {
        return tracks(a) || tracks(b) || (c && tracks(*c));
    }

    void check_same(Var a, Var b, const char* op) const {
        if (value(a).shape() != value(b).shape()) {
            throw shape_error(std::string(op) + " shape mismatch: " + shape_string(value(a).shape()) + " vs " +
                              shape_string(value(b).shape()));
        }
    }

    double* accumulate(Var v) {
        auto& n = nodes_[v.id];
        n.reached = true;
        return n.grad.data();
    }

    Var push(const char* op, std::vector<std::size_t> inputs, Tensor value, bool requires_grad,
             std::function<void(Graph&, Node&)> backward) {
        if (differentiated_) throw invalid_argument("graph is closed after backward()");
        if (!value.all_finite()) throw numeric_error(std::string("non-finite value produced by ") + op);
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    static std::uint64_t mix(std::uint64_t h, std::uint64_t v) noexcept {
        h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return h;
    }
    void fold_pattern(std::uint64_t h) noexcept { pattern_ = mix(pattern_, h); }

    std::vector<Node> nodes_;
    std::vector<std::pair<int, std::size_t>> taps_;
    std::uint64_t pattern_ = 0;
    bool differentiated_ = false;
};

/// Builds a scalar-valued graph from leaf inputs (one leaf per tensor, all
/// tracking gradients) and returns the output node.
using GraphBuilder = std::function<Var(Graph&, std::span<const Var>)>;

struct GradientCheck {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    /// Entries whose +/- perturbation crossed a ReLU/pooling kink.
    std::size_t skipped = 0;
};

/// Compare analytic gradients of every input entry against central
/// differences (f(x+h) - f(x-h)) / 2h. Relative error per entry is
/// |analytic - numeric| / (|analytic| + 1e-12). Entries whose perturbation
/// changes the piecewise pattern of the graph are skipped.
inline GradientCheck finite_difference_check(const GraphBuilder& build, std::vector<Tensor> inputs, double step) {
    if (!(step > 0.0)) throw invalid_argument("finite difference step must be positive");
    auto evaluate = [&](const std::vector<Tensor>& xs, Graph& g) {
        std::vector<Var> leaves;
        for (const auto& x : xs) leaves.push_back(g.input(x, true));
        return std::pair{build(g, leaves), leaves};
    };

    Graph base;
    auto [out, leaves] = evaluate(inputs, base);
    base.backward(out);
    const std::uint64_t pattern = base.pattern_digest();

    GradientCheck report;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const Tensor analytic = base.grad(leaves[t]);
        for (std::size_t i = 0; i < inputs[t].size(); ++i) {
            const double orig = inputs[t][i];
            inputs[t][i] = orig + step;
            Graph plus;
            double fp = plus.value(evaluate(inputs, plus).first)[0];
            inputs[t][i] = orig - step;
            Graph minus;
            double fm = minus.value(evaluate(inputs, minus).first)[0];
            inputs[t][i] = orig;
            if (plus.pattern_digest() != pattern || minus.pattern_digest() != pattern) {
                ++report.skipped;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12);
            report.max_relative_error = std::max(report.max_relative_error, rel);
            ++report.checked;
        }
    }
    return report;
}

}  // namespace tilewise
