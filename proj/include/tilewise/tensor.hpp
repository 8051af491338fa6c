#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tilewise/errors.hpp"

namespace tilewise {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles. Images use H x W x C layout, conv
/// kernels k x k x C_in x C_out.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_volume(shape_)) {
            throw shape_error("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor vector(std::initializer_list<double> values) {
        return Tensor({values.size()}, std::vector<double>(values));
    }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
    [[nodiscard]] std::size_t extent(std::size_t axis) const {
        if (axis >= shape_.size()) throw shape_error("axis out of range for shape " + shape_string(shape_));
        return shape_[axis];
    }

    [[nodiscard]] std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] double* data() noexcept { return data_.data(); }
    [[nodiscard]] const double* data() const noexcept { return data_.data(); }
    [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    [[nodiscard]] Tensor reshaped(Shape shape) const {
        if (shape_volume(shape) != data_.size()) {
            throw shape_error("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    [[nodiscard]] double sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    [[nodiscard]] double max() const {
        if (data_.empty()) throw shape_error("max of empty tensor");
        return *std::max_element(data_.begin(), data_.end());
    }

    /// Bitwise equality of shape and values.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw shape_error("tensor extents must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Extract channel `c` of an H x W x C tensor as an H x W tensor.
inline Tensor channel_slice(const Tensor& t, std::size_t c) {
    if (t.rank() != 3 || c >= t.extent(2)) throw shape_error("channel_slice expects HxWxC with valid channel");
    const std::size_t h = t.extent(0), w = t.extent(1), cs = t.extent(2);
    Tensor out({h, w});
    for (std::size_t i = 0; i < h * w; ++i) out[i] = t[i * cs + c];
    return out;
}

/// Copy a rectangular window out of an H x W (x C) tensor.
inline Tensor crop(const Tensor& t, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
    if (t.rank() < 2 || t.rank() > 3) throw shape_error("crop expects rank 2 or 3");
    if (y0 + h > t.extent(0) || x0 + w > t.extent(1)) {
        throw shape_error("crop window exceeds tensor " + shape_string(t.shape()));
    }
    const std::size_t c = t.rank() == 3 ? t.extent(2) : 1;
    Shape shape = t.rank() == 3 ? Shape{h, w, c} : Shape{h, w};
    Tensor out(shape);
    for (std::size_t y = 0; y < h; ++y) {
        const double* src = t.data() + ((y0 + y) * t.extent(1) + x0) * c;
        std::copy(src, src + w * c, out.data() + y * w * c);
    }
    return out;
}

enum class UpsampleMode { nearest, bilinear };

namespace detail {

struct Tap {
    std::size_t src;
    double weight;
};

/// Source taps along one axis for resizing `in` samples to `out` samples.
inline std::vector<std::vector<Tap>> resize_taps(std::size_t in, std::size_t out, UpsampleMode mode) {
    std::vector<std::vector<Tap>> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        if (mode == UpsampleMode::nearest) {
            auto src = static_cast<std::size_t>(std::floor(static_cast<double>(o) * scale));
            taps[o].push_back({std::min(src, in - 1), 1.0});
        } else {
            double pos = (static_cast<double>(o) + 0.5) * scale - 0.5;
            pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
            auto lo = static_cast<std::size_t>(std::floor(pos));
            std::size_t hi = std::min(lo + 1, in - 1);
            double frac = pos - static_cast<double>(lo);
            if (hi == lo || frac == 0.0) {
                taps[o].push_back({lo, 1.0});
            } else {
                taps[o].push_back({lo, 1.0 - frac});
                taps[o].push_back({hi, frac});
            }
        }
    }
    return taps;
}

}  // namespace detail

/// Resize an H x W or H x W x C tensor to out_h x out_w. Nearest mode
/// replicates each source value into a block when sizes divide evenly.
inline Tensor resize(const Tensor& t, std::size_t out_h, std::size_t out_w, UpsampleMode mode) {
    if (t.empty()) throw shape_error("resize of empty tensor");
    if (t.rank() < 2 || t.rank() > 3) throw shape_error("resize expects rank 2 or 3");
    const std::size_t h = t.extent(0), w = t.extent(1);
    const std::size_t c = t.rank() == 3 ? t.extent(2) : 1;
    auto ty = detail::resize_taps(h, out_h, mode);
    auto tx = detail::resize_taps(w, out_w, mode);
    Tensor out(t.rank() == 3 ? Shape{out_h, out_w, c} : Shape{out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
            double* dst = out.data() + (y * out_w + x) * c;
            for (auto [sy, wy] : ty[y]) {
                for (auto [sx, wx] : tx[x]) {
                    const double* src = t.data() + (sy * w + sx) * c;
                    for (std::size_t k = 0; k < c; ++k) dst[k] += wy * wx * src[k];
                }
            }
        }
    }
    return out;
}

}  // namespace tilewise
