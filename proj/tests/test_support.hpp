#pragma once

#include <random>
#include <span>
#include <vector>

#include "tilewise/autograd.hpp"

namespace testing_support {

inline tilewise::Tensor random_tensor(tilewise::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> d(-scale, scale);
    tilewise::Tensor t(std::move(shape));
    for (auto& v : t.values()) v = d(rng);
    return t;
}

/// conv -> relu -> maxpool -> conv -> relu -> fc -> relu -> fc -> softmax,
/// differentiated through the second class probability. Inputs: image
/// 6x6x2, k1 3x3x2x3, b1 3, k2 3x3x3x2, b2 2, w1 18x4, c1 4, w2 4x2, c2 2.
inline tilewise::GraphBuilder small_cnn_builder() {
    return [](tilewise::Graph& g, std::span<const tilewise::Var> x) {
        auto h = g.relu(g.conv2d(x[0], x[1], x[2], 1, 1));
        h = g.max_pool2(h);
        h = g.relu(g.conv2d(h, x[3], x[4], 1, 1));
        h = g.reshape(h, {g.value(h).size()});
        h = g.relu(g.linear(h, x[5], x[6]));
        auto p = g.softmax(g.linear(h, x[7], x[8]));
        return g.select(p, 1);
    };
}

inline std::vector<tilewise::Tensor> small_cnn_inputs(std::mt19937_64& rng) {
    return {random_tensor({6, 6, 2}, rng),    random_tensor({3, 3, 2, 3}, rng), random_tensor({3}, rng, 0.1),
            random_tensor({3, 3, 3, 2}, rng), random_tensor({2}, rng, 0.1),     random_tensor({18, 4}, rng),
            random_tensor({4}, rng, 0.1),     random_tensor({4, 2}, rng),       random_tensor({2}, rng, 0.1)};
}

}  // namespace testing_support
