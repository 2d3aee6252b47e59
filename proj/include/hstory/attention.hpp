#pragma once
// Soft spatial attention over one image's feature locations. Scores are
// additive with a tanh hidden layer; one score per location, softmax over
// locations, context z is the attention-weighted sum of location vectors.

#include <algorithm>
#include <numeric>

#include "hstory/numerics.hpp"

namespace hstory {

namespace detail {

// Weighted sum z = sum_j alpha_j * x_j accumulated in a canonical order
// (by weight, then by row content), so z is bit-identical under any
// permutation of the locations.
inline NodePtr attention_mix(const NodePtr& alpha, const NodePtr& locations) {
    const std::size_t m = locations->value.rows(), d = locations->value.cols();
    if (alpha->value.numel() != m)
        throw std::invalid_argument("attention_mix: weight count " + shape_str(alpha->value.shape) +
                                    " does not match locations " + shape_str(locations->value.shape));
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto& w = alpha->value.data;
    const auto& x = locations->value.data;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (w[a] != w[b]) return w[a] < w[b];
        for (std::size_t j = 0; j < d; ++j)
            if (x[a * d + j] != x[b * d + j]) return x[a * d + j] < x[b * d + j];
        return false;
    });
    RealArray out({1, d});
    for (std::size_t row : order)
        for (std::size_t j = 0; j < d; ++j) out.data[j] += w[row] * x[row * d + j];
    return make_op(std::move(out), {alpha, locations}, [alpha, locations, m, d](GradNode& self) {
        for (std::size_t row = 0; row < m; ++row)
            for (std::size_t j = 0; j < d; ++j) {
                alpha->grad.data[row] += self.grad.data[j] * locations->value.data[row * d + j];
                locations->grad.data[row * d + j] += alpha->value.data[row] * self.grad.data[j];
            }
    });
}

}  // namespace detail

struct AttentionParams {
    NodePtr w_h;      // [D x A]
    NodePtr w_x;      // [D x A]
    NodePtr w_score;  // [A x 1]
    NodePtr b;        // [1 x A]
};

// Location-dependent part of the score, computed once per sentence and
// shared across word steps.
struct AttentionContext {
    NodePtr locations;  // [M x D]
    NodePtr projected;  // [M x A] = locations * w_x + b
};

inline AttentionContext make_attention_context(const NodePtr& locations, const AttentionParams& p) {
    return AttentionContext{locations, add_rowvec(matmul(locations, p.w_x), p.b)};
}

struct Attend {
    NodePtr alpha;  // [M x 1], positive, sums to 1
    NodePtr z;      // [1 x D], convex combination of the location vectors
};

inline Attend attend(const NodePtr& h_prev, const AttentionContext& ctx, const AttentionParams& p) {
    NodePtr scores = matmul(tanh(add_rowvec(ctx.projected, matmul(h_prev, p.w_h))), p.w_score);
    NodePtr alpha = softmax(scores);
    return Attend{alpha, detail::attention_mix(alpha, ctx.locations)};
}

inline Attend attend(const NodePtr& h_prev, const NodePtr& locations, const AttentionParams& p) {
    return attend(h_prev, make_attention_context(locations, p), p);
}

}  // namespace hstory
