#pragma once
// Central-difference verification of the end-to-end story-loss gradient on
// a deterministic miniature model. Samples entries from every parameter
// tensor and compares reverse-mode gradients against (f(x+h)-f(x-h))/2h.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "hstory/decoder.hpp"
#include "hstory/training.hpp"

namespace hstory {

inline double rel_err(double a, double b) {
    const double floor = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / floor;
}

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::size_t samples = 0;
};

inline GradcheckReport gradcheck_story_loss(std::uint64_t seed, std::size_t per_tensor = 2, double h = 1e-5) {
    ModelDims dims;
    dims.raw_dim = 6;
    dims.hidden = 8;
    dims.attn = 4;
    dims.vocab = 12;
    dims.sentence_vocab = 3;
    const std::size_t images = 2, max_words = 4, locations = 4;

    SplitMix64 rng(seed);
    RealArray word_vectors({dims.vocab, dims.hidden});
    for (double& v : word_vectors.data) v = rng.uniform(-0.5, 0.5);
    RealArray sentence_vectors({dims.sentence_vocab, dims.hidden});
    for (double& v : sentence_vectors.data) v = rng.uniform(-0.5, 0.5);
    ModelParameters params = ModelParameters::init(dims, rng, word_vectors, sentence_vectors);

    PreparedStory story;
    story.story_id = "gradcheck";
    for (std::size_t t = 0; t < images; ++t) {
        RealArray grid({locations, dims.raw_dim});
        for (double& v : grid.data) v = rng.uniform(-1.0, 1.0);
        story.grids.push_back(std::move(grid));
        std::vector<int> words(max_words);
        for (int& w : words) w = static_cast<int>(rng.below(dims.vocab));
        story.words.push_back(std::move(words));
        const std::size_t real_len = 2 + t;  // 2 and 3 real tokens
        std::vector<std::uint8_t> mask(max_words, 0);
        for (std::size_t k = 0; k < real_len; ++k) mask[k] = 1;
        story.masks.push_back(std::move(mask));
        story.sentence_ids.push_back(static_cast<int>(t));
    }

    const auto grads = backward(story_loss(story, params).loss);
    GradcheckReport rep;
    std::size_t tensor_index = 0;
    for (const auto& [name, node] : params.named()) {
        SplitMix64 pick = rng.fork(900 + tensor_index++);
        const auto git = grads.find(name);
        for (std::size_t s = 0; s < per_tensor; ++s) {
            const std::size_t idx = static_cast<std::size_t>(pick.below(node->value.numel()));
            const double orig = node->value.data[idx];
            node->value.data[idx] = orig + h;
            const double up = story_loss(story, params).loss->value.data[0];
            node->value.data[idx] = orig - h;
            const double down = story_loss(story, params).loss->value.data[0];
            node->value.data[idx] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double ad = git == grads.end() ? 0.0 : git->second.data[idx];
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(ad, fd));
            ++rep.samples;
        }
    }
    return rep;
}

}  // namespace hstory
