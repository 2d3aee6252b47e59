#pragma once
// Greedy and beam-search story generation with per-word probability
// bookkeeping. A hypothesis completes when it selects the padding token
// (whose emission probability counts toward its score) or reaches the
// word limit; surface sentences strip the terminal padding token.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "hstory/dataio.hpp"
#include "hstory/decoder.hpp"

namespace hstory {

struct Hypothesis {
    std::vector<int> tokens;         // emitted ids, terminal stop token included
    std::vector<double> word_probs;  // parallel to tokens
    double logprob = 0.0;            // == sum of log(word_probs)
    CellState state;
    bool complete = false;
};

struct SentenceResult {
    std::vector<int> tokens;         // surface ids, no padding token
    std::vector<double> word_probs;  // includes the stop emission when stopped early
    double logprob = 0.0;
};

namespace detail {

inline SentenceResult to_surface(const Hypothesis& hyp, int null_id) {
    SentenceResult out;
    out.tokens = hyp.tokens;
    if (!out.tokens.empty() && out.tokens.back() == null_id) out.tokens.pop_back();
    out.word_probs = hyp.word_probs;
    out.logprob = hyp.logprob;
    return out;
}

// Winner ordering: higher logprob first, ties broken toward the
// lexicographically smaller token sequence.
inline bool better_than(const Hypothesis& a, const Hypothesis& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;
}

}  // namespace detail

inline SentenceResult beam_decode_sentence(const ModelParameters& p, const AttentionContext& actx,
                                           const NodePtr& h_sentence, const NodePtr& image_mean,
                                           std::size_t beam, std::size_t max_words, int null_id) {
    if (beam < 1) throw std::invalid_argument("beam_decode_sentence: beam must be >= 1");
    if (max_words < 1) throw std::invalid_argument("beam_decode_sentence: max_words must be >= 1");
    const std::size_t vocab = p.dims.vocab;

    std::vector<Hypothesis> alive;
    alive.push_back(Hypothesis{{}, {}, 0.0, word_init(p, image_mean), false});
    std::vector<Hypothesis> completed;

    struct Candidate {
        double score;
        std::size_t parent;
        int token;
        double prob;
        double logp;
    };

    for (std::size_t k = 1; k <= max_words && !alive.empty(); ++k) {
        std::vector<CellState> next_states(alive.size());
        std::vector<Candidate> pool;
        pool.reserve(alive.size() * vocab);
        for (std::size_t hi = 0; hi < alive.size(); ++hi) {
            const Hypothesis& hyp = alive[hi];
            NodePtr text = (k == 1) ? h_sentence : row(p.word_table, static_cast<std::size_t>(hyp.tokens.back()));
            WordStep ws = word_step(p, actx, text, hyp.state);
            next_states[hi] = ws.state;
            NodePtr logp = log_softmax(ws.logits);
            for (std::size_t v = 0; v < vocab; ++v) {
                const double lp = logp->value.data[v];
                pool.push_back(Candidate{hyp.logprob + lp, hi, static_cast<int>(v), std::exp(lp), lp});
            }
        }
        std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });
        const std::size_t keep = std::min(beam, pool.size());
        std::vector<Hypothesis> next_alive;
        for (std::size_t ci = 0; ci < keep; ++ci) {
            const Candidate& cand = pool[ci];
            Hypothesis h = alive[cand.parent];
            h.tokens.push_back(cand.token);
            h.word_probs.push_back(cand.prob);
            h.logprob = cand.score;
            h.state = next_states[cand.parent];
            if (cand.token == null_id) {
                h.complete = true;
                completed.push_back(std::move(h));
            } else {
                next_alive.push_back(std::move(h));
            }
        }
        alive = std::move(next_alive);
    }
    // hypotheses that reached the word limit are complete as they stand
    for (Hypothesis& h : alive) {
        h.complete = true;
        completed.push_back(std::move(h));
    }

    const Hypothesis* best = &completed.front();
    for (const Hypothesis& h : completed)
        if (detail::better_than(h, *best)) best = &h;
    return detail::to_surface(*best, null_id);
}

// Stepwise argmax reference path (ties resolved toward the smaller id).
inline SentenceResult greedy_decode_sentence(const ModelParameters& p, const AttentionContext& actx,
                                             const NodePtr& h_sentence, const NodePtr& image_mean,
                                             std::size_t max_words, int null_id) {
    Hypothesis hyp{{}, {}, 0.0, word_init(p, image_mean), false};
    for (std::size_t k = 1; k <= max_words; ++k) {
        NodePtr text = (k == 1) ? h_sentence : row(p.word_table, static_cast<std::size_t>(hyp.tokens.back()));
        WordStep ws = word_step(p, actx, text, hyp.state);
        NodePtr logp = log_softmax(ws.logits);
        const auto& lrow = logp->value.data;
        const std::size_t argmax = static_cast<std::size_t>(std::max_element(lrow.begin(), lrow.end()) - lrow.begin());
        hyp.tokens.push_back(static_cast<int>(argmax));
        hyp.word_probs.push_back(std::exp(lrow[argmax]));
        hyp.logprob += lrow[argmax];
        hyp.state = ws.state;
        if (static_cast<int>(argmax) == null_id) break;
    }
    return detail::to_surface(hyp, null_id);
}

// ---------------------------------------------------------------------------
// story-level generation

struct StoryGeneration {
    std::vector<std::vector<int>> sentences;      // surface token ids
    std::vector<std::vector<double>> word_probs;  // per sentence, stop emission included
    std::vector<double> sentence_logprobs;
    double logprob = 0.0;  // sum over sentences
};

namespace detail {

template <typename DecodeFn>
StoryGeneration generate_story_with(const std::vector<RealArray>& grids, const ModelParameters& p, int null_id,
                                    DecodeFn&& decode) {
    VisualBundle bundle = project_features(grids, p);
    CellState st = sentence_init(p, bundle.full_story);
    NodePtr prev_vec = p.s0;
    StoryGeneration out;
    for (std::size_t t = 0; t < grids.size(); ++t) {
        st = sentence_step(p, prev_vec, bundle.image_mean[t], st);
        AttentionContext actx = make_attention_context(bundle.per_image[t], p.attn);
        SentenceResult sent = decode(actx, st.h, bundle.image_mean[t]);
        // next previous-sentence vector: mean of the generated words'
        // embeddings; an empty sentence contributes a zero vector
        prev_vec = sent.tokens.empty()
                       ? constant(RealArray({1, p.dims.hidden}))
                       : constant(sentence_vector_of_ids(sent.tokens, p.word_table->value, null_id));
        out.logprob += sent.logprob;
        out.sentence_logprobs.push_back(sent.logprob);
        out.sentences.push_back(std::move(sent.tokens));
        out.word_probs.push_back(std::move(sent.word_probs));
    }
    return out;
}

}  // namespace detail

inline StoryGeneration generate_story(const std::vector<RealArray>& grids, const ModelParameters& p,
                                      std::size_t beam, std::size_t max_words, int null_id) {
    if (beam < 1) throw std::invalid_argument("generate_story: beam must be >= 1");
    return detail::generate_story_with(grids, p, null_id,
                                       [&](const AttentionContext& actx, const NodePtr& h, const NodePtr& mean) {
                                           return beam_decode_sentence(p, actx, h, mean, beam, max_words, null_id);
                                       });
}

inline StoryGeneration generate_story_greedy(const std::vector<RealArray>& grids, const ModelParameters& p,
                                             std::size_t max_words, int null_id) {
    return detail::generate_story_with(grids, p, null_id,
                                       [&](const AttentionContext& actx, const NodePtr& h, const NodePtr& mean) {
                                           return greedy_decode_sentence(p, actx, h, mean, max_words, null_id);
                                       });
}

}  // namespace hstory
