#pragma once
// Masked cross-entropy over teacher-forced stories, bias-corrected Adam
// with global-norm gradient clipping, and the deterministic epoch loop
// (rolling CKPT1 checkpoint + loss-curve CSV).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hstory/dataio.hpp"
#include "hstory/decoder.hpp"
#include "hstory/logging.hpp"
#include "hstory/threading.hpp"

namespace hstory {

struct TrainConfig {
    std::size_t batch_size = 16;
    double dropout = 0.4;
    double learning_rate = 1e-3;
    std::size_t epochs = 0;
    std::uint64_t seed = 7;
    double grad_clip_norm = 5.0;
    std::size_t max_words = 15;   // L
    std::size_t images = 5;       // N
    std::size_t hidden = 64;      // D
    std::size_t locations = 9;    // M
    std::size_t raw_dim = 32;     // D_raw
    std::size_t vocab_size = 60;  // |V|, reporting default; tables are authoritative
    bool freeze_embeddings = false;
    std::size_t jobs = 1;
};

// A story resolved against the dictionaries: token ids, masks, feature
// grids, and the sentence-dictionary row of each gold sentence.
struct PreparedStory {
    std::string story_id;
    std::vector<RealArray> grids;               // N of [M x D_raw]
    std::vector<std::vector<int>> words;        // N x L token ids (padded)
    std::vector<std::vector<std::uint8_t>> masks;  // N x L
    std::vector<int> sentence_ids;              // N rows into the sentence table
};

inline std::string sentence_key(const std::vector<std::string>& padded, const std::vector<std::uint8_t>& mask) {
    std::string key;
    for (std::size_t k = 0; k < padded.size(); ++k) {
        if (!mask[k]) continue;
        if (!key.empty()) key += ' ';
        key += padded[k];
    }
    return key;
}

inline std::vector<PreparedStory> prepare_stories(const std::vector<StoryRecord>& records,
                                                  const std::string& features_dir,
                                                  const EmbeddingTable& word_table,
                                                  const EmbeddingTable* sentence_table) {
    namespace fs = std::filesystem;
    std::vector<PreparedStory> out;
    out.reserve(records.size());
    for (const StoryRecord& rec : records) {
        PreparedStory ps;
        ps.story_id = rec.story_id;
        std::vector<FeatureGrid> grids = load_feature_file((fs::path(features_dir) / rec.feature_file).string());
        if (grids.size() != rec.sentences.size())
            throw std::runtime_error("story " + rec.story_id + ": " + std::to_string(grids.size()) +
                                     " feature grids for " + std::to_string(rec.sentences.size()) + " sentences");
        for (FeatureGrid& g : grids) ps.grids.push_back(std::move(g.values));
        for (std::size_t t = 0; t < rec.sentences.size(); ++t) {
            std::vector<int> ids;
            ids.reserve(rec.sentences[t].size());
            for (const std::string& tok : rec.sentences[t]) ids.push_back(static_cast<int>(word_table.id_of(tok)));
            ps.words.push_back(std::move(ids));
            ps.masks.push_back(rec.masks[t]);
            if (sentence_table != nullptr) {
                const std::string key = sentence_key(rec.sentences[t], rec.masks[t]);
                if (!sentence_table->contains(key))
                    throw std::runtime_error("story " + rec.story_id + ": sentence not in sentence dictionary: '" +
                                             key + "'");
                ps.sentence_ids.push_back(static_cast<int>(sentence_table->id_of(key)));
            }
        }
        out.push_back(std::move(ps));
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss

struct StoryLoss {
    NodePtr loss;              // scalar, -sum over masked positions of log p(target)
    std::size_t masked = 0;    // real-token positions
    std::size_t correct = 0;   // argmax hits among them
    double paper_eq6_score = 0.0;  // sum over sentences of the product of target probabilities
};

// Teacher-forced negative log-likelihood of one story. Dropout (inverted,
// applied to the word-layer hidden state before the output head) is active
// only when dropout_p > 0 and an rng is supplied.
inline StoryLoss story_loss(const PreparedStory& story, const ModelParameters& p, double dropout_p = 0.0,
                            SplitMix64* rng = nullptr) {
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::invalid_argument("story_loss: dropout must be in [0, 1)");
    VisualBundle bundle = project_features(story.grids, p);
    std::vector<NodePtr> gold_vectors;
    gold_vectors.reserve(story.sentence_ids.size());
    for (int id : story.sentence_ids) gold_vectors.push_back(row(p.sentence_table, static_cast<std::size_t>(id)));
    SentencePass sp = sentence_pass(bundle, gold_vectors, p);

    const bool use_dropout = dropout_p > 0.0 && rng != nullptr;
    const double keep = 1.0 - dropout_p;
    StoryLoss out;
    NodePtr total;
    for (std::size_t t = 0; t < story.words.size(); ++t) {
        std::vector<NodePtr> masks;
        if (use_dropout) {
            masks.reserve(story.words[t].size());
            for (std::size_t k = 0; k < story.words[t].size(); ++k) {
                RealArray m({1, p.dims.hidden});
                for (double& v : m.data) v = (rng->uniform() < keep) ? 1.0 / keep : 0.0;
                masks.push_back(constant(std::move(m)));
            }
        }
        WordPass wp = word_pass(p, sp.states[t].h, bundle.per_image[t], bundle.image_mean[t], story.words[t], masks);
        double sentence_prob = 1.0;
        for (std::size_t k = 0; k < story.words[t].size(); ++k) {
            if (!story.masks[t][k]) continue;
            const int target = story.words[t][k];
            NodePtr logp = log_softmax(wp.logits[k]);
            NodePtr term = pick(logp, static_cast<std::size_t>(target));
            total = total ? add(total, term) : term;
            ++out.masked;
            const std::vector<double>& lrow = wp.logits[k]->value.data;
            const std::size_t argmax =
                static_cast<std::size_t>(std::max_element(lrow.begin(), lrow.end()) - lrow.begin());
            if (argmax == static_cast<std::size_t>(target)) ++out.correct;
            sentence_prob *= std::exp(logp->value.data[static_cast<std::size_t>(target)]);
        }
        out.paper_eq6_score += sentence_prob;
    }
    out.loss = total ? scale(total, -1.0) : scalar(0.0);
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::map<std::string, RealArray> m, v;
};

// Gradients are globally norm-clipped, then the standard bias-corrected
// update is applied in place. Parameters without a gradient entry
// (unreached or frozen) are left untouched.
inline void adam_step(const std::vector<std::pair<std::string, NodePtr>>& params,
                      const std::map<std::string, RealArray>& grads, AdamState& state, double lr,
                      double clip_norm = 0.0) {
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g.data) {
            if (!std::isfinite(v)) throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
            norm_sq += v * v;
        }
    }
    const double norm = std::sqrt(norm_sq);
    const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& [name, node] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const RealArray& g = git->second;
        RealArray& m = state.m.try_emplace(name, RealArray(g.shape)).first->second;
        RealArray& v = state.v.try_emplace(name, RealArray(g.shape)).first->second;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double gi = g.data[i] * clip;
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
            const double m_hat = m.data[i] / bc1;
            const double v_hat = v.data[i] / bc2;
            node->value.data[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// epoch loop

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;       // NLL per masked token
    double token_accuracy = 0.0;  // argmax hits per masked token
};

struct TrainResult {
    std::vector<EpochStats> log;
    std::string checkpoint_path;
    std::string loss_csv_path;
};

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string loss_csv_text(const std::vector<EpochStats>& log) {
    std::string out = "epoch,mean_loss,token_accuracy\n";
    for (const EpochStats& e : log)
        out += std::to_string(e.epoch) + "," + format_g17(e.mean_loss) + "," + format_g17(e.token_accuracy) + "\n";
    return out;
}

// Deterministic for a given config: fixed shuffle stream per epoch and a
// dropout stream pre-assigned per (epoch, story), so results do not depend
// on batch assembly or the worker count. Each epoch overwrites the rolling
// checkpoint; on divergence the last completed epoch's file is retained.
inline TrainResult train(const std::vector<PreparedStory>& stories, ModelParameters& params,
                         const TrainConfig& cfg, const std::string& out_dir) {
    if (stories.empty()) throw std::invalid_argument("train: empty corpus");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    TrainResult result;
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint.ckpt").string();
    result.loss_csv_path = (fs::path(out_dir) / "loss.csv").string();
    params.save(result.checkpoint_path);

    SplitMix64 root(cfg.seed);
    AdamState adam;
    const auto named = params.named();
    const std::size_t n_stories = stories.size();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n_stories);
        for (std::size_t i = 0; i < n_stories; ++i) order[i] = i;
        SplitMix64 shuffle_rng = root.fork((1ULL << 32) + epoch);
        shuffle_rng.shuffle(order);

        double epoch_nll = 0.0;
        std::size_t epoch_masked = 0, epoch_correct = 0;
        for (std::size_t start = 0; start < n_stories; start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, n_stories - start);
            std::vector<StoryLoss> losses(count);
            parallel_for(count, cfg.jobs, [&](std::size_t i) {
                const std::size_t idx = order[start + i];
                SplitMix64 dropout_rng = root.fork((2ULL << 32) + epoch * n_stories + idx);
                losses[i] = story_loss(stories[idx], params, cfg.dropout, &dropout_rng);
            });
            NodePtr batch_total;
            for (const StoryLoss& sl : losses) {
                batch_total = batch_total ? add(batch_total, sl.loss) : sl.loss;
                epoch_nll += sl.loss->value.data[0];
                epoch_masked += sl.masked;
                epoch_correct += sl.correct;
            }
            NodePtr batch_loss = scale(batch_total, 1.0 / static_cast<double>(count));
            if (!std::isfinite(batch_loss->value.data[0]))
                throw std::runtime_error("train: loss diverged (non-finite) at epoch " + std::to_string(epoch) +
                                         "; last good checkpoint retained at " + result.checkpoint_path);
            auto grads = backward(batch_loss);
            adam_step(named, grads, adam, cfg.learning_rate, cfg.grad_clip_norm);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.mean_loss = epoch_masked ? epoch_nll / static_cast<double>(epoch_masked) : 0.0;
        stats.token_accuracy =
            epoch_masked ? static_cast<double>(epoch_correct) / static_cast<double>(epoch_masked) : 0.0;
        result.log.push_back(stats);
        params.save(result.checkpoint_path);
        log_debug("epoch " + std::to_string(epoch) + " mean_loss " + format_g17(stats.mean_loss) +
                  " token_accuracy " + format_g17(stats.token_accuracy));
    }

    serial::write_file(result.loss_csv_path, loss_csv_text(result.log));
    return result;
}

}  // namespace hstory
