#pragma once
// Shared test utilities: random fixtures, finite-difference checks, and a
// plain-loop reference implementation of the decoder forward pass that is
// independent of the tape (used as the oracle for the model suites).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hstory/decoder.hpp"
#include "hstory/numerics.hpp"
#include "hstory/rng.hpp"
#include "hstory/training.hpp"

namespace th {

using hstory::ModelDims;
using hstory::ModelParameters;
using hstory::NodePtr;
using hstory::RealArray;
using hstory::Shape;
using hstory::SplitMix64;

inline RealArray random_array(const Shape& shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
    RealArray a(shape);
    for (double& v : a.data) v = rng.uniform(lo, hi);
    return a;
}

inline double scalar_of(const NodePtr& n) { return n->value.data[0]; }

inline double rel_err(double a, double b) {
    const double floor = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / floor;
}

// Max relative error of reverse-mode grads of `build()` (a scalar graph
// over the given leaves) against central finite differences.
template <typename BuildFn>
double max_grad_fd_err(const std::vector<NodePtr>& leaves, BuildFn&& build, double h = 1e-5) {
    NodePtr root = build();
    hstory::backward(root);
    std::vector<RealArray> grads;
    grads.reserve(leaves.size());
    for (const NodePtr& leaf : leaves) grads.push_back(leaf->grad);
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t i = 0; i < leaves[li]->value.numel(); ++i) {
            const double orig = leaves[li]->value.data[i];
            leaves[li]->value.data[i] = orig + h;
            const double up = scalar_of(build());
            leaves[li]->value.data[i] = orig - h;
            const double down = scalar_of(build());
            leaves[li]->value.data[i] = orig;
            worst = std::max(worst, rel_err(grads[li].data[i], (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

inline ModelParameters make_params(const ModelDims& dims, std::uint64_t seed) {
    SplitMix64 rng(seed);
    RealArray words = random_array({dims.vocab, dims.hidden}, rng, -0.5, 0.5);
    RealArray sents = random_array({dims.sentence_vocab, dims.hidden}, rng, -0.5, 0.5);
    return ModelParameters::init(dims, rng, words, sents);
}

inline hstory::PreparedStory make_story(const ModelDims& dims, std::size_t images, std::size_t locations,
                                        std::size_t max_words, std::uint64_t seed) {
    SplitMix64 rng(seed);
    hstory::PreparedStory st;
    st.story_id = "s" + std::to_string(seed);
    for (std::size_t t = 0; t < images; ++t) {
        st.grids.push_back(random_array({locations, dims.raw_dim}, rng));
        std::vector<int> words(max_words);
        for (int& w : words) w = static_cast<int>(rng.below(dims.vocab));
        st.words.push_back(std::move(words));
        std::vector<std::uint8_t> mask(max_words, 0);
        const std::size_t len = 1 + static_cast<std::size_t>(rng.below(max_words));
        for (std::size_t k = 0; k < len; ++k) mask[k] = 1;
        st.masks.push_back(std::move(mask));
        st.sentence_ids.push_back(static_cast<int>(rng.below(dims.sentence_vocab)));
    }
    return st;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    std::filesystem::path dir = std::filesystem::path("test_tmp") / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Teacher-forced logits of every sentence/step through the tape path.
inline std::vector<std::vector<std::vector<double>>> tape_story_logits(const hstory::PreparedStory& story,
                                                                       const ModelParameters& p) {
    hstory::VisualBundle bundle = hstory::project_features(story.grids, p);
    std::vector<NodePtr> gold;
    for (int id : story.sentence_ids) gold.push_back(hstory::row(p.sentence_table, static_cast<std::size_t>(id)));
    hstory::SentencePass sp = hstory::sentence_pass(bundle, gold, p);
    std::vector<std::vector<std::vector<double>>> out;
    for (std::size_t t = 0; t < story.words.size(); ++t) {
        hstory::WordPass wp =
            hstory::word_pass(p, sp.states[t].h, bundle.per_image[t], bundle.image_mean[t], story.words[t]);
        std::vector<std::vector<double>> rows;
        for (const NodePtr& l : wp.logits) rows.push_back(l->value.data);
        out.push_back(std::move(rows));
    }
    return out;
}

// Causality by forward differencing: perturbing gold sentence vector j must
// leave sentences <= j bit-identical; perturbing gold word (t, k) must leave
// positions <= k of sentence t and every other sentence bit-identical.
inline bool causality_ok(std::uint64_t seed, std::string* why = nullptr) {
    ModelDims dims;
    dims.raw_dim = 4;
    dims.hidden = 6;
    dims.attn = 3;
    dims.vocab = 8;
    const std::size_t images = 3, locations = 3, max_words = 4;
    dims.sentence_vocab = images;  // one private row per sentence
    ModelParameters params = make_params(dims, seed);
    hstory::PreparedStory story = make_story(dims, images, locations, max_words, seed ^ 0x9E3779B9ULL);
    for (std::size_t t = 0; t < images; ++t) story.sentence_ids[t] = static_cast<int>(t);
    const auto base = tape_story_logits(story, params);

    auto complain = [&](const std::string& msg) {
        if (why) *why = msg;
        return false;
    };

    for (std::size_t j = 0; j < images; ++j) {
        double& slot = params.sentence_table->value.data[j * dims.hidden];
        const double orig = slot;
        slot = orig + 0.37;
        const auto perturbed = tape_story_logits(story, params);
        slot = orig;
        for (std::size_t t = 0; t <= j; ++t)
            if (perturbed[t] != base[t])
                return complain("sentence vector " + std::to_string(j) + " leaked into sentence " + std::to_string(t));
        if (j + 1 < images && perturbed[j + 1] == base[j + 1])
            return complain("sentence vector " + std::to_string(j) + " had no downstream effect");
    }

    SplitMix64 rng(seed ^ 0x51ED2701ULL);
    for (std::size_t t = 0; t < images; ++t) {
        for (std::size_t k = 0; k + 1 < max_words; ++k) {
            const int orig = story.words[t][k];
            story.words[t][k] = (orig + 1 + static_cast<int>(rng.below(dims.vocab - 1))) % static_cast<int>(dims.vocab);
            const auto perturbed = tape_story_logits(story, params);
            story.words[t][k] = orig;
            for (std::size_t tt = 0; tt < images; ++tt) {
                if (tt == t) continue;
                if (perturbed[tt] != base[tt])
                    return complain("word (" + std::to_string(t) + "," + std::to_string(k) + ") leaked into sentence " +
                                    std::to_string(tt));
            }
            for (std::size_t kk = 0; kk <= k; ++kk)
                if (perturbed[t][kk] != base[t][kk])
                    return complain("word (" + std::to_string(t) + "," + std::to_string(k) +
                                    ") leaked into earlier position " + std::to_string(kk));
            if (perturbed[t][k + 1] == base[t][k + 1])
                return complain("word (" + std::to_string(t) + "," + std::to_string(k) + ") had no downstream effect");
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// reference (plain-loop) model forward, independent of the tape

namespace ref {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat mat_of(const RealArray& a) {
    Mat m(a.rows(), Vec(a.cols()));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m[i][j] = a.at(i, j);
    return m;
}

inline Vec row_of(const RealArray& a, std::size_t r) {
    Vec v(a.cols());
    for (std::size_t j = 0; j < a.cols(); ++j) v[j] = a.at(r, j);
    return v;
}

inline Vec vec_mat(const Vec& x, const Mat& w) {
    Vec out(w[0].size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[i] * w[i][j];
    return out;
}

inline Vec add(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

inline Vec softmax(const Vec& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    Vec out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

inline Vec log_softmax(const Vec& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (double x : v) total += std::exp(x - mx);
    const double lse = mx + std::log(total);
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
    return out;
}

struct Cell {
    Vec h, c;
};

struct LstmMats {
    Mat w_x[4], w_h[4], w_z[4];  // i, f, o, q
    Vec b[4];
};

inline LstmMats lstm_of(const hstory::LstmParams& p) {
    LstmMats m;
    const hstory::GateParams* gates[4] = {&p.input, &p.forget, &p.output, &p.update};
    for (int g = 0; g < 4; ++g) {
        m.w_x[g] = mat_of(gates[g]->w_x->value);
        m.w_h[g] = mat_of(gates[g]->w_h->value);
        m.w_z[g] = mat_of(gates[g]->w_z->value);
        m.b[g] = row_of(gates[g]->b->value, 0);
    }
    return m;
}

inline Cell lstm_step(const Vec& x, const Vec& z, const Cell& prev, const LstmMats& p) {
    Vec pre[4];
    for (int g = 0; g < 4; ++g)
        pre[g] = add(add(add(vec_mat(x, p.w_x[g]), vec_mat(prev.h, p.w_h[g])), vec_mat(z, p.w_z[g])), p.b[g]);
    const std::size_t d = pre[0].size();
    Cell next;
    next.h.resize(d);
    next.c.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double gi = 1.0 / (1.0 + std::exp(-pre[0][i]));
        const double gf = 1.0 / (1.0 + std::exp(-pre[1][i]));
        const double go = 1.0 / (1.0 + std::exp(-pre[2][i]));
        const double gq = std::tanh(pre[3][i]);
        next.c[i] = gf * prev.c[i] + gi * gq;
        next.h[i] = go * std::tanh(next.c[i]);
    }
    return next;
}

// attention weights and context for one step
inline void attend(const Vec& h_prev, const Mat& locations, const ModelParameters& p, Vec& alpha_out, Vec& z_out) {
    const Mat w_h = mat_of(p.attn.w_h->value);
    const Mat w_x = mat_of(p.attn.w_x->value);
    const Vec w_score = [&] {
        Vec v(p.attn.w_score->value.rows());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = p.attn.w_score->value.at(i, 0);
        return v;
    }();
    const Vec b = row_of(p.attn.b->value, 0);
    const Vec hw = vec_mat(h_prev, w_h);
    Vec scores(locations.size());
    for (std::size_t j = 0; j < locations.size(); ++j) {
        Vec pre = add(add(vec_mat(locations[j], w_x), hw), b);
        double s = 0.0;
        for (std::size_t a = 0; a < pre.size(); ++a) s += std::tanh(pre[a]) * w_score[a];
        scores[j] = s;
    }
    alpha_out = softmax(scores);
    z_out.assign(locations[0].size(), 0.0);
    for (std::size_t j = 0; j < locations.size(); ++j)
        for (std::size_t d = 0; d < z_out.size(); ++d) z_out[d] += alpha_out[j] * locations[j][d];
}

struct Forward {
    std::vector<std::vector<Vec>> logits;  // [sentence][step][vocab]
    std::vector<Vec> h_sentence;           // sentence-layer outputs
};

// Full teacher-forced forward pass with plain loops.
inline Forward story_forward(const hstory::PreparedStory& story, const ModelParameters& p) {
    const std::size_t n = story.grids.size();
    const Mat proj = mat_of(p.proj_raw->value);
    std::vector<Mat> per_image(n);
    std::vector<Vec> image_mean(n);
    Vec full(p.dims.hidden, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t m = story.grids[t].rows();
        per_image[t].assign(m, Vec(p.dims.hidden, 0.0));
        image_mean[t].assign(p.dims.hidden, 0.0);
        for (std::size_t j = 0; j < m; ++j) {
            per_image[t][j] = vec_mat(row_of(story.grids[t], j), proj);
            for (std::size_t d = 0; d < p.dims.hidden; ++d) image_mean[t][d] += per_image[t][j][d];
        }
        for (std::size_t d = 0; d < p.dims.hidden; ++d) {
            image_mean[t][d] /= static_cast<double>(m);
            full[d] += image_mean[t][d];
        }
    }
    for (double& v : full) v /= static_cast<double>(n);

    const LstmMats s_lstm = lstm_of(p.s_lstm);
    const LstmMats w_lstm = lstm_of(p.w_lstm);
    const Mat w_o_s = mat_of(p.w_o_s->value);
    const Mat w_o_t = mat_of(p.w_o_t->value);
    const Mat w_out = mat_of(p.w_out->value);
    const Vec b_out = row_of(p.b_out->value, 0);

    Forward fwd;
    Cell s_state{add(vec_mat(full, w_o_s), row_of(p.b_o_s->value, 0)), Vec(p.dims.hidden, 0.0)};
    Vec prev_vec = row_of(p.s0->value, 0);
    for (std::size_t t = 0; t < n; ++t) {
        s_state = lstm_step(prev_vec, image_mean[t], s_state, s_lstm);
        fwd.h_sentence.push_back(s_state.h);
        prev_vec = row_of(p.sentence_table->value, static_cast<std::size_t>(story.sentence_ids[t]));

        Cell w_state{add(vec_mat(image_mean[t], w_o_t), row_of(p.b_o_t->value, 0)), Vec(p.dims.hidden, 0.0)};
        Vec text = fwd.h_sentence[t];
        std::vector<Vec> sentence_logits;
        for (std::size_t k = 0; k < story.words[t].size(); ++k) {
            Vec alpha, z;
            attend(w_state.h, per_image[t], p, alpha, z);
            w_state = lstm_step(text, z, w_state, w_lstm);
            sentence_logits.push_back(add(vec_mat(w_state.h, w_out), b_out));
            if (k + 1 < story.words[t].size())
                text = row_of(p.word_table->value, static_cast<std::size_t>(story.words[t][k]));
        }
        fwd.logits.push_back(std::move(sentence_logits));
    }
    return fwd;
}

// masked NLL from the reference forward
inline double story_nll(const hstory::PreparedStory& story, const ModelParameters& p) {
    const Forward fwd = story_forward(story, p);
    double nll = 0.0;
    for (std::size_t t = 0; t < story.words.size(); ++t)
        for (std::size_t k = 0; k < story.words[t].size(); ++k) {
            if (!story.masks[t][k]) continue;
            nll -= log_softmax(fwd.logits[t][k])[static_cast<std::size_t>(story.words[t][k])];
        }
    return nll;
}

}  // namespace ref

// ---------------------------------------------------------------------------
// brute-force decoding oracle: enumerate every terminated sequence for one
// sentence and score it with the plain-loop forward

namespace oracle {

struct Best {
    std::vector<int> tokens;  // surface, stop token stripped
    double logprob = -1e300;
};

inline Best best_sentence(const ModelParameters& p, const hstory::PreparedStory& probe, std::size_t sentence_idx,
                          std::size_t max_words, int null_id) {
    const ref::Forward fwd = ref::story_forward(probe, p);
    const ref::Mat proj = ref::mat_of(p.proj_raw->value);
    const std::size_t m = probe.grids[sentence_idx].rows();
    ref::Mat per_image(m);
    ref::Vec image_mean(p.dims.hidden, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        per_image[j] = ref::vec_mat(ref::row_of(probe.grids[sentence_idx], j), proj);
        for (std::size_t d = 0; d < p.dims.hidden; ++d) image_mean[d] += per_image[j][d];
    }
    for (double& v : image_mean) v /= static_cast<double>(m);

    const ref::LstmMats w_lstm = ref::lstm_of(p.w_lstm);
    const ref::Mat w_out = ref::mat_of(p.w_out->value);
    const ref::Vec b_out = ref::row_of(p.b_out->value, 0);
    const ref::Vec h_sent = fwd.h_sentence[sentence_idx];

    Best best;
    std::vector<int> prefix;
    std::function<void(ref::Cell, double, std::size_t)> walk = [&](ref::Cell state, double logprob,
                                                                   std::size_t depth) {
        ref::Vec text =
            depth == 0 ? h_sent : ref::row_of(p.word_table->value, static_cast<std::size_t>(prefix.back()));
        ref::Vec alpha, z;
        ref::attend(state.h, per_image, p, alpha, z);
        ref::Cell next = ref::lstm_step(text, z, state, w_lstm);
        const ref::Vec logp = ref::log_softmax(ref::add(ref::vec_mat(next.h, w_out), b_out));
        for (std::size_t v = 0; v < p.dims.vocab; ++v) {
            const double score = logprob + logp[v];
            if (static_cast<int>(v) == null_id || depth + 1 == max_words) {
                std::vector<int> tokens = prefix;
                if (static_cast<int>(v) != null_id) tokens.push_back(static_cast<int>(v));
                if (score > best.logprob || (score == best.logprob && tokens < best.tokens)) {
                    best.tokens = std::move(tokens);
                    best.logprob = score;
                }
            } else {
                prefix.push_back(static_cast<int>(v));
                walk(next, score, depth + 1);
                prefix.pop_back();
            }
        }
    };
    ref::Cell start{ref::add(ref::vec_mat(image_mean, ref::mat_of(p.w_o_t->value)), ref::row_of(p.b_o_t->value, 0)),
                    ref::Vec(p.dims.hidden, 0.0)};
    walk(start, 0.0, 0);
    return best;
}

// brute-force CIDEr per the documented TF-IDF formula, written against
// plain maps rather than the production counting path
inline std::vector<double> cider_brute_per_item(const std::vector<std::vector<std::string>>& cands,
                                                const std::vector<std::vector<std::vector<std::string>>>& refs) {
    auto lower = [](std::string s) {
        for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return s;
    };
    auto ngrams = [&](const std::vector<std::string>& toks, std::size_t n) {
        std::map<std::string, double> counts;
        if (toks.size() < n) return counts;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (std::size_t j = 0; j < n; ++j) key += lower(toks[i + j]) + "|";
            counts[key] += 1.0;
        }
        return counts;
    };
    const double items = static_cast<double>(cands.size());
    std::vector<double> out;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double item_mean = 0.0;
        for (std::size_t n = 1; n <= 4; ++n) {
            std::map<std::string, double> df;
            for (const auto& item_refs : refs) {
                std::map<std::string, double> seen;
                for (const auto& ref : item_refs)
                    for (const auto& [g, c] : ngrams(ref, n)) seen[g] = 1.0;
                for (const auto& [g, one] : seen) df[g] += 1.0;
            }
            auto weight = [&](const std::map<std::string, double>& counts, const std::string& g) {
                const double d = df.count(g) ? df.at(g) : 1.0;
                return counts.at(g) * std::log((items + 1.0) / d);
            };
            const auto cand = ngrams(cands[i], n);
            double ref_mean = 0.0;
            for (const auto& ref : refs[i]) {
                const auto rv = ngrams(ref, n);
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (const auto& [g, c] : cand) {
                    na += weight(cand, g) * weight(cand, g);
                    if (rv.count(g)) dot += weight(cand, g) * weight(rv, g);
                }
                for (const auto& [g, c] : rv) nb += weight(rv, g) * weight(rv, g);
                ref_mean += (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
            }
            item_mean += ref_mean / static_cast<double>(refs[i].size());
        }
        out.push_back(item_mean / 4.0);
    }
    return out;
}

}  // namespace oracle

}  // namespace th
