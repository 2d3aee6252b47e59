#pragma once
// Hierarchical decoder: raw feature projection, the sentence-level pass,
// and the word-level pass with per-step spatial attention and the
// vocabulary output head. Also owns the CKPT1 checkpoint format: ASCII
// manifest ("name dim0 dim1 ...\n" per tensor, blank line), then the
// tensors as 64-bit little-endian floats in manifest order.

#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hstory/attention.hpp"
#include "hstory/numerics.hpp"
#include "hstory/recurrent.hpp"
#include "hstory/rng.hpp"
#include "hstory/serial.hpp"

namespace hstory {

struct ModelDims {
    std::size_t raw_dim = 32;        // D_raw
    std::size_t hidden = 64;         // D (also the embedding dimension)
    std::size_t attn = 32;           // A, score hidden size (D/2 by default)
    std::size_t vocab = 0;           // |V|
    std::size_t sentence_vocab = 0;  // distinct training sentences
};

struct ModelParameters {
    ModelDims dims;
    NodePtr proj_raw;              // [D_raw x D]
    NodePtr w_o_s, b_o_s;          // sentence-layer init head
    NodePtr w_o_t, b_o_t;          // word-layer init head
    LstmParams s_lstm, w_lstm;
    AttentionParams attn;
    NodePtr word_table;            // [|V| x D]
    NodePtr sentence_table;        // [S x D]
    NodePtr s0;                    // [1 x D] learned start sentence vector
    NodePtr w_out, b_out;          // output head, [D x |V|] and [1 x |V|]

    // Uniform +-1/sqrt(D) init, forget-gate bias 1.0; embedding tables are
    // copied from the pretrained vectors and fine-tuned unless frozen.
    static ModelParameters init(const ModelDims& dims, SplitMix64& rng, const RealArray& word_vectors,
                                const RealArray& sentence_vectors, bool freeze_embeddings = false) {
        if (word_vectors.rows() != dims.vocab || word_vectors.cols() != dims.hidden)
            throw std::invalid_argument("init: word vectors shape " + shape_str(word_vectors.shape) +
                                        " does not match dims");
        if (sentence_vectors.rows() != dims.sentence_vocab || sentence_vectors.cols() != dims.hidden)
            throw std::invalid_argument("init: sentence vectors shape " + shape_str(sentence_vectors.shape) +
                                        " does not match dims");
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
        auto uniform = [&](std::string name, Shape shape) {
            RealArray a(std::move(shape));
            for (double& v : a.data) v = rng.uniform(-bound, bound);
            return parameter(std::move(name), std::move(a));
        };
        const std::size_t d = dims.hidden, a_dim = dims.attn;
        ModelParameters p;
        p.dims = dims;
        p.proj_raw = uniform("proj_raw", {dims.raw_dim, d});
        p.w_o_s = uniform("w_o_s", {d, d});
        p.b_o_s = uniform("b_o_s", {1, d});
        p.w_o_t = uniform("w_o_t", {d, d});
        p.b_o_t = uniform("b_o_t", {1, d});
        auto lstm = [&](const std::string& prefix) {
            LstmParams lp;
            const char* gates = "ifoq";
            GateParams* slots[4] = {&lp.input, &lp.forget, &lp.output, &lp.update};
            for (int g = 0; g < 4; ++g) {
                const std::string suffix(1, gates[g]);
                slots[g]->w_x = uniform(prefix + ".w_x" + suffix, {d, d});
                slots[g]->w_h = uniform(prefix + ".w_h" + suffix, {d, d});
                slots[g]->w_z = uniform(prefix + ".w_z" + suffix, {d, d});
                slots[g]->b = (gates[g] == 'f') ? parameter(prefix + ".b_f", RealArray({1, d}, 1.0))
                                                : uniform(prefix + ".b_" + suffix, {1, d});
            }
            return lp;
        };
        p.s_lstm = lstm("s_lstm");
        p.w_lstm = lstm("w_lstm");
        p.attn.w_h = uniform("attn.w_h", {d, a_dim});
        p.attn.w_x = uniform("attn.w_x", {d, a_dim});
        p.attn.w_score = uniform("attn.w_score", {a_dim, 1});
        p.attn.b = uniform("attn.b", {1, a_dim});
        p.word_table = freeze_embeddings ? constant(word_vectors) : parameter("word_table", word_vectors);
        p.word_table->name = "word_table";
        p.sentence_table =
            freeze_embeddings ? constant(sentence_vectors) : parameter("sentence_table", sentence_vectors);
        p.sentence_table->name = "sentence_table";
        p.s0 = uniform("s0", {1, d});
        p.w_out = uniform("w_out", {d, dims.vocab});
        p.b_out = uniform("b_out", {1, dims.vocab});
        return p;
    }

    std::vector<std::pair<std::string, NodePtr>> named() const {
        std::vector<std::pair<std::string, NodePtr>> out;
        out.emplace_back("proj_raw", proj_raw);
        out.emplace_back("w_o_s", w_o_s);
        out.emplace_back("b_o_s", b_o_s);
        out.emplace_back("w_o_t", w_o_t);
        out.emplace_back("b_o_t", b_o_t);
        auto push_lstm = [&](const std::string& prefix, const LstmParams& lp) {
            const char* gates = "ifoq";
            const GateParams* slots[4] = {&lp.input, &lp.forget, &lp.output, &lp.update};
            for (int g = 0; g < 4; ++g) {
                const std::string suffix(1, gates[g]);
                out.emplace_back(prefix + ".w_x" + suffix, slots[g]->w_x);
                out.emplace_back(prefix + ".w_h" + suffix, slots[g]->w_h);
                out.emplace_back(prefix + ".w_z" + suffix, slots[g]->w_z);
                out.emplace_back(prefix + ".b_" + suffix, slots[g]->b);
            }
        };
        push_lstm("s_lstm", s_lstm);
        push_lstm("w_lstm", w_lstm);
        out.emplace_back("attn.w_h", attn.w_h);
        out.emplace_back("attn.w_x", attn.w_x);
        out.emplace_back("attn.w_score", attn.w_score);
        out.emplace_back("attn.b", attn.b);
        out.emplace_back("word_table", word_table);
        out.emplace_back("sentence_table", sentence_table);
        out.emplace_back("s0", s0);
        out.emplace_back("w_out", w_out);
        out.emplace_back("b_out", b_out);
        return out;
    }

    void save(const std::string& path) const {
        std::string out = "CKPT1\n";
        const auto tensors = named();
        for (const auto& [name, node] : tensors) {
            out += name;
            for (std::size_t dim : node->value.shape) out += " " + std::to_string(dim);
            out += "\n";
        }
        out += "\n";
        for (const auto& [name, node] : tensors)
            for (double v : node->value.data) serial::put_f64(out, v);
        serial::write_file(path, out);
    }

    static ModelParameters load(const std::string& path, bool freeze_embeddings = false) {
        serial::Reader r(serial::read_file(path), path);
        if (r.line() != "CKPT1") r.fail("bad magic, expected CKPT1");
        std::map<std::string, RealArray> tensors;
        std::vector<std::string> order;
        for (;;) {
            std::string line = r.line();
            if (line.empty()) break;
            std::istringstream ss(line);
            std::string name;
            ss >> name;
            Shape shape;
            long long dim;
            while (ss >> dim) {
                if (dim < 1) r.fail("non-positive dimension for tensor '" + name + "'");
                shape.push_back(static_cast<std::size_t>(dim));
            }
            if (name.empty() || shape.empty()) r.fail("bad manifest line: '" + line + "'");
            if (tensors.count(name)) r.fail("duplicate tensor '" + name + "'");
            tensors.emplace(name, RealArray(shape));
            order.push_back(name);
        }
        for (const std::string& name : order)
            for (double& v : tensors.at(name).data) v = r.f64();
        if (!r.at_end()) r.fail("trailing bytes after payload");

        auto take = [&](const std::string& name) {
            auto it = tensors.find(name);
            if (it == tensors.end()) r.fail("missing tensor '" + name + "'");
            RealArray a = std::move(it->second);
            tensors.erase(it);
            return a;
        };
        auto take_param = [&](const std::string& name) { return parameter(name, take(name)); };

        ModelParameters p;
        p.proj_raw = take_param("proj_raw");
        p.w_o_s = take_param("w_o_s");
        p.b_o_s = take_param("b_o_s");
        p.w_o_t = take_param("w_o_t");
        p.b_o_t = take_param("b_o_t");
        auto load_lstm = [&](const std::string& prefix) {
            LstmParams lp;
            const char* gates = "ifoq";
            GateParams* slots[4] = {&lp.input, &lp.forget, &lp.output, &lp.update};
            for (int g = 0; g < 4; ++g) {
                const std::string suffix(1, gates[g]);
                slots[g]->w_x = take_param(prefix + ".w_x" + suffix);
                slots[g]->w_h = take_param(prefix + ".w_h" + suffix);
                slots[g]->w_z = take_param(prefix + ".w_z" + suffix);
                slots[g]->b = take_param(prefix + ".b_" + suffix);
            }
            return lp;
        };
        p.s_lstm = load_lstm("s_lstm");
        p.w_lstm = load_lstm("w_lstm");
        p.attn.w_h = take_param("attn.w_h");
        p.attn.w_x = take_param("attn.w_x");
        p.attn.w_score = take_param("attn.w_score");
        p.attn.b = take_param("attn.b");
        p.word_table = freeze_embeddings ? constant(take("word_table")) : take_param("word_table");
        p.word_table->name = "word_table";
        p.sentence_table = freeze_embeddings ? constant(take("sentence_table")) : take_param("sentence_table");
        p.sentence_table->name = "sentence_table";
        p.s0 = take_param("s0");
        p.w_out = take_param("w_out");
        p.b_out = take_param("b_out");
        if (!tensors.empty()) r.fail("unknown tensor '" + tensors.begin()->first + "'");

        p.dims.raw_dim = p.proj_raw->value.rows();
        p.dims.hidden = p.proj_raw->value.cols();
        p.dims.attn = p.attn.w_x->value.cols();
        p.dims.vocab = p.word_table->value.rows();
        p.dims.sentence_vocab = p.sentence_table->value.rows();
        return p;
    }
};

// ---------------------------------------------------------------------------
// forward passes

struct VisualBundle {
    NodePtr full_story;               // [1 x D], mean over all N*M projected locations
    std::vector<NodePtr> per_image;   // N of [M x D]
    std::vector<NodePtr> image_mean;  // N of [1 x D], per-image location mean
};

inline VisualBundle project_features(const std::vector<RealArray>& grids, const ModelParameters& p) {
    if (grids.empty()) throw std::invalid_argument("project_features: no grids");
    VisualBundle b;
    NodePtr sum;
    for (const RealArray& g : grids) {
        if (g.shape != grids.front().shape)
            throw std::invalid_argument("project_features: inconsistent grid shapes " + shape_str(g.shape) +
                                        " vs " + shape_str(grids.front().shape));
        NodePtr projected = matmul(constant(g), p.proj_raw);
        NodePtr mean = mean_rows(projected);
        b.per_image.push_back(projected);
        b.image_mean.push_back(mean);
        sum = sum ? add(sum, mean) : mean;
    }
    b.full_story = scale(sum, 1.0 / static_cast<double>(grids.size()));
    return b;
}

inline CellState sentence_init(const ModelParameters& p, const NodePtr& full_story) {
    return CellState{add(matmul(full_story, p.w_o_s), p.b_o_s),
                     constant(RealArray({1, p.dims.hidden}))};
}

inline CellState sentence_step(const ModelParameters& p, const NodePtr& prev_sentence_vec,
                               const NodePtr& image_mean, const CellState& prev) {
    return lstm_step(prev_sentence_vec, image_mean, prev, p.s_lstm);
}

struct SentencePass {
    std::vector<CellState> states;  // one per sentence; states[t].h feeds the word layer
    std::size_t steps_executed = 0;
};

// Runs N+1 steps. Step t consumes [previous sentence vector, image-t mean];
// step 1 consumes the learned start vector, so state t depends only on
// sentences before t. The closing step consumes the final sentence vector
// (paired with the last image's mean, there being no further image); its
// output feeds nothing.
inline SentencePass sentence_pass(const VisualBundle& bundle, const std::vector<NodePtr>& sentence_vectors,
                                  const ModelParameters& p) {
    const std::size_t n = bundle.per_image.size();
    if (sentence_vectors.size() != n)
        throw std::invalid_argument("sentence_pass: expected " + std::to_string(n) + " sentence vectors, got " +
                                    std::to_string(sentence_vectors.size()));
    SentencePass out;
    CellState st = sentence_init(p, bundle.full_story);
    NodePtr prev_vec = p.s0;
    for (std::size_t t = 0; t < n; ++t) {
        st = sentence_step(p, prev_vec, bundle.image_mean[t], st);
        out.states.push_back(st);
        prev_vec = sentence_vectors[t];
        ++out.steps_executed;
    }
    sentence_step(p, prev_vec, bundle.image_mean[n - 1], st);
    ++out.steps_executed;
    return out;
}

inline CellState word_init(const ModelParameters& p, const NodePtr& image_mean) {
    return CellState{add(matmul(image_mean, p.w_o_t), p.b_o_t),
                     constant(RealArray({1, p.dims.hidden}))};
}

struct WordStep {
    CellState state;
    NodePtr logits;  // [1 x |V|]
    NodePtr alpha;   // [M x 1]
};

inline WordStep word_step(const ModelParameters& p, const AttentionContext& actx, const NodePtr& text_input,
                          const CellState& prev, const NodePtr& dropout_mask = nullptr) {
    Attend at = attend(prev.h, actx, p.attn);
    CellState next = lstm_step(text_input, at.z, prev, p.w_lstm);
    NodePtr head_in = dropout_mask ? mul(next.h, dropout_mask) : next.h;
    return WordStep{next, add(matmul(head_in, p.w_out), p.b_out), at.alpha};
}

struct WordPass {
    std::vector<NodePtr> logits;  // L rows of [1 x |V|], one per target position
    std::vector<NodePtr> alphas;  // L attention rows
};

// Teacher-forced word pass for one sentence: exactly gold_ids.size()
// prediction steps. Step 1 consumes the sentence-layer hidden state,
// step k > 1 consumes the word vector of gold token k-1.
inline WordPass word_pass(const ModelParameters& p, const NodePtr& h_sentence, const NodePtr& per_image,
                          const NodePtr& image_mean, const std::vector<int>& gold_ids,
                          const std::vector<NodePtr>& dropout_masks = {}) {
    if (gold_ids.empty()) throw std::invalid_argument("word_pass: empty gold token sequence");
    if (!dropout_masks.empty() && dropout_masks.size() != gold_ids.size())
        throw std::invalid_argument("word_pass: dropout mask count mismatch");
    AttentionContext actx = make_attention_context(per_image, p.attn);
    CellState st = word_init(p, image_mean);
    NodePtr text = h_sentence;
    WordPass out;
    for (std::size_t k = 0; k < gold_ids.size(); ++k) {
        WordStep ws = word_step(p, actx, text, st, dropout_masks.empty() ? nullptr : dropout_masks[k]);
        out.logits.push_back(ws.logits);
        out.alphas.push_back(ws.alpha);
        st = ws.state;
        if (k + 1 < gold_ids.size()) {
            const int id = gold_ids[k];
            if (id < 0 || static_cast<std::size_t>(id) >= p.dims.vocab)
                throw std::out_of_range("word_pass: token id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(p.dims.vocab));
            text = row(p.word_table, static_cast<std::size_t>(id));
        }
    }
    return out;
}

}  // namespace hstory
