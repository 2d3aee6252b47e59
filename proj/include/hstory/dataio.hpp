#pragma once
// Corpus / feature-grid / embedding ingestion, mask construction, and the
// deterministic toy-corpus generator that stands in for pretrained encoders.
//
// File formats (all little-endian, bit-exact round-trippable):
//   corpus  - UTF-8 JSON lines: {"story_id", "feature_file", "sentences"}
//   FEAT1   - "FEAT1\n", ASCII "N M D_raw\n", N*M*D_raw float32 payload
//   EMB1    - "EMB1\n", ASCII "count dim\n", per entry: u16 token length,
//             token bytes, dim float32 values

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hstory/numerics.hpp"
#include "hstory/rng.hpp"
#include "hstory/serial.hpp"

namespace hstory {

inline constexpr const char* kNullToken = "<NULL>";
inline constexpr const char* kSosToken = "<SOS>";

// ---------------------------------------------------------------------------
// domain types

struct FeatureGrid {
    RealArray values;  // [M x D_raw]

    std::size_t locations() const { return values.rows(); }
    std::size_t raw_dim() const { return values.cols(); }
};

struct StoryRecord {
    std::string story_id;
    std::string feature_file;
    std::vector<std::vector<std::string>> sentences;  // N sentences, padded to exactly L
    std::vector<std::vector<std::uint8_t>> masks;     // N x L, 1 = real word
};

struct EmbeddingTable {
    std::vector<std::string> tokens;
    RealArray vectors;  // [|V| x D]; left default-constructed when the table is empty
    std::size_t dim = 0;
    bool trainable = true;
    std::unordered_map<std::string, std::size_t> index;

    std::size_t size() const { return tokens.size(); }

    bool contains(const std::string& tok) const { return index.count(tok) != 0; }

    std::size_t id_of(const std::string& tok) const {
        auto it = index.find(tok);
        if (it == index.end()) throw std::out_of_range("embedding table has no token '" + tok + "'");
        return it->second;
    }

    void add(const std::string& tok, const std::vector<double>& vec) {
        if (dim == 0) dim = vec.size();
        if (vec.size() != dim)
            throw std::invalid_argument("embedding dimension mismatch for token '" + tok + "'");
        if (!index.emplace(tok, tokens.size()).second)
            throw std::invalid_argument("duplicate token '" + tok + "'");
        tokens.push_back(tok);
        if (vectors.numel() == 0)
            vectors = RealArray({1, dim}, vec);
        else {
            vectors.shape[0] += 1;
            vectors.data.insert(vectors.data.end(), vec.begin(), vec.end());
        }
    }
};

// Word tables must carry the reserved tokens.
inline void require_word_table(const EmbeddingTable& t) {
    if (!t.contains(kNullToken) || !t.contains(kSosToken))
        throw std::invalid_argument("word table is missing a reserved token (<NULL>, <SOS>)");
}

// ---------------------------------------------------------------------------
// EMB1

inline void save_embeddings(const std::string& path, const EmbeddingTable& t) {
    std::string out = "EMB1\n";
    out += std::to_string(t.size()) + " " + std::to_string(t.dim) + "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
        const std::string& tok = t.tokens[i];
        if (tok.size() > 0xFFFF) throw std::invalid_argument("token too long for EMB1: '" + tok + "'");
        serial::put_u16(out, static_cast<std::uint16_t>(tok.size()));
        out += tok;
        for (std::size_t j = 0; j < t.dim; ++j)
            serial::put_f32(out, static_cast<float>(t.vectors.data[i * t.dim + j]));
    }
    serial::write_file(path, out);
}

inline EmbeddingTable load_embeddings(const std::string& path) {
    serial::Reader r(serial::read_file(path), path);
    if (r.line() != "EMB1") r.fail("bad magic, expected EMB1");
    std::istringstream hdr(r.line());
    long long count = -1, dim = -1;
    if (!(hdr >> count >> dim) || !(hdr >> std::ws).eof() || count < 0 || dim < 1)
        r.fail("bad header, expected 'count dim'");
    EmbeddingTable t;
    t.dim = static_cast<std::size_t>(dim);
    for (long long i = 0; i < count; ++i) {
        const std::uint16_t len = r.u16();
        std::string tok = r.raw(len);
        std::vector<double> vec(static_cast<std::size_t>(dim));
        for (auto& v : vec) v = static_cast<double>(r.f32());
        try {
            t.add(tok, vec);
        } catch (const std::invalid_argument& e) {
            r.fail(e.what());
        }
    }
    if (!r.at_end()) r.fail("trailing bytes after payload");
    for (double v : t.vectors.data)
        if (!std::isfinite(v)) r.fail("non-finite embedding value");
    return t;
}

// ---------------------------------------------------------------------------
// FEAT1 (one file per story: N grids of M x D_raw)

inline void write_feature_file(const std::string& path, const std::vector<FeatureGrid>& grids) {
    if (grids.empty()) throw std::invalid_argument("write_feature_file: no grids");
    const std::size_t m = grids[0].locations(), d = grids[0].raw_dim();
    std::string out = "FEAT1\n";
    out += std::to_string(grids.size()) + " " + std::to_string(m) + " " + std::to_string(d) + "\n";
    for (const FeatureGrid& g : grids) {
        if (g.locations() != m || g.raw_dim() != d)
            throw std::invalid_argument("write_feature_file: inconsistent grid shapes");
        for (double v : g.values.data) serial::put_f32(out, static_cast<float>(v));
    }
    serial::write_file(path, out);
}

inline std::vector<FeatureGrid> load_feature_file(const std::string& path) {
    serial::Reader r(serial::read_file(path), path);
    if (r.line() != "FEAT1") r.fail("bad magic, expected FEAT1");
    std::istringstream hdr(r.line());
    long long n = -1, m = -1, d = -1;
    if (!(hdr >> n >> m >> d) || !(hdr >> std::ws).eof() || n < 1 || m < 1 || d < 1)
        r.fail("bad header, expected 'N M D_raw'");
    std::vector<FeatureGrid> grids;
    grids.reserve(static_cast<std::size_t>(n));
    for (long long i = 0; i < n; ++i) {
        RealArray values({static_cast<std::size_t>(m), static_cast<std::size_t>(d)});
        for (auto& v : values.data) {
            v = static_cast<double>(r.f32());
            if (!std::isfinite(v)) r.fail("non-finite feature value");
        }
        grids.push_back(FeatureGrid{std::move(values)});
    }
    if (!r.at_end()) r.fail("trailing bytes after payload");
    return grids;
}

// ---------------------------------------------------------------------------
// corpus (JSON lines)

namespace detail {

inline std::string strip_punct(const std::string& tok) {
    std::string out;
    for (unsigned char c : tok)
        if (!std::ispunct(c)) out.push_back(static_cast<char>(c));
    return out;
}

inline bool has_space(const std::string& tok) {
    for (unsigned char c : tok)
        if (std::isspace(c)) return true;
    return false;
}

[[noreturn]] inline void corpus_fail(const std::string& path, std::size_t line, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": malformed record: " + what);
}

}  // namespace detail

// Loads JSONL story records: strips punctuation, rejects over-long
// sentences, pads with <NULL> to exactly max_words, and builds masks.
// When a word table is supplied, unknown tokens become <NULL> with mask 0.
inline std::vector<StoryRecord> load_corpus(const std::string& path, std::size_t max_words,
                                            std::size_t images_per_story,
                                            const EmbeddingTable* word_table = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    std::vector<StoryRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            detail::corpus_fail(path, line_no, e.what());
        }
        if (!j.is_object() || !j.contains("story_id") || !j.contains("feature_file") || !j.contains("sentences") ||
            !j["story_id"].is_string() || !j["feature_file"].is_string() || !j["sentences"].is_array())
            detail::corpus_fail(path, line_no, "expected object with story_id, feature_file, sentences");
        StoryRecord rec;
        rec.story_id = j["story_id"].get<std::string>();
        rec.feature_file = j["feature_file"].get<std::string>();
        const auto& sents = j["sentences"];
        if (sents.size() != images_per_story)
            detail::corpus_fail(path, line_no,
                                "expected " + std::to_string(images_per_story) + " sentences, got " +
                                    std::to_string(sents.size()));
        for (const auto& s : sents) {
            if (!s.is_array()) detail::corpus_fail(path, line_no, "sentence is not a token array");
            std::vector<std::string> toks;
            for (const auto& t : s) {
                if (!t.is_string()) detail::corpus_fail(path, line_no, "token is not a string");
                std::string tok = t.get<std::string>();
                if (tok == kNullToken || tok == kSosToken)
                    detail::corpus_fail(path, line_no, "reserved token '" + tok + "' in sentence");
                tok = detail::strip_punct(tok);
                if (tok.empty()) continue;
                if (detail::has_space(tok)) detail::corpus_fail(path, line_no, "token contains whitespace: '" + tok + "'");
                toks.push_back(std::move(tok));
            }
            if (toks.size() > max_words)
                detail::corpus_fail(path, line_no,
                                    "sentence has " + std::to_string(toks.size()) + " words, limit is " +
                                        std::to_string(max_words));
            std::vector<std::uint8_t> mask(max_words, 0);
            std::vector<std::string> padded(max_words, kNullToken);
            for (std::size_t k = 0; k < toks.size(); ++k) {
                if (word_table != nullptr && !word_table->contains(toks[k])) continue;  // unknown -> <NULL>, mask 0
                padded[k] = toks[k];
                mask[k] = 1;
            }
            rec.sentences.push_back(std::move(padded));
            rec.masks.push_back(std::move(mask));
        }
        records.push_back(std::move(rec));
    }
    if (in.bad()) throw std::runtime_error(path + ": read failure");
    return records;
}

// Writes records back as JSON lines (padding removed).
inline void write_corpus(const std::string& path, const std::vector<StoryRecord>& records) {
    std::string out;
    for (const StoryRecord& rec : records) {
        nlohmann::ordered_json j;
        j["story_id"] = rec.story_id;
        j["feature_file"] = rec.feature_file;
        auto sents = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < rec.sentences.size(); ++i) {
            auto s = nlohmann::ordered_json::array();
            for (std::size_t k = 0; k < rec.sentences[i].size(); ++k)
                if (rec.masks[i][k]) s.push_back(rec.sentences[i][k]);
            sents.push_back(std::move(s));
        }
        j["sentences"] = std::move(sents);
        out += j.dump();
        out += "\n";
    }
    serial::write_file(path, out);
}

// ---------------------------------------------------------------------------
// sentence vectors

// Mean of the word vectors of the real (non-padding) tokens.
inline RealArray sentence_vector_of(const std::vector<std::string>& tokens, const EmbeddingTable& word_table) {
    RealArray acc({1, word_table.dim});
    std::size_t count = 0;
    for (const std::string& tok : tokens) {
        if (tok == kNullToken) continue;
        const std::size_t id = word_table.id_of(tok);
        for (std::size_t j = 0; j < word_table.dim; ++j) acc.data[j] += word_table.vectors.data[id * word_table.dim + j];
        ++count;
    }
    if (count == 0) throw std::invalid_argument("sentence_vector_of: all-padding sentence");
    for (double& v : acc.data) v /= static_cast<double>(count);
    return acc;
}

// Same, over token ids against a raw [|V| x D] matrix (used at inference
// where the trained table lives in the parameter set).
inline RealArray sentence_vector_of_ids(const std::vector<int>& ids, const RealArray& vectors, int null_id) {
    const std::size_t d = vectors.cols();
    RealArray acc({1, d});
    std::size_t count = 0;
    for (int id : ids) {
        if (id == null_id) continue;
        for (std::size_t j = 0; j < d; ++j) acc.data[j] += vectors.data[static_cast<std::size_t>(id) * d + j];
        ++count;
    }
    if (count == 0) throw std::invalid_argument("sentence_vector_of_ids: all-padding sentence");
    for (double& v : acc.data) v /= static_cast<double>(count);
    return acc;
}

// ---------------------------------------------------------------------------
// toy corpus generator

struct GenToyConfig {
    std::uint64_t seed = 7;
    std::size_t stories = 20;
    std::size_t vocab_size = 60;
    std::size_t topics = 8;
    std::size_t images = 5;       // N
    std::size_t max_words = 15;   // L
    std::size_t locations = 9;    // M
    std::size_t raw_dim = 32;     // D_raw
    std::size_t embed_dim = 64;   // D
    std::string out_dir;
};

struct ToyPaths {
    std::string corpus;
    std::string features_dir;
    std::string word_emb;
    std::string sentence_emb;
};

namespace detail {

inline std::vector<double> random_unit_vector(SplitMix64& rng, std::size_t dim) {
    std::vector<double> v(dim);
    for (;;) {
        double norm_sq = 0.0;
        for (double& x : v) {
            x = rng.uniform() * 2.0 - 1.0;
            norm_sq += x * x;
        }
        if (norm_sq > 1e-6) {
            const double norm = std::sqrt(norm_sq);
            // quantize through float32 so the in-memory table matches the
            // EMB1 payload and sentence means stay consistent after reload
            for (double& x : v) x = static_cast<double>(static_cast<float>(x / norm));
            return v;
        }
    }
}

}  // namespace detail

// Deterministic for a given seed. Each image's feature grid is its
// sentence-topic's signature grid plus small noise (the noise scale is a
// power of two so the sums are exactly rounded on every platform); word
// embeddings are random unit vectors; sentence embeddings are the mean of
// their word vectors.
inline ToyPaths gen_toy_corpus(const GenToyConfig& cfg) {
    if (cfg.vocab_size < cfg.topics + 2)
        throw std::invalid_argument("gen_toy_corpus: vocab_size must be at least topics + 2 reserved tokens");
    if (cfg.topics == 0 || cfg.images == 0 || cfg.max_words == 0)
        throw std::invalid_argument("gen_toy_corpus: topics, images and max_words must be positive");
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    fs::create_directories(fs::path(cfg.out_dir) / "features");

    SplitMix64 root(cfg.seed);

    // vocabulary: reserved + one marker word per topic + filler pool
    std::vector<std::string> vocab{kNullToken, kSosToken};
    for (std::size_t t = 0; t < cfg.topics; ++t) vocab.push_back("t" + std::to_string(t));
    const std::size_t fillers = cfg.vocab_size - 2 - cfg.topics;
    for (std::size_t f = 0; f < fillers; ++f) vocab.push_back("f" + std::to_string(f));

    EmbeddingTable words;
    words.dim = cfg.embed_dim;
    SplitMix64 word_rng = root.fork(1);
    for (const std::string& tok : vocab) words.add(tok, detail::random_unit_vector(word_rng, cfg.embed_dim));

    // One fixed sentence per topic: marker word + deterministic fillers.
    // Sentences fill the whole word window: padding positions carry no
    // training signal, so a shorter sentence could not be reproduced
    // verbatim by decoding.
    std::vector<std::vector<std::string>> topic_sentence(cfg.topics);
    for (std::size_t t = 0; t < cfg.topics; ++t) {
        SplitMix64 srng = root.fork(1000 + t);
        const std::size_t len = fillers == 0 ? 1 : cfg.max_words;
        std::vector<std::string> sent{"t" + std::to_string(t)};
        while (sent.size() < len)
            sent.push_back("f" + std::to_string(srng.below(fillers)));
        topic_sentence[t] = std::move(sent);
    }

    // per-topic signature grids
    std::vector<RealArray> signature(cfg.topics);
    for (std::size_t t = 0; t < cfg.topics; ++t) {
        SplitMix64 grng = root.fork(2000 + t);
        signature[t] = RealArray({cfg.locations, cfg.raw_dim});
        for (double& v : signature[t].data) v = grng.uniform() * 2.0 - 1.0;
    }
    const double noise_scale = 0x1.0p-5;

    std::vector<StoryRecord> records;
    EmbeddingTable sentences;
    sentences.dim = cfg.embed_dim;
    for (std::size_t s = 0; s < cfg.stories; ++s) {
        SplitMix64 srng = root.fork(3000 + s);
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "story%04zu", s);
        StoryRecord rec;
        rec.story_id = idbuf;
        rec.feature_file = rec.story_id + ".feat";
        std::vector<FeatureGrid> grids;
        for (std::size_t img = 0; img < cfg.images; ++img) {
            const std::size_t topic = static_cast<std::size_t>(srng.below(cfg.topics));
            RealArray values = signature[topic];
            for (double& v : values.data) v += noise_scale * (srng.uniform() * 2.0 - 1.0);
            grids.push_back(FeatureGrid{std::move(values)});

            const std::vector<std::string>& sent = topic_sentence[topic];
            std::vector<std::string> padded(cfg.max_words, kNullToken);
            std::vector<std::uint8_t> mask(cfg.max_words, 0);
            for (std::size_t k = 0; k < sent.size(); ++k) {
                padded[k] = sent[k];
                mask[k] = 1;
            }
            rec.sentences.push_back(std::move(padded));
            rec.masks.push_back(std::move(mask));

            std::string key;
            for (std::size_t k = 0; k < sent.size(); ++k) key += (k ? " " : "") + sent[k];
            if (!sentences.contains(key)) {
                RealArray vec = sentence_vector_of(sent, words);
                sentences.add(key, vec.data);
            }
        }
        write_feature_file((fs::path(cfg.out_dir) / "features" / rec.feature_file).string(), grids);
        records.push_back(std::move(rec));
    }

    ToyPaths paths;
    paths.corpus = (fs::path(cfg.out_dir) / "corpus.jsonl").string();
    paths.features_dir = (fs::path(cfg.out_dir) / "features").string();
    paths.word_emb = (fs::path(cfg.out_dir) / "words.emb").string();
    paths.sentence_emb = (fs::path(cfg.out_dir) / "sentences.emb").string();
    write_corpus(paths.corpus, records);
    save_embeddings(paths.word_emb, words);
    save_embeddings(paths.sentence_emb, sentences);
    return paths;
}

}  // namespace hstory
