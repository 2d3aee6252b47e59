#pragma once
// Corpus-level BLEU-4, CIDEr, and cosine nearest-neighbor lookups.
//
// BLEU: geometric mean of clipped modified n-gram precisions (n = 1..4)
// times the brevity penalty, scaled by 100. Orders for which the candidate
// corpus has no n-grams at all are skipped and the uniform weights
// renormalized over the rest; an order with zero matches scores 0.
//
// CIDEr: per item, the mean over n = 1..4 of the cosine between TF-IDF
// n-gram vectors of candidate and reference (averaged over references),
// then the corpus mean scaled by 10. TF is the raw n-gram count and
// idf = ln((items + 1) / df) with df counted over the items' reference
// sets, so single-item corpora are well-defined. Not byte-compatible with
// the official scorers; tokens are lowercased, no stemming.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hstory/dataio.hpp"

namespace hstory {

using TokenSeq = std::vector<std::string>;

namespace detail {

inline std::string lower(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// n-gram multiset keyed by '\x1f'-joined lowercased tokens
inline std::map<std::string, int> ngram_counts(const TokenSeq& toks, std::size_t n) {
    std::map<std::string, int> counts;
    if (toks.size() < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key;
        for (std::size_t j = 0; j < n; ++j) {
            if (j) key += '\x1f';
            key += lower(toks[i + j]);
        }
        ++counts[key];
    }
    return counts;
}

}  // namespace detail

inline double bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references) {
    if (candidates.empty()) throw std::invalid_argument("bleu: empty candidate list");
    if (candidates.size() != references.size())
        throw std::invalid_argument("bleu: candidate and reference counts differ");
    constexpr std::size_t kMaxOrder = 4;
    std::size_t matched[kMaxOrder] = {0, 0, 0, 0};
    std::size_t total[kMaxOrder] = {0, 0, 0, 0};
    std::size_t cand_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (references[i].empty()) throw std::invalid_argument("bleu: empty reference");
        cand_len += candidates[i].size();
        ref_len += references[i].size();
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            const auto cand = detail::ngram_counts(candidates[i], n);
            const auto ref = detail::ngram_counts(references[i], n);
            for (const auto& [gram, count] : cand) {
                total[n - 1] += static_cast<std::size_t>(count);
                auto it = ref.find(gram);
                if (it != ref.end()) matched[n - 1] += static_cast<std::size_t>(std::min(count, it->second));
            }
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    std::size_t orders = 0;
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
        if (total[n] == 0) continue;  // no candidate n-grams of this order anywhere
        if (matched[n] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
        ++orders;
    }
    if (orders == 0) return 0.0;
    const double bp =
        cand_len >= ref_len ? 1.0
                            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
}

struct CiderResult {
    double score = 0.0;            // corpus mean x 10
    std::vector<double> per_item;  // unscaled per-item similarity means
};

inline CiderResult cider(const std::vector<TokenSeq>& candidates,
                         const std::vector<std::vector<TokenSeq>>& references_per_item) {
    if (candidates.empty()) throw std::invalid_argument("cider: empty candidate list");
    if (candidates.size() != references_per_item.size())
        throw std::invalid_argument("cider: candidate and reference counts differ");
    constexpr std::size_t kMaxOrder = 4;
    const std::size_t items = candidates.size();

    // document frequency over the reference corpus only
    std::map<std::string, int> df[kMaxOrder];
    for (const auto& refs : references_per_item) {
        if (refs.empty()) throw std::invalid_argument("cider: item with no references");
        std::map<std::string, int> seen[kMaxOrder];
        for (const TokenSeq& ref : refs)
            for (std::size_t n = 1; n <= kMaxOrder; ++n)
                for (const auto& [gram, count] : detail::ngram_counts(ref, n)) seen[n - 1][gram] = 1;
        for (std::size_t n = 0; n < kMaxOrder; ++n)
            for (const auto& [gram, one] : seen[n]) df[n][gram] += one;
    }
    auto idf = [&](std::size_t n, const std::string& gram) {
        auto it = df[n].find(gram);
        const double d = it == df[n].end() ? 1.0 : static_cast<double>(it->second);
        return std::log((static_cast<double>(items) + 1.0) / d);
    };
    auto cosine = [&](std::size_t n, const std::map<std::string, int>& a, const std::map<std::string, int>& b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (const auto& [gram, count] : a) {
            const double w = static_cast<double>(count) * idf(n, gram);
            na += w * w;
            auto it = b.find(gram);
            if (it != b.end()) dot += w * static_cast<double>(it->second) * idf(n, gram);
        }
        for (const auto& [gram, count] : b) {
            const double w = static_cast<double>(count) * idf(n, gram);
            nb += w * w;
        }
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };

    CiderResult out;
    for (std::size_t i = 0; i < items; ++i) {
        double item_score = 0.0;
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            const auto cand = detail::ngram_counts(candidates[i], n);
            double ref_mean = 0.0;
            for (const TokenSeq& ref : references_per_item[i])
                ref_mean += cosine(n - 1, cand, detail::ngram_counts(ref, n));
            item_score += ref_mean / static_cast<double>(references_per_item[i].size());
        }
        out.per_item.push_back(item_score / static_cast<double>(kMaxOrder));
    }
    double total = 0.0;
    for (double v : out.per_item) total += v;
    out.score = 10.0 * total / static_cast<double>(items);
    return out;
}

// ---------------------------------------------------------------------------
// nearest neighbors

inline std::vector<std::pair<std::string, double>> nearest_neighbors(const RealArray& query,
                                                                     const EmbeddingTable& table, std::size_t k) {
    if (k > table.size()) throw std::invalid_argument("nearest_neighbors: k exceeds table size");
    if (query.numel() != table.dim) throw std::invalid_argument("nearest_neighbors: query dimension mismatch");
    double qnorm = 0.0;
    for (double v : query.data) qnorm += v * v;
    if (qnorm == 0.0) throw std::invalid_argument("nearest_neighbors: zero-norm query");
    qnorm = std::sqrt(qnorm);

    std::vector<std::pair<double, std::size_t>> scored;  // (cosine, row)
    scored.reserve(table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        double dot = 0.0, rnorm = 0.0;
        for (std::size_t j = 0; j < table.dim; ++j) {
            const double r = table.vectors.data[i * table.dim + j];
            dot += r * query.data[j];
            rnorm += r * r;
        }
        if (rnorm == 0.0)
            throw std::invalid_argument("nearest_neighbors: zero-norm table row '" + table.tokens[i] + "'");
        scored.emplace_back(dot / (qnorm * std::sqrt(rnorm)), i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;  // tie-break by table order
    });
    std::vector<std::pair<std::string, double>> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.emplace_back(table.tokens[scored[i].second], scored[i].first);
    return out;
}

inline std::vector<std::pair<std::string, double>> nearest_neighbors(const std::string& token,
                                                                     const EmbeddingTable& table, std::size_t k) {
    const std::size_t id = table.id_of(token);
    RealArray query({1, table.dim});
    for (std::size_t j = 0; j < table.dim; ++j) query.data[j] = table.vectors.data[id * table.dim + j];
    return nearest_neighbors(query, table, k);
}

}  // namespace hstory
