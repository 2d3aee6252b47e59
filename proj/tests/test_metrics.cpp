#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "hstory/metrics.hpp"

using namespace hstory;

namespace {

TokenSeq words(std::initializer_list<const char*> toks) {
    TokenSeq out;
    for (const char* t : toks) out.emplace_back(t);
    return out;
}

TokenSeq random_sentence(th::SplitMix64& rng, std::size_t min_len = 4, std::size_t max_len = 10) {
    static const std::vector<std::string> pool{"the", "a",   "cat",  "dog", "sat",  "ran",  "down",
                                              "road", "park", "fast", "slow", "big", "small", "happy"};
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    TokenSeq out;
    for (std::size_t i = 0; i < len; ++i) out.push_back(pool[rng.below(pool.size())]);
    return out;
}

}  // namespace

TEST_CASE("bleu perfect and disjoint cases", "[metrics]") {
    th::SplitMix64 rng(3);
    std::vector<TokenSeq> cands, refs;
    for (int i = 0; i < 10; ++i) {
        TokenSeq s = random_sentence(rng);
        cands.push_back(s);
        refs.push_back(s);
    }
    CHECK(bleu(cands, refs) == Catch::Approx(100.0).margin(1e-9));

    CHECK(bleu({words({"xx", "yy"})}, {words({"aa", "bb", "cc"})}) == 0.0);
}

TEST_CASE("bleu hand-computed golden value", "[metrics]") {
    // candidate "the cat sat" vs reference "the cat sat down": every
    // 1/2/3-gram matches, there are no candidate 4-grams, and the brevity
    // penalty is exp(1 - 4/3)
    const double got = bleu({words({"the", "cat", "sat"})}, {words({"the", "cat", "sat", "down"})});
    const double want = 100.0 * std::exp(1.0 - 4.0 / 3.0);
    CHECK(std::abs(got - want) <= 1e-9);
    CHECK(got == Catch::Approx(71.65313105737893).margin(1e-9));
}

TEST_CASE("bleu clipping actually clips", "[metrics]") {
    // item 1 repeats "the" three times against a single "the"; item 2 is an
    // exact 4-token match supplying the higher orders. Clipped precisions:
    // p1 = 5/7, p2 = 3/5, p3 = 2/3, p4 = 1/1, brevity penalty 1 (7 >= 6).
    const double got = bleu({words({"the", "the", "the"}), words({"a", "b", "c", "d"})},
                            {words({"the", "cat"}), words({"a", "b", "c", "d"})});
    const double want = 100.0 * std::pow((5.0 / 7.0) * (3.0 / 5.0) * (2.0 / 3.0), 0.25);
    CHECK(got == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("bleu is permutation and duplication invariant", "[metrics]") {
    th::SplitMix64 rng(9);
    std::vector<TokenSeq> cands, refs;
    for (int i = 0; i < 6; ++i) {
        cands.push_back(random_sentence(rng));
        refs.push_back(random_sentence(rng));
        // force some overlap
        if (!cands.back().empty()) refs.back().insert(refs.back().begin(), cands.back().front());
    }
    const double base = bleu(cands, refs);

    std::vector<TokenSeq> cands_rev(cands.rbegin(), cands.rend());
    std::vector<TokenSeq> refs_rev(refs.rbegin(), refs.rend());
    CHECK(bleu(cands_rev, refs_rev) == Catch::Approx(base).margin(1e-12));

    std::vector<TokenSeq> cands_dup = cands, refs_dup = refs;
    cands_dup.insert(cands_dup.end(), cands.begin(), cands.end());
    refs_dup.insert(refs_dup.end(), refs.begin(), refs.end());
    CHECK(bleu(cands_dup, refs_dup) == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("bleu input validation", "[metrics]") {
    REQUIRE_THROWS_WITH(bleu({}, {}), Catch::Matchers::ContainsSubstring("empty candidate"));
    REQUIRE_THROWS_WITH(bleu({words({"a"})}, {}), Catch::Matchers::ContainsSubstring("counts differ"));
    REQUIRE_THROWS_WITH(bleu({words({"a"})}, {TokenSeq{}}), Catch::Matchers::ContainsSubstring("empty reference"));
}

TEST_CASE("cider identical single item scores ten", "[metrics]") {
    TokenSeq s = words({"we", "took", "lots", "of", "pictures"});
    CiderResult r = cider({s}, {{s}});
    CHECK(r.score == Catch::Approx(10.0).margin(1e-9));

    CHECK(cider({words({"xx", "yy", "zz", "ww"})}, {{words({"aa", "bb", "cc", "dd"})}}).score == 0.0);
}

TEST_CASE("cider matches a brute-force TF-IDF oracle on three items", "[metrics]") {
    const std::vector<TokenSeq> cands{words({"the", "cat", "sat", "down"}), words({"a", "dog", "ran", "fast"}),
                                      words({"the", "dog", "sat", "down", "slowly"})};
    const std::vector<std::vector<TokenSeq>> refs{{words({"the", "cat", "sat", "down", "today"})},
                                                  {words({"a", "dog", "ran", "away"}), words({"the", "dog", "ran", "fast"})},
                                                  {words({"a", "cat", "sat", "down"})}};
    const CiderResult got = cider(cands, refs);

    const std::vector<double> want = th::oracle::cider_brute_per_item(cands, refs);
    double corpus = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(got.per_item[i] - want[i]) <= 1e-9);
        corpus += want[i];
    }
    CHECK(std::abs(got.score - 10.0 * corpus / 3.0) <= 1e-9);
}

TEST_CASE("cider per-item scores only move through df", "[metrics]") {
    const std::vector<TokenSeq> cands{words({"the", "cat", "sat", "down"}), words({"a", "dog", "ran", "fast"})};
    const std::vector<std::vector<TokenSeq>> refs{{words({"the", "cat", "sat", "down"})},
                                                  {words({"a", "dog", "ran", "home"})}};
    const CiderResult base = cider(cands, refs);

    // changing a candidate does not touch df, so the other item's score is unchanged
    std::vector<TokenSeq> cands2 = cands;
    cands2[1] = words({"totally", "different", "words", "here"});
    const CiderResult changed = cider(cands2, refs);
    CHECK(changed.per_item[0] == base.per_item[0]);
    CHECK(changed.per_item[1] != base.per_item[1]);

    // permutation invariance of the corpus score
    const CiderResult swapped = cider({cands[1], cands[0]}, {refs[1], refs[0]});
    CHECK(swapped.score == Catch::Approx(base.score).margin(1e-12));
}

TEST_CASE("nearest neighbors basics", "[metrics]") {
    EmbeddingTable t;
    t.add("x", {1.0, 0.0});
    t.add("y", {0.0, 1.0});
    t.add("xy", {1.0, 1.0});

    auto by_row = nearest_neighbors(RealArray({2}, {1.0, 0.0}), t, 3);
    REQUIRE(by_row.size() == 3);
    CHECK(by_row[0].first == "x");
    CHECK(by_row[0].second == Catch::Approx(1.0).margin(1e-12));
    CHECK(by_row[2].first == "y");
    CHECK(by_row[2].second == Catch::Approx(0.0).margin(1e-12));  // orthogonal row scores zero

    auto by_token = nearest_neighbors(std::string("y"), t, 2);
    CHECK(by_token[0].first == "y");

    REQUIRE_THROWS_WITH(nearest_neighbors(RealArray({2}, {0.0, 0.0}), t, 1),
                        Catch::Matchers::ContainsSubstring("zero-norm query"));
    REQUIRE_THROWS_WITH(nearest_neighbors(std::string("y"), t, 9),
                        Catch::Matchers::ContainsSubstring("k exceeds"));
    EmbeddingTable with_zero = t;
    with_zero.add("zero", {0.0, 0.0});
    REQUIRE_THROWS_WITH(nearest_neighbors(std::string("y"), with_zero, 2),
                        Catch::Matchers::ContainsSubstring("zero-norm table row 'zero'"));
}

TEST_CASE("nearest neighbors agree with a full sort", "[metrics]") {
    th::SplitMix64 rng(13);
    EmbeddingTable t;
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v(8);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        t.add("w" + std::to_string(i), v);
    }
    RealArray query = th::random_array({8}, rng);
    auto top = nearest_neighbors(query, t, 5);

    auto all = nearest_neighbors(query, t, 50);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(top[i].first == all[i].first);
        CHECK(top[i].second == all[i].second);
    }
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].second >= all[i].second);

    double qnorm = 0.0;
    for (double v : query.data) qnorm += v * v;
    for (const auto& [token, cosine] : all) {
        const std::size_t id = t.id_of(token);
        double dot = 0.0, rnorm = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            dot += query.data[j] * t.vectors.data[id * 8 + j];
            rnorm += t.vectors.data[id * 8 + j] * t.vectors.data[id * 8 + j];
        }
        CHECK(std::abs(cosine - dot / std::sqrt(qnorm * rnorm)) <= 1e-12);
    }
}
