#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ctxrank/error.hpp"
#include "ctxrank/firststage.hpp"
#include "oracles.hpp"

using namespace ctxrank;

namespace {

Document doc(std::string id, std::string body, std::optional<std::string> title = std::nullopt) {
    return Document{std::move(id), std::move(title), std::move(body)};
}

std::vector<std::string> ids_of(const Ranking& r) {
    std::vector<std::string> ids;
    for (const auto& e : r.entries) ids.push_back(e.doc_id);
    return ids;
}

// Random corpora over a small alphabet of non-stopword terms.
std::vector<Document> random_corpus(std::mt19937_64& rng, std::size_t max_docs) {
    static const std::vector<std::string> words{"x", "y", "z", "b", "c", "d", "e", "f"};
    std::vector<Document> docs;
    std::size_t n = 1 + rng() % max_docs;
    for (std::size_t i = 0; i < n; ++i) {
        std::string body;
        for (std::size_t w = rng() % 14; w > 0; --w) body += words[rng() % words.size()] + " ";
        std::optional<std::string> title;
        if (rng() % 3 == 0) title = words[rng() % words.size()];
        char id[16];
        std::snprintf(id, sizeof id, "D%02zu", n - 1 - i);  // ids not in input order
        docs.push_back(doc(id, body, title));
    }
    return docs;
}

}  // namespace

TEST(Index, CountsTermsAndDocs) {
    std::vector<Document> docs{doc("d1", "x y x"), doc("d2", "y z")};
    auto index = build_index(docs);
    EXPECT_EQ(index.doc_count(), 2u);
    EXPECT_EQ(index.df("x"), 1u);
    EXPECT_EQ(index.df("y"), 2u);
    ASSERT_EQ(index.postings("x").size(), 1u);
    EXPECT_EQ(index.postings("x")[0].positions.size(), 2u);
    EXPECT_EQ(index.df("absent"), 0u);
    EXPECT_DOUBLE_EQ(index.avg_doc_length(), 2.5);
}

TEST(Index, TitleTermsAreIndexed) {
    std::vector<Document> docs{doc("d1", "", "x")};
    auto index = build_index(docs);
    EXPECT_EQ(index.df("x"), 1u);
    EXPECT_EQ(document_terms(docs[0]), std::vector<std::string>{"x"});
}

TEST(Index, EmptyCorpusIsAnError) {
    std::vector<Document> none;
    EXPECT_THROW(build_index(none), DataError);
}

TEST(Index, SnapshotRoundTrip) {
    std::vector<Document> docs{doc("d1", "air traffic controllers"), doc("d2", "traffic air", "pay")};
    auto index = build_index(docs);
    std::stringstream buf;
    index.save(buf);
    auto back = InvertedIndex::load(buf);
    EXPECT_EQ(back.doc_count(), 2u);
    EXPECT_EQ(back.df("traffic"), 2u);
    EXPECT_EQ(ids_of(retrieve_bm25(back, "air pay", 10)), ids_of(retrieve_bm25(index, "air pay", 10)));
    std::stringstream junk("not an index");
    EXPECT_THROW(InvertedIndex::load(junk), DataError);
}

TEST(Bm25, SingleDocumentHandValue) {
    std::vector<Document> docs{doc("d1", "x x y")};
    auto index = build_index(docs);
    auto r = retrieve_bm25(index, "x", 10);
    ASSERT_EQ(r.entries.size(), 1u);
    EXPECT_NEAR(r.entries[0].score, std::log(1.0 + 0.5 / 1.5) * 1.375, 1e-12);
}

TEST(Bm25, AbsentTermGivesEmptyRanking) {
    std::vector<Document> docs{doc("d1", "x y")};
    auto index = build_index(docs);
    EXPECT_TRUE(retrieve_bm25(index, "zebra", 10).entries.empty());
}

TEST(Bm25, TiesOrderByDocId) {
    std::vector<Document> docs{doc("d2", "x y"), doc("d1", "x y"), doc("d3", "z")};
    auto index = build_index(docs);
    EXPECT_EQ(ids_of(retrieve_bm25(index, "x", 10)), (std::vector<std::string>{"d1", "d2"}));
}

TEST(Bm25, InvalidQueries) {
    std::vector<Document> docs{doc("d1", "x y")};
    auto index = build_index(docs);
    EXPECT_THROW(retrieve_bm25(index, "x", 0), UsageError);
    EXPECT_THROW(retrieve_bm25(index, "the of ?", 10), DataError);
}

TEST(Bm25, MonotoneInTermFrequency) {
    Bm25Params p;
    double prev = 0;
    for (int tf = 0; tf <= 50; ++tf) {
        double w = bm25_term_weight(tf, 20, 15, p);
        EXPECT_GE(w, prev);
        prev = w;
    }
}

TEST(Bm25, UnrelatedDocumentShiftsIdfOnly) {
    std::vector<Document> docs{doc("d1", "x x y"), doc("d2", "y z")};
    auto before = retrieve_bm25(build_index(docs), "x", 10);
    docs.push_back(doc("d3", "b c"));
    auto after = retrieve_bm25(build_index(docs), "x", 10);
    ASSERT_EQ(after.entries.size(), 1u);
    EXPECT_GT(after.entries[0].score, before.entries[0].score);
    auto expect = oracle::bm25(docs, "x");
    EXPECT_NEAR(after.entries[0].score, expect[0].score, 1e-12);
}

TEST(Bm25, MatchesBruteForce) {
    std::mt19937_64 rng(21);
    const std::vector<std::string> words{"x", "y", "z", "b", "c", "d", "e", "f", "q"};
    for (int trial = 0; trial < 200; ++trial) {
        auto docs = random_corpus(rng, 20);
        auto index = build_index(docs);
        std::string query;
        for (std::size_t w = 1 + rng() % 4; w > 0; --w) query += words[rng() % words.size()] + " ";
        auto got = retrieve_bm25(index, query, 100);
        auto want = oracle::bm25(docs, query);
        ASSERT_EQ(got.entries.size(), want.size()) << query;
        for (std::size_t i = 0; i < want.size(); ++i) {
            EXPECT_EQ(got.entries[i].doc_id, want[i].doc_id) << query;
            EXPECT_NEAR(got.entries[i].score, want[i].score, 1e-9);
        }
    }
}

TEST(Sdm, WindowCounts) {
    std::vector<std::uint32_t> a{0, 5}, b{1, 3, 9};
    EXPECT_EQ(count_ordered(a, b, 1), 1u);
    EXPECT_EQ(count_ordered(a, b, 4), 3u);  // 0->1, 0->3, 5->9
    EXPECT_EQ(count_unordered(a, b, 3), 2u);  // |0-1|, |5-3|
    EXPECT_EQ(count_unordered(a, b, 1), 0u);
}

TEST(Sdm, OrderedFeaturePrefersPhraseOrder) {
    std::vector<Document> docs{doc("d1", "air traffic"), doc("d2", "traffic air")};
    auto index = build_index(docs);
    auto r = retrieve_sdm(index, "air traffic", 10, {0.5, 0.5, 0.0, 1, 8});
    EXPECT_EQ(ids_of(r), (std::vector<std::string>{"d1", "d2"}));
    EXPECT_GT(r.entries[0].score, r.entries[1].score);
}

TEST(Sdm, UnorderedFeatureTies) {
    std::vector<Document> docs{doc("d2", "traffic air"), doc("d1", "air traffic")};
    auto index = build_index(docs);
    auto r = retrieve_sdm(index, "air traffic", 10, {0.0, 0.0, 1.0, 1, 2});
    ASSERT_EQ(r.entries.size(), 2u);
    EXPECT_EQ(ids_of(r), (std::vector<std::string>{"d1", "d2"}));
    EXPECT_DOUBLE_EQ(r.entries[0].score, r.entries[1].score);
    EXPECT_GT(r.entries[0].score, 0.0);
}

TEST(Sdm, UnigramOnlyWeightsReproduceBm25) {
    std::mt19937_64 rng(8);
    const std::vector<std::string> words{"x", "y", "z", "b", "c"};
    for (int trial = 0; trial < 100; ++trial) {
        auto docs = random_corpus(rng, 20);
        auto index = build_index(docs);
        std::string query = words[rng() % 5] + " " + words[rng() % 5] + " " + words[rng() % 5];
        auto bm = retrieve_bm25(index, query, 50);
        auto sd = retrieve_sdm(index, query, 50, {1.0, 0.0, 0.0, 1, 8});
        EXPECT_EQ(ids_of(sd), ids_of(bm)) << query;
    }
}

TEST(Sdm, SingleTermFallsBackToBm25) {
    std::vector<Document> docs{doc("d1", "x y"), doc("d2", "x")};
    auto index = build_index(docs);
    auto r = retrieve_sdm(index, "x", 10);
    EXPECT_EQ(r.run_tag, sdm_fallback_tag);
    EXPECT_EQ(r.entries, retrieve_bm25(index, "x", 10).entries);
}

TEST(Sdm, InvalidWeights) {
    std::vector<Document> docs{doc("d1", "x y")};
    auto index = build_index(docs);
    EXPECT_THROW(retrieve_sdm(index, "x y", 10, {0.5, 0.5, 0.5, 1, 8}), UsageError);
    EXPECT_THROW(retrieve_sdm(index, "x y", 10, {1.2, -0.2, 0.0, 1, 8}), UsageError);
}

TEST(Sdm, MatchesBruteForce) {
    std::mt19937_64 rng(34);
    const std::vector<std::string> words{"x", "y", "z", "b", "c", "d"};
    for (int trial = 0; trial < 200; ++trial) {
        auto docs = random_corpus(rng, 20);
        auto index = build_index(docs);
        std::string query;
        for (std::size_t w = 1 + rng() % 4; w > 0; --w) query += words[rng() % words.size()] + " ";
        SdmParams p{0.6, 0.25, 0.15, static_cast<std::uint32_t>(1 + rng() % 3),
                    static_cast<std::uint32_t>(2 + rng() % 8)};
        auto got = retrieve_sdm(index, query, 100, p);
        auto want = oracle::sdm(docs, query, p.unigram_weight, p.ordered_weight, p.unordered_weight,
                                p.ordered_window, p.unordered_window);
        ASSERT_EQ(got.entries.size(), want.size()) << query;
        for (std::size_t i = 0; i < want.size(); ++i) {
            EXPECT_EQ(got.entries[i].doc_id, want[i].doc_id) << query;
            EXPECT_NEAR(got.entries[i].score, want[i].score, 1e-9);
        }
    }
}
