#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctxrank/corpus.hpp"

namespace ctxrank {

/// Shape of a generated test collection. Every topic owns two unique topic
/// terms. Non-relevant documents repeat them often; relevant documents use
/// them sparingly but carry an answer phrase late in the body, so lexical
/// scoring is misled while a passage-level reader can find the evidence.
struct SyntheticOptions {
    std::size_t topics = 50;
    std::size_t docs_per_topic = 10;
    std::size_t relevant_per_topic = 3;
    std::size_t min_words = 260;
    std::size_t max_words = 300;
    /// Earliest word offset of the answer phrase. With the default 150/75
    /// windows, offsets in [225, 300) fall in exactly one passage, the third.
    std::size_t answer_start = 225;
    std::size_t lexicon_size = 400;
    std::uint64_t seed = 7;
};

struct SyntheticCollection {
    std::vector<Document> docs;
    std::vector<TopicQuery> topics;
    Judgments qrels;
    /// Words of the answer phrase shared by all relevant documents (after
    /// the topic terms).
    std::vector<std::string> marker;
    /// Word offset of the answer phrase in each relevant document's body.
    std::map<std::string, std::size_t> answer_offset;
};

SyntheticCollection make_synthetic_collection(const SyntheticOptions& options = {});

/// Writes corpus.jsonl, topics.txt and qrels.txt into `dir`.
void write_synthetic_collection(const SyntheticCollection& collection, const std::filesystem::path& dir);

}  // namespace ctxrank
