#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxrank/corpus.hpp"

namespace ctxrank {

/// Half-open range of document word offsets.
struct WordSpan {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    bool operator==(const WordSpan&) const = default;
};

struct Passage {
    std::string doc_id;
    std::size_t passage_index = 0;
    WordSpan span;
    std::string text;
    std::optional<int> label;
};

struct SegmentOptions {
    std::size_t window = 150;
    std::size_t stride = 75;
    bool prepend_title = false;
    /// Passages past this count are dropped; 0 disables the cap.
    std::size_t max_passages = 30;
};

/// Number of windows needed to cover `word_count` words.
std::size_t passage_count(std::size_t word_count, std::size_t window, std::size_t stride);

/// Cuts the body into windows starting at 0, stride, 2*stride, ... and stops at
/// the first window reaching the end of the document. Words are whitespace
/// tokens. With `prepend_title` the title is put in front of every passage
/// text without taking window slots. `capped` is set when the passage cap
/// removed windows.
std::vector<Passage> segment_document(const Document& doc, const SegmentOptions& options = {},
                                      bool* capped = nullptr);

/// Every passage inherits the document label.
std::vector<Passage> label_passages(std::vector<Passage> passages, bool doc_is_relevant);

enum class AggregationMode { first, max, sum };

AggregationMode parse_aggregation_mode(const std::string& name);
std::string aggregation_name(AggregationMode mode);

/// Document score from passage scores given in passage order.
double aggregate_scores(std::span<const double> passage_scores, AggregationMode mode);

/// Keeps all positives and at most `ratio` negatives per positive, chosen
/// with a seeded shuffle; original relative order is preserved. With no
/// positives, `ratio` negatives are kept.
std::vector<Passage> downsample_negatives(std::vector<Passage> passages, double ratio,
                                          std::uint64_t seed);

void write_passages_jsonl(std::ostream& out, std::span<const Passage> passages);
std::vector<Passage> read_passages_jsonl(std::istream& in);

}  // namespace ctxrank
