#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxrank/corpus.hpp"

namespace ctxrank {

struct Posting {
    std::uint32_t doc = 0;
    std::vector<std::uint32_t> positions;
};

/// Positional inverted index over normalized (stopped, stemmed) terms of
/// title + body. Internal doc ids follow input order.
class InvertedIndex {
  public:
    std::size_t doc_count() const { return doc_ids_.size(); }
    double avg_doc_length() const { return avg_len_; }
    std::uint32_t doc_length(std::uint32_t doc) const { return doc_lengths_.at(doc); }
    const std::string& external_id(std::uint32_t doc) const { return doc_ids_.at(doc); }
    /// Returns -1 when the id is unknown.
    long internal_id(const std::string& doc_id) const;

    /// Empty span for unknown terms.
    std::span<const Posting> postings(const std::string& term) const;
    std::size_t df(const std::string& term) const { return postings(term).size(); }
    std::size_t term_count() const { return postings_.size(); }

    void save(std::ostream& out) const;
    static InvertedIndex load(std::istream& in);
    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(const std::filesystem::path& path);

  private:
    friend InvertedIndex build_index(std::span<const Document> docs);
    void finalize();

    std::unordered_map<std::string, std::vector<Posting>> postings_;
    std::vector<std::uint32_t> doc_lengths_;
    std::vector<std::string> doc_ids_;
    std::unordered_map<std::string, std::uint32_t> id_map_;
    double avg_len_ = 0.0;
};

InvertedIndex build_index(std::span<const Document> docs);

/// Index terms of a document exactly as build_index sees them.
std::vector<std::string> document_terms(const Document& doc);

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

/// idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))
double bm25_idf(std::size_t doc_count, std::size_t df);
double bm25_term_weight(double tf, double doc_len, double avg_len, const Bm25Params& params);

Ranking retrieve_bm25(const InvertedIndex& index, const std::string& query, std::size_t k,
                      const Bm25Params& params = {});

struct SdmParams {
    double unigram_weight = 0.85;
    double ordered_weight = 0.10;
    double unordered_weight = 0.05;
    /// Maximum forward gap for the ordered feature; 1 means exact adjacency.
    std::uint32_t ordered_window = 1;
    /// Width of the unordered window; a pair at distance d matches when d < width.
    std::uint32_t unordered_window = 8;
};

inline constexpr const char* sdm_fallback_tag = "sdm-fallback-bm25";

/// Ordered matches: position pairs with 1 <= pos(b) - pos(a) <= window.
std::size_t count_ordered(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                          std::uint32_t window);
/// Unordered matches: position pairs with 1 <= |pos(a) - pos(b)| < width.
std::size_t count_unordered(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                            std::uint32_t width);

Ranking retrieve_sdm(const InvertedIndex& index, const std::string& query, std::size_t k,
                     const SdmParams& sdm = {}, const Bm25Params& params = {});

}  // namespace ctxrank
