#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

namespace ctxrank {

struct Document {
    std::string doc_id;
    std::optional<std::string> title;
    std::string body;

    bool operator==(const Document&) const = default;
};

enum class CorpusFormat { jsonl, trectext };

CorpusFormat parse_corpus_format(const std::string& name);

/// Single-pass reader over a corpus file. Records come back in file order with
/// their text untouched; malformed records and repeated ids raise DataError
/// naming the offending line.
class CorpusReader {
  public:
    CorpusReader(const std::filesystem::path& path, CorpusFormat format);
    CorpusReader(std::istream& in, CorpusFormat format, std::string source_name = "<stream>");

    std::optional<Document> next();

  private:
    std::optional<Document> next_jsonl();
    std::optional<Document> next_trectext();
    Document checked(Document doc, std::size_t line) const;

    std::ifstream owned_;
    std::istream* in_;
    CorpusFormat format_;
    std::string source_;
    std::size_t line_no_ = 0;
    mutable std::unordered_set<std::string> seen_;
};

std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format);
std::vector<Document> read_corpus(std::istream& in, CorpusFormat format);
void write_corpus_jsonl(std::ostream& out, std::span<const Document> docs);

struct TopicQuery {
    std::string query_id;
    std::string title;
    std::optional<std::string> description;
    std::optional<std::string> narrative;
};

/// Parses `<top>` blocks carrying `<num>`, `<title>`, `<desc>` and `<narr>`
/// tags. Closing tags are optional, as in the classic TREC topic files.
std::vector<TopicQuery> read_topics(std::istream& in);
std::vector<TopicQuery> load_topics(const std::filesystem::path& path);
void write_topics(std::ostream& out, std::span<const TopicQuery> topics);

/// Graded relevance judgments keyed by (query id, doc id).
class Judgments {
  public:
    void set(const std::string& query_id, const std::string& doc_id, int grade);

    /// Unjudged pairs have grade 0.
    int grade(const std::string& query_id, const std::string& doc_id) const;
    std::optional<int> find(const std::string& query_id, const std::string& doc_id) const;

    const std::map<std::string, int>& for_query(const std::string& query_id) const;
    bool has_query(const std::string& query_id) const;
    std::size_t relevant_count(const std::string& query_id) const;
    std::vector<std::string> query_ids() const;
    std::size_t size() const;

  private:
    std::map<std::string, std::map<std::string, int>> grades_;
};

Judgments read_qrels(std::istream& in);
Judgments load_qrels(const std::filesystem::path& path);
void write_qrels(std::ostream& out, const Judgments& judgments);

struct RankedEntry {
    std::string doc_id;
    double score = 0.0;

    bool operator==(const RankedEntry&) const = default;
};

/// One query's ranked output. Entries are ordered by score descending with
/// ties broken by doc id ascending; doc ids are unique.
struct Ranking {
    std::string query_id;
    std::vector<RankedEntry> entries;
    std::string run_tag;

    /// Sorts `entries` into canonical order and rejects duplicate doc ids.
    static Ranking from_scores(std::string query_id, std::vector<RankedEntry> entries,
                               std::string run_tag);

    /// Keeps the first `k` entries.
    void truncate(std::size_t k);
};

/// Canonical entry order used everywhere a ranking is produced.
bool ranks_before(const RankedEntry& a, const RankedEntry& b);

/// Writes six-column run lines with ranks rewritten 1..n and scores printed
/// with six decimal digits.
void write_run(std::ostream& out, std::span<const Ranking> rankings);
void save_run(const std::filesystem::path& path, std::span<const Ranking> rankings);

/// Reads run lines, keeping file order. Rank columns must count 1..n per query.
std::vector<Ranking> read_run(std::istream& in);
std::vector<Ranking> load_run(const std::filesystem::path& path);

struct FoldPlan {
    int k = 0;
    std::map<std::string, int> assignment;

    std::vector<std::string> queries_in_fold(int fold) const;
    std::vector<std::string> queries_outside_fold(int fold) const;
    int fold_of(const std::string& query_id) const;
};

/// Shuffles the ids with a seeded generator and deals them round-robin.
FoldPlan make_folds(std::span<const std::string> query_ids, int k, std::uint64_t seed);

void write_fold_plan(std::ostream& out, const FoldPlan& plan);
FoldPlan read_fold_plan(std::istream& in);

}  // namespace ctxrank
