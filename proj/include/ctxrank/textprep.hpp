#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ctxrank/corpus.hpp"

namespace ctxrank {

/// Splits on whitespace only; punctuation stays attached.
std::vector<std::string> split_whitespace(std::string_view text);

/// Whitespace split followed by detaching every ASCII punctuation character
/// into its own token. No case folding.
std::vector<std::string> word_tokenize(std::string_view text);

bool is_punctuation_token(std::string_view token);
std::string to_lower_ascii(std::string_view text);

/// Splits a string into UTF-8 code points (invalid bytes become one-byte units).
std::vector<std::string> utf8_units(std::string_view text);

/// Subword vocabulary. Ids are dense from 0 and the five reserved tokens
/// always occupy ids 0..4.
class SubwordVocab {
  public:
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;
    static constexpr int cls_id = 2;
    static constexpr int sep_id = 3;
    static constexpr int mask_id = 4;
    static constexpr std::size_t reserved_count = 5;
    static constexpr std::string_view continuation = "##";

    /// `tokens` must start with the reserved entries in id order.
    explicit SubwordVocab(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    /// Returns -1 when absent.
    int id(std::string_view token) const;
    bool contains(std::string_view token) const { return id(token) >= 0; }
    bool is_special(int id) const { return id >= 0 && id < static_cast<int>(reserved_count); }
    const std::vector<std::string>& tokens() const { return tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

std::vector<std::string> reserved_tokens();

/// One token per line; the line number is the id.
void write_vocab(std::ostream& out, const SubwordVocab& vocab);
SubwordVocab read_vocab(std::istream& in);
void save_vocab(const std::filesystem::path& path, const SubwordVocab& vocab);
SubwordVocab load_vocab(const std::filesystem::path& path);

/// Lowercases, word-tokenizes, then segments each word greedily by longest
/// match. A word with any unmatched remainder becomes a single [UNK].
std::vector<int> wordpiece_tokenize(std::string_view text, const SubwordVocab& vocab);

/// Pieces of one (already lowercased) word, or {unk} when unsegmentable.
std::vector<int> wordpiece_word(std::string_view word, const SubwordVocab& vocab);

/// Builds a vocabulary by repeatedly merging the most frequent adjacent pair
/// of word-internal symbols, starting from every character seen.
SubwordVocab build_subword_vocab(std::span<const Document> corpus, std::size_t target_size);
SubwordVocab build_subword_vocab(std::span<const std::string> texts, std::size_t target_size);

const std::unordered_set<std::string>& stopwords();
const std::vector<std::string>& negation_markers();
bool is_stopword(std::string_view word);

/// Porter (1980) suffix stripper. Expects a lowercase ASCII word.
std::string porter_stem(std::string_view word);

/// Lowercases, drops stopwords and punctuation-only tokens, Porter-stems.
std::vector<std::string> normalize_for_index(std::span<const std::string> words);
std::vector<std::string> normalize_text(std::string_view text);

enum class QueryKind { title, desc, desc_keywords, narr, narr_keywords, narr_positive };

QueryKind parse_query_kind(std::string_view name);
std::string_view query_kind_name(QueryKind kind);

struct QueryVariant {
    QueryKind kind;
    std::string text;
};

/// Drops punctuation characters and stopwords from each whitespace word,
/// keeping surface forms.
std::string keyword_text(std::string_view text);

/// Splits into sentences ending at '.', '!' or '?' (terminator included,
/// leading whitespace kept so that concatenation reproduces the input).
std::vector<std::string> split_sentences(std::string_view text);

bool has_negation_marker(std::string_view sentence);

/// Removes every sentence carrying a negation marker.
std::string positive_text(std::string_view text);

QueryVariant make_query_variant(const TopicQuery& topic, QueryKind kind);

}  // namespace ctxrank
