#include "ctxrank/firststage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

namespace {
constexpr int snapshot_version = 1;
}

std::vector<std::string> document_terms(const Document& doc) {
    std::string text = doc.title ? *doc.title + " " + doc.body : doc.body;
    return normalize_text(text);
}

InvertedIndex build_index(std::span<const Document> docs) {
    if (docs.empty()) throw DataError("cannot index an empty document stream");
    InvertedIndex index;
    for (const auto& doc : docs) {
        auto internal = static_cast<std::uint32_t>(index.doc_ids_.size());
        if (!index.id_map_.emplace(doc.doc_id, internal).second) {
            throw DataError("duplicate document id \"" + doc.doc_id + "\"");
        }
        index.doc_ids_.push_back(doc.doc_id);
        auto terms = document_terms(doc);
        index.doc_lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
        std::map<std::string, std::vector<std::uint32_t>> local;
        for (std::size_t pos = 0; pos < terms.size(); ++pos) {
            local[terms[pos]].push_back(static_cast<std::uint32_t>(pos));
        }
        for (auto& [term, positions] : local) {
            index.postings_[term].push_back(Posting{internal, std::move(positions)});
        }
    }
    index.finalize();
    return index;
}

void InvertedIndex::finalize() {
    double total = 0.0;
    for (auto len : doc_lengths_) total += len;
    avg_len_ = doc_lengths_.empty() ? 0.0 : total / static_cast<double>(doc_lengths_.size());
}

long InvertedIndex::internal_id(const std::string& doc_id) const {
    auto it = id_map_.find(doc_id);
    return it == id_map_.end() ? -1 : static_cast<long>(it->second);
}

std::span<const Posting> InvertedIndex::postings(const std::string& term) const {
    auto it = postings_.find(term);
    if (it == postings_.end()) return {};
    return it->second;
}

void InvertedIndex::save(std::ostream& out) const {
    nlohmann::json j;
    j["format"] = "ctxrank-index";
    j["version"] = snapshot_version;
    j["doc_ids"] = doc_ids_;
    j["doc_lengths"] = doc_lengths_;
    nlohmann::json postings = nlohmann::json::object();
    for (const auto& [term, list] : postings_) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : list) arr.push_back({p.doc, p.positions});
        postings[term] = std::move(arr);
    }
    j["postings"] = std::move(postings);
    out << j.dump() << '\n';
}

InvertedIndex InvertedIndex::load(std::istream& in) {
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed index snapshot: ") + e.what());
    }
    if (j.value("format", "") != "ctxrank-index") throw DataError("not an index snapshot");
    if (j.value("version", 0) != snapshot_version) {
        throw DataError("unsupported index snapshot version " + std::to_string(j.value("version", 0)));
    }
    InvertedIndex index;
    try {
        index.doc_ids_ = j.at("doc_ids").get<std::vector<std::string>>();
        index.doc_lengths_ = j.at("doc_lengths").get<std::vector<std::uint32_t>>();
        for (const auto& [term, arr] : j.at("postings").items()) {
            auto& list = index.postings_[term];
            for (const auto& p : arr) {
                list.push_back(Posting{p.at(0).get<std::uint32_t>(),
                                       p.at(1).get<std::vector<std::uint32_t>>()});
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed index snapshot: ") + e.what());
    }
    if (index.doc_ids_.size() != index.doc_lengths_.size()) {
        throw DataError("index snapshot doc tables disagree in size");
    }
    for (std::uint32_t i = 0; i < index.doc_ids_.size(); ++i) {
        if (!index.id_map_.emplace(index.doc_ids_[i], i).second) {
            throw DataError("index snapshot repeats doc id " + index.doc_ids_[i]);
        }
    }
    index.finalize();
    return index;
}

void InvertedIndex::save(const std::filesystem::path& path) const {
    write_file_atomic(path, [&](std::ostream& out) { save(out); });
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open index \"" + path.string() + "\"");
    return load(in);
}

double bm25_idf(std::size_t doc_count, std::size_t df) {
    auto n = static_cast<double>(doc_count);
    auto d = static_cast<double>(df);
    return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

double bm25_term_weight(double tf, double doc_len, double avg_len, const Bm25Params& params) {
    double norm = avg_len > 0.0 ? doc_len / avg_len : 0.0;
    return tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm));
}

namespace {

std::vector<std::string> query_terms(const std::string& query) {
    auto terms = normalize_text(query);
    if (terms.empty()) {
        throw DataError("query \"" + query + "\" has no index terms after normalization");
    }
    return terms;
}

Ranking finish(const InvertedIndex& index, const std::string& query_id_hint,
               const std::map<std::uint32_t, double>& scores, std::size_t k, std::string tag) {
    std::vector<RankedEntry> entries;
    entries.reserve(scores.size());
    for (const auto& [doc, s] : scores) entries.push_back({index.external_id(doc), s});
    auto r = Ranking::from_scores(query_id_hint, std::move(entries), std::move(tag));
    r.truncate(k);
    return r;
}

// Unigram BM25 accumulated term-at-a-time in query-term order.
std::map<std::uint32_t, double> unigram_scores(const InvertedIndex& index,
                                               const std::vector<std::string>& terms,
                                               const Bm25Params& params) {
    std::map<std::uint32_t, double> acc;
    for (const auto& t : terms) {
        auto list = index.postings(t);
        if (list.empty()) continue;
        double idf = bm25_idf(index.doc_count(), list.size());
        for (const auto& p : list) {
            acc[p.doc] += idf * bm25_term_weight(static_cast<double>(p.positions.size()),
                                                 index.doc_length(p.doc), index.avg_doc_length(),
                                                 params);
        }
    }
    return acc;
}

}  // namespace

Ranking retrieve_bm25(const InvertedIndex& index, const std::string& query, std::size_t k,
                      const Bm25Params& params) {
    if (k < 1) throw UsageError("retrieval depth must be at least 1");
    auto terms = query_terms(query);
    return finish(index, "", unigram_scores(index, terms, params), k, "bm25");
}

std::size_t count_ordered(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                          std::uint32_t window) {
    std::size_t n = 0;
    for (auto pa : a) {
        auto lo = std::lower_bound(b.begin(), b.end(), pa + 1);
        auto hi = std::upper_bound(b.begin(), b.end(), pa + window);
        if (hi > lo) n += static_cast<std::size_t>(hi - lo);
    }
    return n;
}

std::size_t count_unordered(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                            std::uint32_t width) {
    if (width < 2) return 0;
    const std::uint32_t reach = width - 1;
    std::size_t n = 0;
    for (auto pa : a) {
        auto from = pa >= reach ? pa - reach : 0;
        auto lo = std::lower_bound(b.begin(), b.end(), from);
        auto hi = std::upper_bound(b.begin(), b.end(), pa + reach);
        for (auto it = lo; it != hi; ++it)
            if (*it != pa) ++n;
    }
    return n;
}

namespace {

// Per-document window-match counts for one query term pair, restricted to
// documents containing both terms.
std::map<std::uint32_t, std::size_t> pair_counts(const InvertedIndex& index, const std::string& a,
                                                 const std::string& b, bool ordered,
                                                 std::uint32_t window) {
    std::map<std::uint32_t, std::size_t> counts;
    auto la = index.postings(a);
    auto lb = index.postings(b);
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < la.size() && j < lb.size()) {
        if (la[i].doc < lb[j].doc) {
            ++i;
        } else if (lb[j].doc < la[i].doc) {
            ++j;
        } else {
            std::size_t c = ordered ? count_ordered(la[i].positions, lb[j].positions, window)
                                    : count_unordered(la[i].positions, lb[j].positions, window);
            if (c > 0) counts[la[i].doc] = c;
            ++i;
            ++j;
        }
    }
    return counts;
}

}  // namespace

Ranking retrieve_sdm(const InvertedIndex& index, const std::string& query, std::size_t k,
                     const SdmParams& sdm, const Bm25Params& params) {
    if (k < 1) throw UsageError("retrieval depth must be at least 1");
    const double lt = sdm.unigram_weight;
    const double lo = sdm.ordered_weight;
    const double lu = sdm.unordered_weight;
    if (lt < 0 || lo < 0 || lu < 0 || std::abs(lt + lo + lu - 1.0) > 1e-9) {
        throw UsageError("SDM weights must be non-negative and sum to 1");
    }
    auto terms = query_terms(query);
    if (terms.size() < 2) {
        auto r = retrieve_bm25(index, query, k, params);
        r.run_tag = sdm_fallback_tag;
        return r;
    }
    auto unigram = unigram_scores(index, terms, params);
    std::map<std::uint32_t, double> ordered;
    std::map<std::uint32_t, double> unordered;
    auto accumulate = [&](std::map<std::uint32_t, double>& into,
                          const std::map<std::uint32_t, std::size_t>& counts) {
        if (counts.empty()) return;
        double idf = bm25_idf(index.doc_count(), counts.size());
        for (const auto& [doc, tf] : counts) {
            into[doc] += idf * bm25_term_weight(static_cast<double>(tf), index.doc_length(doc),
                                                index.avg_doc_length(), params);
        }
    };
    for (std::size_t i = 0; i + 1 < terms.size(); ++i) {
        accumulate(ordered, pair_counts(index, terms[i], terms[i + 1], true, sdm.ordered_window));
        accumulate(unordered, pair_counts(index, terms[i], terms[i + 1], false, sdm.unordered_window));
    }
    std::map<std::uint32_t, double> scores;
    for (const auto& [doc, u] : unigram) {
        double o = ordered.count(doc) ? ordered.at(doc) : 0.0;
        double w = unordered.count(doc) ? unordered.at(doc) : 0.0;
        scores[doc] = lt * u + lo * o + lu * w;
    }
    return finish(index, "", scores, k, "sdm");
}

}  // namespace ctxrank
