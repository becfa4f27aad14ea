#include "ctxrank/passage.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ctxrank/error.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

std::size_t passage_count(std::size_t word_count, std::size_t window, std::size_t stride) {
    if (word_count <= window) return 1;
    return (word_count - window + stride - 1) / stride + 1;
}

std::vector<Passage> segment_document(const Document& doc, const SegmentOptions& options,
                                      bool* capped) {
    if (options.stride < 1 || options.window < options.stride) {
        throw UsageError("segmentation needs window >= stride >= 1");
    }
    if (capped) *capped = false;
    auto words = split_whitespace(doc.body);
    const std::string title = doc.title.value_or("");
    const bool has_title = !split_whitespace(title).empty();
    if (words.empty() && !has_title) {
        throw DataError("document \"" + doc.doc_id + "\" has no words and no title");
    }

    std::vector<Passage> out;
    if (words.empty()) {
        out.push_back(Passage{doc.doc_id, 0, {0, 0}, title, std::nullopt});
        return out;
    }
    std::size_t n = passage_count(words.size(), options.window, options.stride);
    if (options.max_passages > 0 && n > options.max_passages) {
        n = options.max_passages;
        if (capped) *capped = true;
    }
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t start = i * options.stride;
        std::size_t end = std::min(start + options.window, words.size());
        std::string text;
        if (options.prepend_title && has_title) text = title;
        for (std::size_t w = start; w < end; ++w) {
            if (!text.empty()) text += ' ';
            text += words[w];
        }
        out.push_back(Passage{doc.doc_id, i, {start, end}, std::move(text), std::nullopt});
    }
    return out;
}

std::vector<Passage> label_passages(std::vector<Passage> passages, bool doc_is_relevant) {
    for (auto& p : passages) p.label = doc_is_relevant ? 1 : 0;
    return passages;
}

AggregationMode parse_aggregation_mode(const std::string& name) {
    auto n = to_lower_ascii(name);
    if (n == "firstp" || n == "first") return AggregationMode::first;
    if (n == "maxp" || n == "max") return AggregationMode::max;
    if (n == "sump" || n == "sum") return AggregationMode::sum;
    throw UsageError("unknown aggregation mode \"" + name + "\" (FirstP, MaxP or SumP)");
}

std::string aggregation_name(AggregationMode mode) {
    switch (mode) {
        case AggregationMode::first: return "FirstP";
        case AggregationMode::max: return "MaxP";
        case AggregationMode::sum: return "SumP";
    }
    return "?";
}

double aggregate_scores(std::span<const double> passage_scores, AggregationMode mode) {
    if (passage_scores.empty()) throw DataError("cannot aggregate an empty passage score list");
    switch (mode) {
        case AggregationMode::first:
            return passage_scores.front();
        case AggregationMode::max:
            return *std::max_element(passage_scores.begin(), passage_scores.end());
        case AggregationMode::sum:
            return std::accumulate(passage_scores.begin(), passage_scores.end(), 0.0);
    }
    throw UsageError("unhandled aggregation mode");
}

std::vector<Passage> downsample_negatives(std::vector<Passage> passages, double ratio,
                                          std::uint64_t seed) {
    if (ratio < 0) throw UsageError("negative ratio must be non-negative");
    std::vector<std::size_t> negatives;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < passages.size(); ++i) {
        if (passages[i].label.value_or(0) > 0) {
            ++positives;
        } else {
            negatives.push_back(i);
        }
    }
    auto keep_n = static_cast<std::size_t>(ratio * static_cast<double>(std::max<std::size_t>(positives, 1)));
    if (negatives.size() <= keep_n) return passages;
    std::mt19937_64 rng(seed);
    std::shuffle(negatives.begin(), negatives.end(), rng);
    std::vector<bool> drop(passages.size(), false);
    for (std::size_t i = keep_n; i < negatives.size(); ++i) drop[negatives[i]] = true;
    std::vector<Passage> out;
    out.reserve(positives + keep_n);
    for (std::size_t i = 0; i < passages.size(); ++i)
        if (!drop[i]) out.push_back(std::move(passages[i]));
    return out;
}

void write_passages_jsonl(std::ostream& out, std::span<const Passage> passages) {
    for (const auto& p : passages) {
        nlohmann::json rec;
        rec["doc_id"] = p.doc_id;
        rec["passage_index"] = p.passage_index;
        rec["span"] = {p.span.start, p.span.end};
        rec["text"] = p.text;
        rec["label"] = p.label ? nlohmann::json(*p.label) : nlohmann::json(nullptr);
        out << rec.dump() << '\n';
    }
}

std::vector<Passage> read_passages_jsonl(std::istream& in) {
    std::vector<Passage> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto rec = nlohmann::json::parse(line);
            Passage p;
            p.doc_id = rec.at("doc_id").get<std::string>();
            p.passage_index = rec.at("passage_index").get<std::size_t>();
            p.span = {rec.at("span").at(0).get<std::size_t>(), rec.at("span").at(1).get<std::size_t>()};
            p.text = rec.at("text").get<std::string>();
            if (rec.contains("label") && !rec["label"].is_null()) p.label = rec["label"].get<int>();
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("passage line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace ctxrank
