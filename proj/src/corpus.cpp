#include "ctxrank/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"

namespace ctxrank {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string f;
    while (ss >> f) fields.push_back(f);
    return fields;
}

bool blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(),
                       [](unsigned char c) { return std::isspace(c) != 0; });
}

template <typename T>
bool parse_number(const std::string& s, T& value) {
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_double(const std::string& s, double& value) {
    try {
        std::size_t used = 0;
        value = std::stod(s, &used);
        return used == s.size();
    } catch (const std::exception&) {
        return false;
    }
}

std::string where(const std::string& source, std::size_t line) {
    return source + ":" + std::to_string(line);
}

}  // namespace

CorpusFormat parse_corpus_format(const std::string& name) {
    auto n = lower(name);
    if (n == "jsonl") return CorpusFormat::jsonl;
    if (n == "trectext" || n == "trec") return CorpusFormat::trectext;
    throw UsageError("unknown corpus format \"" + name + "\" (expected jsonl or trectext)");
}

// ---------------------------------------------------------------------------
// Corpus

CorpusReader::CorpusReader(const std::filesystem::path& path, CorpusFormat format)
    : owned_(path), in_(&owned_), format_(format), source_(path.string()) {
    if (!owned_) {
        throw DataError("cannot open corpus \"" + path.string() + "\"");
    }
}

CorpusReader::CorpusReader(std::istream& in, CorpusFormat format, std::string source_name)
    : in_(&in), format_(format), source_(std::move(source_name)) {}

std::optional<Document> CorpusReader::next() {
    return format_ == CorpusFormat::jsonl ? next_jsonl() : next_trectext();
}

Document CorpusReader::checked(Document doc, std::size_t line) const {
    if (doc.doc_id.empty()) {
        throw DataError(where(source_, line) + ": empty document id");
    }
    if (doc.body.empty() && (!doc.title || doc.title->empty())) {
        throw DataError(where(source_, line) + ": document \"" + doc.doc_id +
                        "\" has neither body nor title");
    }
    if (!seen_.insert(doc.doc_id).second) {
        throw DataError(where(source_, line) + ": duplicate document id \"" + doc.doc_id + "\"");
    }
    return doc;
}

std::optional<Document> CorpusReader::next_jsonl() {
    std::string line;
    while (std::getline(*in_, line)) {
        ++line_no_;
        if (blank(line)) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(where(source_, line_no_) + ": malformed JSON record (" + e.what() + ")");
        }
        if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string()) {
            throw DataError(where(source_, line_no_) + ": record lacks a string \"id\"");
        }
        Document doc;
        doc.doc_id = rec["id"].get<std::string>();
        if (rec.contains("title") && !rec["title"].is_null()) {
            if (!rec["title"].is_string()) {
                throw DataError(where(source_, line_no_) + ": \"title\" must be a string");
            }
            doc.title = rec["title"].get<std::string>();
        }
        if (rec.contains("body") && !rec["body"].is_null()) {
            if (!rec["body"].is_string()) {
                throw DataError(where(source_, line_no_) + ": \"body\" must be a string");
            }
            doc.body = rec["body"].get<std::string>();
        }
        return checked(std::move(doc), line_no_);
    }
    return std::nullopt;
}

namespace {

// Returns the text between <tag> and </tag> within `block`, if present.
std::optional<std::string> tagged(const std::string& block, const std::string& tag) {
    auto lb = lower(block);
    auto open = lb.find("<" + tag + ">");
    if (open == std::string::npos) return std::nullopt;
    auto start = open + tag.size() + 2;
    auto close = lb.find("</" + tag + ">", start);
    if (close == std::string::npos) return std::nullopt;
    return block.substr(start, close - start);
}

}  // namespace

std::optional<Document> CorpusReader::next_trectext() {
    std::string line;
    std::size_t start_line = 0;
    std::string block;
    bool inside = false;
    while (std::getline(*in_, line)) {
        ++line_no_;
        auto t = lower(trim(line));
        if (!inside) {
            if (t.empty()) continue;
            if (t != "<doc>") {
                throw DataError(where(source_, line_no_) + ": expected <DOC>");
            }
            inside = true;
            start_line = line_no_;
            block.clear();
            continue;
        }
        if (t == "<doc>") {
            throw DataError(where(source_, line_no_) + ": nested <DOC>");
        }
        if (t == "</doc>") {
            Document doc;
            auto docno = tagged(block, "docno");
            if (!docno) {
                throw DataError(where(source_, start_line) + ": <DOC> without <DOCNO>");
            }
            doc.doc_id = trim(*docno);
            if (auto title = tagged(block, "title")) {
                doc.title = trim(*title);
            } else if (auto headline = tagged(block, "headline")) {
                doc.title = trim(*headline);
            }
            if (auto text = tagged(block, "text")) {
                auto body = *text;
                if (!body.empty() && body.front() == '\n') body.erase(0, 1);
                if (!body.empty() && body.back() == '\n') body.pop_back();
                doc.body = body;
            }
            return checked(std::move(doc), start_line);
        }
        block += line;
        block += '\n';
    }
    if (inside) {
        throw DataError(where(source_, start_line) + ": unterminated <DOC>");
    }
    return std::nullopt;
}

std::vector<Document> read_corpus(std::istream& in, CorpusFormat format) {
    CorpusReader reader(in, format);
    std::vector<Document> docs;
    while (auto d = reader.next()) docs.push_back(std::move(*d));
    return docs;
}

std::vector<Document> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    CorpusReader reader(path, format);
    std::vector<Document> docs;
    while (auto d = reader.next()) docs.push_back(std::move(*d));
    return docs;
}

void write_corpus_jsonl(std::ostream& out, std::span<const Document> docs) {
    for (const auto& d : docs) {
        nlohmann::json rec;
        rec["id"] = d.doc_id;
        if (d.title) rec["title"] = *d.title;
        rec["body"] = d.body;
        out << rec.dump() << '\n';
    }
}

// ---------------------------------------------------------------------------
// Topics

namespace {

struct TagHit {
    std::size_t pos;
    std::size_t len;
    std::string name;
    bool closing;
};

std::vector<TagHit> find_topic_tags(const std::string& text) {
    static const std::vector<std::string> names = {"top", "num", "title", "desc", "narr"};
    auto lt = lower(text);
    std::vector<TagHit> hits;
    for (std::size_t i = lt.find('<'); i != std::string::npos; i = lt.find('<', i + 1)) {
        bool closing = i + 1 < lt.size() && lt[i + 1] == '/';
        std::size_t name_start = i + (closing ? 2 : 1);
        for (const auto& n : names) {
            if (lt.compare(name_start, n.size(), n) == 0 && name_start + n.size() < lt.size() &&
                lt[name_start + n.size()] == '>') {
                hits.push_back({i, name_start + n.size() + 1 - i, n, closing});
                break;
            }
        }
    }
    return hits;
}

std::string strip_label(std::string value, std::string_view label) {
    value = trim(value);
    auto lv = lower(value);
    if (lv.rfind(label, 0) == 0) value = value.substr(label.size());
    return trim(value);
}

std::size_t line_of(const std::string& text, std::size_t pos) {
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + pos, '\n'));
}

}  // namespace

std::vector<TopicQuery> read_topics(std::istream& in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    auto hits = find_topic_tags(text);

    std::vector<TopicQuery> topics;
    std::unordered_set<std::string> ids;
    std::size_t cursor = 0;
    std::size_t i = 0;
    auto check_gap = [&](std::size_t from, std::size_t to) {
        if (!trim(std::string_view(text).substr(from, to - from)).empty()) {
            throw DataError("topics line " + std::to_string(line_of(text, from)) +
                            ": text outside a <top> block");
        }
    };
    while (i < hits.size()) {
        const auto& h = hits[i];
        if (h.name != "top" || h.closing) {
            throw DataError("topics line " + std::to_string(line_of(text, h.pos)) +
                            ": expected <top>");
        }
        check_gap(cursor, h.pos);
        std::size_t open_line = line_of(text, h.pos);
        ++i;
        std::map<std::string, std::string> fields;
        bool closed = false;
        while (i < hits.size()) {
            const auto& f = hits[i];
            if (f.name == "top") {
                if (!f.closing) {
                    throw DataError("topics line " + std::to_string(line_of(text, f.pos)) +
                                    ": nested <top>");
                }
                cursor = f.pos + f.len;
                closed = true;
                ++i;
                break;
            }
            if (f.closing) {
                ++i;
                continue;
            }
            std::size_t start = f.pos + f.len;
            std::size_t end = i + 1 < hits.size() ? hits[i + 1].pos : text.size();
            if (fields.count(f.name)) {
                throw DataError("topics line " + std::to_string(line_of(text, f.pos)) +
                                ": repeated <" + f.name + ">");
            }
            fields[f.name] = text.substr(start, end - start);
            ++i;
        }
        if (!closed) {
            throw DataError("topics line " + std::to_string(open_line) + ": unterminated <top>");
        }
        TopicQuery t;
        if (!fields.count("num")) {
            throw DataError("topics line " + std::to_string(open_line) + ": topic without <num>");
        }
        t.query_id = strip_label(fields["num"], "number:");
        if (t.query_id.empty()) {
            throw DataError("topics line " + std::to_string(open_line) + ": empty topic number");
        }
        auto title = fields.count("title") ? strip_label(fields["title"], "topic:") : std::string{};
        if (title.empty()) {
            throw DataError("topic " + t.query_id + ": missing title");
        }
        t.title = title;
        if (fields.count("desc")) {
            auto d = strip_label(fields["desc"], "description:");
            if (!d.empty()) t.description = d;
        }
        if (fields.count("narr")) {
            auto n = strip_label(fields["narr"], "narrative:");
            if (!n.empty()) t.narrative = n;
        }
        if (!ids.insert(t.query_id).second) {
            throw DataError("duplicate topic id " + t.query_id);
        }
        topics.push_back(std::move(t));
    }
    check_gap(cursor, text.size());
    return topics;
}

std::vector<TopicQuery> load_topics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open topics \"" + path.string() + "\"");
    return read_topics(in);
}

void write_topics(std::ostream& out, std::span<const TopicQuery> topics) {
    for (const auto& t : topics) {
        out << "<top>\n<num> Number: " << t.query_id << "\n<title> " << t.title << "\n";
        if (t.description) out << "<desc> Description:\n" << *t.description << "\n";
        if (t.narrative) out << "<narr> Narrative:\n" << *t.narrative << "\n";
        out << "</top>\n\n";
    }
}

// ---------------------------------------------------------------------------
// Judgments

void Judgments::set(const std::string& query_id, const std::string& doc_id, int grade) {
    if (grade < 0) throw DataError("negative relevance grade for " + query_id + "/" + doc_id);
    auto [it, inserted] = grades_[query_id].emplace(doc_id, grade);
    if (!inserted) {
        throw DataError("duplicate judgment for query " + query_id + ", doc " + doc_id);
    }
}

int Judgments::grade(const std::string& query_id, const std::string& doc_id) const {
    return find(query_id, doc_id).value_or(0);
}

std::optional<int> Judgments::find(const std::string& query_id, const std::string& doc_id) const {
    auto q = grades_.find(query_id);
    if (q == grades_.end()) return std::nullopt;
    auto d = q->second.find(doc_id);
    if (d == q->second.end()) return std::nullopt;
    return d->second;
}

const std::map<std::string, int>& Judgments::for_query(const std::string& query_id) const {
    static const std::map<std::string, int> empty;
    auto q = grades_.find(query_id);
    return q == grades_.end() ? empty : q->second;
}

bool Judgments::has_query(const std::string& query_id) const { return grades_.count(query_id) > 0; }

std::size_t Judgments::relevant_count(const std::string& query_id) const {
    const auto& g = for_query(query_id);
    return static_cast<std::size_t>(
        std::count_if(g.begin(), g.end(), [](const auto& kv) { return kv.second > 0; }));
}

std::vector<std::string> Judgments::query_ids() const {
    std::vector<std::string> ids;
    for (const auto& [q, _] : grades_) ids.push_back(q);
    return ids;
}

std::size_t Judgments::size() const {
    std::size_t n = 0;
    for (const auto& [_, g] : grades_) n += g.size();
    return n;
}

Judgments read_qrels(std::istream& in) {
    Judgments j;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        auto f = split_ws(line);
        if (f.size() != 4) {
            throw DataError("qrels line " + std::to_string(line_no) + ": expected 4 fields");
        }
        int grade = 0;
        if (!parse_number(f[3], grade)) {
            throw DataError("qrels line " + std::to_string(line_no) + ": non-integer grade \"" +
                            f[3] + "\"");
        }
        // Negative grades (e.g. junk labels) count as non-relevant.
        j.set(f[0], f[2], std::max(grade, 0));
    }
    return j;
}

Judgments load_qrels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open qrels \"" + path.string() + "\"");
    return read_qrels(in);
}

void write_qrels(std::ostream& out, const Judgments& judgments) {
    for (const auto& q : judgments.query_ids()) {
        for (const auto& [d, g] : judgments.for_query(q)) out << q << " 0 " << d << ' ' << g << '\n';
    }
}

// ---------------------------------------------------------------------------
// Rankings and run files

bool ranks_before(const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
}

Ranking Ranking::from_scores(std::string query_id, std::vector<RankedEntry> entries,
                             std::string run_tag) {
    std::sort(entries.begin(), entries.end(), ranks_before);
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.doc_id).second) {
            throw DataError("ranking for query " + query_id + " repeats doc " + e.doc_id);
        }
    }
    return Ranking{std::move(query_id), std::move(entries), std::move(run_tag)};
}

void Ranking::truncate(std::size_t k) {
    if (entries.size() > k) entries.resize(k);
}

void write_run(std::ostream& out, std::span<const Ranking> rankings) {
    char score[64];
    for (const auto& r : rankings) {
        const std::string tag = r.run_tag.empty() ? "ctxrank" : r.run_tag;
        for (std::size_t i = 0; i < r.entries.size(); ++i) {
            std::snprintf(score, sizeof score, "%.6f", r.entries[i].score);
            out << r.query_id << " Q0 " << r.entries[i].doc_id << ' ' << (i + 1) << ' ' << score
                << ' ' << tag << '\n';
        }
    }
}

void save_run(const std::filesystem::path& path, std::span<const Ranking> rankings) {
    write_file_atomic(path, [&](std::ostream& out) { write_run(out, rankings); });
}

std::vector<Ranking> read_run(std::istream& in) {
    std::vector<Ranking> rankings;
    std::map<std::string, std::size_t> index;
    std::map<std::string, std::unordered_set<std::string>> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        auto f = split_ws(line);
        auto fail = [&](const std::string& why) {
            throw DataError("run line " + std::to_string(line_no) + ": " + why);
        };
        if (f.size() != 6) fail("expected 6 fields");
        std::size_t rank = 0;
        double score = 0.0;
        if (!parse_number(f[3], rank)) fail("non-integer rank \"" + f[3] + "\"");
        if (!parse_double(f[4], score)) fail("non-numeric score \"" + f[4] + "\"");
        auto [it, fresh] = index.emplace(f[0], rankings.size());
        if (fresh) rankings.push_back(Ranking{f[0], {}, f[5]});
        auto& r = rankings[it->second];
        if (rank != r.entries.size() + 1) {
            fail("rank " + f[3] + " for query " + f[0] + " breaks the 1..n sequence");
        }
        if (!docs[f[0]].insert(f[2]).second) fail("duplicate doc " + f[2] + " for query " + f[0]);
        r.entries.push_back({f[2], score});
    }
    return rankings;
}

std::vector<Ranking> load_run(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open run \"" + path.string() + "\"");
    return read_run(in);
}

// ---------------------------------------------------------------------------
// Folds

std::vector<std::string> FoldPlan::queries_in_fold(int fold) const {
    std::vector<std::string> out;
    for (const auto& [q, f] : assignment)
        if (f == fold) out.push_back(q);
    return out;
}

std::vector<std::string> FoldPlan::queries_outside_fold(int fold) const {
    std::vector<std::string> out;
    for (const auto& [q, f] : assignment)
        if (f != fold) out.push_back(q);
    return out;
}

int FoldPlan::fold_of(const std::string& query_id) const {
    auto it = assignment.find(query_id);
    if (it == assignment.end()) throw DataError("query " + query_id + " is not in the fold plan");
    return it->second;
}

FoldPlan make_folds(std::span<const std::string> query_ids, int k, std::uint64_t seed) {
    if (k < 1) throw UsageError("fold count must be positive");
    std::vector<std::string> ids(query_ids.begin(), query_ids.end());
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw DataError("duplicate query id in fold input");
    }
    if (static_cast<std::size_t>(k) > ids.size()) {
        throw UsageError("cannot split " + std::to_string(ids.size()) + " queries into " +
                         std::to_string(k) + " folds");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    FoldPlan plan;
    plan.k = k;
    for (std::size_t i = 0; i < ids.size(); ++i) plan.assignment[ids[i]] = static_cast<int>(i % k);
    return plan;
}

void write_fold_plan(std::ostream& out, const FoldPlan& plan) {
    out << "# folds " << plan.k << '\n';
    for (const auto& [q, f] : plan.assignment) out << q << ' ' << f << '\n';
}

FoldPlan read_fold_plan(std::istream& in) {
    FoldPlan plan;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        auto f = split_ws(line);
        if (f.size() == 3 && f[0] == "#" && f[1] == "folds") {
            if (!parse_number(f[2], plan.k)) throw DataError("fold plan: bad fold count");
            continue;
        }
        int fold = 0;
        if (f.size() != 2 || !parse_number(f[1], fold)) {
            throw DataError("fold plan line " + std::to_string(line_no) + ": expected \"qid fold\"");
        }
        plan.assignment[f[0]] = fold;
    }
    if (plan.k < 1) throw DataError("fold plan lacks a \"# folds k\" header");
    return plan;
}

}  // namespace ctxrank
