#include "ctxrank/textprep.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"

namespace ctxrank {

namespace resources {
extern const std::string_view stopwords;
extern const std::string_view negation_markers;
}  // namespace resources

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string> resource_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::istringstream ss{std::string(text)};
    std::string line;
    while (std::getline(ss, line)) {
        auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        auto e = line.find_last_not_of(" \t\r");
        lines.push_back(line.substr(b, e - b + 1));
    }
    return lines;
}

}  // namespace

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        std::size_t b = i;
        while (i < text.size() && !is_space(text[i])) ++i;
        if (i > b) out.emplace_back(text.substr(b, i - b));
    }
    return out;
}

std::vector<std::string> word_tokenize(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& w : split_whitespace(text)) {
        std::string cur;
        for (char c : w) {
            if (is_punct(c)) {
                if (!cur.empty()) out.push_back(std::move(cur));
                cur.clear();
                out.emplace_back(1, c);
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
    }
    return out;
}

bool is_punctuation_token(std::string_view token) {
    return !token.empty() && std::all_of(token.begin(), token.end(), is_punct);
}

std::string to_lower_ascii(std::string_view text) {
    std::string out(text);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string> utf8_units(std::string_view text) {
    std::vector<std::string> units;
    std::size_t i = 0;
    while (i < text.size()) {
        auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (c >= 0xF0) {
            len = 4;
        } else if (c >= 0xE0) {
            len = 3;
        } else if (c >= 0xC0) {
            len = 2;
        }
        if (i + len > text.size()) len = 1;
        for (std::size_t j = 1; j < len; ++j) {
            if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80) {
                len = 1;
                break;
            }
        }
        units.emplace_back(text.substr(i, len));
        i += len;
    }
    return units;
}

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<std::string> reserved_tokens() { return {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}; }

SubwordVocab::SubwordVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    auto reserved = reserved_tokens();
    if (tokens_.size() < reserved.size()) throw DataError("vocabulary lacks reserved tokens");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw DataError("empty vocabulary entry at id " + std::to_string(i));
        if (i < reserved.size() && tokens_[i] != reserved[i]) {
            throw DataError("vocabulary id " + std::to_string(i) + " must be " + reserved[i]);
        }
        if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw DataError("duplicate vocabulary entry \"" + tokens_[i] + "\"");
        }
    }
}

int SubwordVocab::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
}

void write_vocab(std::ostream& out, const SubwordVocab& vocab) {
    for (const auto& t : vocab.tokens()) out << t << '\n';
}

SubwordVocab read_vocab(std::istream& in) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return SubwordVocab(std::move(tokens));
}

void save_vocab(const std::filesystem::path& path, const SubwordVocab& vocab) {
    write_file_atomic(path, [&](std::ostream& out) { write_vocab(out, vocab); });
}

SubwordVocab load_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary \"" + path.string() + "\"");
    return read_vocab(in);
}

std::vector<int> wordpiece_word(std::string_view word, const SubwordVocab& vocab) {
    constexpr std::size_t max_units = 100;
    auto units = utf8_units(word);
    if (units.empty()) return {};
    if (units.size() > max_units) return {SubwordVocab::unk_id};
    std::vector<int> pieces;
    std::size_t start = 0;
    while (start < units.size()) {
        int found = -1;
        std::size_t found_end = start;
        std::string candidate = start == 0 ? "" : std::string(SubwordVocab::continuation);
        std::vector<std::size_t> cut;
        for (std::size_t e = start; e < units.size(); ++e) {
            candidate += units[e];
            int id = vocab.id(candidate);
            if (id >= 0 && !vocab.is_special(id)) {
                found = id;
                found_end = e + 1;
            }
        }
        if (found < 0) return {SubwordVocab::unk_id};
        pieces.push_back(found);
        start = found_end;
    }
    return pieces;
}

std::vector<int> wordpiece_tokenize(std::string_view text, const SubwordVocab& vocab) {
    std::vector<int> ids;
    for (const auto& w : word_tokenize(to_lower_ascii(text))) {
        auto pieces = wordpiece_word(w, vocab);
        ids.insert(ids.end(), pieces.begin(), pieces.end());
    }
    return ids;
}

SubwordVocab build_subword_vocab(std::span<const Document> corpus, std::size_t target_size) {
    std::vector<std::string> texts;
    texts.reserve(corpus.size());
    for (const auto& d : corpus) texts.push_back(d.title.value_or("") + " " + d.body);
    return build_subword_vocab(texts, target_size);
}

SubwordVocab build_subword_vocab(std::span<const std::string> texts, std::size_t target_size) {
    std::map<std::string, std::size_t> word_freq;
    for (const auto& t : texts) {
        for (auto& w : word_tokenize(to_lower_ascii(t))) ++word_freq[w];
    }
    if (word_freq.empty()) throw DataError("cannot build a vocabulary from an empty corpus");

    // Symbol table shared by all words; a word is a sequence of symbol ids.
    std::vector<std::string> symbols;
    std::unordered_map<std::string, int> symbol_ids;
    auto intern = [&](const std::string& s) {
        auto [it, fresh] = symbol_ids.emplace(s, static_cast<int>(symbols.size()));
        if (fresh) symbols.push_back(s);
        return it->second;
    };

    struct Word {
        std::vector<int> parts;
        std::size_t freq;
    };
    std::vector<Word> words;
    std::map<std::string, int> base;
    for (const auto& [w, f] : word_freq) {
        Word word{{}, f};
        auto units = utf8_units(w);
        for (std::size_t i = 0; i < units.size(); ++i) {
            auto s = i == 0 ? units[i] : std::string(SubwordVocab::continuation) + units[i];
            word.parts.push_back(intern(s));
            base.emplace(s, 0);
        }
        words.push_back(std::move(word));
    }

    auto tokens = reserved_tokens();
    if (target_size <= tokens.size() + base.size()) {
        throw UsageError("vocabulary target " + std::to_string(target_size) +
                         " leaves no room beyond " + std::to_string(tokens.size()) +
                         " reserved tokens and " + std::to_string(base.size()) +
                         " character symbols");
    }
    std::unordered_set<std::string> in_vocab(tokens.begin(), tokens.end());
    for (const auto& [s, _] : base) {
        if (in_vocab.insert(s).second) tokens.push_back(s);
    }

    while (tokens.size() < target_size) {
        std::map<std::pair<int, int>, std::size_t> pairs;
        for (const auto& w : words) {
            for (std::size_t i = 0; i + 1 < w.parts.size(); ++i) pairs[{w.parts[i], w.parts[i + 1]}] += w.freq;
        }
        if (pairs.empty()) break;
        // Highest count wins; ties go to the lexicographically smallest pair.
        const std::pair<const std::pair<int, int>, std::size_t>* best = nullptr;
        for (const auto& p : pairs) {
            if (!best || p.second > best->second) {
                best = &p;
            } else if (p.second == best->second) {
                const auto& a = std::tie(symbols[p.first.first], symbols[p.first.second]);
                const auto& b = std::tie(symbols[best->first.first], symbols[best->first.second]);
                if (a < b) best = &p;
            }
        }
        auto [left, right] = best->first;
        std::string rhs = symbols[right];
        if (rhs.rfind(SubwordVocab::continuation, 0) == 0) rhs = rhs.substr(SubwordVocab::continuation.size());
        std::string merged = symbols[left] + rhs;
        int merged_id = intern(merged);
        for (auto& w : words) {
            std::vector<int> next;
            next.reserve(w.parts.size());
            for (std::size_t i = 0; i < w.parts.size(); ++i) {
                if (i + 1 < w.parts.size() && w.parts[i] == left && w.parts[i + 1] == right) {
                    next.push_back(merged_id);
                    ++i;
                } else {
                    next.push_back(w.parts[i]);
                }
            }
            w.parts = std::move(next);
        }
        if (in_vocab.insert(merged).second) tokens.push_back(merged);
    }
    return SubwordVocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Stopwords and stemming

const std::unordered_set<std::string>& stopwords() {
    static const std::unordered_set<std::string> words = [] {
        auto lines = resource_lines(resources::stopwords);
        return std::unordered_set<std::string>(lines.begin(), lines.end());
    }();
    return words;
}

const std::vector<std::string>& negation_markers() {
    static const std::vector<std::string> markers = resource_lines(resources::negation_markers);
    return markers;
}

bool is_stopword(std::string_view word) { return stopwords().count(to_lower_ascii(word)) > 0; }

namespace {

// Direct transcription of the reference ANSI C stemmer, including its two
// documented departures from the published algorithm (bli->ble, logi->log).
class PorterStemmer {
  public:
    explicit PorterStemmer(std::string word) : b_(std::move(word)), k_(static_cast<int>(b_.size()) - 1) {}

    std::string run() {
        if (k_ <= 1) return b_;
        step1ab();
        if (k_ > 0) {
            step1c();
            step2();
            step3();
            step4();
            step5();
        }
        return b_.substr(0, static_cast<std::size_t>(k_ + 1));
    }

  private:
    bool cons(int i) const {
        switch (b_[i]) {
            case 'a': case 'e': case 'i': case 'o': case 'u':
                return false;
            case 'y':
                return i == 0 ? true : !cons(i - 1);
            default:
                return true;
        }
    }

    // Number of VC sequences in b[0..j].
    int m() const {
        int n = 0;
        int i = 0;
        while (true) {
            if (i > j_) return n;
            if (!cons(i)) break;
            ++i;
        }
        ++i;
        while (true) {
            while (true) {
                if (i > j_) return n;
                if (cons(i)) break;
                ++i;
            }
            ++i;
            ++n;
            while (true) {
                if (i > j_) return n;
                if (!cons(i)) break;
                ++i;
            }
            ++i;
        }
    }

    bool vowel_in_stem() const {
        for (int i = 0; i <= j_; ++i)
            if (!cons(i)) return true;
        return false;
    }

    bool double_c(int j) const {
        if (j < 1) return false;
        if (b_[j] != b_[j - 1]) return false;
        return cons(j);
    }

    bool cvc(int i) const {
        if (i < 2 || !cons(i) || cons(i - 1) || !cons(i - 2)) return false;
        char ch = b_[i];
        return !(ch == 'w' || ch == 'x' || ch == 'y');
    }

    bool ends(std::string_view s) {
        int len = static_cast<int>(s.size());
        if (len > k_ + 1) return false;
        if (b_.compare(static_cast<std::size_t>(k_ - len + 1), s.size(), s) != 0) return false;
        j_ = k_ - len;
        return true;
    }

    void set_to(std::string_view s) {
        b_.replace(static_cast<std::size_t>(j_ + 1), static_cast<std::size_t>(k_ - j_), s);
        k_ = j_ + static_cast<int>(s.size());
        b_.resize(static_cast<std::size_t>(k_ + 1));
    }

    void r(std::string_view s) {
        if (m() > 0) set_to(s);
    }

    void step1ab() {
        if (b_[k_] == 's') {
            if (ends("sses")) {
                k_ -= 2;
            } else if (ends("ies")) {
                set_to("i");
            } else if (b_[k_ - 1] != 's') {
                --k_;
            }
        }
        if (ends("eed")) {
            if (m() > 0) --k_;
        } else if ((ends("ed") || ends("ing")) && vowel_in_stem()) {
            k_ = j_;
            if (ends("at")) {
                set_to("ate");
            } else if (ends("bl")) {
                set_to("ble");
            } else if (ends("iz")) {
                set_to("ize");
            } else if (double_c(k_)) {
                --k_;
                char ch = b_[k_];
                if (ch == 'l' || ch == 's' || ch == 'z') ++k_;
            } else if (m() == 1 && cvc(k_)) {
                set_to("e");
            }
        }
        b_.resize(static_cast<std::size_t>(k_ + 1));
    }

    void step1c() {
        if (ends("y") && vowel_in_stem()) b_[k_] = 'i';
    }

    void step2() {
        if (k_ < 1) return;
        switch (b_[k_ - 1]) {
            case 'a':
                if (ends("ational")) { r("ate"); break; }
                if (ends("tional")) { r("tion"); break; }
                break;
            case 'c':
                if (ends("enci")) { r("ence"); break; }
                if (ends("anci")) { r("ance"); break; }
                break;
            case 'e':
                if (ends("izer")) { r("ize"); break; }
                break;
            case 'l':
                if (ends("bli")) { r("ble"); break; }
                if (ends("alli")) { r("al"); break; }
                if (ends("entli")) { r("ent"); break; }
                if (ends("eli")) { r("e"); break; }
                if (ends("ousli")) { r("ous"); break; }
                break;
            case 'o':
                if (ends("ization")) { r("ize"); break; }
                if (ends("ation")) { r("ate"); break; }
                if (ends("ator")) { r("ate"); break; }
                break;
            case 's':
                if (ends("alism")) { r("al"); break; }
                if (ends("iveness")) { r("ive"); break; }
                if (ends("fulness")) { r("ful"); break; }
                if (ends("ousness")) { r("ous"); break; }
                break;
            case 't':
                if (ends("aliti")) { r("al"); break; }
                if (ends("iviti")) { r("ive"); break; }
                if (ends("biliti")) { r("ble"); break; }
                break;
            case 'g':
                if (ends("logi")) { r("log"); break; }
                break;
            default:
                break;
        }
    }

    void step3() {
        switch (b_[k_]) {
            case 'e':
                if (ends("icate")) { r("ic"); break; }
                if (ends("ative")) { r(""); break; }
                if (ends("alize")) { r("al"); break; }
                break;
            case 'i':
                if (ends("iciti")) { r("ic"); break; }
                break;
            case 'l':
                if (ends("ical")) { r("ic"); break; }
                if (ends("ful")) { r(""); break; }
                break;
            case 's':
                if (ends("ness")) { r(""); break; }
                break;
            default:
                break;
        }
    }

    void step4() {
        if (k_ < 1) return;
        switch (b_[k_ - 1]) {
            case 'a':
                if (ends("al")) break;
                return;
            case 'c':
                if (ends("ance")) break;
                if (ends("ence")) break;
                return;
            case 'e':
                if (ends("er")) break;
                return;
            case 'i':
                if (ends("ic")) break;
                return;
            case 'l':
                if (ends("able")) break;
                if (ends("ible")) break;
                return;
            case 'n':
                if (ends("ant")) break;
                if (ends("ement")) break;
                if (ends("ment")) break;
                if (ends("ent")) break;
                return;
            case 'o':
                if (ends("ion") && j_ >= 0 && (b_[j_] == 's' || b_[j_] == 't')) break;
                if (ends("ou")) break;
                return;
            case 's':
                if (ends("ism")) break;
                return;
            case 't':
                if (ends("ate")) break;
                if (ends("iti")) break;
                return;
            case 'u':
                if (ends("ous")) break;
                return;
            case 'v':
                if (ends("ive")) break;
                return;
            case 'z':
                if (ends("ize")) break;
                return;
            default:
                return;
        }
        if (m() > 1) k_ = j_;
    }

    void step5() {
        j_ = k_;
        if (b_[k_] == 'e') {
            int a = m();
            if (a > 1 || (a == 1 && !cvc(k_ - 1))) --k_;
        }
        if (b_[k_] == 'l' && double_c(k_) && m() > 1) --k_;
    }

    std::string b_;
    int k_;
    int j_ = 0;
};

}  // namespace

std::string porter_stem(std::string_view word) {
    bool alpha = !word.empty() && std::all_of(word.begin(), word.end(), [](char c) {
        return c >= 'a' && c <= 'z';
    });
    if (!alpha) return std::string(word);
    return PorterStemmer(std::string(word)).run();
}

std::vector<std::string> normalize_for_index(std::span<const std::string> words) {
    std::vector<std::string> out;
    out.reserve(words.size());
    for (const auto& w : words) {
        if (is_punctuation_token(w)) continue;
        auto lw = to_lower_ascii(w);
        if (stopwords().count(lw)) continue;
        out.push_back(porter_stem(lw));
    }
    return out;
}

std::vector<std::string> normalize_text(std::string_view text) {
    auto words = word_tokenize(text);
    return normalize_for_index(words);
}

// ---------------------------------------------------------------------------
// Query variants

QueryKind parse_query_kind(std::string_view name) {
    auto n = to_lower_ascii(name);
    if (n == "title") return QueryKind::title;
    if (n == "desc") return QueryKind::desc;
    if (n == "desc_keywords") return QueryKind::desc_keywords;
    if (n == "narr") return QueryKind::narr;
    if (n == "narr_keywords") return QueryKind::narr_keywords;
    if (n == "narr_positive") return QueryKind::narr_positive;
    throw UsageError("unknown query variant \"" + std::string(name) + "\"");
}

std::string_view query_kind_name(QueryKind kind) {
    switch (kind) {
        case QueryKind::title: return "title";
        case QueryKind::desc: return "desc";
        case QueryKind::desc_keywords: return "desc_keywords";
        case QueryKind::narr: return "narr";
        case QueryKind::narr_keywords: return "narr_keywords";
        case QueryKind::narr_positive: return "narr_positive";
    }
    return "?";
}

std::string keyword_text(std::string_view text) {
    std::string out;
    for (const auto& w : split_whitespace(text)) {
        std::string bare;
        for (char c : w)
            if (!is_punct(c)) bare += c;
        if (bare.empty()) continue;
        // "don't" and "U.S." are checked both with and without their punctuation.
        auto b = w.find_first_not_of("!\"#$%&()*+,-./:;<=>?@[\\]^_`{|}~'");
        auto e = w.find_last_not_of("!\"#$%&()*+,-./:;<=>?@[\\]^_`{|}~'");
        std::string trimmed = b == std::string::npos ? std::string{} : w.substr(b, e - b + 1);
        if (is_stopword(bare) || (!trimmed.empty() && is_stopword(trimmed))) continue;
        if (!out.empty()) out += ' ';
        out += bare;
    }
    return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
    auto terminator = [](char c) { return c == '.' || c == '!' || c == '?'; };
    std::vector<std::string> out;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i < text.size()) {
        if (terminator(text[i])) {
            while (i < text.size() && terminator(text[i])) ++i;
            out.emplace_back(text.substr(start, i - start));
            start = i;
        } else {
            ++i;
        }
    }
    if (start < text.size()) {
        auto rest = text.substr(start);
        if (std::any_of(rest.begin(), rest.end(), [](char c) { return !is_space(c); })) {
            out.emplace_back(rest);
        }
    }
    return out;
}

bool has_negation_marker(std::string_view sentence) {
    // Markers may wrap across lines, so whitespace runs compare as one space.
    std::string s;
    for (const auto& w : split_whitespace(to_lower_ascii(sentence))) {
        if (!s.empty()) s += ' ';
        s += w;
    }
    for (const auto& marker : negation_markers()) {
        for (auto pos = s.find(marker); pos != std::string::npos; pos = s.find(marker, pos + 1)) {
            bool left_ok = pos == 0 || !is_alnum(s[pos - 1]);
            auto end = pos + marker.size();
            bool right_ok = end >= s.size() || !is_alnum(s[end]);
            if (left_ok && right_ok) return true;
        }
    }
    return false;
}

std::string positive_text(std::string_view text) {
    std::string out;
    for (const auto& s : split_sentences(text)) {
        if (!has_negation_marker(s)) out += s;
    }
    auto b = out.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    auto e = out.find_last_not_of(" \t\r\n");
    return out.substr(b, e - b + 1);
}

QueryVariant make_query_variant(const TopicQuery& topic, QueryKind kind) {
    auto need = [&](const std::optional<std::string>& field, const char* name) -> const std::string& {
        if (!field || field->empty()) {
            throw DataError("topic " + topic.query_id + " has no " + name + " for variant " +
                            std::string(query_kind_name(kind)));
        }
        return *field;
    };
    switch (kind) {
        case QueryKind::title: return {kind, topic.title};
        case QueryKind::desc: return {kind, need(topic.description, "description")};
        case QueryKind::desc_keywords: return {kind, keyword_text(need(topic.description, "description"))};
        case QueryKind::narr: return {kind, need(topic.narrative, "narrative")};
        case QueryKind::narr_keywords: return {kind, keyword_text(need(topic.narrative, "narrative"))};
        case QueryKind::narr_positive: return {kind, positive_text(need(topic.narrative, "narrative"))};
    }
    throw UsageError("unhandled query variant");
}

}  // namespace ctxrank
