#include "ctxrank/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

// Pronounceable pseudo-words whose stems are pairwise distinct, so no two
// of them collapse to the same index term.
class WordMaker {
  public:
    explicit WordMaker(Rng& rng) : rng_(rng) {}

    std::string make(std::size_t syllables) {
        static constexpr std::string_view consonants = "bdfgklmnprstvz";
        static constexpr std::string_view vowels = "aeiou";
        for (;;) {
            std::string w;
            for (std::size_t s = 0; s < syllables; ++s) {
                w += consonants[pick(rng_, consonants.size())];
                w += vowels[pick(rng_, vowels.size())];
            }
            if (is_stopword(w)) continue;
            if (stems_.insert(porter_stem(w)).second) return w;
        }
    }

  private:
    Rng& rng_;
    std::set<std::string> stems_;
};

void place(std::vector<std::string>& words, std::vector<bool>& used, std::size_t at,
           const std::vector<std::string>& phrase) {
    for (std::size_t i = 0; i < phrase.size(); ++i) {
        words[at + i] = phrase[i];
        used[at + i] = true;
    }
}

// Finds a free run of `len` slots starting in [lo, hi].
std::size_t free_slot(Rng& rng, const std::vector<bool>& used, std::size_t lo, std::size_t hi, std::size_t len) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::size_t at = lo + pick(rng, hi - lo + 1);
        bool ok = true;
        // Keep one filler word on each side so phrases never touch.
        std::size_t from = at == 0 ? 0 : at - 1;
        std::size_t to = std::min(used.size(), at + len + 1);
        for (std::size_t i = from; i < to; ++i) ok = ok && !used[i];
        if (ok && at + len <= used.size()) return at;
    }
    throw DataError("synthetic document too short for its topic phrases");
}

}  // namespace

SyntheticCollection make_synthetic_collection(const SyntheticOptions& o) {
    if (o.topics < 1 || o.docs_per_topic < 1 || o.relevant_per_topic > o.docs_per_topic) {
        throw UsageError("synthetic collection needs topics >= 1 and relevant <= docs per topic");
    }
    if (o.min_words > o.max_words || o.min_words < o.answer_start + 8 || o.lexicon_size < 10) {
        throw UsageError("synthetic document length must leave room for the answer phrase");
    }
    Rng rng(o.seed);
    WordMaker maker(rng);
    std::vector<std::string> lexicon;
    for (std::size_t i = 0; i < o.lexicon_size; ++i) lexicon.push_back(maker.make(2 + pick(rng, 2)));

    SyntheticCollection out;
    for (int i = 0; i < 3; ++i) out.marker.push_back(maker.make(3));

    std::set<std::string> titles;
    for (std::size_t t = 0; t < o.topics; ++t) {
        const std::string t1 = maker.make(3);
        const std::string t2 = maker.make(3);
        const std::string qid = std::to_string(401 + t);
        TopicQuery topic;
        topic.query_id = qid;
        topic.title = t1 + " " + t2;
        topic.description = "Find reports that discuss " + t1 + " " + t2 + " in detail.";
        topic.narrative = "A relevant document explains what " + t1 + " " + t2 +
                          " means. Documents that merely list " + t1 + " " + t2 + " are not relevant.";
        out.topics.push_back(topic);

        std::vector<bool> relevant(o.docs_per_topic, false);
        std::fill_n(relevant.begin(), o.relevant_per_topic, true);
        std::shuffle(relevant.begin(), relevant.end(), rng);

        const std::vector<std::string> pair{t1, t2};
        std::vector<std::string> answer = pair;
        answer.insert(answer.end(), out.marker.begin(), out.marker.end());

        for (std::size_t d = 0; d < o.docs_per_topic; ++d) {
            char id[32];
            std::snprintf(id, sizeof id, "SYN-%s-%02zu", qid.c_str(), d);
            const std::size_t len = o.min_words + pick(rng, o.max_words - o.min_words + 1);
            std::vector<std::string> words(len);
            for (auto& w : words) w = lexicon[pick(rng, lexicon.size())];
            std::vector<bool> used(len, false);

            // The leading window looks the same for every document of the
            // topic; only later text separates relevant from non-relevant.
            place(words, used, free_slot(rng, used, 0, 100, 2), pair);
            if (relevant[d]) {
                std::size_t at = free_slot(rng, used, o.answer_start, len - answer.size(), answer.size());
                place(words, used, at, answer);
                out.answer_offset[id] = at;
            } else {
                const std::size_t late = o.answer_start - 75;
                for (int k = 0; k < 2; ++k) place(words, used, free_slot(rng, used, late, len - 2, 2), pair);
                for (const auto& term : pair)
                    for (int k = 0; k < 2; ++k) place(words, used, free_slot(rng, used, late, len - 1, 1), {term});
            }

            std::string title;
            do {
                std::size_t a = pick(rng, len);
                std::size_t b = pick(rng, len);
                if (used[a] || used[b] || a == b) continue;
                title = t1 + " " + t2 + " " + words[a] + " " + words[b];
            } while (title.empty() || !titles.insert(title).second);

            std::string body;
            for (const auto& w : words) {
                if (!body.empty()) body += ' ';
                body += w;
            }
            out.docs.push_back(Document{id, title, std::move(body)});
            out.qrels.set(qid, id, relevant[d] ? 1 : 0);
        }
    }
    return out;
}

void write_synthetic_collection(const SyntheticCollection& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "corpus.jsonl", [&](std::ostream& out) { write_corpus_jsonl(out, c.docs); });
    write_file_atomic(dir / "topics.txt", [&](std::ostream& out) { write_topics(out, c.topics); });
    write_file_atomic(dir / "qrels.txt", [&](std::ostream& out) { write_qrels(out, c.qrels); });
}

}  // namespace ctxrank
