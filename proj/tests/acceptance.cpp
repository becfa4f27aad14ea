// Acceptance harness: one PASS/FAIL line per criterion, non-zero exit when
// any criterion fails. Tolerances and budgets are fixed below.
//
// Usage: acceptance [scratch-dir]

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "ctxrank/corpus.hpp"
#include "ctxrank/crossenc.hpp"
#include "ctxrank/evaluate.hpp"
#include "ctxrank/firststage.hpp"
#include "ctxrank/io.hpp"
#include "ctxrank/passage.hpp"
#include "ctxrank/pipeline.hpp"
#include "ctxrank/synthetic.hpp"
#include "ctxrank/textprep.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "toy_model.hpp"

using namespace ctxrank;

namespace {

constexpr double grad_tolerance = 1e-4;
constexpr double grad_budget_seconds = 60.0;
constexpr double attention_row_tolerance = 1e-6;
constexpr double padding_tolerance = 1e-9;
constexpr double metric_oracle_tolerance = 1e-9;
constexpr double metric_hand_tolerance = 1e-4;
constexpr double permutation_tolerance = 0.02;
constexpr std::size_t permutation_samples = 100000;
constexpr double score_tolerance = 1e-9;
constexpr double overfit_loss = 0.05;
constexpr std::size_t overfit_steps = 500;
constexpr double e2e_budget_seconds = 30 * 60.0;

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome gradient_exactness() {
    auto t0 = Clock::now();
    const auto c = toy::tiny_config();
    std::mt19937_64 rng(101);
    double worst = 0.0;
    std::string worst_tensor;
    std::size_t coords = 0;
    for (int trial = 0; trial < 2; ++trial) {
        auto params = init_params(c, 200 + trial, 0.3);
        auto enc = toy::random_encoding(rng, c);
        auto r = gradient_check(params, enc, trial % 2, {.epsilon = 1e-5, .coords_per_tensor = 0, .seed = 0});
        coords += r.coordinates_checked;
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            worst_tensor = r.worst_tensor;
        }
    }
    double secs = seconds_since(t0);
    return {worst <= grad_tolerance && secs < grad_budget_seconds,
            "max rel err " + fmt("%.2e", worst) + " (" + worst_tensor + ") over " + std::to_string(coords) +
                " coords in " + fmt("%.1f", secs) + " s"};
}

Outcome attention_and_padding() {
    EncoderConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 4;
    c.ffn = 32;
    c.max_len = 32;
    c.vocab = 40;
    c.dropout = 0.1;
    c.max_query_len = 6;
    auto params = init_params(c, 17, 0.2);
    auto narrow = c;
    narrow.max_len = 24;
    std::mt19937_64 rng(102);
    double worst_row = 0.0;
    double worst_pad = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        auto enc = toy::random_encoding(rng, narrow);
        auto ref = forward(params, enc, {.capture_attention = true, .trim_padding = true});
        for (const auto& m : ref.attention->matrices)
            for (Eigen::Index i = 0; i < m.rows(); ++i) worst_row = std::max(worst_row, std::abs(m.row(i).sum() - 1.0));

        // Same prefix with a random tail, run through the dense masked path.
        auto noisy = enc;
        for (int i = enc.length; i < narrow.max_len; ++i) {
            noisy.token_ids[i] = static_cast<int>(rng() % c.vocab);
            noisy.segment_ids[i] = static_cast<int>(rng() % 2);
        }
        auto dense = forward(params, noisy, {.capture_attention = true, .trim_padding = false});
        for (const auto& m : dense.attention->matrices)
            for (Eigen::Index i = 0; i < m.rows(); ++i) worst_row = std::max(worst_row, std::abs(m.row(i).sum() - 1.0));
        worst_pad = std::max(worst_pad, std::abs(dense.probability - ref.probability));

        // Longer padded tail: extend to the model's full length.
        auto longer = noisy;
        for (int i = narrow.max_len; i < c.max_len; ++i) {
            longer.token_ids.push_back(static_cast<int>(rng() % c.vocab));
            longer.segment_ids.push_back(0);
            longer.position_ids.push_back(i);
            longer.attention_mask.push_back(0);
        }
        worst_pad = std::max(worst_pad,
                             std::abs(forward(params, longer, {.trim_padding = false}).probability - ref.probability));
    }
    return {worst_row <= attention_row_tolerance && worst_pad <= padding_tolerance,
            "max |row sum - 1| " + fmt("%.1e", worst_row) + ", max padding shift " + fmt("%.1e", worst_pad) +
                " over 100 encodings"};
}

Outcome segmentation() {
    std::size_t bad = 0;
    std::string body;
    SegmentOptions o;
    o.max_passages = 0;
    for (std::size_t len = 1; len <= 1000; ++len) {
        if (!body.empty()) body += ' ';
        body += "w" + std::to_string(len - 1);
        Document d{"D", std::nullopt, body};
        auto ps = segment_document(d, o);
        const std::size_t formula = len <= 150 ? 1 : static_cast<std::size_t>(std::ceil((len - 150) / 75.0)) + 1;
        auto brute = oracle::passage_spans(len, 150, 75);
        bool ok = ps.size() == formula && brute.size() == formula;
        std::vector<int> covered(len, 0);
        for (std::size_t i = 0; ok && i < ps.size(); ++i) {
            ok = ps[i].span == brute[i] && ps[i].passage_index == i;
            for (std::size_t w = ps[i].span.start; w < ps[i].span.end; ++w) covered[w] = 1;
            if (i + 1 < ps.size()) ok = ok && ps[i + 1].span.start - ps[i].span.start == 75;
        }
        for (int v : covered) ok = ok && v == 1;
        if (!ok) ++bad;
    }
    return {bad == 0, std::to_string(1000 - bad) + "/1000 lengths match count formula, starts, coverage and stride"};
}

Outcome aggregation() {
    std::mt19937_64 rng(104);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::size_t bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> s(1 + rng() % 30);
        for (auto& v : s) v = u(rng);
        double mx = s[0], sum = 0.0;
        for (double v : s) {
            mx = std::max(mx, v);
            sum += v;
        }
        double f = aggregate_scores(s, AggregationMode::first);
        double m = aggregate_scores(s, AggregationMode::max);
        double t = aggregate_scores(s, AggregationMode::sum);
        bool ok = f == s[0] && m == mx && std::abs(t - sum) <= 1e-12 && m >= f;
        std::vector<double> one{s[0]};
        ok = ok && aggregate_scores(one, AggregationMode::first) == s[0] &&
             aggregate_scores(one, AggregationMode::max) == s[0] && aggregate_scores(one, AggregationMode::sum) == s[0];
        if (!ok) ++bad;
    }
    return {bad == 0, std::to_string(1000 - bad) + "/1000 random lists match the direct definitions"};
}

Outcome metrics_oracle() {
    std::mt19937_64 rng(105);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::map<std::string, int> grades;
        std::size_t pool = 1 + rng() % 30;
        for (std::size_t d = 0; d < pool; ++d)
            if (rng() % 2) grades["d" + std::to_string(d)] = static_cast<int>(rng() % 4);
        grades["d" + std::to_string(rng() % pool)] = 1 + static_cast<int>(rng() % 3);
        std::vector<RankedEntry> entries;
        for (std::size_t d = 0; d < pool + 10; ++d)
            if (rng() % 3) entries.push_back({"d" + std::to_string(d), static_cast<double>(rng() % 1000)});
        std::vector<Ranking> runs{Ranking::from_scores("q", entries, "t")};
        Judgments j;
        for (const auto& [d, g] : grades) j.set("q", d, g);
        std::size_t k = 1 + rng() % 40;
        auto ranked = oracle::ranked_grades(runs[0], grades);
        worst = std::max(worst, std::abs(ndcg_at_k(runs, j, k).mean - oracle::ndcg(ranked, grades, k)));
        worst = std::max(worst, std::abs(map_at_k(runs, j, k).mean - oracle::average_precision(ranked, grades, k)));
    }
    // Hand cases.
    Judgments hn;
    for (auto [d, g] : std::vector<std::pair<std::string, int>>{{"d1", 1}, {"d2", 0}, {"d3", 1}, {"d4", 1}}) hn.set("q", d, g);
    std::vector<Ranking> hr{Ranking::from_scores("q", {{"d1", 3}, {"d2", 2}, {"d3", 1}}, "t")};
    double ndcg = ndcg_at_k(hr, hn, 3).mean;
    Judgments ha;
    for (auto [d, g] : std::vector<std::pair<std::string, int>>{{"a", 1}, {"b", 0}, {"c", 1}}) ha.set("q", d, g);
    std::vector<Ranking> ar{Ranking::from_scores("q", {{"a", 3}, {"b", 2}, {"c", 1}}, "t")};
    double ap = map_at_k(ar, ha, 3).mean;
    bool hand = std::abs(ndcg - 0.7039) <= metric_hand_tolerance && std::abs(ap - 0.8333) <= metric_hand_tolerance;
    return {worst <= metric_oracle_tolerance && hand,
            "max oracle gap " + fmt("%.1e", worst) + " over 1000 cases; hand nDCG " + fmt("%.4f", ndcg) + ", AP " +
                fmt("%.4f", ap)};
}

Outcome permutation_test() {
    std::mt19937_64 rng(106);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::map<std::string, double> same;
    for (int i = 0; i < 30; ++i) same[std::to_string(i)] = u(rng);
    bool identical = paired_permutation_test(same, same, 1000, 1) == 1.0;
    double worst = 0.0;
    for (std::size_t n = 1; n <= 12; ++n) {
        std::map<std::string, double> a, b;
        std::vector<double> diff;
        for (std::size_t i = 0; i < n; ++i) {
            a[std::to_string(i)] = u(rng);
            b[std::to_string(i)] = u(rng) * 0.75;
        }
        for (const auto& [q, v] : a) diff.push_back(v - b[q]);
        double exact = oracle::exact_permutation_p(diff);
        double mc = paired_permutation_test(a, b, permutation_samples, 1000 + n, PermutationMethod::monte_carlo);
        worst = std::max(worst, std::abs(mc - exact));
    }
    return {identical && worst <= permutation_tolerance,
            std::string("identical inputs p=") + (identical ? "1" : "!=1") + "; max |MC - exact| " +
                fmt("%.4f", worst) + " for n=1..12 at 100k samples"};
}

std::vector<Document> random_corpus(std::mt19937_64& rng) {
    static const std::vector<std::string> words{"x", "y", "z", "b", "c", "d", "e", "f"};
    std::vector<Document> docs;
    std::size_t n = 2 + rng() % 19;
    for (std::size_t i = 0; i < n; ++i) {
        std::string body;
        for (std::size_t w = 1 + rng() % 15; w > 0; --w) body += words[rng() % words.size()] + " ";
        std::optional<std::string> title;
        if (rng() % 3 == 0) title = words[rng() % words.size()];
        docs.push_back({"D" + std::to_string(100 + (i * 37) % 1000), title, body});
    }
    return docs;
}

bool same_ranking(const Ranking& got, const std::vector<oracle::Scored>& want) {
    if (got.entries.size() != want.size()) return false;
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (got.entries[i].doc_id != want[i].doc_id) return false;
        if (std::abs(got.entries[i].score - want[i].score) > score_tolerance) return false;
    }
    return true;
}

Outcome first_stage_oracle() {
    std::mt19937_64 rng(107);
    const std::vector<std::string> words{"x", "y", "z", "b", "c", "d", "e", "f", "q"};
    std::size_t bm_ok = 0, sdm_ok = 0, reduce_ok = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto docs = random_corpus(rng);
        auto index = build_index(docs);
        std::string query;
        for (std::size_t w = 1 + rng() % 4; w > 0; --w) query += words[rng() % words.size()] + " ";
        auto want = oracle::bm25(docs, query);
        auto bm = retrieve_bm25(index, query, 100);
        bm_ok += same_ranking(bm, want);
        SdmParams p;  // defaults: (0.85, 0.10, 0.05), windows 1 and 8
        sdm_ok += same_ranking(retrieve_sdm(index, query, 100, p), oracle::sdm(docs, query, 0.85, 0.10, 0.05, 1, 8));
        auto unigram = retrieve_sdm(index, query, 100, {1.0, 0.0, 0.0, 1, 8});
        bool same_order = bm.entries.size() == unigram.entries.size();
        for (std::size_t i = 0; same_order && i < bm.entries.size(); ++i)
            same_order = bm.entries[i].doc_id == unigram.entries[i].doc_id;
        reduce_ok += same_order;
    }
    return {bm_ok == 100 && sdm_ok == 100 && reduce_ok == 100,
            "BM25 " + std::to_string(bm_ok) + "/100, SDM " + std::to_string(sdm_ok) + "/100, SDM(1,0,0)=BM25 order " +
                std::to_string(reduce_ok) + "/100"};
}

Outcome overfit() {
    EncoderConfig c;
    c.layers = 1;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.max_len = 16;
    c.vocab = 40;
    c.dropout = 0.1;
    c.max_query_len = 4;
    std::mt19937_64 rng(1);
    std::vector<LabeledEncoding> data;
    for (int i = 0; i < 32; ++i) data.push_back({toy::random_encoding(rng, c), i % 2});
    TrainOptions o;
    o.steps = overfit_steps;
    o.batch = 8;
    o.lr = 3e-3;
    o.seed = 2;
    auto a = train(init_params(c, 3), data, o);
    auto b = train(init_params(c, 3), data, o);
    double loss = dataset_loss(a.params, data);
    bool deterministic = a.loss_curve == b.loss_curve;
    return {loss < overfit_loss && deterministic,
            "training-set loss " + fmt("%.4f", loss) + " after 500 steps on 32 pairs; rerun " +
                (deterministic ? "bit-identical" : "DIFFERS")};
}

ExperimentConfig e2e_config(const std::filesystem::path& data, const std::filesystem::path& work) {
    ExperimentConfig c;
    c.corpus = data / "corpus.jsonl";
    c.topics = data / "topics.txt";
    c.qrels = data / "qrels.txt";
    c.workdir = work;
    c.seed = 11;
    c.vocab_size = 1024;
    c.encoder.layers = 1;
    c.encoder.hidden = 32;
    c.encoder.heads = 2;
    c.encoder.ffn = 64;
    c.encoder.max_len = 176;
    c.encoder.dropout = 0.1;
    c.encoder.max_query_len = 16;
    c.train.lr = 1e-3;
    c.train.steps = 300;
    c.train.batch = 16;
    return c;
}

// Every relevant document holds its answer phrase inside exactly one
// passage, and never the first.
bool needles_placed(const SyntheticCollection& collection) {
    std::size_t relevant = 0;
    for (const auto& d : collection.docs) {
        auto it = collection.answer_offset.find(d.doc_id);
        if (it == collection.answer_offset.end()) continue;
        ++relevant;
        std::size_t holders = 0, where = 0;
        for (const auto& p : segment_document(d)) {
            if (p.span.start <= it->second && it->second + collection.marker.size() + 2 <= p.span.end) {
                ++holders;
                where = p.passage_index;
            }
        }
        if (holders != 1 || where == 0) return false;
    }
    return relevant > 0;
}

Outcome end_to_end(const SyntheticCollection& collection, const std::filesystem::path& data,
                   const std::filesystem::path& scratch) {
    auto t0 = Clock::now();
    bool shape = collection.docs.size() >= 500 && collection.topics.size() >= 50 && needles_placed(collection);
    auto c = e2e_config(data, scratch / "experiment");
    auto r = run_experiment(c);
    const auto& maxp = r.fold_means.at({"MaxP", "title"});
    const auto& bow = r.fold_means.at({"BOW", "title"});
    int wins = 0;
    for (std::size_t f = 0; f < maxp.size(); ++f) wins += maxp[f] > bow[f];
    double m = r.reports.at({"MaxP", "title"}).mean;
    double first = r.reports.at({"FirstP", "title"}).mean;
    double b = r.reports.at({"BOW", "title"}).mean;
    double secs = seconds_since(t0);
    return {shape && wins >= 4 && m >= first && secs < e2e_budget_seconds,
            std::to_string(collection.docs.size()) + " docs / " + std::to_string(collection.topics.size()) +
                " topics, needles " + (shape ? "placed" : "MISPLACED") + "; MaxP > BOW on " + std::to_string(wins) + "/5 folds; nDCG@20 MaxP " + fmt("%.4f", m) + ", FirstP " +
                fmt("%.4f", first) + ", BOW " + fmt("%.4f", b) + "; " + fmt("%.0f", secs) + " s"};
}

Outcome adaptation(const std::filesystem::path& data, const std::filesystem::path& scratch) {
    auto c = e2e_config(data, scratch / "adaptation");
    auto r = run_adaptation(c);
    const auto& label = r.metrics.front();
    double a = r.reports.at({"random-init", label}).mean;
    double pre = r.reports.at({"pretrain", label}).mean;
    double cc = r.reports.at({"pretrain+weaklog", label}).mean;
    // Identical candidates across arms: every arm re-ranks the same documents.
    bool same_candidates = true;
    std::map<std::string, std::set<std::string>> reference;
    for (const auto& run : load_run(c.workdir / "adapt/runs/random-init.run"))
        for (const auto& e : run.entries) reference[run.query_id].insert(e.doc_id);
    for (const char* arm : {"pretrain", "pretrain+weaklog"}) {
        for (const auto& run : load_run(c.workdir / "adapt/runs" / (std::string(arm) + ".run"))) {
            std::set<std::string> docs;
            for (const auto& e : run.entries) docs.insert(e.doc_id);
            same_candidates = same_candidates && docs == reference[run.query_id];
        }
    }
    auto audit = audit_leakage(c.workdir);
    auto audit_exp = audit_leakage(scratch / "experiment");
    return {cc >= a && audit.passed && audit_exp.passed && same_candidates,
            label + " random-init " + fmt("%.4f", a) + ", pretrain " + fmt("%.4f", pre) + ", pretrain+weaklog " +
                fmt("%.4f", cc) + "; candidates " + (same_candidates ? "shared" : "DIFFER") + "; leakage audit " +
                (audit.passed && audit_exp.passed ? "passed" : "FAILED")};
}


// Own sentence split and marker scan: sentences end at . ! or ?, and a
// marker matches when it appears between non-alphanumeric boundaries after
// lowercasing and collapsing whitespace.
bool oracle_flagged(const std::string& sentence) {
    std::string norm = " ";
    for (char ch : sentence) {
        unsigned char u = static_cast<unsigned char>(ch);
        if (std::isspace(u)) {
            if (norm.back() != ' ') norm += ' ';
        } else {
            norm += static_cast<char>(std::tolower(u));
        }
    }
    norm += ' ';
    for (const auto& m : negation_markers()) {
        for (auto pos = norm.find(m); pos != std::string::npos; pos = norm.find(m, pos + 1)) {
            if (!std::isalnum(static_cast<unsigned char>(norm[pos - 1])) &&
                !std::isalnum(static_cast<unsigned char>(norm[pos + m.size()])))
                return true;
        }
    }
    return false;
}

std::vector<std::string> oracle_sentences(const std::string& text) {
    std::vector<std::string> out{""};
    for (char ch : text) {
        out.back() += ch;
        if (ch == '.' || ch == '!' || ch == '?') out.emplace_back();
    }
    return out;
}

Outcome variant_plumbing(std::vector<TopicQuery> topics) {
    std::istringstream in(fixtures::topic_697);
    auto t697 = read_topics(in).at(0);
    topics.push_back(t697);
    std::size_t checked = 0, bad = 0, flagged = 0;
    for (const auto& t : topics) {
        if (!t.description || !t.narrative) continue;
        ++checked;
        auto words = [&](QueryKind k) { return split_whitespace(make_query_variant(t, k).text); };
        std::vector<std::string> expected;
        for (const auto& s : oracle_sentences(*t.narrative)) {
            if (oracle_flagged(s)) {
                ++flagged;
                continue;
            }
            for (auto& w : split_whitespace(s)) expected.push_back(w);
        }
        bool ok = words(QueryKind::desc_keywords).size() <= words(QueryKind::desc).size() &&
                  words(QueryKind::narr_positive) == expected;
        if (!ok) ++bad;
    }
    auto positive = make_query_variant(t697, QueryKind::narr_positive).text;
    bool removed = positive.find("foreign controllers") == std::string::npos &&
                   positive.find("working conditions") != std::string::npos;
    return {bad == 0 && removed && flagged > 0,
            std::to_string(checked - bad) + "/" + std::to_string(checked) + " topics pass (" +
                std::to_string(flagged) + " flagged sentences); topic 697 narr_positive: \"" + positive + "\""};
}

}  // namespace

int main(int argc, char** argv) {
    configure_allocator();
    std::filesystem::path scratch =
        argc > 1 ? std::filesystem::path(argv[1]) : std::filesystem::temp_directory_path() / "ctxrank-acceptance";
    std::error_code ec;
    std::filesystem::remove_all(scratch, ec);
    std::filesystem::create_directories(scratch);

    auto collection = make_synthetic_collection();
    auto data = scratch / "data";
    write_synthetic_collection(collection, data);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient exactness", gradient_exactness},
        {"attention normalization and padding invariance", attention_and_padding},
        {"segmentation", segmentation},
        {"aggregation", aggregation},
        {"metrics oracle", metrics_oracle},
        {"permutation test", permutation_test},
        {"first-stage oracle", first_stage_oracle},
        {"overfit sanity", overfit},
        {"end-to-end re-ranking", [&] { return end_to_end(collection, data, scratch); }},
        {"adaptation staging", [&] { return adaptation(data, scratch); }},
        {"query-variant plumbing", [&] { return variant_plumbing(collection.topics); }},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %zu %s: %s (%s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
