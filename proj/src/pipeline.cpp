#include "ctxrank/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "ctxrank/error.hpp"
#include "ctxrank/io.hpp"

namespace ctxrank {

// ---------------------------------------------------------------------------
// Configuration

nlohmann::json default_config_json() {
    ExperimentConfig d;
    nlohmann::json j;
    j["paths"] = {{"corpus", ""}, {"corpus_format", "jsonl"}, {"topics", ""}, {"qrels", ""}, {"workdir", ""}};
    j["first_stage"] = {{"depth", d.depth},
                        {"k1", d.bm25.k1},
                        {"b", d.bm25.b},
                        {"sdm_weights", {d.sdm.unigram_weight, d.sdm.ordered_weight, d.sdm.unordered_weight}},
                        {"ordered_window", d.sdm.ordered_window},
                        {"unordered_window", d.sdm.unordered_window}};
    j["passage"] = {{"window", d.segment.window},
                    {"stride", d.segment.stride},
                    {"prepend_title", d.segment.prepend_title},
                    {"max_passages", d.segment.max_passages},
                    {"neg_ratio", d.neg_ratio}};
    j["vocab_size"] = d.vocab_size;
    j["encoder"] = d.encoder;
    j["train"] = {{"lr", d.train.lr},
                  {"steps", d.train.steps},
                  {"batch", d.train.batch},
                  {"weight_decay", d.train.weight_decay},
                  {"clip_norm", d.train.clip_norm},
                  {"init_std", d.init_std}};
    j["aggregations"] = {"FirstP", "MaxP", "SumP"};
    j["variants"] = {"title"};
    j["candidates_from"] = nullptr;
    j["folds"] = d.folds;
    j["seed"] = nullptr;
    j["metric"] = {{"name", d.metric}, {"k", d.metric_k}, {"gain", "linear"}, {"perm_samples", d.perm_samples}};
    const auto& a = d.adaptation;
    j["adaptation"] = {{"weak_queries", a.weak_queries},   {"weak_negatives", a.weak_negatives},
                       {"mask_rate", a.mask_rate},         {"pretrain_steps", a.pretrain_steps},
                       {"weak_steps", a.weak_steps},       {"aggregation", aggregation_name(a.aggregation)}};
    return j;
}

namespace {

void merge_checked(nlohmann::json& base, const nlohmann::json& user, const std::string& where) {
    if (!user.is_object()) throw UsageError("config section " + where + " must be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string name = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw UsageError("unknown config key \"" + name + "\"");
        if (base[key].is_object()) {
            merge_checked(base[key], value, name);
        } else {
            base[key] = value;
        }
    }
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream seeds derived from the experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    return splitmix64(splitmix64(seed ^ fnv1a64(tag)) + index);
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& user) {
    auto j = default_config_json();
    merge_checked(j, user, "");
    ExperimentConfig c;
    try {
        const auto& p = j["paths"];
        c.corpus = p["corpus"].get<std::string>();
        c.corpus_format = parse_corpus_format(p["corpus_format"].get<std::string>());
        c.topics = p["topics"].get<std::string>();
        c.qrels = p["qrels"].get<std::string>();
        c.workdir = p["workdir"].get<std::string>();

        const auto& f = j["first_stage"];
        c.depth = f["depth"].get<std::size_t>();
        c.bm25.k1 = f["k1"].get<double>();
        c.bm25.b = f["b"].get<double>();
        auto w = f["sdm_weights"].get<std::vector<double>>();
        if (w.size() != 3) throw UsageError("first_stage.sdm_weights needs three values");
        c.sdm.unigram_weight = w[0];
        c.sdm.ordered_weight = w[1];
        c.sdm.unordered_weight = w[2];
        c.sdm.ordered_window = f["ordered_window"].get<std::uint32_t>();
        c.sdm.unordered_window = f["unordered_window"].get<std::uint32_t>();

        const auto& ps = j["passage"];
        c.segment.window = ps["window"].get<std::size_t>();
        c.segment.stride = ps["stride"].get<std::size_t>();
        c.segment.prepend_title = ps["prepend_title"].get<bool>();
        c.segment.max_passages = ps["max_passages"].get<std::size_t>();
        c.neg_ratio = ps["neg_ratio"].get<double>();

        c.vocab_size = j["vocab_size"].get<std::size_t>();
        c.encoder = j["encoder"].get<EncoderConfig>();

        const auto& t = j["train"];
        c.train.lr = t["lr"].get<double>();
        c.train.steps = t["steps"].get<std::size_t>();
        c.train.batch = t["batch"].get<std::size_t>();
        c.train.weight_decay = t["weight_decay"].get<double>();
        c.train.clip_norm = t["clip_norm"].get<double>();
        c.init_std = t["init_std"].get<double>();

        c.aggregations.clear();
        for (const auto& a : j["aggregations"]) c.aggregations.push_back(parse_aggregation_mode(a.get<std::string>()));
        c.variants.clear();
        for (const auto& v : j["variants"]) c.variants.push_back(parse_query_kind(v.get<std::string>()));
        if (!j["candidates_from"].is_null()) c.candidates_from = parse_query_kind(j["candidates_from"].get<std::string>());
        c.folds = j["folds"].get<int>();
        if (j["seed"].is_null()) throw UsageError("config must set a seed");
        c.seed = j["seed"].get<std::uint64_t>();

        const auto& m = j["metric"];
        c.metric = to_lower_ascii(m["name"].get<std::string>());
        c.metric_k = m["k"].get<std::size_t>();
        c.gain = parse_gain(m["gain"].get<std::string>());
        c.perm_samples = m["perm_samples"].get<std::size_t>();

        const auto& a = j["adaptation"];
        c.adaptation.weak_queries = a["weak_queries"].get<std::size_t>();
        c.adaptation.weak_negatives = a["weak_negatives"].get<std::size_t>();
        c.adaptation.mask_rate = a["mask_rate"].get<double>();
        c.adaptation.pretrain_steps = a["pretrain_steps"].get<std::size_t>();
        c.adaptation.weak_steps = a["weak_steps"].get<std::size_t>();
        c.adaptation.aggregation = parse_aggregation_mode(a["aggregation"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("bad config value: ") + e.what());
    }
    if (c.metric != "ndcg" && c.metric != "map") throw UsageError("metric.name must be ndcg or map");
    if (c.variants.empty()) throw UsageError("config lists no query variants");
    if (c.aggregations.empty()) throw UsageError("config lists no aggregation modes");
    if (c.depth < 1) throw UsageError("first_stage.depth must be at least 1");
    c.encoder.validate();
    return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
    auto j = default_config_json();
    j["paths"] = {{"corpus", c.corpus.string()},
                  {"corpus_format", c.corpus_format == CorpusFormat::jsonl ? "jsonl" : "trectext"},
                  {"topics", c.topics.string()},
                  {"qrels", c.qrels.string()},
                  {"workdir", c.workdir.string()}};
    j["first_stage"] = {{"depth", c.depth},
                        {"k1", c.bm25.k1},
                        {"b", c.bm25.b},
                        {"sdm_weights", {c.sdm.unigram_weight, c.sdm.ordered_weight, c.sdm.unordered_weight}},
                        {"ordered_window", c.sdm.ordered_window},
                        {"unordered_window", c.sdm.unordered_window}};
    j["passage"] = {{"window", c.segment.window},
                    {"stride", c.segment.stride},
                    {"prepend_title", c.segment.prepend_title},
                    {"max_passages", c.segment.max_passages},
                    {"neg_ratio", c.neg_ratio}};
    j["vocab_size"] = c.vocab_size;
    j["encoder"] = c.encoder;
    j["train"] = {{"lr", c.train.lr},
                  {"steps", c.train.steps},
                  {"batch", c.train.batch},
                  {"weight_decay", c.train.weight_decay},
                  {"clip_norm", c.train.clip_norm},
                  {"init_std", c.init_std}};
    j["aggregations"] = nlohmann::json::array();
    for (auto a : c.aggregations) j["aggregations"].push_back(aggregation_name(a));
    j["variants"] = nlohmann::json::array();
    for (auto v : c.variants) j["variants"].push_back(std::string(query_kind_name(v)));
    j["candidates_from"] = c.candidates_from ? nlohmann::json(std::string(query_kind_name(*c.candidates_from)))
                                             : nlohmann::json(nullptr);
    j["folds"] = c.folds;
    j["seed"] = c.seed;
    j["metric"] = {{"name", c.metric},
                   {"k", c.metric_k},
                   {"gain", c.gain == Gain::linear ? "linear" : "exponential"},
                   {"perm_samples", c.perm_samples}};
    const auto& a = c.adaptation;
    j["adaptation"] = {{"weak_queries", a.weak_queries},   {"weak_negatives", a.weak_negatives},
                       {"mask_rate", a.mask_rate},         {"pretrain_steps", a.pretrain_steps},
                       {"weak_steps", a.weak_steps},       {"aggregation", aggregation_name(a.aggregation)}};
    return j;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* node = &j;
    std::size_t start = 0;
    for (;;) {
        auto dot = key.find('.', start);
        std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw UsageError("bad override key \"" + key + "\"");
        if (!node->is_object()) *node = nlohmann::json::object();
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = value;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    nlohmann::json j = nlohmann::json::object();
    if (!path.empty()) {
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("config " + path.string() + ": " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

void check_config_paths(const ExperimentConfig& c) {
    for (const auto& [name, p] : {std::pair{"corpus", c.corpus}, {"topics", c.topics}, {"qrels", c.qrels}}) {
        if (p.empty()) throw UsageError(std::string("config needs paths.") + name);
        if (!std::filesystem::exists(p)) throw DataError(std::string(name) + " file not found: " + p.string());
    }
    if (c.workdir.empty()) throw UsageError("config needs paths.workdir");
}

QueryKind candidate_variant(const ExperimentConfig& config, QueryKind variant) {
    if (config.candidates_from) return *config.candidates_from;
    switch (variant) {
        case QueryKind::narr:
        case QueryKind::narr_keywords:
        case QueryKind::narr_positive:
            return QueryKind::title;
        default:
            return variant;
    }
}

// ---------------------------------------------------------------------------
// Passages and examples

PassageStore::PassageStore(const std::vector<Document>& docs, SegmentOptions options, const SubwordVocab& vocab)
    : docs_(docs), options_(options), vocab_(vocab) {
    for (std::size_t i = 0; i < docs.size(); ++i) index_.emplace(docs[i].doc_id, i);
}

const Document& PassageStore::document(const std::string& doc_id) const {
    auto it = index_.find(doc_id);
    if (it == index_.end()) throw DataError("document " + doc_id + " is not in the corpus");
    return docs_[it->second];
}

PassageStore::Entry& PassageStore::entry(const std::string& doc_id) {
    auto it = cache_.find(doc_id);
    if (it != cache_.end()) return it->second;
    Entry e;
    bool capped = false;
    e.passages = segment_document(document(doc_id), options_, &capped);
    if (capped) log_warn("document " + doc_id + " hit the passage cap of " + std::to_string(options_.max_passages));
    for (const auto& p : e.passages) e.tokens.push_back(wordpiece_tokenize(p.text, vocab_));
    return cache_.emplace(doc_id, std::move(e)).first->second;
}

const std::vector<Passage>& PassageStore::passages(const std::string& doc_id) { return entry(doc_id).passages; }

const std::vector<std::vector<int>>& PassageStore::tokens(const std::string& doc_id) { return entry(doc_id).tokens; }

std::vector<LabeledEncoding> build_training_examples(const std::vector<std::string>& query_ids,
                                                     const std::map<std::string, std::vector<int>>& query_tokens,
                                                     const std::map<std::string, Ranking>& candidates,
                                                     const Judgments& judgments, PassageStore& store,
                                                     const EncoderConfig& encoder, double neg_ratio,
                                                     std::uint64_t seed) {
    std::vector<LabeledEncoding> out;
    for (const auto& q : query_ids) {
        auto cit = candidates.find(q);
        auto qit = query_tokens.find(q);
        if (cit == candidates.end() || cit->second.entries.empty() || qit == query_tokens.end()) continue;
        std::vector<Passage> labeled;
        for (const auto& e : cit->second.entries) {
            auto ps = label_passages(store.passages(e.doc_id), judgments.grade(q, e.doc_id) > 0);
            labeled.insert(labeled.end(), ps.begin(), ps.end());
        }
        for (const auto& p : downsample_negatives(std::move(labeled), neg_ratio, derive_seed(seed, q))) {
            const auto& toks = store.tokens(p.doc_id)[p.passage_index];
            out.push_back({encode_pair(qit->second, toks, encoder), *p.label});
        }
    }
    return out;
}

std::map<AggregationMode, Ranking> rerank_candidates(const EncoderParams& params, const std::vector<int>& query_tokens,
                                                     const Ranking& candidates, PassageStore& store,
                                                     const std::vector<AggregationMode>& modes) {
    std::map<AggregationMode, std::vector<RankedEntry>> entries;
    std::vector<double> scores;
    for (const auto& e : candidates.entries) {
        scores.clear();
        for (const auto& toks : store.tokens(e.doc_id)) {
            scores.push_back(forward(params, encode_pair(query_tokens, toks, params.config)).probability);
        }
        for (auto m : modes) entries[m].push_back({e.doc_id, aggregate_scores(scores, m)});
    }
    std::map<AggregationMode, Ranking> out;
    for (auto m : modes) {
        out[m] = Ranking::from_scores(candidates.query_id, std::move(entries[m]), aggregation_name(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared experiment plumbing

namespace {

struct Inputs {
    std::vector<Document> docs;
    std::vector<TopicQuery> topics;  // judged topics only
    Judgments qrels;
    InvertedIndex index;
    std::unique_ptr<SubwordVocab> vocab;
    EncoderConfig encoder;
    FoldPlan folds;
};

Inputs load_inputs(const ExperimentConfig& c) {
    check_config_paths(c);
    Inputs in;
    in.docs = load_corpus(c.corpus, c.corpus_format);
    in.qrels = load_qrels(c.qrels);
    for (auto& t : load_topics(c.topics)) {
        if (!in.qrels.has_query(t.query_id)) {
            log_warn("topic " + t.query_id + " has no judgments; excluded");
            continue;
        }
        in.topics.push_back(std::move(t));
    }
    if (in.topics.empty()) throw DataError("no judged topics to evaluate");
    log_info("indexing " + std::to_string(in.docs.size()) + " documents");
    in.index = build_index(in.docs);
    in.vocab = std::make_unique<SubwordVocab>(build_subword_vocab(std::span<const Document>(in.docs), c.vocab_size));
    in.encoder = c.encoder;
    in.encoder.vocab = static_cast<int>(in.vocab->size());
    std::vector<std::string> ids;
    for (const auto& t : in.topics) ids.push_back(t.query_id);
    in.folds = make_folds(ids, c.folds, c.seed);
    return in;
}

Ranking first_stage(const InvertedIndex& index, const std::string& qid, const std::string& text, bool sdm,
                    const ExperimentConfig& c) {
    Ranking r;
    try {
        r = sdm ? retrieve_sdm(index, text, c.depth, c.sdm, c.bm25) : retrieve_bm25(index, text, c.depth, c.bm25);
    } catch (const DataError& e) {
        log_warn("query " + qid + ": " + e.what() + "; empty first-stage ranking");
    }
    r.query_id = qid;
    r.run_tag = sdm ? "SDM" : "BOW";
    return r;
}

struct VariantRuns {
    std::map<std::string, Ranking> bow;
    std::map<std::string, Ranking> sdm;
    std::map<std::string, Ranking> candidates;
    std::map<std::string, std::vector<int>> query_tokens;
};

VariantRuns prepare_variant(const Inputs& in, const ExperimentConfig& c, QueryKind variant) {
    VariantRuns runs;
    const QueryKind cand_kind = candidate_variant(c, variant);
    for (const auto& t : in.topics) {
        const auto text = make_query_variant(t, variant).text;
        runs.bow[t.query_id] = first_stage(in.index, t.query_id, text, false, c);
        runs.sdm[t.query_id] = first_stage(in.index, t.query_id, text, true, c);
        runs.candidates[t.query_id] =
            cand_kind == variant ? runs.bow[t.query_id]
                                 : first_stage(in.index, t.query_id, make_query_variant(t, cand_kind).text, false, c);
        auto toks = wordpiece_tokenize(text, *in.vocab);
        if (toks.empty()) toks.push_back(SubwordVocab::unk_id);
        runs.query_tokens[t.query_id] = std::move(toks);
    }
    return runs;
}

std::vector<Ranking> select(const std::map<std::string, Ranking>& runs, const std::vector<std::string>& ids,
                            const std::string& tag) {
    std::vector<Ranking> out;
    for (const auto& q : ids) {
        auto r = runs.at(q);
        r.run_tag = tag;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<std::string> all_queries(const Inputs& in) {
    std::vector<std::string> ids;
    for (const auto& t : in.topics) ids.push_back(t.query_id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

void write_query_list(const std::filesystem::path& path, const std::vector<std::string>& ids) {
    write_file_atomic(path, [&](std::ostream& out) {
        for (const auto& q : ids) out << q << '\n';
    });
}

// Queries whose judgments a training set actually draws on.
std::vector<std::string> contributing_queries(const std::vector<std::string>& ids,
                                              const std::map<std::string, Ranking>& candidates) {
    std::vector<std::string> out;
    for (const auto& q : ids) {
        auto it = candidates.find(q);
        if (it != candidates.end() && !it->second.entries.empty()) out.push_back(q);
    }
    return out;
}

void write_fold_artifacts(const std::filesystem::path& workdir, const Inputs& in,
                          const std::map<std::string, Ranking>& candidates) {
    write_file_atomic(workdir / "folds.txt", [&](std::ostream& out) { write_fold_plan(out, in.folds); });
    for (int f = 0; f < in.folds.k; ++f) {
        const auto dir = workdir / ("fold" + std::to_string(f));
        write_query_list(dir / "train_queries.txt",
                         contributing_queries(in.folds.queries_outside_fold(f), candidates));
        write_query_list(dir / "test_queries.txt", in.folds.queries_in_fold(f));
    }
}

EncoderParams train_logged(EncoderParams init, const std::vector<LabeledEncoding>& examples, TrainOptions opt,
                           const std::string& label) {
    if (examples.empty()) {
        log_warn(label + ": no training examples; keeping initial parameters");
        return init;
    }
    auto result = train(std::move(init), examples, opt);
    std::size_t tail = std::min<std::size_t>(20, result.loss_curve.size());
    double recent = 0.0;
    for (std::size_t i = result.loss_curve.size() - tail; i < result.loss_curve.size(); ++i) recent += result.loss_curve[i];
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s: %zu examples, %zu steps, recent loss %.4f", label.c_str(), examples.size(),
                  opt.steps, tail ? recent / static_cast<double>(tail) : 0.0);
    log_info(buf);
    return std::move(result.params);
}

std::vector<double> fold_means_of(const MetricReport& report, const FoldPlan& plan) {
    std::vector<double> means;
    for (int f = 0; f < plan.k; ++f) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& q : plan.queries_in_fold(f)) {
            auto it = report.per_query.find(q);
            if (it == report.per_query.end()) continue;
            sum += it->second;
            ++n;
        }
        means.push_back(n ? sum / static_cast<double>(n) : 0.0);
    }
    return means;
}

nlohmann::json input_manifest(const ExperimentConfig& c) {
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [name, p] : {std::pair{"corpus", c.corpus}, {"topics", c.topics}, {"qrels", c.qrels}}) {
        inputs[name] = {{"path", p.string()}, {"fnv1a64", hex64(fnv1a64(read_file(p)))}};
    }
    return inputs;
}

void write_manifest(const ExperimentConfig& c, const std::string& kind, const std::vector<std::string>& outputs) {
    const auto cfg = config_to_json(c);
    nlohmann::json m;
    m["kind"] = kind;
    m["inputs"] = input_manifest(c);
    m["config_hash"] = hex64(fnv1a64(cfg.dump()));
    m["seed"] = c.seed;
    m["config"] = cfg;
    m["outputs"] = outputs;
    write_file_atomic(c.workdir / (kind + "_manifest.json"), [&](std::ostream& out) { out << m.dump(2) << '\n'; });
}

std::string metric_label(const std::string& metric, std::size_t k) { return metric + "@" + std::to_string(k); }

}  // namespace

// ---------------------------------------------------------------------------
// Cross-validated re-ranking

ExperimentResult run_experiment(const ExperimentConfig& c) {
    auto in = load_inputs(c);
    std::filesystem::create_directories(c.workdir);
    save_vocab(c.workdir / "vocab.txt", *in.vocab);
    PassageStore store(in.docs, c.segment, *in.vocab);

    ExperimentResult result;
    result.folds = in.folds;
    result.metric_label = metric_label(c.metric, c.metric_k);
    result.systems = {"BOW", "SDM"};
    for (auto m : c.aggregations) result.systems.push_back(aggregation_name(m));
    const auto qids = all_queries(in);
    std::vector<std::string> outputs{"vocab.txt", "folds.txt"};

    for (std::size_t vi = 0; vi < c.variants.size(); ++vi) {
        const QueryKind variant = c.variants[vi];
        const std::string vname(query_kind_name(variant));
        result.variants.push_back(vname);
        auto runs = prepare_variant(in, c, variant);
        if (vi == 0) write_fold_artifacts(c.workdir, in, runs.candidates);

        std::map<std::string, std::map<std::string, Ranking>> neural;  // system -> query -> ranking
        for (int f = 0; f < in.folds.k; ++f) {
            const auto train_q = in.folds.queries_outside_fold(f);
            const auto test_q = in.folds.queries_in_fold(f);
            auto examples = build_training_examples(train_q, runs.query_tokens, runs.candidates, in.qrels, store,
                                                    in.encoder, c.neg_ratio, derive_seed(c.seed, "examples", f));
            TrainOptions opt = c.train;
            opt.seed = derive_seed(c.seed, "train:" + vname, static_cast<std::uint64_t>(f));
            auto params = train_logged(init_params(in.encoder, derive_seed(c.seed, "init", f), c.init_std), examples,
                                       opt, vname + " fold " + std::to_string(f));
            std::map<std::string, std::vector<Ranking>> fold_runs;
            for (const auto& q : test_q) {
                const auto& cand = runs.candidates.at(q);
                if (cand.entries.empty()) {
                    for (auto m : c.aggregations) {
                        auto carried = cand;
                        carried.run_tag = aggregation_name(m);
                        neural[aggregation_name(m)][q] = carried;
                        fold_runs[aggregation_name(m)].push_back(carried);
                    }
                    continue;
                }
                for (auto& [mode, ranking] : rerank_candidates(params, runs.query_tokens.at(q), cand, store, c.aggregations)) {
                    neural[aggregation_name(mode)][q] = ranking;
                    fold_runs[aggregation_name(mode)].push_back(std::move(ranking));
                }
            }
            fold_runs["BOW"] = select(runs.bow, test_q, "BOW");
            fold_runs["SDM"] = select(runs.sdm, test_q, "SDM");
            for (const auto& [system, rankings] : fold_runs) {
                auto name = "runs/" + vname + "/" + system + ".fold" + std::to_string(f) + ".run";
                save_run(c.workdir / name, rankings);
                outputs.push_back(name);
            }
        }

        std::map<std::string, std::vector<Ranking>> merged;
        merged["BOW"] = select(runs.bow, qids, "BOW");
        merged["SDM"] = select(runs.sdm, qids, "SDM");
        for (const auto& [system, by_query] : neural) merged[system] = select(by_query, qids, system);
        for (const auto& system : result.systems) {
            auto name = "runs/" + vname + "/" + system + ".run";
            save_run(c.workdir / name, merged[system]);
            outputs.push_back(name);
            auto report = evaluate_metric(c.metric, merged[system], in.qrels, c.metric_k, c.gain);
            result.fold_means[{system, vname}] = fold_means_of(report, in.folds);
            result.reports[{system, vname}] = std::move(report);
        }
        const auto& sdm_report = result.reports.at({"SDM", vname});
        for (auto m : c.aggregations) {
            const auto& rep = result.reports.at({aggregation_name(m), vname});
            if (rep.per_query.empty()) continue;
            result.p_values[{aggregation_name(m), vname}] = paired_permutation_test(
                rep.per_query, sdm_report.per_query, c.perm_samples, derive_seed(c.seed, "perm"));
        }
    }

    write_file_atomic(c.workdir / "results.txt", [&](std::ostream& out) { write_result_table(out, result); });
    write_file_atomic(c.workdir / "results.json", [&](std::ostream& out) { out << result_to_json(result).dump(2) << '\n'; });
    outputs.push_back("results.txt");
    outputs.push_back("results.json");
    write_manifest(c, "experiment", outputs);
    return result;
}

void write_result_table(std::ostream& out, const ExperimentResult& r) {
    char buf[64];
    out << r.metric_label << '\n';
    std::snprintf(buf, sizeof buf, "%-8s", "system");
    out << buf;
    for (const auto& v : r.variants) {
        std::snprintf(buf, sizeof buf, " %14s", v.c_str());
        out << buf;
    }
    out << '\n';
    for (const auto& s : r.systems) {
        std::snprintf(buf, sizeof buf, "%-8s", s.c_str());
        out << buf;
        for (const auto& v : r.variants) {
            auto it = r.reports.find({s, v});
            std::snprintf(buf, sizeof buf, " %14.4f", it == r.reports.end() ? 0.0 : it->second.mean);
            out << buf;
        }
        out << '\n';
    }
    if (!r.p_values.empty()) {
        out << "\np-value vs SDM\n";
        for (const auto& [key, p] : r.p_values) {
            std::snprintf(buf, sizeof buf, "%-8s %-14s %.4f\n", key.first.c_str(), key.second.c_str(), p);
            out << buf;
        }
    }
    out << "\nper-fold means\n";
    for (const auto& [key, means] : r.fold_means) {
        std::snprintf(buf, sizeof buf, "%-8s %-14s", key.first.c_str(), key.second.c_str());
        out << buf;
        for (double m : means) {
            std::snprintf(buf, sizeof buf, " %.4f", m);
            out << buf;
        }
        out << '\n';
    }
}

nlohmann::json result_to_json(const ExperimentResult& r) {
    nlohmann::json j;
    j["metric"] = r.metric_label;
    j["systems"] = r.systems;
    j["variants"] = r.variants;
    j["table"] = nlohmann::json::object();
    for (const auto& [key, rep] : r.reports) {
        auto& cell = j["table"][key.first][key.second];
        cell["mean"] = rep.mean;
        cell["per_query"] = rep.per_query;
        cell["fold_means"] = r.fold_means.at(key);
        auto p = r.p_values.find(key);
        if (p != r.p_values.end()) cell["p_vs_sdm"] = p->second;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Weak supervision from titles

std::vector<WeakLogPair> synthesize_weak_log(const std::vector<Document>& docs, const InvertedIndex& index,
                                             std::size_t n_queries, std::size_t negatives_per_query,
                                             std::uint64_t seed, const Bm25Params& bm25) {
    if (n_queries < 1 || negatives_per_query < 1) throw UsageError("weak log needs at least one query and negative");
    std::vector<std::size_t> titled;
    for (std::size_t i = 0; i < docs.size(); ++i)
        if (docs[i].title && !split_whitespace(*docs[i].title).empty()) titled.push_back(i);
    if (titled.empty()) throw DataError("corpus has no titled documents to build a weak log from");
    if (docs.size() < 2) throw DataError("weak log needs at least two documents");
    if (titled.size() < n_queries) {
        log_warn("only " + std::to_string(titled.size()) + " titled documents; weak log is smaller than requested");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(titled.begin(), titled.end(), rng);
    titled.resize(std::min(titled.size(), n_queries));

    std::set<std::pair<std::string, std::string>> seen;
    std::vector<WeakLogPair> out;
    for (std::size_t src : titled) {
        const auto& doc = docs[src];
        std::string query;
        for (const auto& w : split_whitespace(*doc.title)) query += (query.empty() ? "" : " ") + w;
        if (!seen.insert({query, doc.doc_id}).second) continue;
        out.push_back({query, doc.doc_id, 1});
        std::size_t added = 0;
        auto add_negative = [&](const std::string& id) {
            if (added < negatives_per_query && id != doc.doc_id && seen.insert({query, id}).second) {
                out.push_back({query, id, 0});
                ++added;
            }
        };
        try {
            for (const auto& e : retrieve_bm25(index, query, negatives_per_query + 1, bm25).entries) add_negative(e.doc_id);
        } catch (const DataError&) {
            // Title has no indexable terms; fall back to random negatives.
        }
        for (std::size_t attempt = 0; added < negatives_per_query && attempt < 8 * docs.size(); ++attempt) {
            add_negative(docs[static_cast<std::size_t>(rng() % docs.size())].doc_id);
        }
        if (added == 0) throw DataError("no negative found for weak query \"" + query + "\"");
    }
    return out;
}

void write_weak_log(std::ostream& out, const std::vector<WeakLogPair>& pairs) {
    for (const auto& p : pairs) out << p.query << '\t' << p.doc_id << '\t' << p.label << '\n';
}

std::vector<WeakLogPair> read_weak_log(std::istream& in) {
    std::vector<WeakLogPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto t1 = line.find('\t');
        auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) throw DataError("weak log line " + std::to_string(line_no) + ": expected 3 fields");
        WeakLogPair p{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), 0};
        auto label = line.substr(t2 + 1);
        if (label != "0" && label != "1") throw DataError("weak log line " + std::to_string(line_no) + ": label must be 0 or 1");
        p.label = label == "1" ? 1 : 0;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptation arms

namespace {

std::vector<LabeledEncoding> weak_examples(const std::vector<WeakLogPair>& pairs, const SubwordVocab& vocab,
                                           PassageStore& store, const EncoderConfig& encoder, double neg_ratio,
                                           std::uint64_t seed) {
    std::map<std::string, std::vector<Passage>> by_query;
    for (const auto& p : pairs) {
        auto ps = label_passages(store.passages(p.doc_id), p.label == 1);
        auto& dst = by_query[p.query];
        dst.insert(dst.end(), ps.begin(), ps.end());
    }
    std::vector<LabeledEncoding> out;
    for (auto& [query, passages] : by_query) {
        auto qt = wordpiece_tokenize(query, vocab);
        if (qt.empty()) continue;
        for (const auto& p : downsample_negatives(std::move(passages), neg_ratio, derive_seed(seed, query))) {
            out.push_back({encode_pair(qt, store.tokens(p.doc_id)[p.passage_index], encoder), *p.label});
        }
    }
    return out;
}

double encoder_shift(const EncoderParams& a, const EncoderParams& b) {
    double shift = 0.0;
    std::vector<const Matrix*> bt;
    b.for_each([&](std::string_view, const Matrix& m) { bt.push_back(&m); });
    std::size_t i = 0;
    a.for_each([&](std::string_view name, const Matrix& m) {
        if (!is_head_tensor(name)) shift = std::max(shift, (m - *bt[i]).cwiseAbs().maxCoeff());
        ++i;
    });
    return shift;
}

}  // namespace

AdaptationResult run_adaptation(const ExperimentConfig& c) {
    auto in = load_inputs(c);
    std::filesystem::create_directories(c.workdir);
    save_vocab(c.workdir / "vocab.txt", *in.vocab);
    PassageStore store(in.docs, c.segment, *in.vocab);
    const QueryKind variant = c.variants.front();
    auto runs = prepare_variant(in, c, variant);
    write_fold_artifacts(c.workdir, in, runs.candidates);
    std::vector<std::string> outputs{"vocab.txt", "folds.txt"};

    // Stage 1: masked-token pretraining over every passage of the corpus.
    std::vector<std::vector<int>> sequences;
    const auto room = static_cast<std::size_t>(in.encoder.max_len - 3);
    for (const auto& d : in.docs) {
        for (auto toks : store.tokens(d.doc_id)) {
            if (toks.size() > room) toks.resize(room);
            if (toks.size() >= 2) sequences.push_back(std::move(toks));
        }
    }
    PretrainOptions pre;
    pre.mask_rate = c.adaptation.mask_rate;
    pre.train = c.train;
    pre.train.steps = c.adaptation.pretrain_steps;
    pre.train.seed = derive_seed(c.seed, "pretrain");
    auto pretrained = pretrain_masked(init_params(in.encoder, derive_seed(c.seed, "pretrain-init"), c.init_std),
                                      sequences, pre);
    log_info("masked-token pretraining: final loss " +
             std::to_string(pretrained.loss_curve.empty() ? 0.0 : pretrained.loss_curve.back()));
    save_checkpoint(c.workdir / "adapt" / "pretrained.ckpt", pretrained.params);
    outputs.push_back("adapt/pretrained.ckpt");

    // Stage 2: weak-log training on top of the pretrained encoder.
    auto weak = synthesize_weak_log(in.docs, in.index, c.adaptation.weak_queries, c.adaptation.weak_negatives,
                                    derive_seed(c.seed, "weaklog"), c.bm25);
    write_file_atomic(c.workdir / "adapt" / "weaklog.tsv", [&](std::ostream& out) { write_weak_log(out, weak); });
    outputs.push_back("adapt/weaklog.tsv");
    auto weak_init = init_for_finetune(pretrained.params, in.encoder, derive_seed(c.seed, "weak-head"), c.init_std);
    TrainOptions weak_opt = c.train;
    weak_opt.steps = c.adaptation.weak_steps;
    weak_opt.seed = derive_seed(c.seed, "weak-train");
    auto weak_params = train_logged(
        weak_init, weak_examples(weak, *in.vocab, store, in.encoder, c.neg_ratio, derive_seed(c.seed, "weak-ex")),
        weak_opt, "weak-log stage");
    save_checkpoint(c.workdir / "adapt" / "weaklog.ckpt", weak_params);
    outputs.push_back("adapt/weaklog.ckpt");

    AdaptationResult result;
    result.folds = in.folds;
    result.arms = {"random-init", "pretrain", "pretrain+weaklog"};
    result.metrics = {metric_label(c.metric, c.metric_k), metric_label(c.metric == "ndcg" ? "map" : "ndcg", c.metric_k)};
    result.weak_stage_shift = encoder_shift(weak_init, weak_params);

    const auto qids = all_queries(in);
    std::map<std::string, std::map<std::string, Ranking>> arm_runs;
    const std::vector<AggregationMode> mode{c.adaptation.aggregation};
    for (int f = 0; f < in.folds.k; ++f) {
        auto examples = build_training_examples(in.folds.queries_outside_fold(f), runs.query_tokens, runs.candidates,
                                                in.qrels, store, in.encoder, c.neg_ratio,
                                                derive_seed(c.seed, "examples", f));
        TrainOptions opt = c.train;
        opt.seed = derive_seed(c.seed, "adapt-train", f);
        std::vector<EncoderParams> starts;
        starts.push_back(init_params(in.encoder, derive_seed(c.seed, "init", f), c.init_std));
        starts.push_back(init_for_finetune(pretrained.params, in.encoder, derive_seed(c.seed, "init", f), c.init_std));
        starts.push_back(weak_params);
        for (std::size_t a = 0; a < starts.size(); ++a) {
            const auto& arm = result.arms[a];
            auto params = train_logged(std::move(starts[a]), examples, opt, arm + " fold " + std::to_string(f));
            std::vector<Ranking> fold_run;
            for (const auto& q : in.folds.queries_in_fold(f)) {
                const auto& cand = runs.candidates.at(q);
                Ranking r = cand.entries.empty()
                                ? cand
                                : rerank_candidates(params, runs.query_tokens.at(q), cand, store, mode).at(mode[0]);
                r.run_tag = arm;
                arm_runs[arm][q] = r;
                fold_run.push_back(std::move(r));
            }
            auto name = "adapt/runs/" + arm + ".fold" + std::to_string(f) + ".run";
            save_run(c.workdir / name, fold_run);
            outputs.push_back(name);
        }
    }

    for (const auto& arm : result.arms) {
        auto merged = select(arm_runs[arm], qids, arm);
        auto name = "adapt/runs/" + arm + ".run";
        save_run(c.workdir / name, merged);
        outputs.push_back(name);
        for (const auto& label : result.metrics) {
            auto metric = label.substr(0, label.find('@'));
            result.reports[{arm, label}] = evaluate_metric(metric, merged, in.qrels, c.metric_k, c.gain);
        }
    }
    const auto& primary = result.metrics.front();
    for (std::size_t a = 1; a < result.arms.size(); ++a) {
        for (std::size_t b = 0; b < a; ++b) {
            const auto& ra = result.reports.at({result.arms[a], primary});
            const auto& rb = result.reports.at({result.arms[b], primary});
            if (ra.per_query.empty()) continue;
            result.p_values[{result.arms[a], result.arms[b]}] =
                paired_permutation_test(ra.per_query, rb.per_query, c.perm_samples, derive_seed(c.seed, "perm"));
        }
    }
    write_file_atomic(c.workdir / "adapt" / "results.txt", [&](std::ostream& out) { write_adaptation_table(out, result); });
    outputs.push_back("adapt/results.txt");
    write_manifest(c, "adaptation", outputs);
    return result;
}

void write_adaptation_table(std::ostream& out, const AdaptationResult& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-18s", "arm");
    out << buf;
    for (const auto& m : r.metrics) {
        std::snprintf(buf, sizeof buf, " %10s", m.c_str());
        out << buf;
    }
    out << '\n';
    for (const auto& a : r.arms) {
        std::snprintf(buf, sizeof buf, "%-18s", a.c_str());
        out << buf;
        for (const auto& m : r.metrics) {
            std::snprintf(buf, sizeof buf, " %10.4f", r.reports.at({a, m}).mean);
            out << buf;
        }
        out << '\n';
    }
    out << "\npaired p-values (" << r.metrics.front() << ")\n";
    for (const auto& [key, p] : r.p_values) {
        std::snprintf(buf, sizeof buf, "%-18s vs %-18s %.4f\n", key.first.c_str(), key.second.c_str(), p);
        out << buf;
    }
}

// ---------------------------------------------------------------------------
// Audit and trace export

namespace {

std::vector<std::string> read_query_list(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(line);
    return out;
}

}  // namespace

LeakageAudit audit_leakage(const std::filesystem::path& workdir) {
    LeakageAudit audit;
    std::istringstream plan_text(read_file(workdir / "folds.txt"));
    const auto plan = read_fold_plan(plan_text);
    std::map<std::string, int> tested;
    for (int f = 0; f < plan.k; ++f) {
        const auto dir = workdir / ("fold" + std::to_string(f));
        for (const auto& q : read_query_list(dir / "train_queries.txt")) {
            auto it = plan.assignment.find(q);
            if (it == plan.assignment.end()) {
                audit.violations.push_back("fold " + std::to_string(f) + " trains on unknown query " + q);
            } else if (it->second == f) {
                audit.violations.push_back("fold " + std::to_string(f) + " trains on its own test query " + q);
            }
        }
        for (const auto& q : read_query_list(dir / "test_queries.txt")) {
            auto it = plan.assignment.find(q);
            if (it == plan.assignment.end() || it->second != f) {
                audit.violations.push_back("fold " + std::to_string(f) + " tests query " + q + " outside its fold");
            }
            ++tested[q];
        }
    }
    for (const auto& [q, _] : plan.assignment) {
        if (tested[q] != 1) audit.violations.push_back("query " + q + " is tested " + std::to_string(tested[q]) + " times");
    }
    audit.passed = audit.violations.empty();
    return audit;
}

AttentionTrace export_attention_trace(const EncoderParams& params, const SubwordVocab& vocab, const std::string& query,
                                      const std::string& passage, const std::filesystem::path& out) {
    auto q = wordpiece_tokenize(query, vocab);
    if (q.empty()) throw DataError("trace query has no tokens");
    auto enc = encode_pair(q, wordpiece_tokenize(passage, vocab), params.config);
    ForwardOptions opt;
    opt.capture_attention = true;
    auto res = forward(params, enc, opt);
    auto trace = std::move(*res.attention);
    nlohmann::json j;
    j["tokens"] = nlohmann::json::array();
    for (int id : trace.token_ids) j["tokens"].push_back(vocab.token(id));
    j["token_ids"] = trace.token_ids;
    j["truncated"] = enc.truncated;
    j["layers"] = trace.layers;
    j["heads"] = trace.heads;
    j["probability"] = res.probability;
    j["attention"] = nlohmann::json::array();
    for (int l = 0; l < trace.layers; ++l) {
        for (int h = 0; h < trace.heads; ++h) {
            const auto& m = trace.at(l, h);
            nlohmann::json rows = nlohmann::json::array();
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                std::vector<double> row(m.cols());
                for (Eigen::Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(i, k);
                rows.push_back(row);
            }
            j["attention"].push_back({{"layer", l}, {"head", h}, {"weights", rows}});
        }
    }
    write_file_atomic(out, [&](std::ostream& o) { o << j.dump() << '\n'; });
    return trace;
}

}  // namespace ctxrank
