// Command-line front end: indexing, retrieval, passage segmentation,
// training, re-ranking, evaluation and the cross-validated experiments.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxrank/corpus.hpp"
#include "ctxrank/crossenc.hpp"
#include "ctxrank/error.hpp"
#include "ctxrank/evaluate.hpp"
#include "ctxrank/firststage.hpp"
#include "ctxrank/io.hpp"
#include "ctxrank/passage.hpp"
#include "ctxrank/pipeline.hpp"
#include "ctxrank/synthetic.hpp"
#include "ctxrank/textprep.hpp"

using namespace ctxrank;

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string json_list(const std::vector<std::string>& items, bool quote) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        out += quote ? nlohmann::json(items[i]).dump() : items[i];
    }
    return out + "]";
}

// Experiment settings: a JSON config file, --set overrides, and named flags
// that are shorthands for common keys. Later sources win.
struct ConfigFlags {
    std::string config;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> named;
    std::vector<std::pair<std::string, std::string>> lists;  // key, comma list of strings
    std::string sdm_weights;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON experiment config");
        app->add_option("--set", sets, "Override a config key: section.key=value");
        named_flag(app, "--corpus", "paths.corpus", "Corpus file");
        named_flag(app, "--format", "paths.corpus_format", "Corpus format: jsonl or trectext");
        named_flag(app, "--topics", "paths.topics", "Topic file");
        named_flag(app, "--qrels", "paths.qrels", "Relevance judgments");
        named_flag(app, "--workdir", "paths.workdir", "Directory for result artifacts");
        named_flag(app, "--seed", "seed", "Random seed");
        named_flag(app, "--k1", "first_stage.k1", "BM25 k1");
        named_flag(app, "--b", "first_stage.b", "BM25 b");
        named_flag(app, "--depth", "first_stage.depth", "Candidates per query");
        named_flag(app, "--window", "passage.window", "Passage width in words");
        named_flag(app, "--stride", "passage.stride", "Passage stride in words");
        named_flag(app, "--prepend-title", "passage.prepend_title", "Prefix passages with the title (true/false)");
        named_flag(app, "--neg-ratio", "passage.neg_ratio", "Negative passages kept per positive");
        named_flag(app, "--metric", "metric.name", "ndcg or map");
        named_flag(app, "--k", "metric.k", "Metric cutoff");
        named_flag(app, "--gain", "metric.gain", "linear or exponential");
        named_flag(app, "--perm-samples", "metric.perm_samples", "Monte-Carlo permutation samples");
        named_flag(app, "--steps", "train.steps", "Training steps");
        named_flag(app, "--lr", "train.lr", "Learning rate");
        named_flag(app, "--candidates-from", "candidates_from", "Variant whose BM25 run supplies candidates");
        list_flag(app, "--variants", "variants", "Comma-separated query variants");
        list_flag(app, "--aggregations", "aggregations", "Comma-separated FirstP,MaxP,SumP");
        app->add_option("--sdm-weights", sdm_weights, "Comma-separated unigram,ordered,unordered weights");
    }

    ExperimentConfig load() const {
        std::vector<std::string> overrides;
        for (const auto& [key, value] : named)
            if (!value.empty()) overrides.push_back(key + "=" + value);
        for (const auto& [key, value] : lists)
            if (!value.empty()) overrides.push_back(key + "=" + json_list(split_list(value), true));
        if (!sdm_weights.empty()) overrides.push_back("first_stage.sdm_weights=" + json_list(split_list(sdm_weights), false));
        overrides.insert(overrides.end(), sets.begin(), sets.end());
        return load_config(config, overrides);
    }

  private:
    void named_flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        named.emplace_back(key, "");
        auto index = named.size() - 1;
        app->add_option_function<std::string>(
            flag,
            [this, index](const std::string& v) {
                // Strings must reach the JSON layer quoted; numbers and booleans stay bare.
                bool bare = v == "true" || v == "false";
                try {
                    auto j = nlohmann::json::parse(v);
                    bare = bare || j.is_number();
                } catch (const nlohmann::json::exception&) {
                }
                named[index].second = bare ? v : nlohmann::json(v).dump();
            },
            help);
    }

    void list_flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        lists.emplace_back(key, "");
        auto index = lists.size() - 1;
        app->add_option_function<std::string>(flag, [this, index](const std::string& v) { lists[index].second = v; }, help);
    }
};

void write_output(const std::string& path, const std::function<void(std::ostream&)>& writer) {
    if (path.empty() || path == "-") {
        writer(std::cout);
    } else {
        write_file_atomic(path, writer);
    }
}

std::map<std::string, Ranking> by_query(std::vector<Ranking> runs) {
    std::map<std::string, Ranking> out;
    for (auto& r : runs) out[r.query_id] = std::move(r);
    return out;
}

std::map<std::string, std::vector<int>> tokenize_queries(const std::vector<TopicQuery>& topics, QueryKind kind,
                                                         const SubwordVocab& vocab) {
    std::map<std::string, std::vector<int>> out;
    for (const auto& t : topics) {
        auto toks = wordpiece_tokenize(make_query_variant(t, kind).text, vocab);
        if (toks.empty()) toks.push_back(SubwordVocab::unk_id);
        out[t.query_id] = std::move(toks);
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"Passage-level neural re-ranking toolkit"};
    app.require_subcommand(1);

    // index
    auto* cmd_index = app.add_subcommand("index", "Build an inverted index snapshot");
    std::string idx_corpus, idx_format = "jsonl", idx_out;
    cmd_index->add_option("--corpus", idx_corpus)->required();
    cmd_index->add_option("--format", idx_format);
    cmd_index->add_option("--out", idx_out)->required();

    // retrieve
    auto* cmd_retrieve = app.add_subcommand("retrieve", "First-stage retrieval (BM25 or SDM)");
    std::string ret_index, ret_topics, ret_variant = "title", ret_model = "bm25", ret_out, ret_weights;
    std::size_t ret_depth = 100;
    double ret_k1 = 1.2, ret_b = 0.75;
    cmd_retrieve->add_option("--index", ret_index)->required();
    cmd_retrieve->add_option("--topics", ret_topics)->required();
    cmd_retrieve->add_option("--variant", ret_variant);
    cmd_retrieve->add_option("--model", ret_model, "bm25 or sdm");
    cmd_retrieve->add_option("--depth", ret_depth);
    cmd_retrieve->add_option("--k1", ret_k1);
    cmd_retrieve->add_option("--b", ret_b);
    cmd_retrieve->add_option("--sdm-weights", ret_weights, "unigram,ordered,unordered");
    cmd_retrieve->add_option("--out", ret_out);

    // segment
    auto* cmd_segment = app.add_subcommand("segment", "Cut documents into overlapping passages");
    std::string seg_corpus, seg_format = "jsonl", seg_out;
    SegmentOptions seg_opt;
    cmd_segment->add_option("--corpus", seg_corpus)->required();
    cmd_segment->add_option("--format", seg_format);
    cmd_segment->add_option("--window", seg_opt.window);
    cmd_segment->add_option("--stride", seg_opt.stride);
    cmd_segment->add_flag("--prepend-title", seg_opt.prepend_title);
    cmd_segment->add_option("--max-passages", seg_opt.max_passages);
    cmd_segment->add_option("--out", seg_out);

    // train
    auto* cmd_train = app.add_subcommand("train", "Train a cross-encoder on judged candidates");
    ConfigFlags train_cfg;
    train_cfg.attach(cmd_train);
    std::string train_run, train_out, train_queries;
    cmd_train->add_option("--candidates", train_run, "Candidate run file (default: BM25 of the variant)");
    cmd_train->add_option("--queries", train_queries, "File listing the training query ids");
    cmd_train->add_option("--out", train_out, "Checkpoint path; the vocabulary goes to <out>.vocab")->required();

    // rerank
    auto* cmd_rerank = app.add_subcommand("rerank", "Re-rank a candidate run with a trained model");
    ConfigFlags rerank_cfg;
    rerank_cfg.attach(cmd_rerank);
    std::string rr_model, rr_vocab, rr_run, rr_out, rr_agg = "MaxP";
    cmd_rerank->add_option("--model", rr_model)->required();
    cmd_rerank->add_option("--vocab", rr_vocab, "Vocabulary (default: <model>.vocab)");
    cmd_rerank->add_option("--run", rr_run)->required();
    cmd_rerank->add_option("--aggregation", rr_agg);
    cmd_rerank->add_option("--out", rr_out);

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "Score a run against judgments");
    std::string ev_qrels, ev_run, ev_baseline, ev_metric = "ndcg", ev_gain = "linear";
    std::size_t ev_k = 20, ev_samples = 10000;
    std::uint64_t ev_seed = 1;
    bool ev_json = false;
    cmd_eval->add_option("--qrels", ev_qrels)->required();
    cmd_eval->add_option("--run", ev_run)->required();
    cmd_eval->add_option("--baseline", ev_baseline, "Second run for a paired permutation test");
    cmd_eval->add_option("--metric", ev_metric);
    cmd_eval->add_option("--k", ev_k);
    cmd_eval->add_option("--gain", ev_gain);
    cmd_eval->add_option("--perm-samples", ev_samples);
    cmd_eval->add_option("--seed", ev_seed);
    cmd_eval->add_flag("--json", ev_json);

    // experiment / adapt
    auto* cmd_exp = app.add_subcommand("experiment", "Cross-validated re-ranking experiment");
    ConfigFlags exp_cfg;
    exp_cfg.attach(cmd_exp);
    auto* cmd_adapt = app.add_subcommand("adapt", "Three-arm adaptation experiment");
    ConfigFlags adapt_cfg;
    adapt_cfg.attach(cmd_adapt);

    // audit
    auto* cmd_audit = app.add_subcommand("audit", "Check an experiment workdir for fold leakage");
    std::string audit_dir;
    cmd_audit->add_option("--workdir", audit_dir)->required();

    // trace
    auto* cmd_trace = app.add_subcommand("trace", "Export attention matrices for one pair");
    std::string tr_model, tr_vocab, tr_query, tr_passage, tr_out;
    cmd_trace->add_option("--model", tr_model)->required();
    cmd_trace->add_option("--vocab", tr_vocab);
    cmd_trace->add_option("--query", tr_query)->required();
    cmd_trace->add_option("--passage", tr_passage)->required();
    cmd_trace->add_option("--out", tr_out)->required();

    // weaklog
    auto* cmd_weak = app.add_subcommand("weaklog", "Synthesize title-as-query weak supervision");
    std::string wl_corpus, wl_format = "jsonl", wl_out;
    std::size_t wl_n = 100, wl_neg = 4;
    std::uint64_t wl_seed = 1;
    cmd_weak->add_option("--corpus", wl_corpus)->required();
    cmd_weak->add_option("--format", wl_format);
    cmd_weak->add_option("--queries", wl_n);
    cmd_weak->add_option("--negatives", wl_neg);
    cmd_weak->add_option("--seed", wl_seed);
    cmd_weak->add_option("--out", wl_out);

    // synth
    auto* cmd_synth = app.add_subcommand("synth", "Generate a synthetic test collection");
    std::string sy_dir;
    SyntheticOptions sy;
    cmd_synth->add_option("--out-dir", sy_dir)->required();
    cmd_synth->add_option("--topics", sy.topics);
    cmd_synth->add_option("--docs-per-topic", sy.docs_per_topic);
    cmd_synth->add_option("--relevant-per-topic", sy.relevant_per_topic);
    cmd_synth->add_option("--seed", sy.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (*cmd_index) {
        auto docs = load_corpus(idx_corpus, parse_corpus_format(idx_format));
        auto index = build_index(docs);
        index.save(std::filesystem::path(idx_out));
        log_info("indexed " + std::to_string(index.doc_count()) + " documents, " +
                 std::to_string(index.term_count()) + " terms");
    } else if (*cmd_retrieve) {
        auto index = InvertedIndex::load(std::filesystem::path(ret_index));
        auto topics = load_topics(ret_topics);
        auto kind = parse_query_kind(ret_variant);
        Bm25Params bm{ret_k1, ret_b};
        SdmParams sdm;
        if (!ret_weights.empty()) {
            auto w = split_list(ret_weights);
            if (w.size() != 3) throw UsageError("--sdm-weights needs three values");
            sdm.unigram_weight = std::stod(w[0]);
            sdm.ordered_weight = std::stod(w[1]);
            sdm.unordered_weight = std::stod(w[2]);
        }
        if (ret_model != "bm25" && ret_model != "sdm") throw UsageError("--model must be bm25 or sdm");
        std::vector<Ranking> runs;
        for (const auto& t : topics) {
            auto text = make_query_variant(t, kind).text;
            Ranking r = ret_model == "sdm" ? retrieve_sdm(index, text, ret_depth, sdm, bm)
                                           : retrieve_bm25(index, text, ret_depth, bm);
            r.query_id = t.query_id;
            runs.push_back(std::move(r));
        }
        write_output(ret_out, [&](std::ostream& out) { write_run(out, runs); });
    } else if (*cmd_segment) {
        auto docs = load_corpus(seg_corpus, parse_corpus_format(seg_format));
        std::vector<Passage> all;
        std::size_t capped = 0;
        for (const auto& d : docs) {
            bool was_capped = false;
            auto ps = segment_document(d, seg_opt, &was_capped);
            capped += was_capped ? 1 : 0;
            all.insert(all.end(), ps.begin(), ps.end());
        }
        if (capped) log_warn(std::to_string(capped) + " documents hit the passage cap");
        write_output(seg_out, [&](std::ostream& out) { write_passages_jsonl(out, all); });
    } else if (*cmd_train) {
        auto cfg = train_cfg.load();
        check_config_paths(cfg);
        auto docs = load_corpus(cfg.corpus, cfg.corpus_format);
        auto topics = load_topics(cfg.topics);
        auto qrels = load_qrels(cfg.qrels);
        auto vocab = build_subword_vocab(std::span<const Document>(docs), cfg.vocab_size);
        auto encoder = cfg.encoder;
        encoder.vocab = static_cast<int>(vocab.size());
        const auto kind = cfg.variants.front();
        std::map<std::string, Ranking> candidates;
        if (!train_run.empty()) {
            candidates = by_query(load_run(train_run));
        } else {
            auto index = build_index(docs);
            const auto ck = candidate_variant(cfg, kind);
            for (const auto& t : topics) {
                auto r = retrieve_bm25(index, make_query_variant(t, ck).text, cfg.depth, cfg.bm25);
                r.query_id = t.query_id;
                candidates[t.query_id] = std::move(r);
            }
        }
        std::vector<std::string> ids;
        if (!train_queries.empty()) {
            std::istringstream in(read_file(train_queries));
            for (std::string q; in >> q;) ids.push_back(q);
        } else {
            for (const auto& t : topics)
                if (qrels.has_query(t.query_id)) ids.push_back(t.query_id);
        }
        PassageStore store(docs, cfg.segment, vocab);
        auto examples = build_training_examples(ids, tokenize_queries(topics, kind, vocab), candidates, qrels, store,
                                                encoder, cfg.neg_ratio, cfg.seed);
        if (examples.empty()) throw DataError("no training examples from the given queries and candidates");
        TrainOptions opt = cfg.train;
        opt.seed = cfg.seed;
        opt.on_step = [&](std::size_t step, double loss) {
            if (step % 50 == 0 || step == opt.steps) log_info("step " + std::to_string(step) + " loss " + std::to_string(loss));
        };
        auto result = train(init_params(encoder, cfg.seed, cfg.init_std), examples, opt);
        save_checkpoint(std::filesystem::path(train_out), result.params);
        save_vocab(train_out + ".vocab", vocab);
    } else if (*cmd_rerank) {
        auto cfg = rerank_cfg.load();
        auto params = load_checkpoint(std::filesystem::path(rr_model));
        auto vocab = load_vocab(rr_vocab.empty() ? rr_model + ".vocab" : rr_vocab);
        if (static_cast<int>(vocab.size()) != params.config.vocab) throw DataError("vocabulary does not match the model");
        auto docs = load_corpus(cfg.corpus, cfg.corpus_format);
        auto topics = load_topics(cfg.topics);
        auto qtoks = tokenize_queries(topics, cfg.variants.front(), vocab);
        PassageStore store(docs, cfg.segment, vocab);
        const std::vector<AggregationMode> modes{parse_aggregation_mode(rr_agg)};
        std::vector<Ranking> out_runs;
        for (const auto& cand : load_run(rr_run)) {
            auto it = qtoks.find(cand.query_id);
            if (it == qtoks.end()) throw DataError("run query " + cand.query_id + " is not in the topics");
            out_runs.push_back(rerank_candidates(params, it->second, cand, store, modes).at(modes[0]));
        }
        write_output(rr_out, [&](std::ostream& out) { write_run(out, out_runs); });
    } else if (*cmd_eval) {
        auto qrels = load_qrels(ev_qrels);
        auto run = load_run(ev_run);
        auto report = evaluate_metric(ev_metric, run, qrels, ev_k, parse_gain(ev_gain));
        std::vector<MetricReport> reports{report};
        if (ev_json) {
            write_report_json(std::cout, reports);
        } else {
            write_report_table(std::cout, reports);
        }
        if (!ev_baseline.empty()) {
            auto base = evaluate_metric(ev_metric, load_run(ev_baseline), qrels, ev_k, parse_gain(ev_gain));
            double p = paired_permutation_test(report.per_query, base.per_query, ev_samples, ev_seed);
            std::printf("p-value %.6f (mean %.4f vs %.4f)\n", p, report.mean, base.mean);
        }
    } else if (*cmd_exp) {
        auto result = run_experiment(exp_cfg.load());
        write_result_table(std::cout, result);
    } else if (*cmd_adapt) {
        auto cfg = adapt_cfg.load();
        auto result = run_adaptation(cfg);
        write_adaptation_table(std::cout, result);
        auto audit = audit_leakage(cfg.workdir);
        std::cout << "leakage audit: " << (audit.passed ? "passed" : "FAILED") << '\n';
        for (const auto& v : audit.violations) std::cout << "  " << v << '\n';
        if (!audit.passed) return 2;
    } else if (*cmd_audit) {
        auto audit = audit_leakage(audit_dir);
        std::cout << "leakage audit: " << (audit.passed ? "passed" : "FAILED") << '\n';
        for (const auto& v : audit.violations) std::cout << "  " << v << '\n';
        if (!audit.passed) return 2;
    } else if (*cmd_trace) {
        auto params = load_checkpoint(std::filesystem::path(tr_model));
        auto vocab = load_vocab(tr_vocab.empty() ? tr_model + ".vocab" : tr_vocab);
        auto trace = export_attention_trace(params, vocab, tr_query, tr_passage, tr_out);
        log_info("wrote " + std::to_string(trace.matrices.size()) + " attention matrices over " +
                 std::to_string(trace.token_ids.size()) + " tokens");
    } else if (*cmd_weak) {
        auto docs = load_corpus(wl_corpus, parse_corpus_format(wl_format));
        auto index = build_index(docs);
        auto pairs = synthesize_weak_log(docs, index, wl_n, wl_neg, wl_seed);
        write_output(wl_out, [&](std::ostream& out) { write_weak_log(out, pairs); });
    } else if (*cmd_synth) {
        auto c = make_synthetic_collection(sy);
        write_synthetic_collection(c, sy_dir);
        log_info("wrote " + std::to_string(c.docs.size()) + " documents and " + std::to_string(c.topics.size()) +
                 " topics");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    configure_allocator();
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
