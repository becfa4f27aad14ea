#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctxrank/corpus.hpp"
#include "ctxrank/crossenc.hpp"
#include "ctxrank/evaluate.hpp"
#include "ctxrank/firststage.hpp"
#include "ctxrank/passage.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

struct AdaptationSettings {
    std::size_t weak_queries = 100;
    std::size_t weak_negatives = 4;
    double mask_rate = 0.15;
    std::size_t pretrain_steps = 200;
    std::size_t weak_steps = 200;
    AggregationMode aggregation = AggregationMode::max;
};

/// Everything an experiment needs. Loaded from a JSON document whose layout
/// mirrors the field groups below; see `default_config_json`.
struct ExperimentConfig {
    std::filesystem::path corpus;
    CorpusFormat corpus_format = CorpusFormat::jsonl;
    std::filesystem::path topics;
    std::filesystem::path qrels;
    std::filesystem::path workdir;

    std::size_t depth = 100;
    Bm25Params bm25;
    SdmParams sdm;

    SegmentOptions segment;
    double neg_ratio = 4.0;
    std::size_t vocab_size = 2048;

    EncoderConfig encoder;
    TrainOptions train;
    double init_std = 0.02;

    std::vector<AggregationMode> aggregations{AggregationMode::first, AggregationMode::max, AggregationMode::sum};
    std::vector<QueryKind> variants{QueryKind::title};
    /// Variant whose BM25 run supplies the candidates; unset means "own
    /// text", except narrative variants, which use the title run.
    std::optional<QueryKind> candidates_from;

    int folds = 5;
    std::uint64_t seed = 0;

    std::string metric = "ndcg";
    std::size_t metric_k = 20;
    Gain gain = Gain::linear;
    std::size_t perm_samples = 10000;

    AdaptationSettings adaptation;
};

/// Default configuration as JSON (with a placeholder seed of null).
nlohmann::json default_config_json();

/// Builds a config from JSON. Missing keys take defaults; the seed is
/// mandatory. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Applies "a.b.c=value" to a JSON config. The value is parsed as JSON when
/// possible and otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads a JSON config file and applies overrides in order.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Checks that input paths exist.
void check_config_paths(const ExperimentConfig& config);

QueryKind candidate_variant(const ExperimentConfig& config, QueryKind variant);

/// Segmented and tokenized passages per document, computed on first use.
class PassageStore {
  public:
    PassageStore(const std::vector<Document>& docs, SegmentOptions options, const SubwordVocab& vocab);

    const Document& document(const std::string& doc_id) const;
    const std::vector<Passage>& passages(const std::string& doc_id);
    const std::vector<std::vector<int>>& tokens(const std::string& doc_id);

  private:
    struct Entry {
        std::vector<Passage> passages;
        std::vector<std::vector<int>> tokens;
    };
    Entry& entry(const std::string& doc_id);

    const std::vector<Document>& docs_;
    SegmentOptions options_;
    const SubwordVocab& vocab_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, Entry> cache_;
};

/// Labeled (query, passage) examples from the candidates of `query_ids`.
/// Labels come from the judgments and are inherited by every passage of a
/// document; negatives are then downsampled per query to `neg_ratio` per
/// positive. Queries without candidates contribute nothing.
std::vector<LabeledEncoding> build_training_examples(const std::vector<std::string>& query_ids,
                                                     const std::map<std::string, std::vector<int>>& query_tokens,
                                                     const std::map<std::string, Ranking>& candidates,
                                                     const Judgments& judgments, PassageStore& store,
                                                     const EncoderConfig& encoder, double neg_ratio,
                                                     std::uint64_t seed);

/// Scores every passage of every candidate and aggregates per mode. Scores
/// are relevance probabilities.
std::map<AggregationMode, Ranking> rerank_candidates(const EncoderParams& params, const std::vector<int>& query_tokens,
                                                     const Ranking& candidates, PassageStore& store,
                                                     const std::vector<AggregationMode>& modes);

struct ExperimentResult {
    std::vector<std::string> systems;
    std::vector<std::string> variants;
    /// (system, variant) -> metric report over all judged queries.
    std::map<std::pair<std::string, std::string>, MetricReport> reports;
    /// (system, variant) -> mean metric per fold.
    std::map<std::pair<std::string, std::string>, std::vector<double>> fold_means;
    /// (system, variant) -> p-value against SDM, neural systems only.
    std::map<std::pair<std::string, std::string>, double> p_values;
    FoldPlan folds;
    std::string metric_label;
};

/// Cross-validated re-ranking over the configured variants. Writes runs,
/// tables, the fold plan, per-fold training query lists and a manifest into
/// the workdir.
ExperimentResult run_experiment(const ExperimentConfig& config);

void write_result_table(std::ostream& out, const ExperimentResult& result);
nlohmann::json result_to_json(const ExperimentResult& result);

struct WeakLogPair {
    std::string query;
    std::string doc_id;
    int label = 0;
};

/// Title-as-query pseudo-labels: for `n_queries` sampled titled documents,
/// the title is the query, the source document the positive, and the top
/// BM25 results for the title (source excluded) the negatives, topped up
/// with random documents when retrieval runs short. (query, doc) pairs are
/// never repeated.
std::vector<WeakLogPair> synthesize_weak_log(const std::vector<Document>& docs, const InvertedIndex& index,
                                             std::size_t n_queries, std::size_t negatives_per_query,
                                             std::uint64_t seed, const Bm25Params& bm25 = {});

void write_weak_log(std::ostream& out, const std::vector<WeakLogPair>& pairs);
std::vector<WeakLogPair> read_weak_log(std::istream& in);

struct AdaptationResult {
    /// Arm names in order: random-init, pretrain, pretrain+weaklog.
    std::vector<std::string> arms;
    std::vector<std::string> metrics;
    std::map<std::pair<std::string, std::string>, MetricReport> reports;
    /// (arm, arm) -> p-value on the first metric.
    std::map<std::pair<std::string, std::string>, double> p_values;
    FoldPlan folds;
    /// Largest absolute difference between arm (b) and arm (c) encoder
    /// initializations, i.e. how far the weak-log stage moved the encoder.
    double weak_stage_shift = 0.0;
};

/// Three-arm comparison of fine-tuning starting points under one fold plan
/// and one candidate set.
AdaptationResult run_adaptation(const ExperimentConfig& config);

void write_adaptation_table(std::ostream& out, const AdaptationResult& result);

struct LeakageAudit {
    bool passed = true;
    std::vector<std::string> violations;
};

/// Re-derives fold membership from `folds.txt` in the workdir and checks
/// every `fold<N>/train_queries.txt` (and `fold<N>/test_queries.txt`) against
/// it.
LeakageAudit audit_leakage(const std::filesystem::path& workdir);

/// Writes tokens and every attention matrix for one (query, passage) pair.
AttentionTrace export_attention_trace(const EncoderParams& params, const SubwordVocab& vocab,
                                      const std::string& query, const std::string& passage,
                                      const std::filesystem::path& out);

}  // namespace ctxrank
