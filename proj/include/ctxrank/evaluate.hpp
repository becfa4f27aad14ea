#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxrank/corpus.hpp"

namespace ctxrank {

struct MetricReport {
    std::string metric;
    std::size_t k = 0;
    std::map<std::string, double> per_query;
    double mean = 0.0;
    /// Queries without any relevant judged document.
    std::vector<std::string> excluded;
};

enum class Gain { linear, exponential };

Gain parse_gain(const std::string& name);

/// nDCG@k with rank discount 1/log2(i+1). Unjudged documents count as grade 0;
/// the ideal list is built from all judged grades of the query.
MetricReport ndcg_at_k(std::span<const Ranking> rankings, const Judgments& judgments, std::size_t k,
                       Gain gain = Gain::linear);

/// AP@k = (1/R) * sum of precision@i over relevant ranks i <= k, with R the
/// number of judged relevant documents.
MetricReport map_at_k(std::span<const Ranking> rankings, const Judgments& judgments, std::size_t k);

/// Dispatches on "ndcg" or "map".
MetricReport evaluate_metric(const std::string& metric, std::span<const Ranking> rankings,
                             const Judgments& judgments, std::size_t k, Gain gain = Gain::linear);

enum class PermutationMethod { automatic, exact, monte_carlo };

/// Largest query count handled by exhaustive sign enumeration.
inline constexpr std::size_t exact_permutation_limit = 20;

/// Two-sided paired sign-flip permutation test on the mean per-query
/// difference. `automatic` enumerates all 2^n flips when n <= 20 and
/// otherwise draws `samples` random flips; the Monte-Carlo estimate counts
/// the identity permutation, p = (1 + hits) / (1 + samples).
double paired_permutation_test(const std::map<std::string, double>& a,
                               const std::map<std::string, double>& b, std::size_t samples,
                               std::uint64_t seed,
                               PermutationMethod method = PermutationMethod::automatic);

void write_report_json(std::ostream& out, std::span<const MetricReport> reports);
void write_report_table(std::ostream& out, std::span<const MetricReport> reports);

}  // namespace ctxrank
