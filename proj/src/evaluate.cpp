#include "ctxrank/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>

#include <json.hpp>

#include "ctxrank/error.hpp"
#include "ctxrank/textprep.hpp"

namespace ctxrank {

Gain parse_gain(const std::string& name) {
    auto n = to_lower_ascii(name);
    if (n == "linear") return Gain::linear;
    if (n == "exp" || n == "exponential") return Gain::exponential;
    throw UsageError("unknown gain \"" + name + "\" (linear or exponential)");
}

namespace {

double gain_of(int grade, Gain gain) {
    if (grade <= 0) return 0.0;
    return gain == Gain::linear ? static_cast<double>(grade) : std::exp2(grade) - 1.0;
}

MetricReport per_query_metric(std::string name, std::span<const Ranking> rankings,
                              const Judgments& judgments, std::size_t k,
                              const std::function<double(const Ranking&)>& score) {
    if (k < 1) throw UsageError("metric cutoff must be at least 1");
    MetricReport report{std::move(name), k, {}, 0.0, {}};
    for (const auto& r : rankings) {
        if (judgments.relevant_count(r.query_id) == 0) {
            report.excluded.push_back(r.query_id);
            continue;
        }
        if (!report.per_query.emplace(r.query_id, score(r)).second) {
            throw DataError("query " + r.query_id + " appears twice in the rankings");
        }
    }
    double total = 0.0;
    for (const auto& [_, v] : report.per_query) total += v;
    report.mean = report.per_query.empty() ? 0.0 : total / static_cast<double>(report.per_query.size());
    return report;
}

}  // namespace

MetricReport ndcg_at_k(std::span<const Ranking> rankings, const Judgments& judgments, std::size_t k,
                       Gain gain) {
    return per_query_metric("ndcg", rankings, judgments, k, [&](const Ranking& r) {
        double dcg = 0.0;
        for (std::size_t i = 0; i < std::min(k, r.entries.size()); ++i) {
            dcg += gain_of(judgments.grade(r.query_id, r.entries[i].doc_id), gain) /
                   std::log2(static_cast<double>(i) + 2.0);
        }
        std::vector<int> grades;
        for (const auto& [_, g] : judgments.for_query(r.query_id)) grades.push_back(g);
        std::sort(grades.begin(), grades.end(), std::greater<>());
        double ideal = 0.0;
        for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
            ideal += gain_of(grades[i], gain) / std::log2(static_cast<double>(i) + 2.0);
        }
        return dcg / ideal;
    });
}

MetricReport map_at_k(std::span<const Ranking> rankings, const Judgments& judgments, std::size_t k) {
    return per_query_metric("map", rankings, judgments, k, [&](const Ranking& r) {
        double hits = 0.0;
        double sum = 0.0;
        for (std::size_t i = 0; i < std::min(k, r.entries.size()); ++i) {
            if (judgments.grade(r.query_id, r.entries[i].doc_id) > 0) {
                hits += 1.0;
                sum += hits / static_cast<double>(i + 1);
            }
        }
        return sum / static_cast<double>(judgments.relevant_count(r.query_id));
    });
}

MetricReport evaluate_metric(const std::string& metric, std::span<const Ranking> rankings,
                             const Judgments& judgments, std::size_t k, Gain gain) {
    auto m = to_lower_ascii(metric);
    if (m == "ndcg") return ndcg_at_k(rankings, judgments, k, gain);
    if (m == "map") return map_at_k(rankings, judgments, k);
    throw UsageError("unknown metric \"" + metric + "\" (ndcg or map)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based bits: word `block` of sample `sample` depends only on
// (seed, sample, block), never on evaluation order.
std::uint64_t sample_bits(std::uint64_t seed, std::uint64_t sample, std::uint64_t block) {
    return splitmix64(splitmix64(seed ^ splitmix64(sample)) + block);
}

}  // namespace

double paired_permutation_test(const std::map<std::string, double>& a,
                               const std::map<std::string, double>& b, std::size_t samples,
                               std::uint64_t seed, PermutationMethod method) {
    if (a.empty()) throw DataError("permutation test needs at least one query");
    if (a.size() != b.size()) throw DataError("permutation test inputs cover different queries");
    std::vector<double> diff;
    diff.reserve(a.size());
    for (const auto& [q, va] : a) {
        auto it = b.find(q);
        if (it == b.end()) throw DataError("permutation test: query " + q + " missing from second system");
        diff.push_back(va - it->second);
    }
    const std::size_t n = diff.size();
    double observed = 0.0;
    for (double d : diff) observed += d;
    observed = std::abs(observed);
    // Sums equal in exact arithmetic may differ in the last bits.
    const double slack = 1e-12 * (1.0 + observed);

    if (method == PermutationMethod::automatic) {
        method = n <= exact_permutation_limit ? PermutationMethod::exact : PermutationMethod::monte_carlo;
    }
    if (method == PermutationMethod::exact) {
        if (n > exact_permutation_limit) {
            throw UsageError("exact permutation test limited to " +
                             std::to_string(exact_permutation_limit) + " queries");
        }
        const std::uint64_t total = 1ULL << n;
        std::uint64_t hits = 0;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += (mask >> i & 1U) ? -diff[i] : diff[i];
            if (std::abs(s) >= observed - slack) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(total);
    }
    if (samples == 0) throw UsageError("Monte-Carlo permutation test needs samples > 0");
    std::uint64_t hits = 0;
    for (std::uint64_t j = 0; j < samples; ++j) {
        double s = 0.0;
        std::uint64_t bits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (i % 64 == 0) bits = sample_bits(seed, j, i / 64);
            s += (bits >> (i % 64) & 1U) ? -diff[i] : diff[i];
        }
        if (std::abs(s) >= observed - slack) ++hits;
    }
    return static_cast<double>(hits + 1) / static_cast<double>(samples + 1);
}

void write_report_json(std::ostream& out, std::span<const MetricReport> reports) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) {
        arr.push_back({{"metric", r.metric},
                       {"k", r.k},
                       {"mean", r.mean},
                       {"per_query", r.per_query},
                       {"excluded", r.excluded}});
    }
    out << arr.dump(2) << '\n';
}

void write_report_table(std::ostream& out, std::span<const MetricReport> reports) {
    char buf[128];
    for (const auto& r : reports) {
        std::string name = r.metric + "@" + std::to_string(r.k);
        for (const auto& [q, v] : r.per_query) {
            std::snprintf(buf, sizeof buf, "%-12s %-12s %.4f\n", name.c_str(), q.c_str(), v);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "%-12s %-12s %.4f\n", name.c_str(), "all", r.mean);
        out << buf;
    }
}

}  // namespace ctxrank
