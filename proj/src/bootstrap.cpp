#include "convgap/bootstrap.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "convgap/common.hpp"
#include "convgap/rng.hpp"

namespace convgap {

double percentile_sorted(std::span<const double> sorted_values, double q) {
    if (sorted_values.empty()) {
        fail("percentile: empty input");
    }
    const size_t n = sorted_values.size();
    if (n == 1) {
        return sorted_values[0];
    }
    const double rank = q * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]);
}

estimate_with_ci cluster_bootstrap(
    std::span<const std::string> cluster_ids,
    const std::function<double(std::span<const size_t>)>& statistic,
    const bootstrap_params& params, const std::string& units) {
    if (cluster_ids.empty()) {
        fail("cluster_bootstrap: empty rows");
    }
    if (params.n_resamples < 1) {
        fail("cluster_bootstrap: n_resamples must be >= 1");
    }

    // Sorted unique cluster keys for a deterministic cluster order.
    std::map<std::string, std::vector<size_t>> by_cluster;
    for (size_t i = 0; i < cluster_ids.size(); ++i) {
        by_cluster[cluster_ids[i]].push_back(i);
    }
    std::vector<const std::vector<size_t>*> clusters;
    clusters.reserve(by_cluster.size());
    for (const auto& [key, rows] : by_cluster) {
        clusters.push_back(&rows);
    }
    const size_t n_clusters = clusters.size();

    std::vector<size_t> all_rows;
    all_rows.reserve(cluster_ids.size());
    for (const auto* rows : clusters) {
        all_rows.insert(all_rows.end(), rows->begin(), rows->end());
    }

    estimate_with_ci out;
    out.estimate = statistic(all_rows);
    out.units = units;
    out.n_rows = cluster_ids.size();
    out.n_clusters = n_clusters;
    out.seed = params.seed;

    // Exhaustive enumeration when the ordered resample space is small
    // enough; this makes small-cluster CIs exact and test-checkable.
    double exhaustive_count = 1.0;
    for (size_t i = 0; i < n_clusters && exhaustive_count <= params.n_resamples; ++i) {
        exhaustive_count *= static_cast<double>(n_clusters);
    }
    const bool exhaustive = exhaustive_count <= static_cast<double>(params.n_resamples);

    std::vector<double> stats;
    std::vector<size_t> resample_rows;
    std::vector<size_t> draw(n_clusters, 0);
    if (exhaustive) {
        const auto total = static_cast<size_t>(exhaustive_count);
        stats.reserve(total);
        for (size_t r = 0; r < total; ++r) {
            size_t code = r;
            resample_rows.clear();
            for (size_t c = 0; c < n_clusters; ++c) {
                const size_t pick = code % n_clusters;
                code /= n_clusters;
                const auto& rows = *clusters[pick];
                resample_rows.insert(resample_rows.end(), rows.begin(), rows.end());
            }
            stats.push_back(statistic(resample_rows));
        }
        out.method = "exhaustive(" + std::to_string(total) + ")";
    } else {
        stats.reserve(static_cast<size_t>(params.n_resamples));
        for (int r = 0; r < params.n_resamples; ++r) {
            rng stream(mix_seed({params.seed, 0xb00a5ull, static_cast<uint64_t>(r)}));
            resample_rows.clear();
            for (size_t c = 0; c < n_clusters; ++c) {
                const auto& rows = *clusters[stream.next_below(n_clusters)];
                resample_rows.insert(resample_rows.end(), rows.begin(), rows.end());
            }
            stats.push_back(statistic(resample_rows));
        }
        out.method = "sampled(" + std::to_string(params.n_resamples) + ")";
    }

    std::sort(stats.begin(), stats.end());
    out.ci_low = percentile_sorted(stats, 0.025);
    out.ci_high = percentile_sorted(stats, 0.975);
    return out;
}

estimate_with_ci cluster_bootstrap_mean(std::span<const double> values,
                                        std::span<const std::string> cluster_ids,
                                        const bootstrap_params& params, const std::string& units) {
    if (values.size() != cluster_ids.size()) {
        fail("cluster_bootstrap: %zu values but %zu cluster ids", values.size(),
             cluster_ids.size());
    }
    auto mean_stat = [values](std::span<const size_t> rows) {
        double acc = 0.0;
        for (size_t i : rows) {
            acc += values[i];
        }
        return rows.empty() ? 0.0 : acc / static_cast<double>(rows.size());
    };
    return cluster_bootstrap(cluster_ids, mean_stat, params, units);
}

}  // namespace convgap
