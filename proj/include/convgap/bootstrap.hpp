#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace convgap {

// The universal result record: point estimate plus percentile-bootstrap CI.
struct estimate_with_ci {
    double estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::string units;  // nats | JS | flips | fraction | ...
    size_t n_rows = 0;
    size_t n_clusters = 0;
    uint64_t seed = 0;
    // "exhaustive(N)" or "sampled(N)"; stamped for reproducibility.
    std::string method;
};

struct bootstrap_params {
    int n_resamples = 2000;
    uint64_t seed = 0;
};

// Linear-interpolation percentile (rank = q * (n-1)) on sorted input.
double percentile_sorted(std::span<const double> sorted_values, double q);

// Percentile cluster bootstrap of an arbitrary statistic. `cluster_ids`
// gives one id per row; each resample draws n_clusters clusters with
// replacement and evaluates `statistic` on the concatenated row indices
// (clusters in drawn order, rows in original order within a cluster).
// When the full ordered resample space (C^C) fits inside n_resamples it
// is enumerated exactly instead of sampled.
estimate_with_ci cluster_bootstrap(
    std::span<const std::string> cluster_ids,
    const std::function<double(std::span<const size_t>)>& statistic, const bootstrap_params& params,
    const std::string& units);

// Convenience form: rows are plain values, statistic is their mean.
estimate_with_ci cluster_bootstrap_mean(std::span<const double> values,
                                        std::span<const std::string> cluster_ids,
                                        const bootstrap_params& params, const std::string& units);

}  // namespace convgap
