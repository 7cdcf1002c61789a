#include "convgap/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "convgap/common.hpp"

namespace convgap {

const char* to_string(covariate c) {
    switch (c) {
        case covariate::confidence: return "confidence";
        case covariate::entropy: return "entropy";
        default: return "margin";
    }
}

double covariate_value(const endpoint_row& row, covariate c) {
    switch (c) {
        case covariate::confidence: return row.confidence;
        case covariate::entropy: return row.entropy;
        default: return row.margin;
    }
}

double metric_value(const endpoint_row& row, match_metric m) {
    if (m == match_metric::late_gap_raw) {
        return row.late_gap_raw;
    }
    if (!row.late_gap_tuned.has_value()) {
        fail("matching: row '%s' has no tuned late gap", row.token_step_id.c_str());
    }
    return *row.late_gap_tuned;
}

match_key coarsening::key_of(const endpoint_row& row) const {
    match_key key;
    for (size_t c = 0; c < kall_covariates.size(); ++c) {
        const double v = covariate_value(row, kall_covariates[c]);
        // Ties on a cut-point fall to the lower bin.
        int bin = 0;
        for (double cut : cuts[c]) {
            if (cut < v) {
                ++bin;
            }
        }
        key.bins[c] = bin;
    }
    return key;
}

coarsening coarsen(std::span<const endpoint_row> pooled_rows, int n_bins) {
    if (n_bins < 2) {
        fail("coarsen: n_bins must be >= 2, got %d", n_bins);
    }
    if (pooled_rows.empty()) {
        fail("coarsen: no rows");
    }
    coarsening out;
    out.n_bins = n_bins;
    for (size_t c = 0; c < kall_covariates.size(); ++c) {
        std::vector<double> values;
        values.reserve(pooled_rows.size());
        for (const auto& row : pooled_rows) {
            values.push_back(covariate_value(row, kall_covariates[c]));
        }
        std::sort(values.begin(), values.end());
        if (values.front() == values.back()) {
            out.warnings.push_back(std::string("degenerate covariate '") +
                                   to_string(kall_covariates[c]) + "': all values equal, single bin");
            continue;  // no cuts -> every row lands in bin 0
        }
        for (int k = 1; k < n_bins; ++k) {
            const double q = static_cast<double>(k) / n_bins;
            const double rank = q * static_cast<double>(values.size() - 1);
            const size_t lo = static_cast<size_t>(std::floor(rank));
            const size_t hi = std::min(lo + 1, values.size() - 1);
            const double frac = rank - static_cast<double>(lo);
            out.cuts[c].push_back(values[lo] + frac * (values[hi] - values[lo]));
        }
    }
    return out;
}

match_result cem_match(std::span<const endpoint_row> pt_rows,
                       std::span<const endpoint_row> it_rows, int n_bins) {
    if (pt_rows.empty() || it_rows.empty()) {
        fail("cem_match: both sides must be non-empty (%zu pt, %zu it)", pt_rows.size(),
             it_rows.size());
    }
    std::vector<endpoint_row> pooled;
    pooled.reserve(pt_rows.size() + it_rows.size());
    pooled.insert(pooled.end(), pt_rows.begin(), pt_rows.end());
    pooled.insert(pooled.end(), it_rows.begin(), it_rows.end());

    match_result res;
    res.bins = coarsen(pooled, n_bins);
    res.n_input_pt = pt_rows.size();
    res.n_input_it = it_rows.size();

    std::map<match_key, match_stratum> strata;
    for (size_t i = 0; i < pt_rows.size(); ++i) {
        const match_key key = res.bins.key_of(pt_rows[i]);
        strata[key].key = key;
        strata[key].pt_rows.push_back(i);
    }
    for (size_t i = 0; i < it_rows.size(); ++i) {
        const match_key key = res.bins.key_of(it_rows[i]);
        strata[key].key = key;
        strata[key].it_rows.push_back(i);
    }

    double total_weight = 0.0;
    for (auto& [key, stratum] : strata) {
        if (stratum.pt_rows.empty() || stratum.it_rows.empty()) {
            continue;  // only strata populated on both sides carry weight
        }
        stratum.weight = static_cast<double>(std::min(stratum.pt_rows.size(), stratum.it_rows.size()));
        total_weight += stratum.weight;
        res.n_matched_pt += stratum.pt_rows.size();
        res.n_matched_it += stratum.it_rows.size();
        res.strata.push_back(stratum);
    }
    if (res.strata.empty()) {
        fail("cem_match: empty match, no stratum is populated on both sides");
    }
    for (auto& stratum : res.strata) {
        stratum.weight /= total_weight;
    }
    res.retention_pt = static_cast<double>(res.n_matched_pt) / static_cast<double>(res.n_input_pt);
    res.retention_it = static_cast<double>(res.n_matched_it) / static_cast<double>(res.n_input_it);
    res.retention = std::min(res.retention_pt, res.retention_it);
    return res;
}

namespace {

struct weighted_moments {
    double mean = 0.0;
    double var = 0.0;
};

// Moments of the stratum-weighted row distribution for one side: each
// stratum carries its normalized weight, rows uniform within it.
template <typename Getter>
weighted_moments side_moments(const match_result& match, bool pt_side, Getter&& value_of) {
    double mean = 0.0;
    for (const auto& stratum : match.strata) {
        const auto& rows = pt_side ? stratum.pt_rows : stratum.it_rows;
        double stratum_mean = 0.0;
        for (size_t i : rows) {
            stratum_mean += value_of(pt_side, i);
        }
        stratum_mean /= static_cast<double>(rows.size());
        mean += stratum.weight * stratum_mean;
    }
    double var = 0.0;
    for (const auto& stratum : match.strata) {
        const auto& rows = pt_side ? stratum.pt_rows : stratum.it_rows;
        const double row_weight = stratum.weight / static_cast<double>(rows.size());
        for (size_t i : rows) {
            const double dev = value_of(pt_side, i) - mean;
            var += row_weight * dev * dev;
        }
    }
    return {mean, var};
}

}  // namespace

double smd(const match_result& match, std::span<const endpoint_row> pt_rows,
           std::span<const endpoint_row> it_rows, covariate c) {
    if (match.strata.empty()) {
        fail("smd: no matched strata");
    }
    auto value_of = [&](bool pt_side, size_t i) {
        return covariate_value(pt_side ? pt_rows[i] : it_rows[i], c);
    };
    const auto pt = side_moments(match, true, value_of);
    const auto it = side_moments(match, false, value_of);
    const double pooled_sd = std::sqrt(0.5 * (pt.var + it.var));
    const double diff = std::abs(pt.mean - it.mean);
    if (pooled_sd == 0.0) {
        return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return diff / pooled_sd;
}

double smd_unmatched(std::span<const endpoint_row> pt_rows, std::span<const endpoint_row> it_rows,
                     covariate c) {
    auto moments = [&](std::span<const endpoint_row> rows) {
        weighted_moments m;
        for (const auto& row : rows) {
            m.mean += covariate_value(row, c);
        }
        m.mean /= static_cast<double>(rows.size());
        for (const auto& row : rows) {
            const double dev = covariate_value(row, c) - m.mean;
            m.var += dev * dev;
        }
        m.var /= static_cast<double>(rows.size());
        return m;
    };
    const auto pt = moments(pt_rows);
    const auto it = moments(it_rows);
    const double pooled_sd = std::sqrt(0.5 * (pt.var + it.var));
    const double diff = std::abs(pt.mean - it.mean);
    if (pooled_sd == 0.0) {
        return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    }
    return diff / pooled_sd;
}

namespace {

// CEM effect over an arbitrary subset of rows, with the original bins.
double cem_effect_of_rows(const coarsening& bins, std::span<const endpoint_row> pt_rows,
                          std::span<const endpoint_row> it_rows, match_metric metric,
                          std::span<const size_t> row_indices, size_t n_pt) {
    struct cell {
        double pt_sum = 0.0, it_sum = 0.0;
        size_t pt_n = 0, it_n = 0;
    };
    std::map<match_key, cell> cells;
    for (size_t idx : row_indices) {
        const bool is_pt = idx < n_pt;
        const endpoint_row& row = is_pt ? pt_rows[idx] : it_rows[idx - n_pt];
        cell& c = cells[bins.key_of(row)];
        if (is_pt) {
            c.pt_sum += metric_value(row, metric);
            c.pt_n += 1;
        } else {
            c.it_sum += metric_value(row, metric);
            c.it_n += 1;
        }
    }
    double total_weight = 0.0;
    double effect = 0.0;
    for (const auto& [key, c] : cells) {
        if (c.pt_n == 0 || c.it_n == 0) {
            continue;
        }
        const double w = static_cast<double>(std::min(c.pt_n, c.it_n));
        effect += w * (c.it_sum / static_cast<double>(c.it_n) - c.pt_sum / static_cast<double>(c.pt_n));
        total_weight += w;
    }
    return total_weight == 0.0 ? 0.0 : effect / total_weight;
}

}  // namespace

estimate_with_ci matched_effect(const match_result& match, std::span<const endpoint_row> pt_rows,
                                std::span<const endpoint_row> it_rows, match_metric metric,
                                const bootstrap_params& params) {
    const size_t n_pt = pt_rows.size();
    std::vector<std::string> cluster_ids;
    cluster_ids.reserve(n_pt + it_rows.size());
    for (const auto& row : pt_rows) {
        cluster_ids.push_back(row.cluster_id);
    }
    for (const auto& row : it_rows) {
        cluster_ids.push_back(row.cluster_id);
    }
    auto statistic = [&](std::span<const size_t> rows) {
        return cem_effect_of_rows(match.bins, pt_rows, it_rows, metric, rows, n_pt);
    };
    return cluster_bootstrap(cluster_ids, statistic, params, "nats");
}

}  // namespace convgap
