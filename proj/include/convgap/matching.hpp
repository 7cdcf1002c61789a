#pragma once

#include <array>
#include <compare>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "convgap/bootstrap.hpp"

namespace convgap {

enum class row_role { pt, it };

// One scored token step; the row schema shared by the gap, matching and
// replay pipelines.
struct endpoint_row {
    std::string token_step_id;
    std::string cluster_id;
    row_role role = row_role::pt;
    double confidence = 0.0;
    double entropy = 0.0;
    double margin = 0.0;
    double late_gap_raw = 0.0;
    std::optional<double> late_gap_tuned;
};

enum class covariate { confidence, entropy, margin };
inline constexpr std::array<covariate, 3> kall_covariates = {
    covariate::confidence, covariate::entropy, covariate::margin};
const char* to_string(covariate c);
double covariate_value(const endpoint_row& row, covariate c);

enum class match_metric { late_gap_raw, late_gap_tuned };
double metric_value(const endpoint_row& row, match_metric m);

struct match_key {
    std::array<int, 3> bins = {0, 0, 0};
    auto operator<=>(const match_key&) const = default;
};

// Pooled quantile cut-points (linear interpolation) per covariate; ties
// go to the lower bin. Degenerate covariates collapse to one bin and are
// recorded as warnings.
struct coarsening {
    int n_bins = 0;
    std::array<std::vector<double>, 3> cuts;  // per covariate, size n_bins-1
    std::vector<std::string> warnings;

    match_key key_of(const endpoint_row& row) const;
};

coarsening coarsen(std::span<const endpoint_row> pooled_rows, int n_bins);

struct match_stratum {
    match_key key;
    std::vector<size_t> pt_rows;  // indices into the pt row span
    std::vector<size_t> it_rows;  // indices into the it row span
    double weight = 0.0;          // min-count weight, normalized
};

struct match_result {
    coarsening bins;
    std::vector<match_stratum> strata;  // sorted by key
    size_t n_input_pt = 0, n_input_it = 0;
    size_t n_matched_pt = 0, n_matched_it = 0;
    double retention_pt = 0.0, retention_it = 0.0;
    double retention = 0.0;  // min over sides (the reported quantity)
};

// Coarsened exact matching on (confidence, entropy, margin).
match_result cem_match(std::span<const endpoint_row> pt_rows,
                       std::span<const endpoint_row> it_rows, int n_bins);

inline constexpr double ksmd_flag_threshold = 0.1;

// |weighted mean_PT - weighted mean_IT| / pooled (weighted) sd over the
// matched populations; +inf when the pooled variance is zero but the
// means differ.
double smd(const match_result& match, std::span<const endpoint_row> pt_rows,
           std::span<const endpoint_row> it_rows, covariate c);

// Unmatched (single stratum) SMD, for pre/post balance comparisons.
double smd_unmatched(std::span<const endpoint_row> pt_rows, std::span<const endpoint_row> it_rows,
                     covariate c);

// Weighted mean of per-stratum (IT mean - PT mean) of a metric, CI via
// prompt-cluster bootstrap. Bins stay fixed at the original coarsening;
// stratum weights are recomputed per resample.
estimate_with_ci matched_effect(const match_result& match, std::span<const endpoint_row> pt_rows,
                                std::span<const endpoint_row> it_rows, match_metric metric,
                                const bootstrap_params& params);

}  // namespace convgap
