#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convgap/bootstrap.hpp"
#include "convgap/corpus.hpp"
#include "convgap/interventions.hpp"
#include "convgap/lens.hpp"
#include "convgap/matching.hpp"
#include "convgap/replay.hpp"
#include "convgap/reporting.hpp"

namespace convgap {

// --- endpoint-row CSV (the matching module's row interface) ------------

void write_rows_csv(const std::vector<endpoint_row>& rows, const std::filesystem::path& path);
std::vector<endpoint_row> load_rows(const std::filesystem::path& path);  // .csv or .jsonl

// --- curve dump ---------------------------------------------------------

struct curve_dump_entry {
    std::string family;
    std::string checkpoint_role;
    std::string lens_kind;
    std::string token_step_id;
    std::string cluster_id;
    int layer = 0;
    double value_nats = 0.0;
};

void write_curve_csv(const std::vector<curve_dump_entry>& entries,
                     const std::filesystem::path& path);

// --- gap pipeline -------------------------------------------------------

struct gap_params {
    double late_fraction = 0.2;
    int reference_layer = -1;     // endpoint-free reference; -1 = floor(0.8 * L)
    double commitment_tau = 0.05;
    int forced_steps = 0;  // 0 = full prompts
    // Variant flip statistic: count layers disagreeing with the final
    // top-1 instead of adjacent-pair changes. Off by default; the flip
    // definition in use is named in the summary.
    bool flips_vs_final = false;
    bootstrap_params boot;
    int workers = 0;
    bool dump_curves = false;
};

struct gap_output {
    std::vector<endpoint_row> rows;  // pt rows then it rows
    std::vector<curve_dump_entry> curves;
    estimate_with_ci late_gap_effect_raw;  // IT minus PT, prompt-cluster bootstrap
    std::optional<estimate_with_ci> late_gap_effect_tuned;
    estimate_with_ci adjacent_js_effect;
    estimate_with_ci flips_effect;
    int reference_layer = 0;
    double commitment_mean_pt = 0.0;  // summary only, never decisive
    double commitment_mean_it = 0.0;
};

gap_output run_gap_pipeline(const checkpoint& pt, const checkpoint& it,
                            const std::vector<prompt_seq>& prompts,
                            const tuned_lens* lens_pt, const tuned_lens* lens_it,
                            const gap_params& params);

summary gap_summary(const gap_output& out, const gap_params& params);

// --- matching pipeline ---------------------------------------------------

struct match_output {
    match_result match;
    std::map<std::string, double> smd_by_covariate;
    std::map<std::string, double> pre_smd_by_covariate;
    double max_smd = 0.0;
    bool balance_flag = false;  // max SMD > threshold
    estimate_with_ci effect_raw;
    std::optional<estimate_with_ci> effect_tuned;
};

match_output run_match_pipeline(const std::vector<endpoint_row>& rows, int n_bins,
                                const bootstrap_params& boot);

summary match_summary(const match_output& out, int n_bins);

// --- interventions -> summaries -----------------------------------------

void write_intervention_rows_csv(const intervention_outcome& outcome,
                                 const std::filesystem::path& path);
summary intervention_summary(const std::vector<intervention_outcome>& outcomes,
                             const std::string& claim_group);
summary audit_summary(const std::vector<window_audit_row>& audit, int n_layers);

// --- replay pipeline ------------------------------------------------------

struct replay_run_params {
    std::string teacher = "it_native";  // or "pt_raw" (reverse stress test)
    int max_new_tokens = 16;
    decoding_params decoding;
    double late_fraction = 0.2;
    int n_bins = 5;
    bootstrap_params boot;
    int workers = 0;
};

struct replay_output {
    replay_result result;
    std::vector<std::vector<int>> continuations;
    std::map<std::string, estimate_with_ci> paired;     // effect name -> estimate
    std::map<std::string, matched_cell_effect> matched;  // CEM variant
};

replay_output run_replay_pipeline(const checkpoint& pt, const checkpoint& it,
                                  const std::vector<prompt_seq>& prompts,
                                  const replay_run_params& params);

void write_replay_rows_csv(const replay_result& result, const std::filesystem::path& path);
summary replay_summary(const replay_output& out, const replay_run_params& params);

// --- run-config echo ------------------------------------------------------

void write_run_config(const std::filesystem::path& out_dir, const nlohmann::json& resolved);

}  // namespace convgap
