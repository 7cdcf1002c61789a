#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "convgap/bootstrap.hpp"
#include "convgap/corpus.hpp"
#include "convgap/forward.hpp"

namespace convgap {

struct window_spec {
    std::string label;
    int lo = 0;
    int hi = -1;  // inclusive

    int size() const { return hi - lo + 1; }
    std::string range_text() const { return std::to_string(lo) + "-" + std::to_string(hi); }
};

struct depth_windows_t {
    window_spec early, mid, late;
};

// Overlapping early/mid/late windows of width round(0.4 * L).
depth_windows_t depth_windows(int n_layers);

// The six-window width/center audit family. Geometry (the emitted
// contract): with W = round(0.4*L), H = ceil(W/2), Q = round(L/4):
//   pre_late_half      = the H layers before the late window
//   late_full          = [L-W, L-1]
//   late_front_half    = first H layers of late
//   late_center_half   = H layers centered in late
//   late_terminal_half = last H layers
//   terminal_quarter   = [L-Q, L-1]
std::vector<window_spec> audit_windows(int n_layers);

struct intervention_row {
    std::string prompt_id;
    std::string cluster_id;
    double host_late = 0.0;
    double arm_late = 0.0;
    double delta_late = 0.0;
    double host_window = 0.0;
    double arm_window = 0.0;
    double delta_window = 0.0;
};

struct intervention_outcome {
    std::string arm;  // B_early, D_late, random_control, audit_window, ...
    window_spec window;
    estimate_with_ci delta_late;    // final-late-fraction mean KL delta
    estimate_with_ci delta_window;  // edited-window mean KL delta
    std::vector<intervention_row> rows;
    std::vector<uint64_t> seeds;
};

struct intervention_params {
    double late_fraction = 0.2;
    int forced_steps = 128;  // per-prompt forced-step budget
    bootstrap_params boot;
    int workers = 0;  // 0 = all cores
};

// Donor MLP window grafted into the host; per-prompt late-gap deltas of
// the composite against the host baseline on the identical forced
// prefix, each trace scored against its own final distribution.
intervention_outcome run_mlp_substitution(const checkpoint& host, const checkpoint& donor,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const intervention_params& params,
                                          const std::string& arm_label);

// IT window into PT host (B_*) / PT window into IT host (D_*).
intervention_outcome run_graft_experiment(const checkpoint& pt, const checkpoint& it,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const intervention_params& params);
intervention_outcome run_swap_experiment(const checkpoint& it, const checkpoint& pt,
                                         const window_spec& window,
                                         const std::vector<prompt_seq>& prompts,
                                         const intervention_params& params);

struct random_control_outcome {
    intervention_outcome true_graft;
    intervention_outcome random;  // averaged over seeds per prompt
};

// Magnitude-matched random residual perturbation control: per prompt,
// perturbation norms are matched to the true graft's per-layer /
// per-position residual deltas, directions drawn isotropically per seed.
random_control_outcome run_random_control(const checkpoint& pt, const checkpoint& it,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const std::vector<uint64_t>& seeds,
                                          const intervention_params& params);

struct window_audit_row {
    window_spec window;
    intervention_outcome graft;
    intervention_outcome swap;
};

std::vector<window_audit_row> window_audit(const checkpoint& pt, const checkpoint& it,
                                           const std::vector<prompt_seq>& prompts,
                                           const intervention_params& params);

}  // namespace convgap
