#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "convgap/bootstrap.hpp"
#include "convgap/corpus.hpp"
#include "convgap/forward.hpp"
#include "convgap/lens.hpp"
#include "convgap/matching.hpp"

namespace convgap {

enum class template_regime { raw, native_chat };

// Cell = model x template regime; the unit of a fixed-history replay.
struct cell_spec {
    std::string label;  // pt_raw, it_native, it_raw
    const checkpoint* model = nullptr;
    template_regime regime = template_regime::raw;
};

// raw: identity. native_chat: system? + user prefix + prompt + assistant
// prefix, from the checkpoint's template metadata.
std::vector<int> serialize_prompt(std::span<const int> prompt_tokens, template_regime regime,
                                  const checkpoint& ckpt);

struct decoding_params {
    bool greedy = true;
    double temperature = 1.0;
    uint64_t seed = 0;
};

// Autoregressive decode; returns only the continuation. Greedy breaks
// argmax ties toward the lowest index.
std::vector<int> generate_continuation(const checkpoint& model, std::span<const int> context,
                                       int max_tokens, const decoding_params& decoding);

struct replay_row {
    std::string prompt_id;
    std::string cluster_id;
    int step = 0;  // continuation-relative; prompt/template positions excluded
    std::string cell;
    double late_gap = 0.0;
    double confidence = 0.0;
    double entropy = 0.0;
    double margin = 0.0;
};

struct replay_result {
    std::map<std::string, std::vector<replay_row>> rows_by_cell;
    // Quality fields; both 0 on every well-formed run.
    size_t malformed = 0;
    size_t missing_aligned = 0;
};

struct replay_params {
    double late_fraction = 0.2;
    int workers = 0;
};

// Pure teacher forcing of one fixed continuation per prompt through
// every cell; rows aligned on (prompt, continuation step).
replay_result replay_cells(const std::vector<prompt_seq>& prompts,
                           const std::vector<std::vector<int>>& continuations,
                           const std::vector<cell_spec>& cells, const replay_params& params);

// Mean over aligned (prompt, step) of (a - b) late gap; CI by
// prompt-cluster bootstrap. Exactly antisymmetric in (a, b).
estimate_with_ci paired_cell_effect(std::span<const replay_row> cell_a,
                                    std::span<const replay_row> cell_b,
                                    const bootstrap_params& params);

// Endpoint-matched CEM variant of the cell effect (rows_b acts as the
// "pt" side). Returns the effect plus the match diagnostics.
struct matched_cell_effect {
    estimate_with_ci effect;
    double retention = 0.0;
    double max_smd = 0.0;
};
matched_cell_effect paired_cell_effect_cem(std::span<const replay_row> cell_a,
                                           std::span<const replay_row> cell_b, int n_bins,
                                           const bootstrap_params& params);

}  // namespace convgap
