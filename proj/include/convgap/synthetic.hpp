#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "convgap/checkpoint.hpp"
#include "convgap/corpus.hpp"
#include "convgap/interventions.hpp"

namespace convgap {

// Paired tiny checkpoints with planted, parameterized late-layer
// divergence. The pair is bit-identical outside the MLP down-projection
// tensors of the divergence window, so grafting/swapping at the true
// window restores weights exactly.
struct synth_spec {
    uint64_t seed = 7;
    model_config config;  // defaults from default_synth_config()
    double divergence_strength = 0.5;
    std::optional<window_spec> divergence_window;  // default: depth_windows(L).late
    double template_sensitivity = 0.0;

    synth_spec();
    void validate() const;
};

model_config default_synth_config();

// Template token ids live at the top of the vocab; synthetic corpora
// should draw prompt tokens below synth_prompt_token_limit.
int synth_prompt_token_limit(const model_config& cfg);

std::pair<checkpoint, checkpoint> make_paired_checkpoints(const synth_spec& spec);

// Independent brute-force cross-check of the pipeline's IT-minus-PT mean
// late gap, computed on the plain-loop oracle path.
double oracle_gap_delta(const checkpoint& pt, const checkpoint& it,
                        const std::vector<prompt_seq>& prompts, double late_fraction = 0.2);

}  // namespace convgap
