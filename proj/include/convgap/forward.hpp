#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "convgap/checkpoint.hpp"

namespace convgap {

enum class capture_policy { all_layers, subset };

struct layer_trace {
    std::vector<int> tokens;
    int n_layers = 0;
    int d_model = 0;
    int vocab_size = 0;
    capture_policy policy = capture_policy::all_layers;
    std::vector<int> captured_layers;  // sorted; all layers when policy == all_layers

    // Post-block residual stream, [position][captured layer][d_model].
    std::vector<double> residuals;
    // Final readout, [position][vocab].
    std::vector<double> final_logits;
    // Optional MLP activation capture, [position][layer][d_mlp].
    std::vector<double> mlp_acts;
    int d_mlp = 0;

    size_t n_positions() const { return tokens.size(); }
    bool captured(int layer) const;
    std::span<const double> residual(size_t pos, int layer) const;
    std::span<const double> logits(size_t pos) const;
    std::span<const double> mlp_act(size_t pos, int layer) const;
};

// Adds a seeded random direction, scaled per layer/position, to the
// residual stream right after each block in [window_lo, window_hi].
struct perturbation_hook {
    int window_lo = 0;
    int window_hi = -1;  // inclusive
    // magnitudes[layer - window_lo][position]; all entries >= 0.
    std::vector<std::vector<double>> magnitudes;
    uint64_t seed = 0;

    int window_size() const { return window_hi - window_lo + 1; }
};

perturbation_hook residual_perturbation_hook(int window_lo, int window_hi,
                                             std::vector<std::vector<double>> magnitudes,
                                             uint64_t seed);

struct forward_options {
    capture_policy policy = capture_policy::all_layers;
    std::vector<int> capture_layers;  // used when policy == subset
    std::vector<perturbation_hook> hooks;
    bool capture_mlp_acts = false;
};

// Deterministic teacher-forced forward pass with residual capture.
// Weights are f32; all arithmetic accumulates in double.
layer_trace forward_trace(const checkpoint& model, std::span<const int> tokens,
                          const forward_options& options = {});

// Copy of `host` with the MLP tensors in [window_lo, window_hi] replaced
// by `donor`'s. Checkpoints must be paired and dense.
checkpoint substitute_mlp_window(const checkpoint& host, const checkpoint& donor, int window_lo,
                                 int window_hi);

// Final norm + unembedding readout of one residual vector (logits).
std::vector<double> readout_logits(const checkpoint& model, std::span<const double> residual);

// Numerically stable softmax, double accumulation.
std::vector<double> softmax(std::span<const double> logits);

}  // namespace convgap
