#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "convgap/forward.hpp"
#include "convgap/metrics.hpp"

namespace convgap {

// Raw lens: the model's own final norm + unembedding applied to an
// intermediate residual.
struct raw_lens {
    const checkpoint* model = nullptr;

    std::vector<double> decode(std::span<const double> residual) const;
    layer_decode_fn decoder() const;
};

// Per-layer affine translator; the final layer is identity by definition.
struct affine_map {
    std::vector<double> weight;  // [d_model, d_model], row-major
    std::vector<double> bias;    // [d_model]
};

struct lens_fit_metadata {
    std::string corpus_id;
    int steps = 0;
    double step_size = 0.0;
    int batch = 0;
    uint64_t seed = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    // Full-train loss logged at fixed checkpoints (first entry = initial).
    std::vector<double> logged_losses;
};

struct tuned_lens {
    int d_model = 0;
    int n_layers = 0;
    std::vector<affine_map> layers;  // size n_layers - 1
    lens_fit_metadata meta;

    std::vector<double> decode(const checkpoint& model, int layer,
                               std::span<const double> residual) const;
    layer_decode_fn decoder(const checkpoint& model) const;
};

tuned_lens identity_tuned_lens(const model_config& cfg);

struct lens_hyperparams {
    int steps = 400;
    double step_size = 0.05;
    int batch = 32;
    uint64_t seed = 0;
    std::string corpus_id;
};

// Fits per-layer translators by plain minibatch gradient descent on
// KL(translator decode || model final distribution), identity init,
// seeded shuffling. Throws on divergence (non-finite loss).
tuned_lens fit_tuned_lens(const checkpoint& model,
                          const std::vector<std::vector<int>>& corpus,
                          const lens_hyperparams& hp);

// Loss and analytic gradient of the fit objective for one
// (residual, target distribution) pair; exposed for gradient checks.
struct fit_gradient {
    double loss = 0.0;
    std::vector<double> d_weight;  // [d, d]
    std::vector<double> d_bias;    // [d]
};
fit_gradient tuned_fit_loss_grad(const checkpoint& model, const affine_map& map,
                                 std::span<const double> residual,
                                 std::span<const double> target_dist);

// Last 20% of sequences (fixed order) held out from fitting.
size_t heldout_begin(size_t n_sequences);

// Mean KL(decode_l || final) over all positions of `corpus` and layers in
// [layer_lo, layer_hi].
double mean_layer_kl(const checkpoint& model, const std::vector<std::vector<int>>& corpus,
                     const layer_decode_fn& decode, int layer_lo, int layer_hi);

void save_tuned_lens(const tuned_lens& lens, const std::filesystem::path& dir);
tuned_lens load_tuned_lens(const std::filesystem::path& dir, const model_config& cfg);

}  // namespace convgap
