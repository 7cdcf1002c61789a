#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "convgap/forward.hpp"

namespace convgap {

// KL(p || q) in nats, double accumulation. q is floored at 1e-12 and
// renormalized only when flooring actually changes it, so kl(p, p) is 0
// exactly. 0*ln(0) = 0; tiny negative rounding is clamped to 0.
double kl(std::span<const double> p, std::span<const double> q);

// Jensen-Shannon divergence in nats; symmetric, bounded by ln 2.
double js(std::span<const double> p, std::span<const double> q);

enum class lens_kind { raw, tuned };

struct convergence_curve {
    std::vector<double> values;  // one per layer, nats
    lens_kind kind = lens_kind::raw;
    std::string token_step_id;
    std::string cluster_id;
};

// Per-layer next-token distribution for one captured residual.
using layer_decode_fn = std::function<std::vector<double>(int layer, std::span<const double> residual)>;

// Distributions decoded at every layer for one position of a trace.
std::vector<std::vector<double>> decode_layers(const layer_trace& trace, size_t pos,
                                               const layer_decode_fn& decode);

// values[l] = kl(decode_l, final distribution).
convergence_curve curve_from_decodes(const std::vector<std::vector<double>>& decodes,
                                     std::span<const double> final_dist);

// Curves for every token step of a trace; requires all layers captured.
std::vector<convergence_curve> convergence_curves(const layer_trace& trace,
                                                  const layer_decode_fn& decode);

// Mean of the last ceil(fraction * L) curve values.
double late_gap(std::span<const double> curve, double fraction = 0.2);

// Mean of the curve values over an inclusive layer window.
double window_gap(std::span<const double> curve, int window_lo, int window_hi);

// Smallest l with values[l'] < tau for all l' >= l; L when none.
int commitment_depth(std::span<const double> curve, double tau);

struct endpoint_stats_t {
    double confidence = 0.0;  // max probability
    double entropy = 0.0;     // nats
    double margin = 0.0;      // top1 - top2 probability
};

endpoint_stats_t endpoint_stats(std::span<const double> final_dist);

// Mean JS between consecutive layer decodes over [region_lo, region_hi];
// endpoint-free.
double adjacent_js_profile(const std::vector<std::vector<double>>& decodes, int region_lo,
                           int region_hi);

// Number of adjacent-layer argmax changes from reference_layer to L-2;
// ties broken by lowest index; endpoint-free.
int future_top1_flips(const std::vector<std::vector<double>>& decodes, int reference_layer);

// Variant (off by default in pipelines): layers in [reference_layer, L-2]
// whose argmax differs from the last layer's argmax.
int future_top1_flips_vs_final(const std::vector<std::vector<double>>& decodes,
                               int reference_layer);

// Argmax with lowest-index tie-breaking.
size_t argmax_lowest(std::span<const double> values);

}  // namespace convgap
