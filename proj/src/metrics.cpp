#include "convgap/metrics.hpp"

#include <cmath>

#include "convgap/common.hpp"

namespace convgap {

namespace {

constexpr double kq_floor = 1e-12;

void check_distribution_pair(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        fail("divergence: length mismatch (%zu vs %zu)", p.size(), q.size());
    }
    if (p.empty()) {
        fail("divergence: empty distributions");
    }
    double sp = 0.0;
    double sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i]) || !std::isfinite(q[i])) {
            fail("divergence: non-finite input at index %zu", i);
        }
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
        fail("divergence: inputs must sum to 1 within 1e-6 (got %.9f, %.9f)", sp, sq);
    }
}

double kl_unchecked(std::span<const double> p, std::span<const double> q) {
    // Floor q only where it matters: an unsupported q entry under p > 0.
    // Unconditional renormalization would make kl(p, p) nonzero.
    bool floored = false;
    for (size_t i = 0; i < q.size(); ++i) {
        if (p[i] > 0.0 && q[i] < kq_floor) {
            floored = true;
            break;
        }
    }
    double acc = 0.0;
    if (!floored) {
        for (size_t i = 0; i < p.size(); ++i) {
            if (p[i] > 0.0) {
                acc += p[i] * std::log(p[i] / q[i]);
            }
        }
    } else {
        double total = 0.0;
        for (double v : q) {
            total += std::max(v, kq_floor);
        }
        for (size_t i = 0; i < p.size(); ++i) {
            if (p[i] > 0.0) {
                acc += p[i] * std::log(p[i] * total / std::max(q[i], kq_floor));
            }
        }
    }
    return acc < 0.0 ? 0.0 : acc;
}

}  // namespace

double kl(std::span<const double> p, std::span<const double> q) {
    check_distribution_pair(p, q);
    return kl_unchecked(p, q);
}

double js(std::span<const double> p, std::span<const double> q) {
    check_distribution_pair(p, q);
    std::vector<double> m(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        m[i] = 0.5 * (p[i] + q[i]);
    }
    return 0.5 * kl_unchecked(p, m) + 0.5 * kl_unchecked(q, m);
}

std::vector<std::vector<double>> decode_layers(const layer_trace& trace, size_t pos,
                                               const layer_decode_fn& decode) {
    if (trace.captured_layers.size() != static_cast<size_t>(trace.n_layers)) {
        fail("decode_layers: trace capture policy is missing layers (%zu of %d captured)",
             trace.captured_layers.size(), trace.n_layers);
    }
    std::vector<std::vector<double>> decodes(trace.n_layers);
    for (int l = 0; l < trace.n_layers; ++l) {
        decodes[l] = decode(l, trace.residual(pos, l));
    }
    return decodes;
}

convergence_curve curve_from_decodes(const std::vector<std::vector<double>>& decodes,
                                     std::span<const double> final_dist) {
    convergence_curve curve;
    curve.values.reserve(decodes.size());
    for (const auto& d : decodes) {
        curve.values.push_back(kl(d, final_dist));
    }
    return curve;
}

std::vector<convergence_curve> convergence_curves(const layer_trace& trace,
                                                  const layer_decode_fn& decode) {
    std::vector<convergence_curve> curves;
    curves.reserve(trace.n_positions());
    for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
        const auto decodes = decode_layers(trace, pos, decode);
        curves.push_back(curve_from_decodes(decodes, softmax(trace.logits(pos))));
    }
    return curves;
}

double late_gap(std::span<const double> curve, double fraction) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        fail("late_gap: fraction must be in (0, 1], got %f", fraction);
    }
    const size_t n = curve.size();
    const size_t w = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
    double acc = 0.0;
    for (size_t i = n - w; i < n; ++i) {
        acc += curve[i];
    }
    return acc / static_cast<double>(w);
}

double window_gap(std::span<const double> curve, int window_lo, int window_hi) {
    if (window_lo < 0 || window_hi < window_lo ||
        static_cast<size_t>(window_hi) >= curve.size()) {
        fail("window_gap: window [%d, %d] invalid for %zu layers", window_lo, window_hi,
             curve.size());
    }
    double acc = 0.0;
    for (int i = window_lo; i <= window_hi; ++i) {
        acc += curve[static_cast<size_t>(i)];
    }
    return acc / static_cast<double>(window_hi - window_lo + 1);
}

int commitment_depth(std::span<const double> curve, double tau) {
    if (!(tau > 0.0)) {
        fail("commitment_depth: tau must be > 0");
    }
    int depth = static_cast<int>(curve.size());  // sentinel: never commits
    for (int l = static_cast<int>(curve.size()) - 1; l >= 0; --l) {
        if (curve[static_cast<size_t>(l)] < tau) {
            depth = l;
        } else {
            break;
        }
    }
    return depth;
}

endpoint_stats_t endpoint_stats(std::span<const double> final_dist) {
    if (final_dist.size() < 2) {
        fail("endpoint_stats: need vocab >= 2 for a margin, got %zu", final_dist.size());
    }
    endpoint_stats_t stats;
    size_t top1 = argmax_lowest(final_dist);
    stats.confidence = final_dist[top1];
    double entropy = 0.0;
    for (double p : final_dist) {
        if (p > 0.0) {
            entropy -= p * std::log(p);
        }
    }
    stats.entropy = entropy < 0.0 ? 0.0 : entropy;
    double second = -1.0;
    for (size_t i = 0; i < final_dist.size(); ++i) {
        if (i != top1 && final_dist[i] > second) {
            second = final_dist[i];
        }
    }
    stats.margin = stats.confidence - second;
    return stats;
}

double adjacent_js_profile(const std::vector<std::vector<double>>& decodes, int region_lo,
                           int region_hi) {
    if (region_lo < 0 || static_cast<size_t>(region_hi) >= decodes.size() ||
        region_hi - region_lo < 1) {
        fail("adjacent_js_profile: region [%d, %d] needs >= 2 layers inside the stack", region_lo,
             region_hi);
    }
    double acc = 0.0;
    for (int l = region_lo; l < region_hi; ++l) {
        acc += js(decodes[static_cast<size_t>(l)], decodes[static_cast<size_t>(l) + 1]);
    }
    return acc / static_cast<double>(region_hi - region_lo);
}

int future_top1_flips(const std::vector<std::vector<double>>& decodes, int reference_layer) {
    const int n_layers = static_cast<int>(decodes.size());
    if (reference_layer < 0 || reference_layer >= n_layers - 1) {
        fail("future_top1_flips: reference layer %d must be < L-1 = %d", reference_layer,
             n_layers - 1);
    }
    int flips = 0;
    for (int l = reference_layer; l <= n_layers - 2; ++l) {
        if (argmax_lowest(decodes[static_cast<size_t>(l)]) !=
            argmax_lowest(decodes[static_cast<size_t>(l) + 1])) {
            ++flips;
        }
    }
    return flips;
}

int future_top1_flips_vs_final(const std::vector<std::vector<double>>& decodes,
                               int reference_layer) {
    const int n_layers = static_cast<int>(decodes.size());
    if (reference_layer < 0 || reference_layer >= n_layers - 1) {
        fail("future_top1_flips_vs_final: reference layer %d must be < L-1 = %d", reference_layer,
             n_layers - 1);
    }
    const size_t final_top1 = argmax_lowest(decodes.back());
    int flips = 0;
    for (int l = reference_layer; l <= n_layers - 2; ++l) {
        if (argmax_lowest(decodes[static_cast<size_t>(l)]) != final_top1) {
            ++flips;
        }
    }
    return flips;
}

size_t argmax_lowest(std::span<const double> values) {
    size_t best = 0;
    for (size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

}  // namespace convgap
