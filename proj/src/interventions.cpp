#include "convgap/interventions.hpp"

#include <algorithm>
#include <cmath>

#include "convgap/common.hpp"
#include "convgap/lens.hpp"
#include "convgap/metrics.hpp"
#include "convgap/parallel.hpp"
#include "convgap/rng.hpp"

namespace convgap {

depth_windows_t depth_windows(int n_layers) {
    if (n_layers < 8) {
        fail("depth_windows: need >= 8 layers, got %d", n_layers);
    }
    const int w = static_cast<int>(std::lround(0.4 * n_layers));
    depth_windows_t out;
    out.early = {"early", 0, w - 1};
    out.late = {"late", n_layers - w, n_layers - 1};
    const int mid_lo = (n_layers - w) / 2;
    out.mid = {"mid", mid_lo, mid_lo + w - 1};
    return out;
}

std::vector<window_spec> audit_windows(int n_layers) {
    const auto base = depth_windows(n_layers);
    const int w = base.late.size();
    const int h = (w + 1) / 2;
    const int q = static_cast<int>(std::lround(n_layers / 4.0));
    const int late_lo = base.late.lo;
    std::vector<window_spec> out;
    out.push_back({"pre_late_half", late_lo - h, late_lo - 1});
    out.push_back({"late_full", late_lo, n_layers - 1});
    out.push_back({"late_front_half", late_lo, late_lo + h - 1});
    const int center_lo = late_lo + (w - h) / 2;
    out.push_back({"late_center_half", center_lo, center_lo + h - 1});
    out.push_back({"late_terminal_half", n_layers - h, n_layers - 1});
    out.push_back({"terminal_quarter", n_layers - q, n_layers - 1});
    for (const auto& win : out) {
        if (win.lo < 0 || win.hi >= n_layers || win.lo > win.hi) {
            fail("audit_windows: derived window %s = [%d, %d] is out of range", win.label.c_str(),
                 win.lo, win.hi);
        }
    }
    return out;
}

namespace {

struct prompt_gaps {
    double late = 0.0;
    double window = 0.0;
};

// Mean late-fraction and edited-window gap over a trace's token steps,
// curves against the trace's own final distribution.
prompt_gaps trace_gaps(const checkpoint& model, const layer_trace& trace,
                       const window_spec& window, double late_fraction) {
    raw_lens lens{&model};
    const auto decode = lens.decoder();
    prompt_gaps acc;
    for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
        const auto decodes = decode_layers(trace, pos, decode);
        const auto curve = curve_from_decodes(decodes, softmax(trace.logits(pos)));
        acc.late += late_gap(curve.values, late_fraction);
        acc.window += window_gap(curve.values, window.lo, window.hi);
    }
    acc.late /= static_cast<double>(trace.n_positions());
    acc.window /= static_cast<double>(trace.n_positions());
    return acc;
}

std::vector<int> truncated_tokens(const prompt_seq& prompt, int forced_steps) {
    std::vector<int> tokens = prompt.tokens;
    if (forced_steps > 0 && tokens.size() > static_cast<size_t>(forced_steps)) {
        tokens.resize(static_cast<size_t>(forced_steps));
    }
    return tokens;
}

void finish_outcome(intervention_outcome& out, const intervention_params& params) {
    std::vector<double> late_deltas, window_deltas;
    std::vector<std::string> clusters;
    for (const auto& row : out.rows) {
        late_deltas.push_back(row.delta_late);
        window_deltas.push_back(row.delta_window);
        clusters.push_back(row.cluster_id);
    }
    out.delta_late = cluster_bootstrap_mean(late_deltas, clusters, params.boot, "nats");
    out.delta_window = cluster_bootstrap_mean(window_deltas, clusters, params.boot, "nats");
}

}  // namespace

intervention_outcome run_mlp_substitution(const checkpoint& host, const checkpoint& donor,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const intervention_params& params,
                                          const std::string& arm_label) {
    if (prompts.empty()) {
        fail("run_mlp_substitution: no prompts");
    }
    const checkpoint composite = substitute_mlp_window(host, donor, window.lo, window.hi);

    intervention_outcome out;
    out.arm = arm_label;
    out.window = window;
    out.rows.resize(prompts.size());
    const int workers = params.workers > 0 ? params.workers : default_workers();
    parallel_for(prompts.size(), workers, [&](size_t i) {
        const auto tokens = truncated_tokens(prompts[i], params.forced_steps);
        const layer_trace host_trace = forward_trace(host, tokens);
        const layer_trace arm_trace = forward_trace(composite, tokens);
        const auto host_gaps = trace_gaps(host, host_trace, window, params.late_fraction);
        const auto arm_gaps = trace_gaps(composite, arm_trace, window, params.late_fraction);
        intervention_row& row = out.rows[i];
        row.prompt_id = prompts[i].prompt_id;
        row.cluster_id = prompts[i].cluster_id;
        row.host_late = host_gaps.late;
        row.arm_late = arm_gaps.late;
        row.delta_late = arm_gaps.late - host_gaps.late;
        row.host_window = host_gaps.window;
        row.arm_window = arm_gaps.window;
        row.delta_window = arm_gaps.window - host_gaps.window;
    });
    finish_outcome(out, params);
    return out;
}

intervention_outcome run_graft_experiment(const checkpoint& pt, const checkpoint& it,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const intervention_params& params) {
    return run_mlp_substitution(pt, it, window, prompts, params, "B_" + window.label);
}

intervention_outcome run_swap_experiment(const checkpoint& it, const checkpoint& pt,
                                         const window_spec& window,
                                         const std::vector<prompt_seq>& prompts,
                                         const intervention_params& params) {
    return run_mlp_substitution(it, pt, window, prompts, params, "D_" + window.label);
}

random_control_outcome run_random_control(const checkpoint& pt, const checkpoint& it,
                                          const window_spec& window,
                                          const std::vector<prompt_seq>& prompts,
                                          const std::vector<uint64_t>& seeds,
                                          const intervention_params& params) {
    if (seeds.empty()) {
        fail("run_random_control: need at least one seed");
    }
    if (prompts.empty()) {
        fail("run_random_control: no prompts");
    }
    const checkpoint composite = substitute_mlp_window(pt, it, window.lo, window.hi);

    random_control_outcome out;
    out.true_graft.arm = "B_" + window.label;
    out.true_graft.window = window;
    out.true_graft.rows.resize(prompts.size());
    out.random.arm = "random_control";
    out.random.window = window;
    out.random.rows.resize(prompts.size());
    out.random.seeds = seeds;

    const int workers = params.workers > 0 ? params.workers : default_workers();
    parallel_for(prompts.size(), workers, [&](size_t i) {
        const auto tokens = truncated_tokens(prompts[i], params.forced_steps);
        const layer_trace host_trace = forward_trace(pt, tokens);
        const layer_trace graft_trace = forward_trace(composite, tokens);
        const auto host_gaps = trace_gaps(pt, host_trace, window, params.late_fraction);
        const auto graft_gaps = trace_gaps(composite, graft_trace, window, params.late_fraction);

        intervention_row& true_row = out.true_graft.rows[i];
        true_row.prompt_id = prompts[i].prompt_id;
        true_row.cluster_id = prompts[i].cluster_id;
        true_row.host_late = host_gaps.late;
        true_row.arm_late = graft_gaps.late;
        true_row.delta_late = graft_gaps.late - host_gaps.late;
        true_row.host_window = host_gaps.window;
        true_row.arm_window = graft_gaps.window;
        true_row.delta_window = graft_gaps.window - host_gaps.window;

        // Match perturbation norms to the true graft's residual deltas.
        std::vector<std::vector<double>> magnitudes(static_cast<size_t>(window.size()));
        for (int l = window.lo; l <= window.hi; ++l) {
            auto& per_layer = magnitudes[static_cast<size_t>(l - window.lo)];
            per_layer.resize(tokens.size());
            for (size_t pos = 0; pos < tokens.size(); ++pos) {
                const auto host_res = host_trace.residual(pos, l);
                const auto graft_res = graft_trace.residual(pos, l);
                double norm_sq = 0.0;
                for (size_t c = 0; c < host_res.size(); ++c) {
                    const double diff = graft_res[c] - host_res[c];
                    norm_sq += diff * diff;
                }
                per_layer[pos] = std::sqrt(norm_sq);
            }
        }

        double late_acc = 0.0, window_acc = 0.0;
        for (size_t s = 0; s < seeds.size(); ++s) {
            forward_options options;
            options.hooks.push_back(residual_perturbation_hook(
                window.lo, window.hi, magnitudes,
                mix_seed({seeds[s], hash_str(prompts[i].prompt_id)})));
            const layer_trace hooked = forward_trace(pt, tokens, options);
            const auto gaps = trace_gaps(pt, hooked, window, params.late_fraction);
            late_acc += gaps.late;
            window_acc += gaps.window;
        }
        late_acc /= static_cast<double>(seeds.size());
        window_acc /= static_cast<double>(seeds.size());

        intervention_row& rand_row = out.random.rows[i];
        rand_row.prompt_id = prompts[i].prompt_id;
        rand_row.cluster_id = prompts[i].cluster_id;
        rand_row.host_late = host_gaps.late;
        rand_row.arm_late = late_acc;
        rand_row.delta_late = late_acc - host_gaps.late;
        rand_row.host_window = host_gaps.window;
        rand_row.arm_window = window_acc;
        rand_row.delta_window = window_acc - host_gaps.window;
    });
    finish_outcome(out.true_graft, params);
    finish_outcome(out.random, params);
    return out;
}

std::vector<window_audit_row> window_audit(const checkpoint& pt, const checkpoint& it,
                                           const std::vector<prompt_seq>& prompts,
                                           const intervention_params& params) {
    std::vector<window_audit_row> out;
    for (const auto& window : audit_windows(pt.config.n_layers)) {
        window_audit_row row;
        row.window = window;
        row.graft = run_mlp_substitution(pt, it, window, prompts, params,
                                         "audit_graft_" + window.label);
        row.swap = run_mlp_substitution(it, pt, window, prompts, params,
                                        "audit_swap_" + window.label);
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace convgap
