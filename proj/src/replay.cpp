#include "convgap/replay.hpp"

#include <algorithm>
#include <cmath>

#include "convgap/common.hpp"
#include "convgap/metrics.hpp"
#include "convgap/parallel.hpp"
#include "convgap/rng.hpp"

namespace convgap {

std::vector<int> serialize_prompt(std::span<const int> prompt_tokens, template_regime regime,
                                  const checkpoint& ckpt) {
    if (regime == template_regime::raw) {
        return {prompt_tokens.begin(), prompt_tokens.end()};
    }
    auto seq = [&](const char* name) -> const std::vector<int>* {
        auto it = ckpt.token_sequences.find(name);
        return it == ckpt.token_sequences.end() ? nullptr : &it->second;
    };
    const auto* user = seq("template.user_prefix");
    const auto* assistant = seq("template.assistant_prefix");
    if (user == nullptr || assistant == nullptr) {
        fail("serialize_prompt: checkpoint lacks chat-template metadata for the native regime");
    }
    std::vector<int> out;
    if (const auto* system = seq("template.system_prefix")) {
        out.insert(out.end(), system->begin(), system->end());
    }
    out.insert(out.end(), user->begin(), user->end());
    out.insert(out.end(), prompt_tokens.begin(), prompt_tokens.end());
    out.insert(out.end(), assistant->begin(), assistant->end());
    return out;
}

std::vector<int> generate_continuation(const checkpoint& model, std::span<const int> context,
                                       int max_tokens, const decoding_params& decoding) {
    if (context.empty()) {
        fail("generate_continuation: empty context");
    }
    if (max_tokens < 1) {
        fail("generate_continuation: max_tokens must be >= 1");
    }
    std::vector<int> seq(context.begin(), context.end());
    std::vector<int> continuation;
    continuation.reserve(static_cast<size_t>(max_tokens));
    forward_options options;
    options.policy = capture_policy::subset;
    options.capture_layers = {};  // logits only
    for (int step = 0; step < max_tokens; ++step) {
        const layer_trace trace = forward_trace(model, seq, options);
        const auto logits = trace.logits(seq.size() - 1);
        int next = 0;
        if (decoding.greedy) {
            next = static_cast<int>(argmax_lowest(logits));
        } else {
            if (!(decoding.temperature > 0.0)) {
                fail("generate_continuation: temperature must be > 0");
            }
            std::vector<double> scaled(logits.size());
            for (size_t i = 0; i < logits.size(); ++i) {
                scaled[i] = logits[i] / decoding.temperature;
            }
            const auto probs = softmax(scaled);
            rng stream(mix_seed({decoding.seed, 0xdec0deull, static_cast<uint64_t>(step)}));
            const double draw = stream.next_double();
            double cum = 0.0;
            next = static_cast<int>(probs.size()) - 1;
            for (size_t i = 0; i < probs.size(); ++i) {
                cum += probs[i];
                if (draw < cum) {
                    next = static_cast<int>(i);
                    break;
                }
            }
        }
        seq.push_back(next);
        continuation.push_back(next);
    }
    return continuation;
}

replay_result replay_cells(const std::vector<prompt_seq>& prompts,
                           const std::vector<std::vector<int>>& continuations,
                           const std::vector<cell_spec>& cells, const replay_params& params) {
    if (prompts.size() != continuations.size()) {
        fail("replay_cells: %zu prompts but %zu continuations", prompts.size(),
             continuations.size());
    }
    if (cells.empty()) {
        fail("replay_cells: no cells");
    }

    replay_result result;
    for (const auto& cell : cells) {
        result.rows_by_cell[cell.label] = {};
    }

    for (const auto& cell : cells) {
        auto& rows = result.rows_by_cell[cell.label];
        std::vector<std::vector<replay_row>> per_prompt(prompts.size());
        const int workers = params.workers > 0 ? params.workers : default_workers();
        parallel_for(prompts.size(), workers, [&](size_t i) {
            const auto& continuation = continuations[i];
            if (continuation.empty()) {
                return;  // counted as missing alignment below
            }
            const std::vector<int> prefix =
                serialize_prompt(prompts[i].tokens, cell.regime, *cell.model);
            std::vector<int> forced = prefix;
            forced.insert(forced.end(), continuation.begin(), continuation.end());
            for (int tok : forced) {
                if (tok < 0 || tok >= cell.model->config.vocab_size) {
                    fail("replay_cells: token id %d exceeds vocab %d of cell '%s'", tok,
                         cell.model->config.vocab_size, cell.label.c_str());
                }
            }
            const layer_trace trace = forward_trace(*cell.model, forced);
            raw_lens lens{cell.model};
            const auto decode = lens.decoder();
            auto& out = per_prompt[i];
            // Step s is predicted at position prefix_len + s - 1; step
            // indices count forced-continuation positions only, so cells
            // with different prefix lengths stay aligned.
            for (size_t s = 0; s < continuation.size(); ++s) {
                const size_t pos = prefix.size() + s - 1;
                const auto decodes = decode_layers(trace, pos, decode);
                const auto final_dist = softmax(trace.logits(pos));
                const auto curve = curve_from_decodes(decodes, final_dist);
                const auto stats = endpoint_stats(final_dist);
                replay_row row;
                row.prompt_id = prompts[i].prompt_id;
                row.cluster_id = prompts[i].cluster_id;
                row.step = static_cast<int>(s);
                row.cell = cell.label;
                row.late_gap = late_gap(curve.values, params.late_fraction);
                row.confidence = stats.confidence;
                row.entropy = stats.entropy;
                row.margin = stats.margin;
                out.push_back(row);
            }
        });
        for (auto& chunk : per_prompt) {
            rows.insert(rows.end(), chunk.begin(), chunk.end());
        }
    }

    // Alignment audit: every (prompt, step) must appear in every cell,
    // and every row must be finite.
    for (const auto& [label, rows] : result.rows_by_cell) {
        for (const auto& row : rows) {
            if (!std::isfinite(row.late_gap) || !std::isfinite(row.confidence) ||
                !std::isfinite(row.entropy) || !std::isfinite(row.margin)) {
                ++result.malformed;
            }
        }
    }
    const auto& reference = result.rows_by_cell.begin()->second;
    for (const auto& [label, rows] : result.rows_by_cell) {
        if (rows.size() != reference.size()) {
            result.missing_aligned +=
                static_cast<size_t>(std::llabs(static_cast<long long>(rows.size()) -
                                               static_cast<long long>(reference.size())));
        }
    }
    size_t expected = 0;
    for (const auto& continuation : continuations) {
        expected += continuation.size();
    }
    if (reference.size() != expected) {
        result.missing_aligned += expected - reference.size();
    }
    return result;
}

estimate_with_ci paired_cell_effect(std::span<const replay_row> cell_a,
                                    std::span<const replay_row> cell_b,
                                    const bootstrap_params& params) {
    if (cell_a.size() != cell_b.size() || cell_a.empty()) {
        fail("paired_cell_effect: misaligned rows (%zu vs %zu)", cell_a.size(), cell_b.size());
    }
    std::vector<double> diffs(cell_a.size());
    std::vector<std::string> clusters(cell_a.size());
    for (size_t i = 0; i < cell_a.size(); ++i) {
        if (cell_a[i].prompt_id != cell_b[i].prompt_id || cell_a[i].step != cell_b[i].step) {
            fail("paired_cell_effect: alignment gap at row %zu (%s#%d vs %s#%d)", i,
                 cell_a[i].prompt_id.c_str(), cell_a[i].step, cell_b[i].prompt_id.c_str(),
                 cell_b[i].step);
        }
        diffs[i] = cell_a[i].late_gap - cell_b[i].late_gap;
        clusters[i] = cell_a[i].cluster_id;
    }
    return cluster_bootstrap_mean(diffs, clusters, params, "nats");
}

matched_cell_effect paired_cell_effect_cem(std::span<const replay_row> cell_a,
                                           std::span<const replay_row> cell_b, int n_bins,
                                           const bootstrap_params& params) {
    auto to_endpoint = [](const replay_row& r, row_role role) {
        endpoint_row row;
        row.token_step_id = r.prompt_id + "#" + std::to_string(r.step);
        row.cluster_id = r.cluster_id;
        row.role = role;
        row.confidence = r.confidence;
        row.entropy = r.entropy;
        row.margin = r.margin;
        row.late_gap_raw = r.late_gap;
        return row;
    };
    std::vector<endpoint_row> side_b, side_a;
    side_b.reserve(cell_b.size());
    side_a.reserve(cell_a.size());
    for (const auto& r : cell_b) {
        side_b.push_back(to_endpoint(r, row_role::pt));
    }
    for (const auto& r : cell_a) {
        side_a.push_back(to_endpoint(r, row_role::it));
    }
    const match_result match = cem_match(side_b, side_a, n_bins);
    matched_cell_effect out;
    out.effect = matched_effect(match, side_b, side_a, match_metric::late_gap_raw, params);
    out.retention = match.retention;
    for (covariate c : kall_covariates) {
        out.max_smd = std::max(out.max_smd, smd(match, side_b, side_a, c));
    }
    return out;
}

}  // namespace convgap
