#include "convgap/forward.hpp"

#include <algorithm>
#include <cmath>

#include "convgap/common.hpp"
#include "convgap/rng.hpp"

namespace convgap {

bool layer_trace::captured(int layer) const {
    return std::binary_search(captured_layers.begin(), captured_layers.end(), layer);
}

std::span<const double> layer_trace::residual(size_t pos, int layer) const {
    auto it = std::lower_bound(captured_layers.begin(), captured_layers.end(), layer);
    if (it == captured_layers.end() || *it != layer) {
        fail("layer_trace: layer %d not captured", layer);
    }
    const size_t li = static_cast<size_t>(it - captured_layers.begin());
    const size_t stride = captured_layers.size() * static_cast<size_t>(d_model);
    return {residuals.data() + pos * stride + li * d_model, static_cast<size_t>(d_model)};
}

std::span<const double> layer_trace::logits(size_t pos) const {
    return {final_logits.data() + pos * vocab_size, static_cast<size_t>(vocab_size)};
}

std::span<const double> layer_trace::mlp_act(size_t pos, int layer) const {
    if (mlp_acts.empty()) {
        fail("layer_trace: MLP activations were not captured");
    }
    const size_t stride = static_cast<size_t>(n_layers) * d_mlp;
    return {mlp_acts.data() + pos * stride + static_cast<size_t>(layer) * d_mlp,
            static_cast<size_t>(d_mlp)};
}

perturbation_hook residual_perturbation_hook(int window_lo, int window_hi,
                                             std::vector<std::vector<double>> magnitudes,
                                             uint64_t seed) {
    if (window_lo < 0 || window_hi < window_lo) {
        fail("perturbation hook: bad window [%d, %d]", window_lo, window_hi);
    }
    if (magnitudes.size() != static_cast<size_t>(window_hi - window_lo + 1)) {
        fail("perturbation hook: magnitudes cover %zu layers, window has %d", magnitudes.size(),
             window_hi - window_lo + 1);
    }
    for (const auto& per_layer : magnitudes) {
        for (double m : per_layer) {
            if (!(m >= 0.0)) {
                fail("perturbation hook: magnitudes must be non-negative");
            }
        }
    }
    return perturbation_hook{window_lo, window_hi, std::move(magnitudes), seed};
}

std::vector<double> softmax(std::span<const double> logits) {
    double max_logit = -HUGE_VAL;
    for (double z : logits) {
        max_logit = std::max(max_logit, z);
    }
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - max_logit);
        sum += p[i];
    }
    for (double& v : p) {
        v /= sum;
    }
    return p;
}

namespace {

void apply_norm(const model_config& cfg, const float* scale, const double* x, double* out) {
    const int d = cfg.d_model;
    if (cfg.norm == norm_kind::rmsnorm) {
        double ss = 0.0;
        for (int i = 0; i < d; ++i) {
            ss += x[i] * x[i];
        }
        const double inv = 1.0 / std::sqrt(ss / d + cfg.norm_eps);
        for (int i = 0; i < d; ++i) {
            out[i] = static_cast<double>(scale[i]) * x[i] * inv;
        }
    } else {
        double mean = 0.0;
        for (int i = 0; i < d; ++i) {
            mean += x[i];
        }
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double c = x[i] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + cfg.norm_eps);
        for (int i = 0; i < d; ++i) {
            out[i] = static_cast<double>(scale[i]) * (x[i] - mean) * inv;
        }
    }
}

// out[r] = sum_c w[r, c] * x[c], w f32 row-major [rows, cols].
void matvec(const tensor& w, const double* x, double* out) {
    const size_t rows = w.shape[0];
    const size_t cols = w.shape[1];
    const float* data = w.data.data();
    for (size_t r = 0; r < rows; ++r) {
        const float* row = data + r * cols;
        double acc = 0.0;
        for (size_t c = 0; c < cols; ++c) {
            acc += static_cast<double>(row[c]) * x[c];
        }
        out[r] = acc;
    }
}

void apply_rotary(double* vec, int d_head, int n_heads, size_t pos, double base) {
    for (int h = 0; h < n_heads; ++h) {
        double* head = vec + h * d_head;
        for (int i = 0; i < d_head / 2; ++i) {
            const double freq = std::pow(base, -2.0 * i / d_head);
            const double angle = static_cast<double>(pos) * freq;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double x = head[2 * i];
            const double y = head[2 * i + 1];
            head[2 * i] = x * c - y * s;
            head[2 * i + 1] = x * s + y * c;
        }
    }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

std::vector<double> readout_logits(const checkpoint& model, std::span<const double> residual) {
    const auto& cfg = model.config;
    if (residual.size() != static_cast<size_t>(cfg.d_model)) {
        fail("readout: residual has %zu dims, model expects %d", residual.size(), cfg.d_model);
    }
    std::vector<double> normed(cfg.d_model);
    apply_norm(cfg, model.t("final_norm.scale").data.data(), residual.data(), normed.data());
    std::vector<double> logits(cfg.vocab_size);
    matvec(model.unembedding(), normed.data(), logits.data());
    return logits;
}

layer_trace forward_trace(const checkpoint& model, std::span<const int> tokens,
                          const forward_options& options) {
    const auto& cfg = model.config;
    const int d = cfg.d_model;
    const size_t n = tokens.size();
    if (n == 0) {
        fail("forward_trace: empty token sequence");
    }
    for (size_t p = 0; p < n; ++p) {
        if (tokens[p] < 0 || tokens[p] >= cfg.vocab_size) {
            fail("forward_trace: token id %d at position %zu out of range [0, %d)", tokens[p], p,
             cfg.vocab_size);
        }
    }
    if (cfg.positional == positional_kind::learned && n > static_cast<size_t>(cfg.max_seq_len)) {
        fail("forward_trace: sequence length %zu exceeds max_seq_len %d", n, cfg.max_seq_len);
    }
    for (const auto& hook : options.hooks) {
        if (hook.window_hi >= cfg.n_layers || hook.window_lo < 0) {
            fail("forward_trace: hook window [%d, %d] outside [0, %d)", hook.window_lo,
                 hook.window_hi, cfg.n_layers);
        }
        if (hook.magnitudes.size() != static_cast<size_t>(hook.window_size())) {
            fail("forward_trace: hook magnitudes cover %zu layers, window has %d",
                 hook.magnitudes.size(), hook.window_size());
        }
        for (const auto& per_layer : hook.magnitudes) {
            if (per_layer.size() != n) {
                fail("forward_trace: hook magnitudes cover %zu positions, sequence has %zu",
                     per_layer.size(), n);
            }
        }
    }

    layer_trace trace;
    trace.tokens.assign(tokens.begin(), tokens.end());
    trace.n_layers = cfg.n_layers;
    trace.d_model = d;
    trace.vocab_size = cfg.vocab_size;
    trace.policy = options.policy;
    if (options.policy == capture_policy::all_layers) {
        trace.captured_layers.resize(cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            trace.captured_layers[l] = l;
        }
    } else {
        trace.captured_layers = options.capture_layers;
        std::sort(trace.captured_layers.begin(), trace.captured_layers.end());
        trace.captured_layers.erase(
            std::unique(trace.captured_layers.begin(), trace.captured_layers.end()),
            trace.captured_layers.end());
        for (int l : trace.captured_layers) {
            if (l < 0 || l >= cfg.n_layers) {
                fail("forward_trace: capture layer %d outside [0, %d)", l, cfg.n_layers);
            }
        }
    }
    trace.residuals.assign(n * trace.captured_layers.size() * d, 0.0);
    trace.final_logits.assign(n * cfg.vocab_size, 0.0);
    if (options.capture_mlp_acts) {
        trace.d_mlp = cfg.d_mlp;
        trace.mlp_acts.assign(n * static_cast<size_t>(cfg.n_layers) * cfg.d_mlp, 0.0);
    }

    // Residual stream, [position][d_model].
    std::vector<double> x(n * d);
    const tensor& embed = model.t("embed.weight");
    for (size_t p = 0; p < n; ++p) {
        const float* row = embed.row(static_cast<size_t>(tokens[p]));
        for (int i = 0; i < d; ++i) {
            x[p * d + i] = row[i];
        }
    }
    if (cfg.positional == positional_kind::learned) {
        const tensor& pos = model.t("pos.weight");
        for (size_t p = 0; p < n; ++p) {
            const float* row = pos.row(p);
            for (int i = 0; i < d; ++i) {
                x[p * d + i] += row[i];
            }
        }
    }

    const int dh = cfg.d_head();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> normed(n * d), q(n * d), k(n * d), v(n * d), attn_out(d), head_out(d),
        scores, mlp_in(d), up(cfg.d_mlp), gate(cfg.d_mlp), act(cfg.d_mlp), down_out(d);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "layer" + std::to_string(l) + ".";
        const tensor& wq = model.t(lp + "attn.wq");
        const tensor& wk = model.t(lp + "attn.wk");
        const tensor& wv = model.t(lp + "attn.wv");
        const tensor& wo = model.t(lp + "attn.wo");
        const float* attn_scale = model.t(lp + "attn_norm.scale").data.data();

        for (size_t p = 0; p < n; ++p) {
            apply_norm(cfg, attn_scale, &x[p * d], &normed[p * d]);
            matvec(wq, &normed[p * d], &q[p * d]);
            matvec(wk, &normed[p * d], &k[p * d]);
            matvec(wv, &normed[p * d], &v[p * d]);
            if (cfg.positional == positional_kind::rotary) {
                apply_rotary(&q[p * d], dh, cfg.n_heads, p, cfg.rotary_base);
                apply_rotary(&k[p * d], dh, cfg.n_heads, p, cfg.rotary_base);
            }
        }
        for (size_t p = 0; p < n; ++p) {
            // Causal attention per head.
            std::fill(head_out.begin(), head_out.end(), 0.0);
            scores.resize(p + 1);
            for (int h = 0; h < cfg.n_heads; ++h) {
                const double* qh = &q[p * d] + h * dh;
                double max_score = -HUGE_VAL;
                for (size_t j = 0; j <= p; ++j) {
                    const double* kh = &k[j * d] + h * dh;
                    double s = 0.0;
                    for (int i = 0; i < dh; ++i) {
                        s += qh[i] * kh[i];
                    }
                    scores[j] = s * inv_sqrt_dh;
                    max_score = std::max(max_score, scores[j]);
                }
                double denom = 0.0;
                for (size_t j = 0; j <= p; ++j) {
                    scores[j] = std::exp(scores[j] - max_score);
                    denom += scores[j];
                }
                double* oh = head_out.data() + h * dh;
                for (size_t j = 0; j <= p; ++j) {
                    const double w = scores[j] / denom;
                    const double* vh = &v[j * d] + h * dh;
                    for (int i = 0; i < dh; ++i) {
                        oh[i] += w * vh[i];
                    }
                }
            }
            matvec(wo, head_out.data(), attn_out.data());
            for (int i = 0; i < d; ++i) {
                x[p * d + i] += attn_out[i];
            }
        }

        const tensor& w_up = model.t(lp + "mlp.up");
        const tensor* w_gate = cfg.mlp_gated ? &model.t(lp + "mlp.gate") : nullptr;
        const tensor& w_down = model.t(lp + "mlp.down");
        const float* mlp_scale = model.t(lp + "mlp_norm.scale").data.data();
        for (size_t p = 0; p < n; ++p) {
            apply_norm(cfg, mlp_scale, &x[p * d], mlp_in.data());
            matvec(w_up, mlp_in.data(), up.data());
            if (w_gate != nullptr) {
                matvec(*w_gate, mlp_in.data(), gate.data());
                for (int i = 0; i < cfg.d_mlp; ++i) {
                    act[i] = silu(gate[i]) * up[i];
                }
            } else {
                for (int i = 0; i < cfg.d_mlp; ++i) {
                    act[i] = gelu(up[i]);
                }
            }
            if (options.capture_mlp_acts) {
                double* dst = trace.mlp_acts.data() +
                              (p * static_cast<size_t>(cfg.n_layers) + l) * cfg.d_mlp;
                std::copy(act.begin(), act.end(), dst);
            }
            matvec(w_down, act.data(), down_out.data());
            for (int i = 0; i < d; ++i) {
                x[p * d + i] += down_out[i];
            }
        }

        // Residual perturbation hooks apply post-block; captures see them.
        for (const auto& hook : options.hooks) {
            if (l < hook.window_lo || l > hook.window_hi) {
                continue;
            }
            const auto& mags = hook.magnitudes[static_cast<size_t>(l - hook.window_lo)];
            for (size_t p = 0; p < n; ++p) {
                const double m = mags[p];
                if (m == 0.0) {
                    continue;
                }
                rng stream(mix_seed({hook.seed, static_cast<uint64_t>(l), static_cast<uint64_t>(p)}));
                std::vector<double> dir(d);
                double norm_sq = 0.0;
                for (int i = 0; i < d; ++i) {
                    dir[i] = stream.next_gaussian();
                    norm_sq += dir[i] * dir[i];
                }
                const double scale = m / std::sqrt(norm_sq);
                for (int i = 0; i < d; ++i) {
                    x[p * d + i] += dir[i] * scale;
                }
            }
        }

        if (trace.captured(l)) {
            auto it = std::lower_bound(trace.captured_layers.begin(), trace.captured_layers.end(), l);
            const size_t li = static_cast<size_t>(it - trace.captured_layers.begin());
            const size_t stride = trace.captured_layers.size() * static_cast<size_t>(d);
            for (size_t p = 0; p < n; ++p) {
                std::copy(&x[p * d], &x[p * d] + d, trace.residuals.data() + p * stride + li * d);
            }
        }
    }

    for (size_t p = 0; p < n; ++p) {
        const auto logits = readout_logits(model, std::span<const double>(&x[p * d], d));
        std::copy(logits.begin(), logits.end(), trace.final_logits.data() + p * cfg.vocab_size);
    }
    return trace;
}

checkpoint substitute_mlp_window(const checkpoint& host, const checkpoint& donor, int window_lo,
                                 int window_hi) {
    if (host.config.moe_flag || donor.config.moe_flag) {
        fail("substitute_mlp_window: MoE checkpoints are excluded from dense MLP interventions");
    }
    if (!host.config.paired_with(donor.config)) {
        fail("substitute_mlp_window: checkpoints are not paired (configs differ beyond role)");
    }
    if (window_lo < 0 || window_hi < window_lo || window_hi >= host.config.n_layers) {
        fail("substitute_mlp_window: window [%d, %d] invalid for %d layers", window_lo, window_hi,
             host.config.n_layers);
    }
    checkpoint composite = host;
    for (int l = window_lo; l <= window_hi; ++l) {
        for (const auto& name : mlp_tensor_names(host.config, l)) {
            composite.tensors[name] = donor.t(name);
        }
    }
    return composite;
}

}  // namespace convgap
