#include "convgap/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "convgap/common.hpp"
#include "convgap/forward.hpp"
#include "convgap/oracle.hpp"
#include "convgap/replay.hpp"
#include "convgap/rng.hpp"

namespace convgap {

model_config default_synth_config() {
    model_config cfg;
    cfg.n_layers = 8;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.d_mlp = 128;
    cfg.vocab_size = 256;
    cfg.norm = norm_kind::rmsnorm;
    cfg.tied_unembedding = false;
    cfg.positional = positional_kind::rotary;
    cfg.family_id = "synth";
    cfg.moe_flag = false;
    cfg.mlp_gated = true;
    return cfg;
}

synth_spec::synth_spec() : config(default_synth_config()) {}

void synth_spec::validate() const {
    config.validate();
    if (divergence_strength < 0.0 || template_sensitivity < 0.0) {
        fail("synth_spec: strength and template_sensitivity must be >= 0");
    }
    if (divergence_window) {
        if (divergence_window->lo < 0 || divergence_window->hi < divergence_window->lo ||
            divergence_window->hi >= config.n_layers) {
            fail("synth_spec: divergence window [%d, %d] outside [0, %d)", divergence_window->lo,
                 divergence_window->hi, config.n_layers);
        }
    }
}

int synth_prompt_token_limit(const model_config& cfg) { return cfg.vocab_size - 8; }

namespace {

// init scales, relative to 1/sqrt(fan-in); unembedding spread sets the
// logit scale so endpoint distributions are neither one-hot nor uniform
constexpr double kembed_std = 1.0;
constexpr double kqk_gain = 1.0;
constexpr double kvo_gain = 0.35;
constexpr double kmlp_in_gain = 1.0;
constexpr double kmlp_down_gain = 0.35;
constexpr double kunembed_gain = 2.5;
// Planted-divergence design. The base model carries a shared embedding
// bias whose unembedding image is one "lead" token, so every position
// agrees on a confident top-1. The divergence deltas push the residual
// along exactly that readout direction (sign-alternating across window
// layers, decaying away from the window end), which moves KL-to-final a
// lot per unit of residual norm. A norm-matched isotropic perturbation
// spreads the same norm over d_model directions and cannot reproduce it.
constexpr int klead_token = 1;
constexpr double klead_bias = 5.0;
constexpr double kdelta_gain = 5.4;   // residual-norm units per unit strength
constexpr double kdelta_layer_decay = 0.35;
constexpr double ktemplate_embed_boost = 4.0;
constexpr double ktemplate_gain = 5.4;

void fill_gaussian(tensor& t, uint64_t seed, double std_dev) {
    rng stream(seed);
    for (float& v : t.data) {
        v = static_cast<float>(stream.next_gaussian() * std_dev);
    }
}

// The shared readout-bias direction; both the base construction and the
// divergence deltas refer to it.
std::vector<double> bias_direction(const synth_spec& spec) {
    rng stream(mix_seed({spec.seed, 0xb1a5ull}));
    std::vector<double> g(static_cast<size_t>(spec.config.d_model));
    double norm_sq = 0.0;
    for (double& x : g) {
        x = stream.next_gaussian();
        norm_sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : g) {
        x *= inv;
    }
    return g;
}

checkpoint build_base(const synth_spec& spec) {
    model_config cfg = spec.config;
    cfg.role = "pt";
    checkpoint ckpt;
    ckpt.config = cfg;

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(cfg.d_mlp));
    for (const auto& decl : expected_tensors(cfg)) {
        tensor t;
        t.name = decl.name;
        t.shape = decl.shape;
        t.data.resize(t.size());
        double std_dev = 0.0;
        if (decl.name.ends_with("norm.scale")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
            ckpt.tensors.emplace(t.name, std::move(t));
            continue;
        }
        if (decl.name == "embed.weight" || decl.name == "pos.weight") {
            std_dev = kembed_std;
        } else if (decl.name.ends_with("attn.wq") || decl.name.ends_with("attn.wk")) {
            std_dev = kqk_gain * inv_sqrt_d;
        } else if (decl.name.ends_with("attn.wv") || decl.name.ends_with("attn.wo")) {
            std_dev = kvo_gain * inv_sqrt_d;
        } else if (decl.name.ends_with("mlp.up") || decl.name.ends_with("mlp.gate")) {
            std_dev = kmlp_in_gain * inv_sqrt_d;
        } else if (decl.name.ends_with("mlp.down")) {
            std_dev = kmlp_down_gain * inv_sqrt_m;
        } else if (decl.name == "unembed.weight") {
            std_dev = kunembed_gain * inv_sqrt_d;
        } else {
            fail("synthetic: no init rule for tensor '%s'", decl.name.c_str());
        }
        fill_gaussian(t, mix_seed({spec.seed, 0x1217ull, hash_str(decl.name)}), std_dev);
        ckpt.tensors.emplace(t.name, std::move(t));
    }

    // Shared readout bias: every embedding carries klead_bias along one
    // direction, and the lead token's unembedding row points straight at
    // it, so the base model has a confident common top-1 at every step.
    const auto bias = bias_direction(spec);
    tensor& embed = ckpt.tensors.at("embed.weight");
    for (int tok = 0; tok < cfg.vocab_size; ++tok) {
        float* row = embed.row(static_cast<size_t>(tok));
        for (int i = 0; i < cfg.d_model; ++i) {
            row[i] = static_cast<float>(row[i] + klead_bias * bias[static_cast<size_t>(i)]);
        }
    }
    tensor& unembed = cfg.tied_unembedding ? embed : ckpt.tensors.at("unembed.weight");
    {
        float* row = unembed.row(static_cast<size_t>(klead_token));
        for (int i = 0; i < cfg.d_model; ++i) {
            row[i] = static_cast<float>(kunembed_gain * bias[static_cast<size_t>(i)]);
        }
    }

    // Chat-template metadata at the top of the vocab.
    const int v = cfg.vocab_size;
    ckpt.token_sequences["template.system_prefix"] = {v - 6};
    ckpt.token_sequences["template.user_prefix"] = {v - 5};
    ckpt.token_sequences["template.assistant_prefix"] = {v - 4};
    ckpt.token_sequences["template.turn_suffix"] = {v - 3};
    return ckpt;
}

std::vector<std::vector<int>> probe_prompts(const synth_spec& spec) {
    const auto prompts = make_synthetic_corpus(mix_seed({spec.seed, 0x9206eull}), 6, 12, 3,
                                               synth_prompt_token_limit(spec.config));
    return token_sequences(prompts);
}

// Mean MLP activation vector per layer over a probe run (raw
// serialization). The mean is well away from zero because of the shared
// embedding bias, which gives the planted deltas a positive read.
std::vector<std::vector<double>> probe_act_means(const checkpoint& base, const synth_spec& spec) {
    const auto probes = probe_prompts(spec);
    const int n_layers = base.config.n_layers;
    const int d_mlp = base.config.d_mlp;
    std::vector<std::vector<double>> means(static_cast<size_t>(n_layers),
                                           std::vector<double>(static_cast<size_t>(d_mlp), 0.0));
    size_t count = 0;
    forward_options options;
    options.capture_mlp_acts = true;
    for (const auto& tokens : probes) {
        const layer_trace trace = forward_trace(base, tokens, options);
        for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
            for (int l = 0; l < n_layers; ++l) {
                const auto act = trace.mlp_act(pos, l);
                auto& dst = means[static_cast<size_t>(l)];
                for (int i = 0; i < d_mlp; ++i) {
                    dst[static_cast<size_t>(i)] += act[static_cast<size_t>(i)];
                }
            }
        }
        count += trace.n_positions();
    }
    for (auto& per_layer : means) {
        for (double& v : per_layer) {
            v /= static_cast<double>(count);
        }
    }
    return means;
}

// Mean activation shift caused by a native template prefix, per layer,
// measured on the base model over aligned prompt positions.
std::vector<std::vector<double>> probe_template_act_shift(const checkpoint& base,
                                                          const synth_spec& spec) {
    const auto probes = probe_prompts(spec);
    const int n_layers = base.config.n_layers;
    const int d_mlp = base.config.d_mlp;
    std::vector<std::vector<double>> shift(static_cast<size_t>(n_layers),
                                           std::vector<double>(static_cast<size_t>(d_mlp), 0.0));
    size_t count = 0;
    forward_options options;
    options.capture_mlp_acts = true;
    for (const auto& tokens : probes) {
        const auto native = serialize_prompt(tokens, template_regime::native_chat, base);
        const size_t prefix_len = native.size() - tokens.size() + 1;  // up to assistant prefix
        const layer_trace raw_trace = forward_trace(base, tokens, options);
        const layer_trace native_trace = forward_trace(base, native, options);
        // Align on the shared prompt tokens (skip template positions).
        const size_t lead = native.size() - tokens.size() - 1;  // prompt starts after user prefix
        (void)prefix_len;
        for (size_t j = 0; j < tokens.size(); ++j) {
            for (int l = 0; l < n_layers; ++l) {
                const auto a_native = native_trace.mlp_act(lead + j, l);
                const auto a_raw = raw_trace.mlp_act(j, l);
                auto& dst = shift[static_cast<size_t>(l)];
                for (int i = 0; i < d_mlp; ++i) {
                    dst[static_cast<size_t>(i)] += a_native[static_cast<size_t>(i)] -
                                                   a_raw[static_cast<size_t>(i)];
                }
            }
            ++count;
        }
    }
    for (auto& per_layer : shift) {
        for (double& v : per_layer) {
            v /= static_cast<double>(count);
        }
    }
    return shift;
}

void add_rank_one(tensor& down, double gain, const std::vector<double>& col_dir,
                  const std::vector<double>& row_dir) {
    const size_t rows = down.shape[0];  // d_model
    const size_t cols = down.shape[1];  // d_mlp
    for (size_t r = 0; r < rows; ++r) {
        const double cr = gain * col_dir[r];
        float* out = down.data.data() + r * cols;
        for (size_t c = 0; c < cols; ++c) {
            out[c] = static_cast<float>(static_cast<double>(out[c]) + cr * row_dir[c]);
        }
    }
}

}  // namespace

std::pair<checkpoint, checkpoint> make_paired_checkpoints(const synth_spec& spec) {
    spec.validate();
    const synth_spec& local = spec;

    checkpoint pt = build_base(local);
    const model_config& cfg = pt.config;

    if (local.template_sensitivity > 0.0) {
        // Template-conditioned divergence needs a carrier: boost the
        // template token embeddings along a fixed direction so attention
        // transports template presence into downstream residuals.
        // Applied to the shared base, so the pair stays paired.
        rng gstream(mix_seed({local.seed, 0x9d17ull}));
        std::vector<double> g(static_cast<size_t>(cfg.d_model));
        double norm_sq = 0.0;
        for (double& x : g) {
            x = gstream.next_gaussian();
            norm_sq += x * x;
        }
        const double inv = ktemplate_embed_boost / std::sqrt(norm_sq);
        tensor& embed = pt.tensors.at("embed.weight");
        for (int tok = cfg.vocab_size - 6; tok <= cfg.vocab_size - 3; ++tok) {
            float* row = embed.row(static_cast<size_t>(tok));
            for (int i = 0; i < cfg.d_model; ++i) {
                row[i] = static_cast<float>(row[i] + g[static_cast<size_t>(i)] * inv);
            }
        }
    }

    checkpoint it = pt;
    it.config.role = "it";

    if (local.divergence_strength == 0.0) {
        // Strength gates the whole perturbation: zero means bit-identical
        // checkpoints regardless of template sensitivity.
        return {std::move(pt), std::move(it)};
    }

    const window_spec window =
        local.divergence_window.value_or(depth_windows(cfg.n_layers).late);
    const auto act_means = probe_act_means(pt, local);
    const auto bias = bias_direction(local);

    // Late rotation against the lead-token readout: window layers push
    // the residual along the bias direction with alternating sign and a
    // decay toward earlier layers, so successive late decodes disagree
    // about the lead token while the cumulative residual delta stays
    // close to the final layer's injection norm.
    for (int l = window.lo; l <= window.hi; ++l) {
        tensor& down = it.tensors.at("layer" + std::to_string(l) + ".mlp.down");
        const int dist = window.hi - l;
        const double decay = std::pow(kdelta_layer_decay, static_cast<double>(dist));
        const double sign = dist % 2 == 0 ? 1.0 : -1.0;
        const auto& mean_act = act_means[static_cast<size_t>(l)];
        double mean_norm = 0.0;
        for (double v : mean_act) {
            mean_norm += v * v;
        }
        mean_norm = std::sqrt(mean_norm);
        if (mean_norm < 1e-9) {
            continue;
        }
        std::vector<double> row_dir = mean_act;
        for (double& x : row_dir) {
            x /= mean_norm;
        }
        // Demote (sign +) or promote (sign -) the lead token.
        const double gain =
            -sign * kdelta_gain * local.divergence_strength * decay / mean_norm;
        add_rank_one(down, gain, bias, row_dir);
    }

    if (local.template_sensitivity > 0.0) {
        // Conditional component: the read vector is the calibrated
        // template-induced activation shift, so the injection fires
        // mainly when a template prefix is present upstream.
        const auto shifts = probe_template_act_shift(pt, local);
        for (int l = window.lo; l <= window.hi; ++l) {
            // Orthogonalize the shift against the mean activation so the
            // conditional read stays near zero on template-free runs.
            std::vector<double> shift = shifts[static_cast<size_t>(l)];
            const auto& mean_act = act_means[static_cast<size_t>(l)];
            double mean_norm_sq = 0.0;
            double dot = 0.0;
            for (size_t i = 0; i < shift.size(); ++i) {
                mean_norm_sq += mean_act[i] * mean_act[i];
                dot += shift[i] * mean_act[i];
            }
            if (mean_norm_sq > 1e-18) {
                for (size_t i = 0; i < shift.size(); ++i) {
                    shift[i] -= dot / mean_norm_sq * mean_act[i];
                }
            }
            double norm_sq = 0.0;
            for (double v : shift) {
                norm_sq += v * v;
            }
            const double shift_norm = std::sqrt(norm_sq);
            if (shift_norm < 1e-9) {
                continue;
            }
            std::vector<double> row_dir = shift;
            for (double& x : row_dir) {
                x /= shift_norm;
            }
            const int dist = window.hi - l;
            const double decay = std::pow(kdelta_layer_decay, static_cast<double>(dist));
            const double sign = dist % 2 == 0 ? 1.0 : -1.0;
            const double gain =
                -sign * ktemplate_gain * local.template_sensitivity * decay / shift_norm;
            tensor& down = it.tensors.at("layer" + std::to_string(l) + ".mlp.down");
            add_rank_one(down, gain, bias, row_dir);
        }
    }

    return {std::move(pt), std::move(it)};
}

double oracle_gap_delta(const checkpoint& pt, const checkpoint& it,
                        const std::vector<prompt_seq>& prompts, double late_fraction) {
    return oracle::gap_delta(pt, it, token_sequences(prompts), late_fraction);
}

}  // namespace convgap
