#include "convgap/oracle.hpp"

#include <cmath>

#include "convgap/common.hpp"

namespace convgap::oracle {

namespace {

std::vector<double> norm_vec(const model_config& cfg, const tensor& scale,
                             const std::vector<double>& x) {
    const int d = cfg.d_model;
    std::vector<double> out(d);
    if (cfg.norm == norm_kind::rmsnorm) {
        double ss = 0.0;
        for (int i = 0; i < d; ++i) {
            ss = ss + x[i] * x[i];
        }
        const double rms = std::sqrt(ss / d + cfg.norm_eps);
        for (int i = 0; i < d; ++i) {
            out[i] = static_cast<double>(scale.data[i]) * x[i] / rms;
        }
    } else {
        double mu = 0.0;
        for (int i = 0; i < d; ++i) {
            mu = mu + x[i];
        }
        mu = mu / d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            var = var + (x[i] - mu) * (x[i] - mu);
        }
        var = var / d;
        const double denom = std::sqrt(var + cfg.norm_eps);
        for (int i = 0; i < d; ++i) {
            out[i] = static_cast<double>(scale.data[i]) * (x[i] - mu) / denom;
        }
    }
    return out;
}

std::vector<double> mat_times(const tensor& w, const std::vector<double>& x) {
    const size_t rows = w.shape[0];
    const size_t cols = w.shape[1];
    std::vector<double> out(rows, 0.0);
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) {
            out[r] = out[r] + static_cast<double>(w.data[r * cols + c]) * x[c];
        }
    }
    return out;
}

std::vector<double> rotary(const std::vector<double>& vec, int n_heads, int d_head, size_t pos,
                           double base) {
    std::vector<double> out = vec;
    for (int h = 0; h < n_heads; ++h) {
        for (int i = 0; i + 1 < d_head; i += 2) {
            const double theta = static_cast<double>(pos) / std::pow(base, static_cast<double>(i) / d_head);
            const double a = vec[h * d_head + i];
            const double b = vec[h * d_head + i + 1];
            out[h * d_head + i] = a * std::cos(theta) - b * std::sin(theta);
            out[h * d_head + i + 1] = a * std::sin(theta) + b * std::cos(theta);
        }
    }
    return out;
}

}  // namespace

static std::vector<double> decode_logits_impl(const checkpoint& model,
                                              const std::vector<double>& residual) {
    const model_config& cfg = model.config;
    const std::vector<double> normed = norm_vec(cfg, model.t("final_norm.scale"), residual);
    return mat_times(model.unembedding(), normed);
}

trace forward(const checkpoint& model, std::span<const int> tokens) {
    const model_config& cfg = model.config;
    const int d = cfg.d_model;
    const int dh = cfg.d_head();
    const size_t n = tokens.size();
    if (n == 0) {
        fail("oracle::forward: empty token sequence");
    }

    const tensor& embed = model.t("embed.weight");
    std::vector<std::vector<double>> stream(n, std::vector<double>(d, 0.0));
    for (size_t p = 0; p < n; ++p) {
        for (int i = 0; i < d; ++i) {
            stream[p][i] = embed.data[static_cast<size_t>(tokens[p]) * d + i];
        }
        if (cfg.positional == positional_kind::learned) {
            const tensor& pos = model.t("pos.weight");
            for (int i = 0; i < d; ++i) {
                stream[p][i] = stream[p][i] + pos.data[p * d + i];
            }
        }
    }

    trace tr;
    tr.residuals.assign(n, {});

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = "layer" + std::to_string(l) + ".";
        const tensor& attn_scale = model.t(lp + "attn_norm.scale");
        const tensor& wq = model.t(lp + "attn.wq");
        const tensor& wk = model.t(lp + "attn.wk");
        const tensor& wv = model.t(lp + "attn.wv");
        const tensor& wo = model.t(lp + "attn.wo");

        std::vector<std::vector<double>> qs(n), ks(n), vs(n);
        for (size_t p = 0; p < n; ++p) {
            const std::vector<double> normed = norm_vec(cfg, attn_scale, stream[p]);
            qs[p] = mat_times(wq, normed);
            ks[p] = mat_times(wk, normed);
            vs[p] = mat_times(wv, normed);
            if (cfg.positional == positional_kind::rotary) {
                qs[p] = rotary(qs[p], cfg.n_heads, dh, p, cfg.rotary_base);
                ks[p] = rotary(ks[p], cfg.n_heads, dh, p, cfg.rotary_base);
            }
        }
        std::vector<std::vector<double>> attn(n, std::vector<double>(d, 0.0));
        for (size_t p = 0; p < n; ++p) {
            std::vector<double> merged(d, 0.0);
            for (int h = 0; h < cfg.n_heads; ++h) {
                std::vector<double> raw(p + 1, 0.0);
                double peak = -1e300;
                for (size_t j = 0; j <= p; ++j) {
                    double dot = 0.0;
                    for (int i = 0; i < dh; ++i) {
                        dot = dot + qs[p][h * dh + i] * ks[j][h * dh + i];
                    }
                    raw[j] = dot / std::sqrt(static_cast<double>(dh));
                    if (raw[j] > peak) {
                        peak = raw[j];
                    }
                }
                double total = 0.0;
                for (size_t j = 0; j <= p; ++j) {
                    raw[j] = std::exp(raw[j] - peak);
                    total = total + raw[j];
                }
                for (size_t j = 0; j <= p; ++j) {
                    const double weight = raw[j] / total;
                    for (int i = 0; i < dh; ++i) {
                        merged[h * dh + i] = merged[h * dh + i] + weight * vs[j][h * dh + i];
                    }
                }
            }
            attn[p] = mat_times(wo, merged);
        }
        for (size_t p = 0; p < n; ++p) {
            for (int i = 0; i < d; ++i) {
                stream[p][i] = stream[p][i] + attn[p][i];
            }
        }

        const tensor& mlp_scale = model.t(lp + "mlp_norm.scale");
        const tensor& up = model.t(lp + "mlp.up");
        const tensor& down = model.t(lp + "mlp.down");
        for (size_t p = 0; p < n; ++p) {
            const std::vector<double> normed = norm_vec(cfg, mlp_scale, stream[p]);
            const std::vector<double> u = mat_times(up, normed);
            std::vector<double> act(cfg.d_mlp, 0.0);
            if (cfg.mlp_gated) {
                const std::vector<double> g = mat_times(model.t(lp + "mlp.gate"), normed);
                for (int i = 0; i < cfg.d_mlp; ++i) {
                    act[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
                }
            } else {
                for (int i = 0; i < cfg.d_mlp; ++i) {
                    act[i] = 0.5 * u[i] * (1.0 + std::erf(u[i] / std::sqrt(2.0)));
                }
            }
            const std::vector<double> out = mat_times(down, act);
            for (int i = 0; i < d; ++i) {
                stream[p][i] = stream[p][i] + out[i];
            }
        }

        for (size_t p = 0; p < n; ++p) {
            tr.residuals[p].push_back(stream[p]);
        }
    }

    tr.logits.assign(n, {});
    for (size_t p = 0; p < n; ++p) {
        tr.logits[p] = decode_logits_impl(model, stream[p]);
    }
    return tr;
}

std::vector<double> softmax(const std::vector<double>& logits) {
    double peak = -1e300;
    for (double z : logits) {
        if (z > peak) {
            peak = z;
        }
    }
    std::vector<double> p(logits.size(), 0.0);
    double total = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - peak);
        total = total + p[i];
    }
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = p[i] / total;
    }
    return p;
}

std::vector<double> decode(const checkpoint& model, const std::vector<double>& residual) {
    return softmax(decode_logits_impl(model, residual));
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
    constexpr double floor = 1e-12;
    bool floored = false;
    for (double v : q) {
        if (v < floor) {
            floored = true;
        }
    }
    std::vector<double> qq = q;
    if (floored) {
        double total = 0.0;
        for (size_t i = 0; i < qq.size(); ++i) {
            if (qq[i] < floor) {
                qq[i] = floor;
            }
            total = total + qq[i];
        }
        for (size_t i = 0; i < qq.size(); ++i) {
            qq[i] = qq[i] / total;
        }
    }
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            acc = acc + p[i] * std::log(p[i] / qq[i]);
        }
    }
    return acc < 0.0 ? 0.0 : acc;
}

std::vector<double> curve_at(const checkpoint& model, const trace& tr, size_t pos) {
    const std::vector<double> final_dist = softmax(tr.logits[pos]);
    std::vector<double> curve;
    for (const auto& residual : tr.residuals[pos]) {
        curve.push_back(kl(decode(model, residual), final_dist));
    }
    return curve;
}

double late_gap(const std::vector<double>& curve, double fraction) {
    const size_t n = curve.size();
    const size_t w = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
    double acc = 0.0;
    for (size_t i = n - w; i < n; ++i) {
        acc = acc + curve[i];
    }
    return acc / static_cast<double>(w);
}

std::vector<int> greedy_rollout(const checkpoint& model, std::span<const int> context,
                                int max_tokens) {
    std::vector<int> seq(context.begin(), context.end());
    std::vector<int> out;
    for (int step = 0; step < max_tokens; ++step) {
        const trace tr = forward(model, seq);
        const std::vector<double>& logits = tr.logits.back();
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i) {
            if (logits[i] > logits[best]) {
                best = i;
            }
        }
        seq.push_back(static_cast<int>(best));
        out.push_back(static_cast<int>(best));
    }
    return out;
}

double gap_delta(const checkpoint& pt, const checkpoint& it,
                 const std::vector<std::vector<int>>& prompts, double late_fraction) {
    double acc = 0.0;
    for (const auto& tokens : prompts) {
        const trace tr_pt = forward(pt, tokens);
        const trace tr_it = forward(it, tokens);
        double pt_mean = 0.0;
        double it_mean = 0.0;
        for (size_t p = 0; p < tokens.size(); ++p) {
            pt_mean = pt_mean + late_gap(curve_at(pt, tr_pt, p), late_fraction);
            it_mean = it_mean + late_gap(curve_at(it, tr_it, p), late_fraction);
        }
        pt_mean = pt_mean / static_cast<double>(tokens.size());
        it_mean = it_mean / static_cast<double>(tokens.size());
        acc = acc + (it_mean - pt_mean);
    }
    return acc / static_cast<double>(prompts.size());
}

}  // namespace convgap::oracle
