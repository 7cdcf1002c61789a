#include "convgap/lens.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "convgap/common.hpp"
#include "convgap/parallel.hpp"
#include "convgap/rng.hpp"

namespace convgap {

using nlohmann::json;

std::vector<double> raw_lens::decode(std::span<const double> residual) const {
    return softmax(readout_logits(*model, residual));
}

layer_decode_fn raw_lens::decoder() const {
    const checkpoint* m = model;
    return [m](int, std::span<const double> residual) {
        return softmax(readout_logits(*m, residual));
    };
}

namespace {

std::vector<double> apply_affine(const affine_map& map, std::span<const double> r) {
    const size_t d = map.bias.size();
    if (r.size() != d) {
        fail("tuned lens: residual has %zu dims, translator expects %zu", r.size(), d);
    }
    std::vector<double> h(d);
    for (size_t i = 0; i < d; ++i) {
        double acc = map.bias[i];
        const double* row = map.weight.data() + i * d;
        for (size_t j = 0; j < d; ++j) {
            acc += row[j] * r[j];
        }
        h[i] = acc;
    }
    return h;
}

affine_map identity_affine(int d) {
    affine_map map;
    map.weight.assign(static_cast<size_t>(d) * d, 0.0);
    map.bias.assign(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < d; ++i) {
        map.weight[static_cast<size_t>(i) * d + i] = 1.0;
    }
    return map;
}

}  // namespace

std::vector<double> tuned_lens::decode(const checkpoint& model, int layer,
                                       std::span<const double> residual) const {
    if (layer < 0 || layer >= n_layers) {
        fail("tuned lens: layer %d outside [0, %d)", layer, n_layers);
    }
    if (layer == n_layers - 1) {
        return softmax(readout_logits(model, residual));
    }
    const auto h = apply_affine(layers[static_cast<size_t>(layer)], residual);
    return softmax(readout_logits(model, h));
}

layer_decode_fn tuned_lens::decoder(const checkpoint& model) const {
    const checkpoint* m = &model;
    return [this, m](int layer, std::span<const double> residual) {
        return decode(*m, layer, residual);
    };
}

tuned_lens identity_tuned_lens(const model_config& cfg) {
    tuned_lens lens;
    lens.d_model = cfg.d_model;
    lens.n_layers = cfg.n_layers;
    for (int l = 0; l + 1 < cfg.n_layers; ++l) {
        lens.layers.push_back(identity_affine(cfg.d_model));
    }
    return lens;
}

namespace {

// Backward pass through the final norm. `h` is the norm input, `v` the
// loss gradient wrt the norm output; returns gradient wrt h.
std::vector<double> norm_backward(const model_config& cfg, const float* scale,
                                  const std::vector<double>& h, const std::vector<double>& v) {
    const int d = cfg.d_model;
    std::vector<double> grad(static_cast<size_t>(d), 0.0);
    if (cfg.norm == norm_kind::rmsnorm) {
        double ss = 0.0;
        for (int i = 0; i < d; ++i) {
            ss += h[i] * h[i];
        }
        const double s = std::sqrt(ss / d + cfg.norm_eps);
        double dot = 0.0;  // sum_i v_i * scale_i * h_i
        for (int i = 0; i < d; ++i) {
            dot += v[i] * static_cast<double>(scale[i]) * h[i];
        }
        const double s3 = s * s * s;
        for (int j = 0; j < d; ++j) {
            grad[j] = static_cast<double>(scale[j]) * v[j] / s - h[j] * dot / (d * s3);
        }
    } else {
        double mu = 0.0;
        for (int i = 0; i < d; ++i) {
            mu += h[i];
        }
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            var += (h[i] - mu) * (h[i] - mu);
        }
        var /= d;
        const double s = std::sqrt(var + cfg.norm_eps);
        double mean_gv = 0.0;   // mean_i scale_i v_i
        double mean_gvy = 0.0;  // mean_i scale_i v_i y_i
        std::vector<double> y(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
            y[i] = (h[i] - mu) / s;
            mean_gv += static_cast<double>(scale[i]) * v[i];
            mean_gvy += static_cast<double>(scale[i]) * v[i] * y[i];
        }
        mean_gv /= d;
        mean_gvy /= d;
        for (int j = 0; j < d; ++j) {
            grad[j] = (static_cast<double>(scale[j]) * v[j] - mean_gv - y[j] * mean_gvy) / s;
        }
    }
    return grad;
}

}  // namespace

fit_gradient tuned_fit_loss_grad(const checkpoint& model, const affine_map& map,
                                 std::span<const double> residual,
                                 std::span<const double> target_dist) {
    const model_config& cfg = model.config;
    const int d = cfg.d_model;
    const int vocab = cfg.vocab_size;
    const float* scale = model.t("final_norm.scale").data.data();
    const tensor& unembed = model.unembedding();

    const std::vector<double> h = apply_affine(map, residual);
    std::vector<double> normed(static_cast<size_t>(d));
    {
        // Same normalization as the readout path.
        if (cfg.norm == norm_kind::rmsnorm) {
            double ss = 0.0;
            for (int i = 0; i < d; ++i) {
                ss += h[i] * h[i];
            }
            const double inv = 1.0 / std::sqrt(ss / d + cfg.norm_eps);
            for (int i = 0; i < d; ++i) {
                normed[i] = static_cast<double>(scale[i]) * h[i] * inv;
            }
        } else {
            double mu = 0.0;
            for (int i = 0; i < d; ++i) {
                mu += h[i];
            }
            mu /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) {
                var += (h[i] - mu) * (h[i] - mu);
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + cfg.norm_eps);
            for (int i = 0; i < d; ++i) {
                normed[i] = static_cast<double>(scale[i]) * (h[i] - mu) * inv;
            }
        }
    }
    std::vector<double> z(static_cast<size_t>(vocab));
    for (int k = 0; k < vocab; ++k) {
        const float* row = unembed.row(static_cast<size_t>(k));
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            acc += static_cast<double>(row[j]) * normed[j];
        }
        z[k] = acc;
    }
    const std::vector<double> q = softmax(z);

    // loss = sum_k q_k (ln q_k - ln p_k); dL/dz_k = q_k (g_k - gbar).
    double loss = 0.0;
    std::vector<double> g(static_cast<size_t>(vocab));
    for (int k = 0; k < vocab; ++k) {
        const double lp = std::log(std::max(target_dist[static_cast<size_t>(k)], 1e-300));
        g[k] = std::log(std::max(q[static_cast<size_t>(k)], 1e-300)) - lp;
        loss += q[static_cast<size_t>(k)] * g[k];
    }
    std::vector<double> dz(static_cast<size_t>(vocab));
    double gbar = loss;
    for (int k = 0; k < vocab; ++k) {
        dz[k] = q[static_cast<size_t>(k)] * (g[k] - gbar);
    }

    std::vector<double> dn(static_cast<size_t>(d), 0.0);
    for (int k = 0; k < vocab; ++k) {
        const float* row = unembed.row(static_cast<size_t>(k));
        const double w = dz[static_cast<size_t>(k)];
        for (int j = 0; j < d; ++j) {
            dn[j] += w * static_cast<double>(row[j]);
        }
    }
    const std::vector<double> dh = norm_backward(cfg, scale, h, dn);

    fit_gradient out;
    out.loss = loss;
    out.d_bias = dh;
    out.d_weight.assign(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            out.d_weight[static_cast<size_t>(i) * d + j] = dh[static_cast<size_t>(i)] * residual[static_cast<size_t>(j)];
        }
    }
    return out;
}

size_t heldout_begin(size_t n_sequences) {
    const size_t heldout = n_sequences / 5;
    return n_sequences - heldout;
}

namespace {

struct layer_samples {
    // residuals[i]: d_model vector; targets[i]: vocab distribution index
    std::vector<std::vector<double>> residuals;
    std::vector<size_t> target_idx;  // index into shared target table
};

double sample_loss(const checkpoint& model, const affine_map& map,
                   std::span<const double> residual, std::span<const double> target) {
    const auto h = apply_affine(map, residual);
    const auto q = softmax(readout_logits(model, h));
    double loss = 0.0;
    for (size_t k = 0; k < q.size(); ++k) {
        if (q[k] > 0.0) {
            loss += q[k] * (std::log(q[k]) - std::log(std::max(target[k], 1e-300)));
        }
    }
    return loss;
}

double full_loss(const checkpoint& model, const affine_map& map, const layer_samples& samples,
                 const std::vector<std::vector<double>>& targets) {
    double acc = 0.0;
    for (size_t i = 0; i < samples.residuals.size(); ++i) {
        acc += sample_loss(model, map, samples.residuals[i], targets[samples.target_idx[i]]);
    }
    return acc / static_cast<double>(samples.residuals.size());
}

}  // namespace

tuned_lens fit_tuned_lens(const checkpoint& model, const std::vector<std::vector<int>>& corpus,
                          const lens_hyperparams& hp) {
    if (corpus.empty()) {
        fail("fit_tuned_lens: empty corpus");
    }
    const model_config& cfg = model.config;
    const int d = cfg.d_model;
    const size_t train_end = heldout_begin(corpus.size());

    // Gather per-layer samples from teacher-forced traces of the train split.
    std::vector<std::vector<double>> targets;
    std::vector<layer_samples> samples(static_cast<size_t>(std::max(0, cfg.n_layers - 1)));
    for (size_t s = 0; s < std::max<size_t>(train_end, 1); ++s) {
        const layer_trace trace = forward_trace(model, corpus[s]);
        for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
            targets.push_back(softmax(trace.logits(pos)));
            for (int l = 0; l + 1 < cfg.n_layers; ++l) {
                auto r = trace.residual(pos, l);
                samples[static_cast<size_t>(l)].residuals.emplace_back(r.begin(), r.end());
                samples[static_cast<size_t>(l)].target_idx.push_back(targets.size() - 1);
            }
        }
    }

    tuned_lens lens = identity_tuned_lens(cfg);
    lens.meta.corpus_id = hp.corpus_id;
    lens.meta.steps = hp.steps;
    lens.meta.step_size = hp.step_size;
    lens.meta.batch = hp.batch;
    lens.meta.seed = hp.seed;

    const int n_logs = 10;
    std::vector<std::vector<double>> per_layer_logs(lens.layers.size());
    std::vector<double> initial_losses(lens.layers.size(), 0.0);
    std::vector<double> final_losses(lens.layers.size(), 0.0);

    parallel_for(lens.layers.size(), default_workers(), [&](size_t li) {
        const int l = static_cast<int>(li);
        affine_map map = lens.layers[li];
        const layer_samples& data = samples[li];
        const size_t n = data.residuals.size();
        rng stream(mix_seed({hp.seed, 0x7e5ull, static_cast<uint64_t>(l)}));

        const double loss0 = full_loss(model, map, data, targets);
        initial_losses[li] = loss0;
        per_layer_logs[li].push_back(loss0);
        if (!std::isfinite(loss0)) {
            fail("fit_tuned_lens: non-finite initial loss at layer %d", l);
        }

        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        size_t cursor = n;  // triggers shuffle on first use

        const int batch = std::max(1, std::min<int>(hp.batch, static_cast<int>(n)));
        std::vector<double> gw(static_cast<size_t>(d) * d);
        std::vector<double> gb(static_cast<size_t>(d));
        const int log_every = std::max(1, hp.steps / n_logs);
        affine_map best = map;
        double best_loss = loss0;

        for (int step = 0; step < hp.steps; ++step) {
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            double batch_loss = 0.0;
            for (int b = 0; b < batch; ++b) {
                if (cursor >= n) {
                    // Fisher-Yates reshuffle per epoch.
                    for (size_t i = n - 1; i > 0; --i) {
                        const size_t j = stream.next_below(i + 1);
                        std::swap(order[i], order[j]);
                    }
                    cursor = 0;
                }
                const size_t idx = order[cursor++];
                const auto g = tuned_fit_loss_grad(model, map, data.residuals[idx],
                                                   targets[data.target_idx[idx]]);
                batch_loss += g.loss;
                for (size_t i = 0; i < gw.size(); ++i) {
                    gw[i] += g.d_weight[i];
                }
                for (size_t i = 0; i < gb.size(); ++i) {
                    gb[i] += g.d_bias[i];
                }
            }
            if (!std::isfinite(batch_loss)) {
                fail("fit_tuned_lens: loss diverged (non-finite) at layer %d, step %d", l, step);
            }
            const double lr = hp.step_size / batch;
            for (size_t i = 0; i < gw.size(); ++i) {
                map.weight[i] -= lr * gw[i];
            }
            for (size_t i = 0; i < gb.size(); ++i) {
                map.bias[i] -= lr * gb[i];
            }
            if ((step + 1) % log_every == 0 || step + 1 == hp.steps) {
                const double loss = full_loss(model, map, data, targets);
                if (!std::isfinite(loss)) {
                    fail("fit_tuned_lens: loss diverged (non-finite) at layer %d, step %d", l,
                         step + 1);
                }
                per_layer_logs[li].push_back(loss);
                if (loss < best_loss) {
                    best_loss = loss;
                    best = map;
                }
            }
        }
        // Contract: returned loss never exceeds the identity-init loss.
        lens.layers[li] = best_loss <= loss0 ? best : identity_affine(d);
        final_losses[li] = std::min(best_loss, loss0);
    });

    double init_total = 0.0;
    double final_total = 0.0;
    for (size_t li = 0; li < lens.layers.size(); ++li) {
        init_total += initial_losses[li];
        final_total += final_losses[li];
    }
    const double denom = lens.layers.empty() ? 1.0 : static_cast<double>(lens.layers.size());
    lens.meta.initial_loss = init_total / denom;
    lens.meta.final_loss = final_total / denom;
    // Mean across layers at each logged checkpoint.
    if (!per_layer_logs.empty()) {
        size_t n_points = per_layer_logs[0].size();
        for (const auto& logs : per_layer_logs) {
            n_points = std::min(n_points, logs.size());
        }
        for (size_t t = 0; t < n_points; ++t) {
            double acc = 0.0;
            for (const auto& logs : per_layer_logs) {
                acc += logs[t];
            }
            lens.meta.logged_losses.push_back(acc / denom);
        }
    }
    return lens;
}

double mean_layer_kl(const checkpoint& model, const std::vector<std::vector<int>>& corpus,
                     const layer_decode_fn& decode, int layer_lo, int layer_hi) {
    double acc = 0.0;
    size_t count = 0;
    for (const auto& tokens : corpus) {
        const layer_trace trace = forward_trace(model, tokens);
        for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
            const auto final_dist = softmax(trace.logits(pos));
            for (int l = layer_lo; l <= layer_hi; ++l) {
                acc += kl(decode(l, trace.residual(pos, l)), final_dist);
                ++count;
            }
        }
    }
    return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

void save_tuned_lens(const tuned_lens& lens, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json table = json::array();
    size_t offset = 0;
    std::vector<std::pair<std::string, const std::vector<double>*>> blobs;
    for (size_t l = 0; l < lens.layers.size(); ++l) {
        const std::string base = "lens.layer" + std::to_string(l) + ".";
        const auto d = static_cast<size_t>(lens.d_model);
        table.push_back({{"name", base + "weight"},
                         {"dtype", "f32"},
                         {"shape", {d, d}},
                         {"byte_offset", offset}});
        offset += d * d * sizeof(float);
        blobs.emplace_back(base + "weight", &lens.layers[l].weight);
        table.push_back(
            {{"name", base + "bias"}, {"dtype", "f32"}, {"shape", {d}}, {"byte_offset", offset}});
        offset += d * sizeof(float);
        blobs.emplace_back(base + "bias", &lens.layers[l].bias);
    }
    const json manifest = {{"format_version", kcheckpoint_format_version},
                           {"kind", "tuned_lens"},
                           {"d_model", lens.d_model},
                           {"n_layers", lens.n_layers},
                           {"fit", {{"corpus_id", lens.meta.corpus_id},
                                    {"steps", lens.meta.steps},
                                    {"step_size", lens.meta.step_size},
                                    {"batch", lens.meta.batch},
                                    {"seed", lens.meta.seed},
                                    {"initial_loss", lens.meta.initial_loss},
                                    {"final_loss", lens.meta.final_loss},
                                    {"logged_losses", lens.meta.logged_losses}}},
                           {"tensors", table}};
    std::ofstream mf(dir / "manifest.json");
    if (!mf) fail("save_tuned_lens: cannot write %s", (dir / "manifest.json").c_str());
    mf << manifest.dump(2) << "\n";
    std::ofstream wf(dir / "weights.bin", std::ios::binary);
    if (!wf) fail("save_tuned_lens: cannot write %s", (dir / "weights.bin").c_str());
    for (const auto& [name, vec] : blobs) {
        for (double v : *vec) {
            const float f = static_cast<float>(v);
            wf.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    }
}

tuned_lens load_tuned_lens(const std::filesystem::path& dir, const model_config& cfg) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) fail("load_tuned_lens: cannot open %s", (dir / "manifest.json").c_str());
    json manifest;
    mf >> manifest;
    if (manifest.at("format_version").get<int>() != kcheckpoint_format_version) {
        fail("load_tuned_lens: format_version mismatch");
    }
    if (manifest.value("kind", std::string()) != "tuned_lens") {
        fail("load_tuned_lens: %s is not a tuned-lens container", dir.c_str());
    }
    tuned_lens lens;
    lens.d_model = manifest.at("d_model").get<int>();
    lens.n_layers = manifest.at("n_layers").get<int>();
    if (lens.d_model != cfg.d_model || lens.n_layers != cfg.n_layers) {
        fail("load_tuned_lens: lens (%d layers, d %d) does not match model (%d layers, d %d)",
             lens.n_layers, lens.d_model, cfg.n_layers, cfg.d_model);
    }
    const auto& fit = manifest.at("fit");
    lens.meta.corpus_id = fit.value("corpus_id", std::string());
    lens.meta.steps = fit.value("steps", 0);
    lens.meta.step_size = fit.value("step_size", 0.0);
    lens.meta.batch = fit.value("batch", 0);
    lens.meta.seed = fit.value("seed", uint64_t{0});
    lens.meta.initial_loss = fit.value("initial_loss", 0.0);
    lens.meta.final_loss = fit.value("final_loss", 0.0);
    lens.meta.logged_losses = fit.value("logged_losses", std::vector<double>{});

    std::ifstream wf(dir / "weights.bin", std::ios::binary | std::ios::ate);
    if (!wf) fail("load_tuned_lens: cannot open %s", (dir / "weights.bin").c_str());
    const auto blob_size = static_cast<size_t>(wf.tellg());
    lens.layers.assign(static_cast<size_t>(std::max(0, lens.n_layers - 1)), affine_map{});
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<size_t>>();
        const auto offset = entry.at("byte_offset").get<size_t>();
        size_t count = 1;
        for (size_t s : shape) {
            count *= s;
        }
        if (offset + count * sizeof(float) > blob_size) {
            fail("load_tuned_lens: truncated blob for tensor '%s'", name.c_str());
        }
        std::vector<float> raw(count);
        wf.seekg(static_cast<std::streamoff>(offset));
        wf.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(count * sizeof(float)));
        // Parse "lens.layer{i}.weight|bias".
        const auto layer_pos = name.find("layer");
        const auto dot = name.find('.', layer_pos);
        const int layer = std::stoi(name.substr(layer_pos + 5, dot - layer_pos - 5));
        std::vector<double> vals(raw.begin(), raw.end());
        if (name.ends_with(".weight")) {
            lens.layers[static_cast<size_t>(layer)].weight = std::move(vals);
        } else {
            lens.layers[static_cast<size_t>(layer)].bias = std::move(vals);
        }
    }
    for (size_t l = 0; l < lens.layers.size(); ++l) {
        const auto d = static_cast<size_t>(lens.d_model);
        if (lens.layers[l].weight.size() != d * d || lens.layers[l].bias.size() != d) {
            fail("load_tuned_lens: missing tensors for layer %zu", l);
        }
    }
    return lens;
}

}  // namespace convgap
