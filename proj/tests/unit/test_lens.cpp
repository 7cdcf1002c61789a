#include <doctest.h>

#include <cmath>

#include "convgap/common.hpp"
#include "convgap/lens.hpp"
#include "convgap/metrics.hpp"
#include "convgap/oracle.hpp"
#include "convgap/synthetic.hpp"
#include "test_helpers.hpp"

using namespace convgap;
using convgap::testing::random_checkpoint;
using convgap::testing::random_tokens;
using convgap::testing::rel_diff;
using convgap::testing::temp_dir;
using convgap::testing::tiny_config;

namespace {

double tv_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double tv = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        tv += 0.5 * std::abs(a[i] - b[i]);
    }
    return tv;
}

}  // namespace

TEST_CASE("raw_decode of the final residual reproduces the final distribution") {
    const checkpoint model = random_checkpoint(tiny_config(2, 8, 2, 16), 31);
    const auto tokens = random_tokens(1, 5, 16);
    const layer_trace trace = forward_trace(model, tokens);
    raw_lens lens{&model};
    for (size_t pos = 0; pos < tokens.size(); ++pos) {
        const auto dist = lens.decode(trace.residual(pos, 1));
        CHECK(tv_distance(dist, softmax(trace.logits(pos))) <= 1e-6);
    }
}

TEST_CASE("raw_decode of a zero residual under layernorm matches the dense oracle") {
    model_config cfg = tiny_config(1, 4, 1, 8);
    cfg.norm = norm_kind::layernorm;
    const checkpoint model = random_checkpoint(cfg, 32);
    const std::vector<double> zero(4, 0.0);
    raw_lens lens{&model};
    const auto dist = lens.decode(zero);
    const auto oracle_dist = oracle::decode(model, zero);
    for (size_t i = 0; i < dist.size(); ++i) {
        CHECK(rel_diff(dist[i], oracle_dist[i]) < 1e-9);
    }
    // zero input, zero bias: the normed vector is zero, logits are flat
    for (size_t i = 0; i < dist.size(); ++i) {
        CHECK(dist[i] == doctest::Approx(1.0 / 8.0).epsilon(1e-9));
    }
}

TEST_CASE("raw_decode normalizes to 1 within 1e-9 on random residuals") {
    const checkpoint model = random_checkpoint(tiny_config(1, 8, 2, 32), 33);
    raw_lens lens{&model};
    rng stream(9);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> residual(8);
        for (double& v : residual) {
            v = 3.0 * stream.next_gaussian();
        }
        const auto dist = lens.decode(residual);
        double total = 0.0;
        for (double p : dist) {
            total += p;
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
    }
    CHECK_THROWS_AS(static_cast<void>(lens.decode(std::vector<double>(3, 0.0))), error);
}

TEST_CASE("identity translators decode exactly like the raw lens") {
    const checkpoint model = random_checkpoint(tiny_config(3, 8, 2, 16), 34);
    const tuned_lens lens = identity_tuned_lens(model.config);
    raw_lens raw{&model};
    const auto tokens = random_tokens(2, 4, 16);
    const layer_trace trace = forward_trace(model, tokens);
    for (size_t pos = 0; pos < tokens.size(); ++pos) {
        for (int l = 0; l < 3; ++l) {
            const auto a = lens.decode(model, l, trace.residual(pos, l));
            const auto b = raw.decode(trace.residual(pos, l));
            CHECK(tv_distance(a, b) <= 1e-9);
        }
    }
}

TEST_CASE("zero-matrix translator is a constant map") {
    const checkpoint model = random_checkpoint(tiny_config(2, 8, 2, 16), 35);
    tuned_lens lens = identity_tuned_lens(model.config);
    std::fill(lens.layers[0].weight.begin(), lens.layers[0].weight.end(), 0.0);
    for (int i = 0; i < 8; ++i) {
        lens.layers[0].bias[static_cast<size_t>(i)] = 0.3 * i;
    }
    rng stream(4);
    std::vector<double> r1(8), r2(8);
    for (int i = 0; i < 8; ++i) {
        r1[i] = stream.next_gaussian();
        r2[i] = stream.next_gaussian();
    }
    const auto a = lens.decode(model, 0, r1);
    const auto b = lens.decode(model, 0, r2);
    CHECK(tv_distance(a, b) == 0.0);
}

TEST_CASE("steps=0 fit returns identity translators") {
    const checkpoint model = random_checkpoint(tiny_config(2, 8, 2, 16), 36);
    lens_hyperparams hp;
    hp.steps = 0;
    const auto corpus = std::vector<std::vector<int>>{random_tokens(1, 6, 16)};
    const tuned_lens lens = fit_tuned_lens(model, corpus, hp);
    const tuned_lens identity = identity_tuned_lens(model.config);
    for (size_t l = 0; l < lens.layers.size(); ++l) {
        CHECK(lens.layers[l].weight == identity.layers[l].weight);
        CHECK(lens.layers[l].bias == identity.layers[l].bias);
    }
    CHECK(lens.meta.final_loss == lens.meta.initial_loss);
}

TEST_CASE("fit gradient matches central finite differences at d_model=4") {
    for (norm_kind norm : {norm_kind::rmsnorm, norm_kind::layernorm}) {
        model_config cfg = tiny_config(1, 4, 1, 8);
        cfg.norm = norm;
        const checkpoint model = random_checkpoint(cfg, 37);

        affine_map map;
        rng stream(21);
        map.weight.resize(16);
        map.bias.resize(4);
        for (double& v : map.weight) {
            v = 0.2 * stream.next_gaussian();
        }
        map.weight[0] += 1.0;
        map.weight[5] += 1.0;
        map.weight[10] += 1.0;
        map.weight[15] += 1.0;
        for (double& v : map.bias) {
            v = 0.1 * stream.next_gaussian();
        }
        std::vector<double> residual(4);
        for (double& v : residual) {
            v = stream.next_gaussian();
        }
        std::vector<double> target_logits(8);
        for (double& v : target_logits) {
            v = stream.next_gaussian();
        }
        const auto target = softmax(target_logits);

        const auto grad = tuned_fit_loss_grad(model, map, residual, target);
        const double h = 1e-5;
        auto loss_at = [&](const affine_map& m) {
            return tuned_fit_loss_grad(model, m, residual, target).loss;
        };
        for (size_t i = 0; i < map.weight.size(); ++i) {
            affine_map plus = map, minus = map;
            plus.weight[i] += h;
            minus.weight[i] -= h;
            const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
            if (std::abs(fd) > 1e-7) {
                CHECK(rel_diff(grad.d_weight[i], fd) < 1e-4);
            } else {
                CHECK(std::abs(grad.d_weight[i] - fd) < 1e-7);
            }
        }
        for (size_t i = 0; i < map.bias.size(); ++i) {
            affine_map plus = map, minus = map;
            plus.bias[i] += h;
            minus.bias[i] -= h;
            const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
            if (std::abs(fd) > 1e-7) {
                CHECK(rel_diff(grad.d_bias[i], fd) < 1e-4);
            } else {
                CHECK(std::abs(grad.d_bias[i] - fd) < 1e-7);
            }
        }
    }
}

TEST_CASE("fit is deterministic, improves the loss, and logs non-increasing checkpoints") {
    synth_spec spec;
    spec.seed = 40;
    spec.config.n_layers = 4;
    spec.config.d_model = 16;
    spec.config.n_heads = 2;
    spec.config.d_mlp = 32;
    spec.config.vocab_size = 32;
    spec.divergence_strength = 0.0;
    const auto [model, unused_it] = make_paired_checkpoints(spec);

    std::vector<std::vector<int>> corpus;
    for (uint64_t s = 0; s < 24; ++s) {
        corpus.push_back(random_tokens(s, 8, synth_prompt_token_limit(spec.config)));
    }
    lens_hyperparams hp;
    hp.steps = 120;
    hp.step_size = 0.05;
    hp.batch = 16;
    hp.seed = 99;
    const tuned_lens a = fit_tuned_lens(model, corpus, hp);
    const tuned_lens b = fit_tuned_lens(model, corpus, hp);
    for (size_t l = 0; l < a.layers.size(); ++l) {
        CHECK(a.layers[l].weight == b.layers[l].weight);
        CHECK(a.layers[l].bias == b.layers[l].bias);
    }
    CHECK(a.meta.final_loss <= a.meta.initial_loss);
    for (size_t i = 1; i < a.meta.logged_losses.size(); ++i) {
        CHECK(a.meta.logged_losses[i] <= a.meta.logged_losses[i - 1] + 1e-9);
    }

    // fitted mid layer beats the raw lens on most held-out steps
    const size_t held_begin = heldout_begin(corpus.size());
    raw_lens raw{&model};
    const int mid = 1;
    int wins = 0, total = 0;
    for (size_t s = held_begin; s < corpus.size(); ++s) {
        const layer_trace trace = forward_trace(model, corpus[s]);
        for (size_t pos = 0; pos < trace.n_positions(); ++pos) {
            const auto final_dist = softmax(trace.logits(pos));
            const double kl_raw = kl(raw.decode(trace.residual(pos, mid)), final_dist);
            const double kl_tuned =
                kl(a.decode(model, mid, trace.residual(pos, mid)), final_dist);
            wins += kl_tuned < kl_raw ? 1 : 0;
            ++total;
        }
    }
    CHECK(wins * 10 >= total * 6);  // >= 60% of held-out steps
}

TEST_CASE("tuned lens save/load round trip preserves decoding") {
    const checkpoint model = random_checkpoint(tiny_config(3, 8, 2, 16), 41);
    tuned_lens lens = identity_tuned_lens(model.config);
    rng stream(13);
    for (auto& layer : lens.layers) {
        for (double& v : layer.weight) {
            v += 0.01f * static_cast<float>(stream.next_gaussian());
        }
        for (double& v : layer.bias) {
            v = static_cast<float>(0.05 * stream.next_gaussian());
        }
        // quantize to f32 so the round trip is exact
        for (double& v : layer.weight) {
            v = static_cast<float>(v);
        }
    }
    lens.meta.corpus_id = "unit";
    lens.meta.steps = 7;
    temp_dir dir("lens");
    save_tuned_lens(lens, dir.path / "L");
    const tuned_lens loaded = load_tuned_lens(dir.path / "L", model.config);
    CHECK(loaded.meta.corpus_id == "unit");
    CHECK(loaded.meta.steps == 7);
    for (size_t l = 0; l < lens.layers.size(); ++l) {
        CHECK(loaded.layers[l].weight == lens.layers[l].weight);
        CHECK(loaded.layers[l].bias == lens.layers[l].bias);
    }
    const model_config other = tiny_config(2, 8, 2, 16);
    CHECK_THROWS_AS(static_cast<void>(load_tuned_lens(dir.path / "L", other)), error);
}

TEST_CASE("fit aborts with a report when the loss is non-finite") {
    // The final norm bounds the logits, so no step size can blow the
    // loss up; a non-finite model is the way this abort path fires.
    checkpoint model = random_checkpoint(tiny_config(2, 8, 2, 16), 42);
    model.tensors.at("layer0.attn.wo").data[0] = std::numeric_limits<float>::quiet_NaN();
    lens_hyperparams hp;
    hp.steps = 10;
    hp.batch = 8;
    const auto corpus = std::vector<std::vector<int>>{random_tokens(2, 12, 16)};
    CHECK_THROWS_WITH_AS(static_cast<void>(fit_tuned_lens(model, corpus, hp)),
                         doctest::Contains("non-finite"), error);
}
