#include "convgap/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "convgap/common.hpp"

namespace convgap {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "weights.bin is little-endian; big-endian hosts are unsupported");

const char* to_string(norm_kind k) {
    return k == norm_kind::rmsnorm ? "rmsnorm" : "layernorm";
}

const char* to_string(positional_kind k) {
    switch (k) {
        case positional_kind::rotary: return "rotary";
        case positional_kind::learned: return "learned";
        default: return "none";
    }
}

norm_kind norm_kind_from_string(std::string_view s) {
    if (s == "rmsnorm") return norm_kind::rmsnorm;
    if (s == "layernorm") return norm_kind::layernorm;
    fail("unknown norm_kind '%s'", std::string(s).c_str());
}

positional_kind positional_kind_from_string(std::string_view s) {
    if (s == "rotary") return positional_kind::rotary;
    if (s == "learned") return positional_kind::learned;
    if (s == "none") return positional_kind::none;
    fail("unknown positional_kind '%s'", std::string(s).c_str());
}

void model_config::validate() const {
    if (n_layers < 1) fail("config: n_layers must be >= 1, got %d", n_layers);
    if (vocab_size < 2) fail("config: vocab_size must be >= 2, got %d", vocab_size);
    if (d_model < 1 || n_heads < 1 || d_mlp < 1) {
        fail("config: d_model/n_heads/d_mlp must be positive");
    }
    if (d_model % n_heads != 0) {
        fail("config: d_model (%d) not divisible by n_heads (%d)", d_model, n_heads);
    }
    if (positional == positional_kind::rotary && d_head() % 2 != 0) {
        fail("config: rotary positions need an even head dim, got %d", d_head());
    }
    if (max_seq_len < 1) fail("config: max_seq_len must be >= 1");
}

bool model_config::paired_with(const model_config& other) const {
    model_config a = *this;
    model_config b = other;
    a.role.clear();
    b.role.clear();
    return a == b;
}

std::vector<tensor_decl> expected_tensors(const model_config& cfg) {
    const auto d = static_cast<size_t>(cfg.d_model);
    const auto v = static_cast<size_t>(cfg.vocab_size);
    const auto m = static_cast<size_t>(cfg.d_mlp);
    std::vector<tensor_decl> out;
    out.push_back({"embed.weight", {v, d}});
    if (cfg.positional == positional_kind::learned) {
        out.push_back({"pos.weight", {static_cast<size_t>(cfg.max_seq_len), d}});
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "attn_norm.scale", {d}});
        out.push_back({p + "attn.wq", {d, d}});
        out.push_back({p + "attn.wk", {d, d}});
        out.push_back({p + "attn.wv", {d, d}});
        out.push_back({p + "attn.wo", {d, d}});
        out.push_back({p + "mlp_norm.scale", {d}});
        out.push_back({p + "mlp.up", {m, d}});
        if (cfg.mlp_gated) {
            out.push_back({p + "mlp.gate", {m, d}});
        }
        out.push_back({p + "mlp.down", {d, m}});
    }
    out.push_back({"final_norm.scale", {d}});
    if (!cfg.tied_unembedding) {
        out.push_back({"unembed.weight", {v, d}});
    }
    return out;
}

std::vector<std::string> mlp_tensor_names(const model_config& cfg, int layer) {
    const std::string p = "layer" + std::to_string(layer) + ".mlp.";
    std::vector<std::string> names = {p + "up", p + "down"};
    if (cfg.mlp_gated) {
        names.push_back(p + "gate");
    }
    return names;
}

const tensor& checkpoint::t(std::string_view name) const {
    auto it = tensors.find(std::string(name));
    if (it == tensors.end()) {
        fail("checkpoint: missing tensor '%s'", std::string(name).c_str());
    }
    return it->second;
}

const tensor& checkpoint::unembedding() const {
    return config.tied_unembedding ? t("embed.weight") : t("unembed.weight");
}

void checkpoint::validate() const {
    config.validate();
    const auto expected = expected_tensors(config);
    for (const auto& decl : expected) {
        auto it = tensors.find(decl.name);
        if (it == tensors.end()) {
            fail("checkpoint: missing tensor '%s'", decl.name.c_str());
        }
        if (it->second.shape != decl.shape) {
            fail("checkpoint: tensor '%s' shape mismatch with config", decl.name.c_str());
        }
        if (it->second.data.size() != it->second.size()) {
            fail("checkpoint: tensor '%s' data size does not match shape", decl.name.c_str());
        }
    }
    if (tensors.size() != expected.size()) {
        for (const auto& [name, unused] : tensors) {
            bool known = false;
            for (const auto& decl : expected) {
                known |= decl.name == name;
            }
            if (!known) {
                fail("checkpoint: unexpected tensor '%s'", name.c_str());
            }
        }
    }
}

static json config_to_json(const model_config& c) {
    return json{{"n_layers", c.n_layers},
                {"d_model", c.d_model},
                {"n_heads", c.n_heads},
                {"d_mlp", c.d_mlp},
                {"vocab_size", c.vocab_size},
                {"norm_kind", to_string(c.norm)},
                {"tied_unembedding", c.tied_unembedding},
                {"positional_kind", to_string(c.positional)},
                {"family_id", c.family_id},
                {"moe_flag", c.moe_flag},
                {"role", c.role},
                {"mlp_gated", c.mlp_gated},
                {"max_seq_len", c.max_seq_len},
                {"rotary_base", c.rotary_base},
                {"norm_eps", c.norm_eps}};
}

static model_config config_from_json(const json& j) {
    model_config c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.norm = norm_kind_from_string(j.at("norm_kind").get<std::string>());
    c.tied_unembedding = j.at("tied_unembedding").get<bool>();
    c.positional = positional_kind_from_string(j.at("positional_kind").get<std::string>());
    c.family_id = j.at("family_id").get<std::string>();
    c.moe_flag = j.at("moe_flag").get<bool>();
    c.role = j.value("role", std::string());
    c.mlp_gated = j.value("mlp_gated", true);
    c.max_seq_len = j.value("max_seq_len", 512);
    c.rotary_base = j.value("rotary_base", 10000.0);
    c.norm_eps = j.value("norm_eps", 1e-5);
    return c;
}

void save_checkpoint(const checkpoint& ckpt, const std::filesystem::path& dir) {
    ckpt.validate();
    std::filesystem::create_directories(dir);

    // Fixed serialization order (the expected-tensor order) so identical
    // checkpoints produce identical blobs.
    const auto decls = expected_tensors(ckpt.config);
    json table = json::array();
    size_t offset = 0;
    for (const auto& decl : decls) {
        const tensor& t = ckpt.t(decl.name);
        table.push_back({{"name", t.name},
                         {"dtype", "f32"},
                         {"shape", t.shape},
                         {"byte_offset", offset}});
        offset += t.size() * sizeof(float);
    }

    json metadata = json::object();
    for (const auto& [name, toks] : ckpt.token_sequences) {
        metadata[name] = toks;
    }

    const json manifest = {{"format_version", kcheckpoint_format_version},
                           {"config", config_to_json(ckpt.config)},
                           {"tensors", table},
                           {"metadata", metadata}};

    std::ofstream mf(dir / "manifest.json");
    if (!mf) fail("save_checkpoint: cannot write %s", (dir / "manifest.json").c_str());
    mf << manifest.dump(2) << "\n";
    mf.close();

    std::ofstream wf(dir / "weights.bin", std::ios::binary);
    if (!wf) fail("save_checkpoint: cannot write %s", (dir / "weights.bin").c_str());
    for (const auto& decl : decls) {
        const tensor& t = ckpt.t(decl.name);
        wf.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!wf) fail("save_checkpoint: short write to weights.bin");
}

checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) fail("load_checkpoint: cannot open %s", manifest_path.c_str());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        fail("load_checkpoint: bad manifest %s: %s", manifest_path.c_str(), e.what());
    }

    const int version = manifest.at("format_version").get<int>();
    if (version != kcheckpoint_format_version) {
        fail("load_checkpoint: format_version mismatch (file %d, supported %d)", version,
             kcheckpoint_format_version);
    }

    checkpoint ckpt;
    ckpt.config = config_from_json(manifest.at("config"));
    ckpt.config.validate();

    if (manifest.contains("metadata")) {
        for (const auto& [key, value] : manifest.at("metadata").items()) {
            ckpt.token_sequences[key] = value.get<std::vector<int>>();
        }
    }

    const auto blob_path = dir / "weights.bin";
    std::ifstream wf(blob_path, std::ios::binary | std::ios::ate);
    if (!wf) fail("load_checkpoint: cannot open %s", blob_path.c_str());
    const auto blob_size = static_cast<size_t>(wf.tellg());

    for (const auto& entry : manifest.at("tensors")) {
        tensor t;
        t.name = entry.at("name").get<std::string>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        if (dtype != "f32") {
            fail("load_checkpoint: tensor '%s' has unsupported dtype '%s'", t.name.c_str(),
                 dtype.c_str());
        }
        t.shape = entry.at("shape").get<std::vector<size_t>>();
        const auto offset = entry.at("byte_offset").get<size_t>();
        const size_t n_bytes = t.size() * sizeof(float);
        if (offset + n_bytes > blob_size) {
            fail("load_checkpoint: truncated blob for tensor '%s' (needs %zu bytes at offset "
                 "%zu, blob has %zu)",
                 t.name.c_str(), n_bytes, offset, blob_size);
        }
        t.data.resize(t.size());
        wf.seekg(static_cast<std::streamoff>(offset));
        wf.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n_bytes));
        if (!wf) fail("load_checkpoint: read failed for tensor '%s'", t.name.c_str());
        ckpt.tensors.emplace(t.name, std::move(t));
    }

    ckpt.validate();
    return ckpt;
}

}  // namespace convgap
