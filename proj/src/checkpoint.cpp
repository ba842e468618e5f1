#include "mossnet/checkpoint.hpp"

#include <fstream>
#include <unordered_map>

#include "json.hpp"
#include "mossnet/errors.hpp"
#include "mossnet/serialize.hpp"

namespace mossnet::ckpt {

using nlohmann::json;

namespace {

json config_json(const ModelConfig& c) {
    json j;
    j["arch"] = c.arch;
    j["d_model"] = c.d_model;
    j["d_state"] = c.d_state;
    j["n_layers"] = c.n_layers;
    j["use_mlp"] = c.use_mlp;
    j["n_experts"] = c.n_experts;
    j["k"] = c.k;
    j["alpha"] = c.alpha;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["sliding_window"] = c.sliding_window;
    j["tie_embeddings"] = c.tie_embeddings;
    j["vocab_size"] = c.vocab_size;
    j["context_length"] = c.context_length;
    j["lr_max"] = c.lr_max;
    j["warmup_frac"] = c.warmup_frac;
    j["schedule"] = c.schedule;
    j["seed"] = c.seed;
    j["theorem_mode"] = c.theorem_mode;
    j["dynamic_k"] = c.dynamic_k;
    j["conv_width"] = c.conv_width;
    j["attn_layer_indices"] = c.attn_layer_indices;
    return j;
}

ModelConfig config_parse(const json& j) {
    ModelConfig c;
    c.arch = j.at("arch").get<std::string>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_state = j.at("d_state").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.use_mlp = j.at("use_mlp").get<bool>();
    c.n_experts = j.at("n_experts").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.alpha = j.at("alpha").get<double>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
    c.sliding_window = j.at("sliding_window").get<std::size_t>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context_length = j.at("context_length").get<std::size_t>();
    c.lr_max = j.at("lr_max").get<double>();
    c.warmup_frac = j.at("warmup_frac").get<double>();
    c.schedule = j.at("schedule").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.theorem_mode = j.at("theorem_mode").get<bool>();
    c.dynamic_k = j.at("dynamic_k").get<bool>();
    c.conv_width = j.at("conv_width").get<std::size_t>();
    c.attn_layer_indices = j.at("attn_layer_indices").get<std::vector<long long>>();
    return c;
}

} // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IoError("config json: parse failure");
    return config_parse(j);
}

void save(const std::string& path, Model& model, std::size_t step, std::uint64_t data_counter) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot write " + path);
    os.write("MOSS", 4);
    write_u16(os, kVersion);

    json meta;
    meta["config"] = config_json(model.config());
    meta["step"] = step;
    meta["data_counter"] = data_counter;
    std::string text = meta.dump();
    write_u32(os, std::uint32_t(text.size()));
    os.write(text.data(), std::streamsize(text.size()));

    std::vector<Param*> ps = model.params();
    write_u32(os, std::uint32_t(ps.size()));
    for (Param* p : ps) {
        write_u32(os, std::uint32_t(p->path.size()));
        os.write(p->path.data(), std::streamsize(p->path.size()));
        write_tensor(os, p->value);
    }
    if (!os) throw IoError("checkpoint: short write to " + path);
}

Loaded load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "MOSS")
        throw IoError("checkpoint: bad magic in " + path);
    std::uint16_t ver = read_u16(is);
    if (ver != kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(ver));

    std::uint32_t jlen = read_u32(is);
    std::string text(jlen, '\0');
    if (!is.read(text.data(), jlen)) throw IoError("checkpoint: truncated header");
    json meta = json::parse(text, nullptr, false);
    if (meta.is_discarded()) throw IoError("checkpoint: corrupt metadata json");

    Loaded out{Model::build(config_parse(meta.at("config"))),
               meta.at("step").get<std::size_t>(),
               meta.at("data_counter").get<std::uint64_t>()};

    std::unordered_map<std::string, Param*> by_path;
    for (Param* p : out.model.params()) by_path[p->path] = p;
    std::uint32_t n = read_u32(is);
    if (n != by_path.size())
        throw IoError("checkpoint: expected " + std::to_string(by_path.size()) +
                      " parameters, file holds " + std::to_string(n));
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint32_t plen = read_u32(is);
        std::string p(plen, '\0');
        if (!is.read(p.data(), plen)) throw IoError("checkpoint: truncated parameter path");
        auto it = by_path.find(p);
        if (it == by_path.end()) throw IoError("checkpoint: unknown parameter " + p);
        Tensor t = read_tensor(is);
        if (t.shape() != it->second->value.shape())
            throw IoError("checkpoint: shape mismatch for " + p);
        it->second->value = t;
    }
    return out;
}

} // namespace mossnet::ckpt
