#include "mossnet/config.hpp"

#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "mossnet/errors.hpp"
#include "mossnet/rng.hpp"

namespace mossnet::cli {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void bad_value(const std::string& key, std::size_t line, const char* want) {
    throw ConfigError("config: bad value for '" + key + "' at line " + std::to_string(line) +
                      " (expected " + want + ")");
}

std::size_t parse_uint(const std::string& key, const std::string& v, std::size_t line) {
    char* end = nullptr;
    errno = 0;
    unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno != 0 || v[0] == '-')
        bad_value(key, line, "unsigned integer");
    return std::size_t(n);
}

double parse_double(const std::string& key, const std::string& v, std::size_t line) {
    char* end = nullptr;
    double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0') bad_value(key, line, "number");
    return d;
}

bool parse_bool(const std::string& key, const std::string& v, std::size_t line) {
    if (v == "true") return true;
    if (v == "false") return false;
    bad_value(key, line, "true or false");
}

std::vector<long long> parse_index_list(const std::string& key, const std::string& v,
                                        std::size_t line) {
    std::vector<long long> out;
    if (v.empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        char* end = nullptr;
        errno = 0;
        long long n = std::strtoll(item.c_str(), &end, 10);
        if (item.empty() || *end != '\0' || errno != 0)
            bad_value(key, line, "comma-separated integers");
        out.push_back(n);
    }
    return out;
}

std::string fmt_double(double d) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

std::string fmt_index_list(const std::vector<long long>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

using Setter = std::function<void(RunConfig&, const std::string&, std::size_t)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"arch",
         [](RunConfig& c, const std::string& v, std::size_t) { c.model.arch = v; }},
        {"d_model",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.d_model = parse_uint("d_model", v, ln);
         }},
        {"d_state",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.d_state = parse_uint("d_state", v, ln);
         }},
        {"n_layers",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.n_layers = parse_uint("n_layers", v, ln);
         }},
        {"use_mlp",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.use_mlp = parse_bool("use_mlp", v, ln);
         }},
        {"n_experts",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.n_experts = parse_uint("n_experts", v, ln);
         }},
        {"k",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.k = parse_uint("k", v, ln);
         }},
        {"alpha",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.alpha = parse_double("alpha", v, ln);
         }},
        {"n_heads",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.n_heads = parse_uint("n_heads", v, ln);
         }},
        {"n_kv_heads",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.n_kv_heads = parse_uint("n_kv_heads", v, ln);
         }},
        {"sliding_window",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.sliding_window = parse_uint("sliding_window", v, ln);
         }},
        {"tie_embeddings",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.tie_embeddings = parse_bool("tie_embeddings", v, ln);
         }},
        {"vocab_size",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.vocab_size = parse_uint("vocab_size", v, ln);
         }},
        {"context_length",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.context_length = parse_uint("context_length", v, ln);
         }},
        {"lr_max",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.lr_max = parse_double("lr_max", v, ln);
         }},
        {"warmup_frac",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.warmup_frac = parse_double("warmup_frac", v, ln);
         }},
        {"schedule",
         [](RunConfig& c, const std::string& v, std::size_t) { c.model.schedule = v; }},
        {"seed",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.seed = parse_uint("seed", v, ln);
         }},
        {"theorem_mode",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.theorem_mode = parse_bool("theorem_mode", v, ln);
         }},
        {"dynamic_k",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.dynamic_k = parse_bool("dynamic_k", v, ln);
         }},
        {"conv_width",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.conv_width = parse_uint("conv_width", v, ln);
         }},
        {"attn_layer_indices",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.model.attn_layer_indices = parse_index_list("attn_layer_indices", v, ln);
         }},
        {"corpus_path",
         [](RunConfig& c, const std::string& v, std::size_t) { c.corpus_path = v; }},
        {"out_dir",
         [](RunConfig& c, const std::string& v, std::size_t) { c.out_dir = v; }},
        {"steps",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.steps = parse_uint("steps", v, ln);
         }},
        {"eval_every",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.eval_every = parse_uint("eval_every", v, ln);
         }},
        {"batch_size",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.batch_size = parse_uint("batch_size", v, ln);
         }},
        {"eval_bytes",
         [](RunConfig& c, const std::string& v, std::size_t ln) {
             c.eval_bytes = parse_uint("eval_bytes", v, ln);
         }},
    };
    return table;
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    if (steps == 0) throw ConfigError("config: need steps > 0");
    if (batch_size == 0) throw ConfigError("config: need batch_size > 0");
    if (out_dir.empty()) throw ConfigError("config: need a nonempty out_dir");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " +
                              std::to_string(line_no));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        auto it = setters().find(key);
        if (it == setters().end())
            throw ConfigError("config: unknown key '" + key + "' at line " +
                              std::to_string(line_no));
        if (!seen.insert(key).second)
            throw ConfigError("config: duplicate key '" + key + "' at line " +
                              std::to_string(line_no));
        it->second(cfg, value, line_no);
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::string emit_config(const RunConfig& cfg) {
    const ModelConfig& m = cfg.model;
    std::ostringstream o;
    o << "arch = " << m.arch << '\n';
    o << "d_model = " << m.d_model << '\n';
    o << "d_state = " << m.d_state << '\n';
    o << "n_layers = " << m.n_layers << '\n';
    o << "use_mlp = " << (m.use_mlp ? "true" : "false") << '\n';
    o << "n_experts = " << m.n_experts << '\n';
    o << "k = " << m.k << '\n';
    o << "alpha = " << fmt_double(m.alpha) << '\n';
    o << "n_heads = " << m.n_heads << '\n';
    o << "n_kv_heads = " << m.n_kv_heads << '\n';
    o << "sliding_window = " << m.sliding_window << '\n';
    o << "tie_embeddings = " << (m.tie_embeddings ? "true" : "false") << '\n';
    o << "vocab_size = " << m.vocab_size << '\n';
    o << "context_length = " << m.context_length << '\n';
    o << "lr_max = " << fmt_double(m.lr_max) << '\n';
    o << "warmup_frac = " << fmt_double(m.warmup_frac) << '\n';
    o << "schedule = " << m.schedule << '\n';
    o << "seed = " << m.seed << '\n';
    o << "theorem_mode = " << (m.theorem_mode ? "true" : "false") << '\n';
    o << "dynamic_k = " << (m.dynamic_k ? "true" : "false") << '\n';
    o << "conv_width = " << m.conv_width << '\n';
    o << "attn_layer_indices = " << fmt_index_list(m.attn_layer_indices) << '\n';
    o << "corpus_path = " << cfg.corpus_path << '\n';
    o << "out_dir = " << cfg.out_dir << '\n';
    o << "steps = " << cfg.steps << '\n';
    o << "eval_every = " << cfg.eval_every << '\n';
    o << "batch_size = " << cfg.batch_size << '\n';
    o << "eval_bytes = " << cfg.eval_bytes << '\n';
    return o.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
    std::stringstream ss(emit_config(cfg));
    std::string line, semantic;
    while (std::getline(ss, line))
        if (line.rfind("out_dir = ", 0) != 0) semantic += line + '\n';
    return fnv1a(semantic);
}

} // namespace mossnet::cli
