#pragma once
#include <cstdint>
#include <string>

#include "mossnet/model.hpp"

namespace mossnet::cli {

// One experiment, fully described. Flat key = value text format so ablation
// variants diff in single lines; every field except corpus_path has a
// working default.
struct RunConfig {
    ModelConfig model;
    std::string corpus_path;       // required by train and eval
    std::string out_dir = "out";   // all artifacts land here
    std::size_t steps = 200;
    std::size_t eval_every = 100;  // 0 = final eval only
    std::size_t batch_size = 8;
    std::size_t eval_bytes = 16384;

    void validate() const; // structural checks; path existence is per command
};

// key = value lines, full-line `#` comments, blank lines ignored. Unknown or
// duplicate keys and malformed values are rejected naming the key and the
// 1-based line number.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

// canonical form: fixed key order, %.17g floats, so emit -> parse -> emit is
// byte-stable and two configs are equal iff their emissions are
std::string emit_config(const RunConfig& cfg);

// FNV-1a over the canonical form minus out_dir: moving the artifact
// directory never changes the experiment identity, everything else does
std::uint64_t config_hash(const RunConfig& cfg);

} // namespace mossnet::cli
