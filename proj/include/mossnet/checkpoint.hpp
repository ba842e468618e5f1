#pragma once
#include <cstdint>
#include <string>

#include "mossnet/model.hpp"

namespace mossnet::ckpt {

// "MOSS" magic, u16 format version, length-prefixed canonical JSON holding
// the config plus step and sampler state, then one record per parameter:
// length-prefixed path followed by the tensor wire format. Round-trips are
// bit-exact.
constexpr std::uint16_t kVersion = 1;

struct Loaded {
    Model model;
    std::size_t step = 0;
    std::uint64_t data_counter = 0;
};

void save(const std::string& path, Model& model, std::size_t step, std::uint64_t data_counter);
Loaded load(const std::string& path);

// config <-> canonical JSON text (sorted keys), shared with the manifest
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

} // namespace mossnet::ckpt
