#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "mossnet/model.hpp"
#include "mossnet/rng.hpp"

namespace mossnet::data {

std::vector<std::uint8_t> load_corpus(const std::string& path);

// one BOS-anchored row per batch element, sampled at random offsets
Batch sample_batch(const std::vector<std::uint8_t>& corpus, std::size_t batch_size,
                   std::size_t seq_len, Rng& rng);

// Deterministic synthetic byte corpus: a shuffle of tagged blocks drawn from
// many small "domains" that share one alphabet but follow conflicting
// per-domain transition rules. Predicting well requires tracking which rule
// is active and storing all of them, which is what expert routing can
// exploit.
std::vector<std::uint8_t> synth_corpus(std::size_t n_bytes, std::uint64_t seed);
void make_corpus(const std::string& path, std::size_t n_bytes, std::uint64_t seed);

} // namespace mossnet::data
