#pragma once
#include <iosfwd>

#include "mossnet/tensor.hpp"

namespace mossnet {

// On-disk tensor record: 1 byte rank, rank x 8-byte little-endian unsigned
// extents, then row-major 8-byte little-endian IEEE-754 doubles.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

} // namespace mossnet
