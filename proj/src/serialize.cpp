#include "mossnet/serialize.hpp"

#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

namespace mossnet {

namespace {
void put_le(std::ostream& os, std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
    os.write(buf, bytes);
}

std::uint64_t get_le(std::istream& is, int bytes) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), bytes);
    if (!is) throw IoError("tensor read: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}
} // namespace

void write_u16(std::ostream& os, std::uint16_t v) { put_le(os, v, 2); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v, 4); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v, 8); }
std::uint16_t read_u16(std::istream& is) { return std::uint16_t(get_le(is, 2)); }
std::uint32_t read_u32(std::istream& is) { return std::uint32_t(get_le(is, 4)); }
std::uint64_t read_u64(std::istream& is) { return get_le(is, 8); }

void write_tensor(std::ostream& os, const Tensor& t) {
    if (t.ndim() > 255) throw IoError("tensor write: rank exceeds 255");
    unsigned char rank = static_cast<unsigned char>(t.ndim());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::size_t d : t.shape()) write_u64(os, d);
    static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        std::uint64_t bits;
        double v = t.at(i);
        std::memcpy(&bits, &v, 8);
        write_u64(os, bits);
    }
}

Tensor read_tensor(std::istream& is) {
    unsigned char rank;
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw IoError("tensor read: missing rank byte");
    Shape shape(rank);
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) {
        std::uint64_t d = read_u64(is);
        if (d > (1ull << 32) || n * d > (1ull << 32))
            throw IoError("tensor read: implausible extent " + std::to_string(d));
        shape[i] = static_cast<std::size_t>(d);
        n *= shape[i];
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = read_u64(is);
        std::memcpy(&data[i], &bits, 8);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

} // namespace mossnet
