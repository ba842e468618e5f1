#include "mossnet/data.hpp"

#include <fstream>

#include "mossnet/errors.hpp"

namespace mossnet::data {

std::vector<std::uint8_t> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.empty()) throw IoError("corpus: " + path + " is empty");
    return bytes;
}

Batch sample_batch(const std::vector<std::uint8_t>& corpus, std::size_t batch_size,
                   std::size_t seq_len, Rng& rng) {
    if (corpus.size() < seq_len)
        throw DomainError("batch: corpus shorter than one context window");
    const int BOS = 256;
    Batch b;
    b.B = batch_size;
    b.L = seq_len;
    b.tokens.reserve(batch_size * (seq_len + 1));
    for (std::size_t r = 0; r < batch_size; ++r) {
        std::size_t off = std::size_t(rng.below(corpus.size() - seq_len + 1));
        b.tokens.push_back(BOS);
        for (std::size_t i = 0; i < seq_len; ++i) b.tokens.push_back(corpus[off + i]);
    }
    return b;
}

namespace {

// Every domain writes the same 32-symbol alphabet; what distinguishes them
// is an order-1 transition rule over it, four skewed successors per symbol.
// The same context byte therefore continues differently in every domain, so
// a shared predictor must average conflicting rules while per-domain
// capacity (experts) can store each rule exactly.
constexpr std::size_t kAlphabet = 32;

std::uint8_t symbol(std::size_t i) { return std::uint8_t(33 + i); }

struct Domain {
    std::vector<std::uint8_t> tag; // 3-byte block header naming the domain
    std::vector<std::array<std::uint8_t, 4>> next; // successors per symbol
};

Domain make_domain(std::size_t id, Rng rng) {
    Domain d;
    d.tag = {std::uint8_t('#'), std::uint8_t('A' + id % 26), std::uint8_t('a' + (id / 26) % 26)};
    Rng rt = rng.derive("table");
    d.next.resize(kAlphabet);
    for (std::size_t row = 0; row < kAlphabet; ++row) {
        for (std::size_t s = 0; s < 4; ++s) {
            std::uint8_t cand;
            bool dup;
            do {
                cand = symbol(rt.below(kAlphabet));
                dup = false;
                for (std::size_t p = 0; p < s; ++p) dup = dup || d.next[row][p] == cand;
            } while (dup);
            d.next[row][s] = cand;
        }
    }
    return d;
}

} // namespace

std::vector<std::uint8_t> synth_corpus(std::size_t n_bytes, std::uint64_t seed) {
    if (n_bytes == 0) throw DomainError("corpus: need a positive byte budget");
    Rng root(seed);
    const std::size_t n_domains = 24;
    std::vector<Domain> domains;
    for (std::size_t i = 0; i < n_domains; ++i)
        domains.push_back(make_domain(i, root.derive("domain" + std::to_string(i))));

    Rng stream = root.derive("stream");
    std::vector<std::uint8_t> out;
    out.reserve(n_bytes + 600);
    while (out.size() < n_bytes) {
        const Domain& d = domains[stream.below(n_domains)];
        // blocks are short so every model-sized context window straddles at
        // least one tag and the active rule is always identifiable
        std::size_t block_end = out.size() + 64;
        out.insert(out.end(), d.tag.begin(), d.tag.end());
        std::uint8_t cur = symbol(stream.below(kAlphabet));
        out.push_back(cur);
        while (out.size() < block_end) {
            // successor weights 1, 1/2, 1/3, 1/4: skewed but never certain
            double r = stream.uniform();
            std::size_t slot = r < 0.48 ? 0 : r < 0.72 ? 1 : r < 0.88 ? 2 : 3;
            cur = d.next[cur - 33][slot];
            // rare stray byte keeps the floor entropy positive
            if (stream.below(50) == 0) cur = symbol(stream.below(kAlphabet));
            out.push_back(cur);
        }
    }
    out.resize(n_bytes);
    return out;
}

void make_corpus(const std::string& path, std::size_t n_bytes, std::uint64_t seed) {
    std::vector<std::uint8_t> bytes = synth_corpus(n_bytes, seed);
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("corpus: cannot write " + path);
    o.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!o) throw IoError("corpus: short write to " + path);
}

} // namespace mossnet::data
