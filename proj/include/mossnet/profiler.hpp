#pragma once
#include <cstddef>
#include <string>
#include <vector>

#include "mossnet/model.hpp"

namespace mossnet::profiler {

struct TraceRecord {
    std::string model_tag;
    std::string phase; // prefill | generate | skipped
    std::size_t context_len = 0;
    std::size_t batch = 0;
    double tokens_per_sec = 0;
    std::size_t state_bytes = 0;      // exact resident cache at this context
    std::size_t peak_alloc_bytes = 0; // high-water tensor payload during the run
};

// For each context: a timed scan-mode prefill over a random prompt and a
// timed 64-token recurrent generation. Throughput is the median over reps
// after one discarded warmup run. Cache sizes come from exact accounting,
// never from the allocator. Contexts beyond the model's configured length
// produce a "skipped" warning record.
std::vector<TraceRecord> sweep(Model& model, const std::string& tag,
                               const std::vector<std::size_t>& contexts, std::size_t batch,
                               std::size_t reps);

void write_csv(const std::string& path, const std::vector<TraceRecord>& records);
std::vector<TraceRecord> read_csv(const std::string& path);

struct MemoryFit {
    double slope = 0; // bytes per context token
    double intercept = 0;
    double r2 = 0;
};
// least-squares line of prefill state_bytes against context_len for one tag
MemoryFit memory_fit(const std::vector<TraceRecord>& records, const std::string& tag);

std::string summarize(const std::vector<TraceRecord>& records);

} // namespace mossnet::profiler
