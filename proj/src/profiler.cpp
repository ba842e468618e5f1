#include "mossnet/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mossnet/errors.hpp"
#include "mossnet/rng.hpp"

namespace mossnet::profiler {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

std::vector<TraceRecord> sweep(Model& model, const std::string& tag,
                               const std::vector<std::size_t>& contexts, std::size_t batch,
                               std::size_t reps) {
    if (reps < 3) throw DomainError("profiler: need reps >= 3 for a median");
    if (!std::is_sorted(contexts.begin(), contexts.end()))
        throw DomainError("profiler: contexts must be sorted ascending");
    const ModelConfig& cfg = model.config();

    std::vector<TraceRecord> out;
    for (std::size_t T : contexts) {
        if (T > cfg.context_length) {
            TraceRecord warn;
            warn.model_tag = tag;
            warn.phase = "skipped";
            warn.context_len = T;
            warn.batch = batch;
            out.push_back(warn);
            continue;
        }
        // resident cache needed to continue from this context: recurrent
        // block state is context-free, attention KV grows with T
        const std::size_t resident =
            batch * (model.initial_state().bytes() + model.kv_bytes(T));

        Rng rng(fnv1a(tag) ^ T);
        std::vector<int> prompt;
        prompt.reserve(batch * T);
        for (std::size_t i = 0; i < batch * T; ++i) prompt.push_back(int(rng.below(256)));

        TraceRecord pre;
        pre.model_tag = tag;
        pre.phase = "prefill";
        pre.context_len = T;
        pre.batch = batch;
        pre.state_bytes = resident;
        {
            std::vector<double> rates;
            tensor_bytes_reset_peak();
            for (std::size_t r = 0; r < reps + 1; ++r) {
                auto t0 = std::chrono::steady_clock::now();
                (void)model.forward(nullptr, prompt, T, true);
                double dt = seconds_since(t0);
                if (r == 0) continue; // warmup discarded
                rates.push_back(double(batch * T) / dt);
            }
            pre.tokens_per_sec = median(rates);
            pre.peak_alloc_bytes = tensor_bytes_peak();
        }
        out.push_back(pre);

        TraceRecord gen = pre;
        gen.phase = "generate";
        {
            const std::size_t n_new = 64;
            std::vector<int> feed;
            for (std::size_t i = 0; i < n_new; ++i) feed.push_back(int(rng.below(256)));
            // prefill once so every timed run decodes with the cache really
            // holding T positions, then copy the states for each repetition
            std::vector<Model::State> base;
            for (std::size_t b = 0; b < batch; ++b) {
                Model::State st = model.initial_state();
                for (std::size_t i = 0; i < T; ++i)
                    (void)model.step_logits(prompt[b * T + i], st);
                base.push_back(std::move(st));
            }
            std::vector<double> rates;
            tensor_bytes_reset_peak();
            for (std::size_t r = 0; r < reps + 1; ++r) {
                std::vector<Model::State> lanes = base;
                auto t0 = std::chrono::steady_clock::now();
                for (std::size_t i = 0; i < n_new; ++i)
                    for (std::size_t b = 0; b < batch; ++b)
                        (void)model.step_logits(feed[i], lanes[b]);
                double dt = seconds_since(t0);
                if (r == 0) continue;
                rates.push_back(double(n_new * batch) / dt);
            }
            gen.tokens_per_sec = median(rates);
            gen.peak_alloc_bytes = tensor_bytes_peak();
        }
        out.push_back(gen);
    }
    return out;
}

void write_csv(const std::string& path, const std::vector<TraceRecord>& records) {
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("profiler: cannot write " + path);
    o << "model_tag,phase,context_len,batch,tokens_per_sec,state_bytes,peak_alloc_bytes\n";
    char buf[64];
    for (const TraceRecord& r : records) {
        std::snprintf(buf, sizeof buf, "%.17g", r.tokens_per_sec);
        o << r.model_tag << ',' << r.phase << ',' << r.context_len << ',' << r.batch << ','
          << buf << ',' << r.state_bytes << ',' << r.peak_alloc_bytes << '\n';
    }
    if (!o) throw IoError("profiler: short write to " + path);
}

std::vector<TraceRecord> read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("profiler: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) ||
        line != "model_tag,phase,context_len,batch,tokens_per_sec,state_bytes,peak_alloc_bytes")
        throw IoError("profiler: bad csv header in " + path);
    std::vector<TraceRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        TraceRecord r;
        std::string field;
        auto next = [&]() {
            if (!std::getline(ss, field, ','))
                throw IoError("profiler: short csv row in " + path);
            return field;
        };
        r.model_tag = next();
        r.phase = next();
        r.context_len = std::stoull(next());
        r.batch = std::stoull(next());
        r.tokens_per_sec = std::stod(next());
        r.state_bytes = std::stoull(next());
        r.peak_alloc_bytes = std::stoull(next());
        out.push_back(std::move(r));
    }
    return out;
}

MemoryFit memory_fit(const std::vector<TraceRecord>& records, const std::string& tag) {
    std::vector<double> xs, ys;
    for (const TraceRecord& r : records)
        if (r.model_tag == tag && r.phase == "prefill") {
            xs.push_back(double(r.context_len));
            ys.push_back(double(r.state_bytes));
        }
    if (xs.size() < 2) throw DomainError("profiler: need at least two points to fit " + tag);
    const std::size_t n = xs.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    MemoryFit fit;
    const double denom = double(n) * sxx - sx * sx;
    fit.slope = denom != 0 ? (double(n) * sxy - sx * sy) / denom : 0.0;
    fit.intercept = (sy - fit.slope * sx) / double(n);
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / double(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pred = fit.intercept + fit.slope * xs[i];
        ss_res += (ys[i] - pred) * (ys[i] - pred);
        ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
    }
    // a flat series fit exactly by a flat line counts as a perfect fit
    fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
    return fit;
}

std::string summarize(const std::vector<TraceRecord>& records) {
    if (records.empty()) throw DomainError("profiler: no records to summarize");
    std::vector<std::string> tags;
    for (const TraceRecord& r : records)
        if (std::find(tags.begin(), tags.end(), r.model_tag) == tags.end())
            tags.push_back(r.model_tag);
    std::ostringstream os;
    for (const std::string& tag : tags) {
        MemoryFit fit = memory_fit(records, tag);
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "%s: cache growth %.3f bytes/token, intercept %.0f bytes, r2 %.6f\n",
                      tag.c_str(), fit.slope, fit.intercept, fit.r2);
        os << buf;
    }
    return os.str();
}

} // namespace mossnet::profiler
