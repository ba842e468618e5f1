#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "mossnet/errors.hpp"
#include "mossnet/profiler.hpp"

using namespace mossnet;
using profiler::TraceRecord;

namespace {

ModelConfig tiny_recurrent() {
    ModelConfig cfg;
    cfg.arch = "mossnet";
    cfg.d_model = 16;
    cfg.d_state = 4;
    cfg.n_layers = 2;
    cfg.n_experts = 2;
    cfg.k = 1;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.context_length = 64;
    cfg.attn_layer_indices = {}; // pure recurrent stack, no attention
    cfg.seed = 31;
    return cfg;
}

ModelConfig tiny_attention() {
    ModelConfig cfg = tiny_recurrent();
    cfg.arch = "attention";
    cfg.attn_layer_indices = {-1};
    cfg.seed = 32;
    return cfg;
}

std::string temp_csv(const char* stem) {
    return std::string("/tmp/") + stem + ".csv";
}

} // namespace

TEST_CASE("recurrent model cache is context-free") {
    Model model = Model::build(tiny_recurrent());
    auto recs = profiler::sweep(model, "recurrent", {8, 16, 32, 48}, 1, 3);
    REQUIRE(recs.size() == 8);
    std::size_t base = recs[0].state_bytes;
    CHECK(base > 0);
    for (const TraceRecord& r : recs) {
        CHECK(r.phase != "skipped");
        CHECK(r.state_bytes == base);
        CHECK(r.tokens_per_sec > 0.0);
        CHECK(r.peak_alloc_bytes > 0);
    }
    profiler::MemoryFit fit = profiler::memory_fit(recs, "recurrent");
    CHECK(std::abs(fit.slope) * 48.0 < 0.01 * fit.intercept);
    CHECK(fit.r2 == doctest::Approx(1.0));
}

TEST_CASE("attention cache grows by the closed-form row size") {
    ModelConfig cfg = tiny_attention();
    Model model = Model::build(cfg);
    // every mixer in this arch is attention, so one KV cache per layer
    const std::size_t per_token =
        2 * cfg.n_layers * cfg.n_kv_heads * cfg.d_head() * sizeof(double);
    CHECK(model.kv_bytes(10) == per_token * 10);

    const std::size_t batch = 2;
    auto recs = profiler::sweep(model, "attention", {8, 16, 32}, batch, 3);
    REQUIRE(recs.size() == 6);
    const std::size_t fixed = recs[0].state_bytes - batch * per_token * 8;
    for (const TraceRecord& r : recs)
        CHECK(r.state_bytes == fixed + batch * per_token * r.context_len);

    profiler::MemoryFit fit = profiler::memory_fit(recs, "attention");
    CHECK(fit.r2 > 0.99);
    CHECK(fit.slope == doctest::Approx(double(batch * per_token)).epsilon(1e-9));
}

TEST_CASE("sliding window caps the attention cache") {
    ModelConfig cfg = tiny_attention();
    cfg.sliding_window = 16;
    Model model = Model::build(cfg);
    CHECK(model.kv_bytes(8) < model.kv_bytes(16));
    CHECK(model.kv_bytes(32) == model.kv_bytes(16));
    auto recs = profiler::sweep(model, "windowed", {8, 16, 32}, 1, 3);
    CHECK(recs[0].state_bytes < recs[2].state_bytes);
    CHECK(recs[2].state_bytes == recs[4].state_bytes); // 16 vs 32, both capped
}

TEST_CASE("contexts past the configured length are skipped, not measured") {
    Model model = Model::build(tiny_recurrent());
    auto recs = profiler::sweep(model, "recurrent", {32, 128}, 1, 3);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].phase == "prefill");
    CHECK(recs[1].phase == "generate");
    CHECK(recs[2].phase == "skipped");
    CHECK(recs[2].context_len == 128);
    CHECK(recs[2].tokens_per_sec == 0.0);
    CHECK(recs[2].state_bytes == 0);
    CHECK(recs[2].peak_alloc_bytes == 0);
}

TEST_CASE("sweep validates its arguments") {
    Model model = Model::build(tiny_recurrent());
    CHECK_THROWS_AS((void)profiler::sweep(model, "x", {8, 16}, 1, 2), DomainError);
    CHECK_THROWS_AS((void)profiler::sweep(model, "x", {16, 8}, 1, 3), DomainError);
}

TEST_CASE("csv round-trips every field exactly") {
    std::vector<TraceRecord> recs;
    recs.push_back({"a", "prefill", 256, 2, 12345.678901234567, 4096, 900000});
    recs.push_back({"a", "generate", 256, 2, 0.00012207031, 4096, 5});
    recs.push_back({"b", "skipped", 8192, 1, 0.0, 0, 0});
    const std::string path = temp_csv("profiler_roundtrip");
    profiler::write_csv(path, recs);
    auto back = profiler::read_csv(path);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].model_tag == recs[i].model_tag);
        CHECK(back[i].phase == recs[i].phase);
        CHECK(back[i].context_len == recs[i].context_len);
        CHECK(back[i].batch == recs[i].batch);
        CHECK(back[i].tokens_per_sec == recs[i].tokens_per_sec);
        CHECK(back[i].state_bytes == recs[i].state_bytes);
        CHECK(back[i].peak_alloc_bytes == recs[i].peak_alloc_bytes);
    }
    std::remove(path.c_str());
}

TEST_CASE("csv reader rejects missing files and foreign headers") {
    CHECK_THROWS_AS((void)profiler::read_csv("/tmp/does_not_exist_profiler.csv"), IoError);
    const std::string path = temp_csv("profiler_badheader");
    {
        std::ofstream o(path);
        o << "time,value\n1,2\n";
    }
    CHECK_THROWS_AS((void)profiler::read_csv(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("memory fit recovers an exact line and handles flat series") {
    std::vector<TraceRecord> recs;
    for (std::size_t c : {10, 20, 30, 40})
        recs.push_back({"lin", "prefill", c, 1, 1.0, 1000 + 7 * c, 0});
    profiler::MemoryFit fit = profiler::memory_fit(recs, "lin");
    CHECK(fit.slope == doctest::Approx(7.0).epsilon(1e-12));
    CHECK(fit.intercept == doctest::Approx(1000.0).epsilon(1e-12));
    CHECK(fit.r2 == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<TraceRecord> flat;
    for (std::size_t c : {10, 20, 30})
        flat.push_back({"flat", "prefill", c, 1, 1.0, 500, 0});
    profiler::MemoryFit ffit = profiler::memory_fit(flat, "flat");
    CHECK(ffit.slope == 0.0);
    CHECK(ffit.r2 == 1.0);

    // generate rows and other tags are excluded from the fit
    recs.push_back({"lin", "generate", 99, 1, 1.0, 999999, 0});
    recs.push_back({"other", "prefill", 99, 1, 1.0, 999999, 0});
    profiler::MemoryFit refit = profiler::memory_fit(recs, "lin");
    CHECK(refit.slope == doctest::Approx(7.0).epsilon(1e-12));

    std::vector<TraceRecord> one = {{"one", "prefill", 10, 1, 1.0, 5, 0}};
    CHECK_THROWS_AS((void)profiler::memory_fit(one, "one"), DomainError);
}

TEST_CASE("summarize reports one line per tag") {
    std::vector<TraceRecord> recs;
    for (std::size_t c : {10, 20})
        recs.push_back({"m1", "prefill", c, 1, 1.0, 100, 0});
    for (std::size_t c : {10, 20})
        recs.push_back({"m2", "prefill", c, 1, 1.0, 50 + c, 0});
    std::string s = profiler::summarize(recs);
    CHECK(s.find("m1:") != std::string::npos);
    CHECK(s.find("m2:") != std::string::npos);
    CHECK_THROWS_AS((void)profiler::summarize({}), DomainError);
}

TEST_CASE("byte accounting columns are identical across repeated sweeps") {
    Model model = Model::build(tiny_recurrent());
    auto a = profiler::sweep(model, "recurrent", {8, 16}, 1, 3);
    auto b = profiler::sweep(model, "recurrent", {8, 16}, 1, 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].state_bytes == b[i].state_bytes);
        CHECK(a[i].peak_alloc_bytes == b[i].peak_alloc_bytes);
    }
}
