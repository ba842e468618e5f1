#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mossnet/checkpoint.hpp"
#include "mossnet/data.hpp"
#include "mossnet/errors.hpp"
#include "mossnet/model.hpp"
#include "mossnet/train.hpp"

using namespace mossnet;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.d_model = 16;
    c.d_state = 4;
    c.n_layers = 2;
    c.n_experts = 3;
    c.k = 2;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.vocab_size = 257;
    c.context_length = 8;
    c.seed = 5;
    return c;
}

Batch fixed_batch(std::size_t B, std::size_t L, std::uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.B = B;
    b.L = L;
    for (std::size_t r = 0; r < B; ++r) {
        b.tokens.push_back(256);
        for (std::size_t i = 0; i < L; ++i) b.tokens.push_back(int(rng.below(256)));
    }
    return b;
}

double loss_value(Model& m, const Batch& b) { return m.loss(nullptr, b, true).ce; }

double total_value(Model& m, const Batch& b) {
    LossOut lo = m.loss(nullptr, b, true);
    return lo.total.at(0);
}

void bump(Param& p, std::size_t idx, double delta) {
    Tensor t = Tensor::zeros(p.value.shape());
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = p.value.at(i);
    d[idx] += delta;
    p.value = t;
}

// closed-form parameter accounting straight from the dimensions, kept
// independent of the library's own counters
struct Counts {
    std::size_t total = 0, active = 0;
};
Counts count_oracle(const ModelConfig& c) {
    const std::size_t D = c.d_model, Din = c.d_inner(), P = c.d_state, R = c.dt_rank();
    const std::size_t H = c.mlp_hidden(), E = c.n_experts, K = c.k;
    const std::size_t dq = c.n_heads * c.d_head(), dkv = c.n_kv_heads * c.d_head();

    std::size_t moss_exp = D * Din + D * Din + Din * D + Din * R + Din * P + Din * P;
    std::size_t moss_shared =
        Din * c.conv_width + Din + Din * P + R * Din + Din + D * E;
    std::size_t mlp_exp = D * H + D * H + H * D;
    std::size_t mlp_shared = D * E;
    std::size_t attn = D * dq + D * dkv + D * dkv + dq * D;

    std::size_t n_moss = 0, n_mlp = 0, n_attn = 0;
    for (LayerKind kind : layer_plan(c)) {
        if (kind == LayerKind::Moss) ++n_moss;
        if (kind == LayerKind::Mlp) ++n_mlp;
        if (kind == LayerKind::Attn) ++n_attn;
    }
    std::size_t norms = (n_moss + n_mlp + n_attn + 1) * D;
    std::size_t emb = c.vocab_size * D + (c.tie_embeddings ? 0 : D * c.vocab_size);

    Counts out;
    out.total = emb + norms + n_attn * attn + n_moss * (E * moss_exp + moss_shared) +
                n_mlp * (E * mlp_exp + mlp_shared);
    out.active = emb + norms + n_attn * attn + n_moss * (K * moss_exp + moss_shared) +
                 n_mlp * (K * mlp_exp + mlp_shared);
    return out;
}

ModelConfig paper_cfg() {
    ModelConfig c;
    c.d_model = 128;
    c.d_state = 16;
    c.n_layers = 8;
    c.n_experts = 8;
    c.k = 2;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.vocab_size = 50304;
    c.context_length = 1024;
    return c;
}

} // namespace

TEST_CASE("layer plan: pairs, attention insertion, variants") {
    ModelConfig c = tiny_cfg();
    // default one attention sublayer at the middle pair
    auto plan = layer_plan(c);
    REQUIRE(plan.size() == 5);
    CHECK(plan[0] == LayerKind::Moss);
    CHECK(plan[1] == LayerKind::Mlp);
    CHECK(plan[2] == LayerKind::Attn);
    CHECK(plan[3] == LayerKind::Moss);
    CHECK(plan[4] == LayerKind::Mlp);

    c.attn_layer_indices = {};
    CHECK(layer_plan(c).size() == 4);

    c.attn_layer_indices = {0, 1};
    plan = layer_plan(c);
    CHECK(plan.size() == 6);
    CHECK(plan[0] == LayerKind::Attn);
    CHECK(plan[3] == LayerKind::Attn);

    c = tiny_cfg();
    c.use_mlp = false;
    c.n_layers = 3;
    plan = layer_plan(c);
    REQUIRE(plan.size() == 4);
    CHECK(plan[1] == LayerKind::Attn); // inserted before the middle layer

    c = tiny_cfg();
    c.arch = "attention";
    plan = layer_plan(c);
    REQUIRE(plan.size() == 4);
    CHECK(plan[0] == LayerKind::Attn);
    CHECK(plan[1] == LayerKind::Mlp);
    CHECK(plan[2] == LayerKind::Attn);
}

TEST_CASE("config validation names the violation") {
    ModelConfig c = tiny_cfg();
    c.k = 5;
    try {
        c.validate();
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("k ≤ N_experts") != std::string::npos);
    }
    c = tiny_cfg();
    c.attn_layer_indices = {9};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.n_kv_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.arch = "rnn";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_cfg();
    c.vocab_size = 256; // no room for BOS
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter accounting at reference dimensions") {
    // anchor totals computed by hand from the dimension arithmetic
    {
        ModelConfig c = paper_cfg();
        Model m = Model::build(c);
        ParamStats st = m.stats();
        CHECK(st.total == 19806464);
        CHECK(st.active == 9877760);
        Counts oracle = count_oracle(c);
        CHECK(st.total == oracle.total);
        CHECK(st.active == oracle.active);
    }
    // the other structural variants against the independent count
    auto check_variant = [](ModelConfig c) {
        Model m = Model::build(c);
        ParamStats st = m.stats();
        Counts oracle = count_oracle(c);
        CHECK(st.total == oracle.total);
        CHECK(st.active == oracle.active);
        return st;
    };
    {
        ModelConfig c = paper_cfg();
        c.n_layers = 9;
        c.attn_layer_indices = {};
        ParamStats st = check_variant(c);
        CHECK(st.total == 21421952);
        CHECK(st.active == 10252160);
    }
    {
        ModelConfig c = paper_cfg();
        c.use_mlp = false;
        c.n_layers = 14;
        ParamStats st = check_variant(c);
        CHECK(st.total == 18768896);
        CHECK(st.active == 9651200);
    }
    {
        ModelConfig c = paper_cfg();
        c.k = 1;
        CHECK(check_variant(c).active == 8222976);
        c.k = 4;
        CHECK(check_variant(c).active == 13187328);
    }
    {
        ModelConfig c = paper_cfg();
        c.n_experts = 4;
        ParamStats st = check_variant(c);
        CHECK(st.total == 13179136);
        CHECK(st.active == 9869568);
        c.n_experts = 16;
        st = check_variant(c);
        CHECK(st.total == 33061120);
        CHECK(st.active == 9894144);
    }
}

TEST_CASE("active parameters: monotone in k, equal to total at k = N") {
    ModelConfig c = tiny_cfg();
    std::size_t prev = 0;
    for (std::size_t k = 1; k <= c.n_experts; ++k) {
        c.k = k;
        Model m = Model::build(c);
        ParamStats st = m.stats();
        CHECK(st.active > prev);
        CHECK(st.active <= st.total);
        if (k == c.n_experts) CHECK(st.active == st.total);
        prev = st.active;
    }
}

TEST_CASE("untrained loss sits at the uniform bound") {
    Model m = Model::build(tiny_cfg());
    Batch b = fixed_batch(4, 8, 77);
    LossOut lo = m.loss(nullptr, b, true);
    CHECK(lo.ce == doctest::Approx(std::log(257.0)).epsilon(0.02));
    CHECK(lo.balance > 0.0);

    ModelConfig c0 = tiny_cfg();
    c0.alpha = 0.0;
    Model m0 = Model::build(c0);
    LossOut lo0 = m0.loss(nullptr, b, true);
    CHECK(lo0.total.at(0) == lo0.ce);
    CHECK(lo0.balance == 0.0);
}

TEST_CASE("zeroed embedding predicts uniformly, perplexity equals vocab size") {
    Model m = Model::build(tiny_cfg());
    m.embedding.value = Tensor::zeros({257, 16});
    std::vector<std::uint8_t> text;
    Rng r(3);
    for (int i = 0; i < 64; ++i) text.push_back(std::uint8_t(r.below(256)));
    double ppl = perplexity(m, text);
    CHECK(ppl == doctest::Approx(257.0).epsilon(1e-9));
}

TEST_CASE("perplexity agrees with the loss cross-entropy term") {
    ModelConfig c = tiny_cfg();
    c.context_length = 16;
    Model m = Model::build(c);
    std::vector<std::uint8_t> text;
    Rng r(9);
    for (int i = 0; i < 16; ++i) text.push_back(std::uint8_t(r.below(256)));

    Batch b;
    b.B = 1;
    b.L = 16;
    b.tokens.push_back(256);
    for (std::uint8_t ch : text) b.tokens.push_back(ch);
    double ce = m.loss(nullptr, b, true).ce;
    CHECK(perplexity(m, text) == doctest::Approx(std::exp(ce)).epsilon(1e-9));
}

TEST_CASE("loss gradients match finite differences for every parameter class") {
    Model m = Model::build(tiny_cfg());
    Batch b = fixed_batch(2, 8, 13);

    Graph g;
    LossOut lo = m.loss(&g, b, true);
    g.backward(lo.total);
    for (Param* p : m.params()) g.take_grad(*p);

    const double h = 1e-5;
    std::size_t checked = 0, good = 0;
    for (Param* p : m.params()) {
        std::size_t n = p->value.numel();
        for (std::size_t idx : {std::size_t(0), n / 2, n - 1}) {
            bump(*p, idx, h);
            double up = total_value(m, b);
            bump(*p, idx, -2 * h);
            double dn = total_value(m, b);
            bump(*p, idx, h);
            double fd = (up - dn) / (2 * h);
            double got = p->grad[idx];
            ++checked;
            if (std::abs(got - fd) <= 1e-4 * std::max(1.0, std::abs(fd))) ++good;
            else { INFO("param ", p->path, " idx ", idx, " grad ", got, " fd ", fd); CHECK(false); }
            if (n < 3) break;
        }
    }
    CHECK(checked >= 100);
    CHECK(good == checked);
}

TEST_CASE("tied unembedding accumulates both gradient contributions") {
    ModelConfig c = tiny_cfg();
    Model tied = Model::build(c);
    c.tie_embeddings = false;
    Model untied = Model::build(c);
    // same embedding draw by construction; force the unembedding to its transpose
    REQUIRE(tied.embedding.value.at(0) == untied.embedding.value.at(0));
    untied.unembed.value = transpose(tied.embedding.value);

    Batch b = fixed_batch(2, 8, 21);
    {
        Graph g;
        LossOut lo = tied.loss(&g, b, true);
        g.backward(lo.total);
        g.take_grad(tied.embedding);
    }
    {
        Graph g;
        LossOut lo = untied.loss(&g, b, true);
        g.backward(lo.total);
        g.take_grad(untied.embedding);
        g.take_grad(untied.unembed);
    }
    const std::size_t V = 257, D = 16;
    double worst = 0.0;
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t d = 0; d < D; ++d) {
            double split = untied.embedding.grad[v * D + d] + untied.unembed.grad[d * V + v];
            worst = std::max(worst, std::abs(tied.embedding.grad[v * D + d] - split));
        }
    CHECK(worst <= 1e-12);
}

TEST_CASE("grouped-query attention with duplicated kv heads equals full mha") {
    ModelConfig c = tiny_cfg();
    c.arch = "attention";
    c.use_mlp = false;
    c.n_layers = 1;
    c.n_kv_heads = 1;
    Model gqa = Model::build(c);
    c.n_kv_heads = 2;
    Model mha = Model::build(c);

    // same weights everywhere, with the single kv head duplicated per group
    mha.embedding.value = gqa.embedding.value;
    mha.final_norm.value = gqa.final_norm.value;
    mha.layers[0].norm_w.value = gqa.layers[0].norm_w.value;
    mha.layers[0].wq.value = gqa.layers[0].wq.value;
    mha.layers[0].wo.value = gqa.layers[0].wo.value;
    mha.layers[0].wk.value = concat_cols({gqa.layers[0].wk.value, gqa.layers[0].wk.value});
    mha.layers[0].wv.value = concat_cols({gqa.layers[0].wv.value, gqa.layers[0].wv.value});

    std::vector<int> toks = {256, 10, 20, 30, 40, 50, 60, 70};
    Tensor a = gqa.forward(nullptr, toks, toks.size(), true).logits;
    Tensor b = mha.forward(nullptr, toks, toks.size(), true).logits;
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("causal: future tokens cannot move earlier logits") {
    Model m = Model::build(tiny_cfg());
    std::vector<int> a = {256, 1, 2, 3, 4, 5, 6, 7};
    std::vector<int> b = a;
    b[5] = 99;
    b[6] = 100;
    b[7] = 101;
    Tensor la = m.forward(nullptr, a, a.size(), true).logits;
    Tensor lb = m.forward(nullptr, b, b.size(), true).logits;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t v = 0; v < 257; ++v)
            CHECK(la.at(t * 257 + v) == lb.at(t * 257 + v));
}

TEST_CASE("scan and sequential recurrence agree through the full model") {
    Model m = Model::build(tiny_cfg());
    Batch b = fixed_batch(2, 8, 31);
    std::vector<int> inputs;
    for (std::size_t r = 0; r < b.B; ++r)
        for (std::size_t i = 0; i < b.L; ++i) inputs.push_back(b.tokens[r * (b.L + 1) + i]);
    Tensor ys = m.forward(nullptr, inputs, b.L, true).logits;
    Tensor yq = m.forward(nullptr, inputs, b.L, false).logits;
    double worst = 0.0;
    for (std::size_t i = 0; i < ys.numel(); ++i)
        worst = std::max(worst, std::abs(ys.at(i) - yq.at(i)));
    CHECK(worst <= 1e-9);
}

TEST_CASE("learning-rate schedules hit their anchor points") {
    ModelConfig c = tiny_cfg();
    c.lr_max = 0.01;
    c.warmup_frac = 0.03;
    const std::size_t total = 1000;

    c.schedule = "cosine";
    CHECK(train::lr_at(0, total, c) == 0.0);
    CHECK(train::lr_at(30, total, c) == c.lr_max); // warmup ends at 3%
    CHECK(train::lr_at(total - 1, total, c) == 0.0);
    double prev = c.lr_max;
    for (std::size_t s = 30; s < total; s += 97) {
        double lr = train::lr_at(s, total, c);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }

    c.schedule = "wsd";
    CHECK(train::lr_at(0, total, c) == 0.0);
    CHECK(train::lr_at(400, total, c) == c.lr_max); // stable plateau
    CHECK(train::lr_at(total - 1, total, c) ==
          doctest::Approx(0.1 * c.lr_max).epsilon(1e-12));
}

TEST_CASE("a short run learns a 64-symbol repeating corpus") {
    ModelConfig c;
    c.d_model = 32;
    c.d_state = 4;
    c.n_layers = 2;
    c.n_experts = 2;
    c.k = 1;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.context_length = 64;
    c.seed = 11;
    Model m = Model::build(c);

    std::vector<std::uint8_t> motif;
    Rng r(100);
    for (int i = 0; i < 64; ++i) motif.push_back(std::uint8_t(33 + r.below(90)));
    std::vector<std::uint8_t> corpus;
    for (int rep = 0; rep < 512; ++rep) corpus.insert(corpus.end(), motif.begin(), motif.end());

    train::TrainOptions opts;
    opts.steps = 200;
    opts.batch_size = 8;
    opts.eval_every = 0; // final eval only
    opts.eval_bytes = 4096;
    train::TrainResult res = train::train_model(m, corpus, opts);
    REQUIRE(!res.diverged);
    double initial_ce = res.log.front().ce;
    double final_ce = std::log(res.final_ppl);
    INFO("initial ", initial_ce, " final ", final_ce);
    CHECK(final_ce < 0.5 * initial_ce);
}

TEST_CASE("runaway loss aborts with a divergence diagnostic") {
    std::vector<std::uint8_t> corpus;
    Rng r(8);
    for (int i = 0; i < 4096; ++i) corpus.push_back(std::uint8_t(r.below(256)));
    train::TrainOptions opts;
    opts.steps = 400;
    opts.batch_size = 2;
    opts.eval_every = 0;

    // attention stack: stays finite, so the sustained loss streak trips
    ModelConfig c = tiny_cfg();
    c.arch = "attention";
    c.context_length = 16;
    c.lr_max = 100.0;
    c.warmup_frac = 0.0;
    Model m = Model::build(c);
    train::TrainResult res = train::train_model(m, corpus, opts);
    CHECK(res.diverged);
    CHECK(res.diagnostic.find("diverged") != std::string::npos);
    CHECK(res.diagnostic.find("100 consecutive") != std::string::npos);
    CHECK(res.log.size() < 400);

    // mossnet stack: the blowup drives delta out of its domain first, which
    // is reported as divergence rather than an unhandled error
    ModelConfig c2 = tiny_cfg();
    c2.context_length = 16;
    c2.lr_max = 1e5;
    c2.warmup_frac = 0.0;
    Model m2 = Model::build(c2);
    train::TrainResult res2 = train::train_model(m2, corpus, opts);
    CHECK(res2.diverged);
    CHECK(res2.diagnostic.find("diverged") != std::string::npos);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mossnet_ckpt_test";
    fs::create_directories(dir);
    std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();

    ModelConfig c = tiny_cfg();
    c.dynamic_k = true;
    Model m = Model::build(c);
    ckpt::save(p1, m, 42, 1234);

    ckpt::Loaded back = ckpt::load(p1);
    CHECK(back.step == 42);
    CHECK(back.data_counter == 1234);
    CHECK(back.model.config().n_experts == c.n_experts);
    CHECK(back.model.config().dynamic_k);
    auto pa = m.params();
    auto pb = back.model.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->path == pb[i]->path);
        REQUIRE(pa[i]->value.shape() == pb[i]->value.shape());
        for (std::size_t j = 0; j < pa[i]->value.numel(); ++j)
            REQUIRE(pa[i]->value.at(j) == pb[i]->value.at(j));
    }

    ckpt::save(p2, back.model, back.step, back.data_counter);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());

    CHECK_THROWS_AS(ckpt::load((dir / "missing.ckpt").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("streaming greedy generation matches a full re-forward") {
    ModelConfig c = tiny_cfg();
    c.context_length = 64;
    Model m = Model::build(c);
    std::vector<int> prompt = {256, 65, 66, 67};
    std::vector<int> gen = m.generate(prompt, 32, 0.0, 0);
    REQUIRE(gen.size() == 32);

    // teacher-force the whole sequence and re-derive each greedy pick
    std::vector<int> all = prompt;
    all.insert(all.end(), gen.begin(), gen.end());
    Tensor logits = m.forward(nullptr, all, all.size(), false).logits;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        std::size_t t = prompt.size() - 1 + i;
        const double* row = logits.data() + t * 257;
        int best = 0;
        for (int v = 1; v < 257; ++v)
            if (row[v] > row[best]) best = v;
        CHECK(best == gen[i]);
    }

    CHECK(m.generate(prompt, 0, 0.0, 0).empty());
    // temperature draws are deterministic under a fixed sampling seed
    std::vector<int> s1 = m.generate(prompt, 8, 1.0, 7);
    std::vector<int> s2 = m.generate(prompt, 8, 1.0, 7);
    CHECK(s1 == s2);
    for (int t : s1) CHECK(t < 257);
}

TEST_CASE("dynamic top-k training leaves one checkpoint evaluable in both modes") {
    ModelConfig c = tiny_cfg();
    c.context_length = 16;
    c.dynamic_k = true;
    Model m = Model::build(c);
    std::vector<std::uint8_t> corpus = data::synth_corpus(8192, 4);

    train::TrainOptions opts;
    opts.steps = 12;
    opts.batch_size = 2;
    opts.eval_every = 0;
    train::TrainResult res = train::train_model(m, corpus, opts);
    REQUIRE(!res.diverged);
    for (const auto& sm : res.log) CHECK(sm.k_active == 3); // schedule start

    for (std::size_t k : {std::size_t(2), std::size_t(3)}) {
        m.set_k(k);
        double ppl = perplexity(m, std::vector<std::uint8_t>(corpus.begin(),
                                                             corpus.begin() + 512));
        CHECK(std::isfinite(ppl));
        CHECK(ppl > 1.0);
    }
}
