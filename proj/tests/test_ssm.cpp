#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mossnet/rng.hpp"
#include "mossnet/ssm.hpp"

using namespace mossnet;

namespace {

// high-precision oracle for (exp(z)-1)/z: 50-term Taylor series in long double
long double phi_taylor(long double z) {
    long double term = 1.0L, acc = 1.0L;
    for (int k = 1; k < 50; ++k) {
        term *= z / (long double)(k + 1);
        acc += term;
    }
    return acc;
}

Tensor rand_t(const Shape& shape, Rng& rng, double lo, double hi) {
    Tensor t = Tensor::zeros(shape);
    double* d = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) d[i] = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("discretize solves the hand case a=-1, dt=ln2 exactly") {
    Tensor A = Tensor::from_data({1, 1}, {-1.0});
    Tensor B = Tensor::from_data({1}, {2.0});
    Tensor dt = Tensor::from_data({1}, {std::log(2.0)});
    auto d = ssm::discretize(A, B, dt);
    CHECK(d.abar.at(0) == doctest::Approx(0.5).epsilon(1e-15));
    // bbar = ((0.5 - 1) / -1) * 2 = 1
    CHECK(d.bbar.at(0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("discretize degrades to dt*b for vanishing dt") {
    Tensor A = Tensor::from_data({1, 1}, {-1.0});
    Tensor B = Tensor::from_data({1}, {3.0});
    Tensor dt = Tensor::from_data({1}, {1e-12});
    auto d = ssm::discretize(A, B, dt);
    CHECK(std::abs(d.abar.at(0) - 1.0) < 2e-12);
    CHECK(std::abs(d.bbar.at(0) / (1e-12 * 3.0) - 1.0) < 1e-11);
}

TEST_CASE("the series guard is continuous across its threshold") {
    for (double mag : {0.999e-8, 1.001e-8}) {
        for (double sign : {1.0, -1.0}) {
            double z = sign * mag;
            long double ref = phi_taylor((long double)z);
            CHECK(std::abs(double((long double)ssm::zoh_phi(z) - ref)) < 1e-13);
        }
    }
}

TEST_CASE("64 random discretizations match a long-double Taylor oracle") {
    Rng rng(7001);
    for (int it = 0; it < 64; ++it) {
        double a = -std::exp(rng.uniform(-3.0, 1.3));
        double h = std::exp(rng.uniform(std::log(1e-4), std::log(2.0)));
        double b = rng.uniform(-2.0, 2.0);
        Tensor A = Tensor::from_data({1, 1}, {a});
        Tensor Bt = Tensor::from_data({1}, {b});
        Tensor dt = Tensor::from_data({1}, {h});
        auto d = ssm::discretize(A, Bt, dt);
        long double z = (long double)h * (long double)a;
        long double abar_ref = expl(z);
        long double bbar_ref = (long double)h * phi_taylor(z) * (long double)b;
        CHECK(std::abs(double(((long double)d.abar.at(0) - abar_ref) / abar_ref)) < 1e-14);
        if (bbar_ref != 0.0L)
            CHECK(std::abs(double(((long double)d.bbar.at(0) - bbar_ref) / bbar_ref)) < 1e-12);
    }
}

TEST_CASE("discretize rejects out-of-domain inputs") {
    Tensor B = Tensor::from_data({1}, {1.0});
    Tensor dt_ok = Tensor::from_data({1}, {0.1});
    CHECK_THROWS_AS(ssm::discretize(Tensor::from_data({1, 1}, {0.0}), B, dt_ok), DomainError);
    CHECK_THROWS_AS(ssm::discretize(Tensor::from_data({1, 1}, {1.0}), B, dt_ok), DomainError);
    Tensor A_ok = Tensor::from_data({1, 1}, {-1.0});
    CHECK_THROWS_AS(ssm::discretize(A_ok, B, Tensor::from_data({1}, {0.0})), DomainError);
    CHECK_THROWS_AS(ssm::discretize(A_ok, B, Tensor::from_data({1}, {-0.1})), DomainError);
    CHECK_THROWS_AS(ssm::discretize(A_ok, Tensor::from_data({2}, {1.0, 1.0}), dt_ok), ShapeError);
}

TEST_CASE("one recurrence step matches hand arithmetic") {
    Tensor s = Tensor::from_data({1, 1}, {4.0});
    Tensor x = Tensor::from_data({1}, {2.0});
    Tensor abar = Tensor::from_data({1, 1}, {0.5});
    Tensor bbar = Tensor::from_data({1, 1}, {0.5});
    Tensor C = Tensor::from_data({1}, {3.0});
    auto out = ssm::step(s, x, abar, bbar, C);
    CHECK(out.state.at(0) == 3.0); // 0.5*4 + 0.5*2
    CHECK(out.y.at(0) == 9.0);     // 3 * 3
}

TEST_CASE("a step from the zero state is the driven term alone") {
    Rng rng(7002);
    std::size_t D = 3, P = 4;
    Tensor s = Tensor::zeros({D, P});
    Tensor x = rand_t({D}, rng, -1, 1);
    Tensor abar = rand_t({D, P}, rng, 0.1, 0.9);
    Tensor bbar = rand_t({D, P}, rng, -1, 1);
    Tensor C = rand_t({P}, rng, -1, 1);
    auto out = ssm::step(s, x, abar, bbar, C);
    for (std::size_t d = 0; d < D; ++d) {
        double y = 0;
        for (std::size_t p = 0; p < P; ++p) {
            double want = bbar.at(d * P + p) * x.at(d);
            CHECK(out.state.at(d * P + p) == doctest::Approx(want).epsilon(1e-15));
            y += C.at(p) * want;
        }
        CHECK(out.y.at(d) == doctest::Approx(y).epsilon(1e-13));
    }
}

TEST_CASE("step validates shapes") {
    Tensor s = Tensor::zeros({2, 3}), x = Tensor::zeros({2});
    Tensor ab = Tensor::zeros({2, 3}), C = Tensor::zeros({3});
    CHECK_THROWS_AS(ssm::step(s, Tensor::zeros({3}), ab, ab, C), ShapeError);
    CHECK_THROWS_AS(ssm::step(s, x, Tensor::zeros({3, 2}), ab, C), ShapeError);
    CHECK_THROWS_AS(ssm::step(s, x, ab, ab, Tensor::zeros({2})), ShapeError);
}

TEST_CASE("tree scan matches the sequential recurrence across lengths") {
    Rng rng(7003);
    for (std::size_t T : {1ul, 2ul, 3ul, 4ul, 5ul, 17ul, 31ul, 256ul, 1024ul}) {
        CAPTURE(T);
        std::size_t W = 6;
        Tensor a = rand_t({T, W}, rng, 0.0, 1.0); // decay factors live in (0, 1)
        Tensor b = rand_t({T, W}, rng, -2.0, 2.0);
        Tensor s0 = ssm::scan_sequential(a, b);
        Tensor s1 = ssm::scan(a, b);
        double worst = 0;
        for (std::size_t i = 0; i < s0.numel(); ++i)
            worst = std::max(worst, std::abs(s0.at(i) - s1.at(i)));
        CHECK(worst <= 1e-10);
    }
}

TEST_CASE("scan with unit decay reduces to exact prefix sums") {
    std::size_t T = 37, W = 2;
    Rng rng(7004);
    Tensor a = Tensor::full({T, W}, 1.0);
    Tensor b = Tensor::zeros({T, W});
    double* bd = b.mutable_data();
    for (std::size_t i = 0; i < T * W; ++i) bd[i] = double(int(rng.below(9)) - 4);
    Tensor s = ssm::scan(a, b);
    double run0 = 0, run1 = 0;
    for (std::size_t t = 0; t < T; ++t) {
        run0 += b.at(t * W);
        run1 += b.at(t * W + 1);
        CHECK(s.at(t * W) == run0); // small integers: bitwise exact
        CHECK(s.at(t * W + 1) == run1);
    }
}

TEST_CASE("scan of a single element returns its driven term") {
    Tensor a = Tensor::from_data({1, 3}, {0.5, 0.25, 0.125});
    Tensor b = Tensor::from_data({1, 3}, {7.0, -3.0, 2.0});
    Tensor s = ssm::scan(a, b);
    CHECK(s.at(0) == 7.0);
    CHECK(s.at(1) == -3.0);
    CHECK(s.at(2) == 2.0);
}

TEST_CASE("scan channels are independent") {
    Rng rng(7005);
    std::size_t T = 19, W = 3;
    Tensor a = rand_t({T, W}, rng, 0.0, 1.0), b = rand_t({T, W}, rng, -1.0, 1.0);
    Tensor wide = ssm::scan(a, b);
    for (std::size_t w = 0; w < W; ++w) {
        std::vector<double> ac(T), bc(T);
        for (std::size_t t = 0; t < T; ++t) {
            ac[t] = a.at(t * W + w);
            bc[t] = b.at(t * W + w);
        }
        Tensor narrow = ssm::scan(Tensor::from_data({T, 1}, ac), Tensor::from_data({T, 1}, bc));
        for (std::size_t t = 0; t < T; ++t) CHECK(narrow.at(t) == wide.at(t * W + w));
    }
}

TEST_CASE("unrolled double sum with unit decay counts its terms") {
    std::size_t T = 9, D = 2, P = 3;
    Tensor abar = Tensor::full({T, D, P}, 1.0);
    Tensor bbar = Tensor::full({T, D, P}, 1.0);
    Tensor C = Tensor::full({T, P}, 1.0);
    Tensor x = Tensor::full({T, D}, 1.0);
    Tensor y = ssm::unroll(abar, bbar, C, x);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < D; ++d) CHECK(y.at(t * D + d) == double((t + 1) * P));
}

TEST_CASE("unrolled double sum equals the running recurrence") {
    Rng rng(7006);
    std::size_t T = 24, D = 3, P = 4;
    Tensor abar = rand_t({T, D, P}, rng, 0.05, 0.999);
    Tensor bbar = rand_t({T, D, P}, rng, -1.0, 1.0);
    Tensor C = rand_t({T, P}, rng, -1.0, 1.0);
    Tensor x = rand_t({T, D}, rng, -1.0, 1.0);
    Tensor y = ssm::unroll(abar, bbar, C, x);

    Tensor s = Tensor::zeros({D, P});
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> at(D * P), bt(D * P), ct(P), xt(D);
        for (std::size_t i = 0; i < D * P; ++i) {
            at[i] = abar.at(t * D * P + i);
            bt[i] = bbar.at(t * D * P + i);
        }
        for (std::size_t p = 0; p < P; ++p) ct[p] = C.at(t * P + p);
        for (std::size_t d = 0; d < D; ++d) xt[d] = x.at(t * D + d);
        auto out = ssm::step(s, Tensor::from_data({D}, xt), Tensor::from_data({D, P}, at),
                             Tensor::from_data({D, P}, bt), Tensor::from_data({P}, ct));
        s = out.state;
        for (std::size_t d = 0; d < D; ++d)
            CHECK(std::abs(y.at(t * D + d) - out.y.at(d)) <= 1e-10);
    }
}

TEST_CASE("the unroll oracle refuses work outside its domain") {
    Tensor ok = Tensor::full({4, 1, 1}, 0.5);
    Tensor C = Tensor::full({4, 1}, 1.0), x = Tensor::full({4, 1}, 1.0);
    Tensor tiny = Tensor::full({4, 1, 1}, 0.9e-6);
    CHECK_THROWS_AS(ssm::unroll(tiny, ok, C, x), DomainError);

    Tensor longa = Tensor::full({65, 1, 1}, 0.5);
    Tensor longc = Tensor::full({65, 1}, 1.0), longx = Tensor::full({65, 1}, 1.0);
    CHECK_THROWS_AS(ssm::unroll(longa, longa, longc, longx), DomainError);

    CHECK_THROWS_AS(ssm::unroll(Tensor::zeros({4, 2}), ok, C, x), ShapeError);
    CHECK_THROWS_AS(ssm::unroll(ok, ok, Tensor::zeros({4, 2}), x), ShapeError);
}
