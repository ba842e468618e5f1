#pragma once
#include <cmath>
#include <cstddef>

#include "mossnet/tensor.hpp"

namespace mossnet::ssm {

// zero-order hold factor (exp(z)-1)/z with a series guard below |z| < 1e-8,
// so bbar -> dt * b as dt -> 0. expm1 avoids the cancellation the naive
// difference suffers for small |z|.
inline double zoh_phi(double z) {
    if (z > -1e-8 && z < 1e-8) return 1.0 + z * (0.5 + z / 6.0);
    return std::expm1(z) / z;
}

// both ZOH factors from a single expm1: phi matches zoh_phi bit for bit and
// abar = 1 + expm1(z) is within one ulp of exp(z). The per-token training
// kernel evaluates this n * d_inner * d_state times, so one transcendental
// per element instead of two is a measurable win.
inline void zoh_pair(double z, double& abar, double& phi) {
    double em = std::expm1(z);
    abar = 1.0 + em;
    if (z > -1e-8 && z < 1e-8) phi = 1.0 + z * (0.5 + z / 6.0);
    else phi = em / z;
}

// exact ZOH for diagonal A: abar = exp(dt*a), bbar = ((exp(dt*a)-1)/a) * b.
// A must be strictly negative, dt strictly positive.
struct Discretized {
    Tensor abar; // [D x P]
    Tensor bbar; // [D x P]
};
Discretized discretize(const Tensor& A,   // [D x P], negative
                       const Tensor& B,   // [P]
                       const Tensor& dt); // [D]

// one recurrence step: s' = abar (.) s + bbar (.) x (x broadcast over P),
// y = <C, s'> per channel
struct StepOut {
    Tensor state; // [D x P]
    Tensor y;     // [D]
};
StepOut step(const Tensor& s,    // [D x P]
             const Tensor& x,    // [D]
             const Tensor& abar, // [D x P]
             const Tensor& bbar, // [D x P]
             const Tensor& C);   // [P]

// inclusive scan of s_t = a_t (.) s_{t-1} + b_t over rows; composition
// (a2,b2) o (a1,b1) = (a2*a1, a2*b1 + b2), identity (1,0). The Blelloch tree
// pairs elements in a fixed left-to-right order, so results are reproducible
// for any T. Width is the flattened state size.
Tensor scan(const Tensor& a, const Tensor& b);            // [T x W] -> states [T x W]
Tensor scan_sequential(const Tensor& a, const Tensor& b); // reference recurrence

// raw-buffer versions used by the fused training op
void scan_blelloch_raw(const double* a, const double* b, std::size_t T, std::size_t W, double* out);
void scan_sequential_raw(const double* a, const double* b, std::size_t T, std::size_t W, double* out);

// explicit double-sum evaluation of the unrolled recurrence,
// y_t = sum_{i<=t} C_t (.) prodA(t) (.) prodA(i)^-1 (.) bbar_i * x_i,
// cumulative products taken left to right. Brute-force theorem oracle:
// T <= 64, every abar >= 1e-6, or DomainError.
Tensor unroll(const Tensor& abar, // [T x D x P]
              const Tensor& bbar, // [T x D x P]
              const Tensor& C,    // [T x P]
              const Tensor& x);   // [T x D]

} // namespace mossnet::ssm
