#include "mossnet/ssm.hpp"

#include <string>
#include <vector>

namespace mossnet::ssm {

namespace {
void check_domain_a(const double* a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!(a[i] < 0.0))
            throw DomainError("discretize: A must be strictly negative, got " +
                              std::to_string(a[i]));
}
void check_domain_dt(const double* dt, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!(dt[i] > 0.0))
            throw DomainError("discretize: dt must be strictly positive, got " +
                              std::to_string(dt[i]));
}
} // namespace

Discretized discretize(const Tensor& A, const Tensor& B, const Tensor& dt) {
    std::size_t D = A.rows(), P = A.cols();
    if (B.shape() != Shape{P})
        throw ShapeError("discretize: B " + shape_str(B.shape()) + " vs state width " +
                         std::to_string(P));
    if (dt.shape() != Shape{D})
        throw ShapeError("discretize: dt " + shape_str(dt.shape()) + " vs channels " +
                         std::to_string(D));
    check_domain_a(A.data(), A.numel());
    check_domain_dt(dt.data(), dt.numel());
    std::vector<double> abar(D * P), bbar(D * P);
    for (std::size_t d = 0; d < D; ++d) {
        double h = dt.at(d);
        for (std::size_t p = 0; p < P; ++p) {
            double z = h * A.at(d * P + p);
            abar[d * P + p] = std::exp(z);
            bbar[d * P + p] = h * zoh_phi(z) * B.at(p);
        }
    }
    return {Tensor::from_data({D, P}, std::move(abar)), Tensor::from_data({D, P}, std::move(bbar))};
}

StepOut step(const Tensor& s, const Tensor& x, const Tensor& abar, const Tensor& bbar,
             const Tensor& C) {
    std::size_t D = s.rows(), P = s.cols();
    check_same_shape(s, abar, "step");
    check_same_shape(s, bbar, "step");
    if (x.shape() != Shape{D})
        throw ShapeError("step: x " + shape_str(x.shape()) + " vs channels " + std::to_string(D));
    if (C.shape() != Shape{P})
        throw ShapeError("step: C " + shape_str(C.shape()) + " vs state width " +
                         std::to_string(P));
    std::vector<double> ns(D * P), y(D, 0.0);
    for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
            std::size_t i = d * P + p;
            ns[i] = abar.at(i) * s.at(i) + bbar.at(i) * x.at(d);
            acc += C.at(p) * ns[i];
        }
        y[d] = acc;
    }
    return {Tensor::from_data({D, P}, std::move(ns)), Tensor::from_data({D}, std::move(y))};
}

void scan_sequential_raw(const double* a, const double* b, std::size_t T, std::size_t W,
                         double* out) {
    for (std::size_t w = 0; w < W; ++w) out[w] = b[w]; // s_1 = a_1*0 + b_1
    for (std::size_t t = 1; t < T; ++t) {
        const double* at = a + t * W;
        const double* bt = b + t * W;
        const double* prev = out + (t - 1) * W;
        double* cur = out + t * W;
        for (std::size_t w = 0; w < W; ++w) cur[w] = at[w] * prev[w] + bt[w];
    }
}

void scan_blelloch_raw(const double* a, const double* b, std::size_t T, std::size_t W,
                       double* out) {
    std::size_t n = 1;
    while (n < T) n <<= 1;
    // identity element (1, 0) pads T up to a power of two
    std::vector<double> wa(n * W, 1.0), wb(n * W, 0.0);
    std::copy(a, a + T * W, wa.begin());
    std::copy(b, b + T * W, wb.begin());

    // up-sweep: right node absorbs left node, (aR,bR) o (aL,bL)
    for (std::size_t stride = 2; stride <= n; stride <<= 1) {
        for (std::size_t i = stride - 1; i < n; i += stride) {
            std::size_t l = (i - stride / 2) * W, r = i * W;
            for (std::size_t w = 0; w < W; ++w) {
                wb[r + w] = wa[r + w] * wb[l + w] + wb[r + w];
                wa[r + w] = wa[r + w] * wa[l + w];
            }
        }
    }
    // down-sweep turns the tree into exclusive prefixes
    for (std::size_t w = 0; w < W; ++w) {
        wa[(n - 1) * W + w] = 1.0;
        wb[(n - 1) * W + w] = 0.0;
    }
    for (std::size_t stride = n; stride >= 2; stride >>= 1) {
        for (std::size_t i = stride - 1; i < n; i += stride) {
            std::size_t l = (i - stride / 2) * W, r = i * W;
            for (std::size_t w = 0; w < W; ++w) {
                double ta = wa[l + w], tb = wb[l + w];
                wa[l + w] = wa[r + w];
                wb[l + w] = wb[r + w];
                wb[r + w] = ta * wb[r + w] + tb; // parent o left, parent applied after
                wa[r + w] = wa[r + w] * ta;
            }
        }
    }
    // inclusive[i] = e_i o exclusive[i]; state is the b component
    for (std::size_t t = 0; t < T; ++t) {
        const double* at = a + t * W;
        const double* bt = b + t * W;
        double* o = out + t * W;
        for (std::size_t w = 0; w < W; ++w) o[w] = at[w] * wb[t * W + w] + bt[w];
    }
}

namespace {
Tensor scan_with(const Tensor& a, const Tensor& b,
                 void (*impl)(const double*, const double*, std::size_t, std::size_t, double*)) {
    check_same_shape(a, b, "scan");
    std::size_t T = a.rows(), W = a.cols();
    std::vector<double> out(T * W);
    if (T) impl(a.data(), b.data(), T, W, out.data());
    return Tensor::from_data({T, W}, std::move(out));
}
} // namespace

Tensor scan(const Tensor& a, const Tensor& b) { return scan_with(a, b, scan_blelloch_raw); }
Tensor scan_sequential(const Tensor& a, const Tensor& b) {
    return scan_with(a, b, scan_sequential_raw);
}

Tensor unroll(const Tensor& abar, const Tensor& bbar, const Tensor& C, const Tensor& x) {
    if (abar.ndim() != 3)
        throw ShapeError("unroll: abar rank-3 expected, got " + shape_str(abar.shape()));
    std::size_t T = abar.size(0), D = abar.size(1), P = abar.size(2);
    check_same_shape(abar, bbar, "unroll");
    if (C.shape() != Shape{T, P})
        throw ShapeError("unroll: C " + shape_str(C.shape()) + " vs " + shape_str({T, P}));
    if (x.shape() != Shape{T, D})
        throw ShapeError("unroll: x " + shape_str(x.shape()) + " vs " + shape_str({T, D}));
    if (T > 64)
        throw DomainError("unroll: oracle domain is T <= 64, got T = " + std::to_string(T));
    for (std::size_t i = 0; i < abar.numel(); ++i)
        if (!(abar.at(i) >= 1e-6))
            throw DomainError("unroll: abar below 1e-6 floor, inverse cumulative product "
                              "would be singular");

    std::size_t DP = D * P;
    // cumulative products and their inverses, both left to right
    std::vector<double> cum(T * DP), inv(T * DP);
    for (std::size_t w = 0; w < DP; ++w) {
        cum[w] = abar.at(w);
        inv[w] = 1.0 / abar.at(w);
    }
    for (std::size_t t = 1; t < T; ++t)
        for (std::size_t w = 0; w < DP; ++w) {
            cum[t * DP + w] = cum[(t - 1) * DP + w] * abar.at(t * DP + w);
            inv[t * DP + w] = inv[(t - 1) * DP + w] * (1.0 / abar.at(t * DP + w));
        }

    std::vector<double> y(T * D, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i <= t; ++i)
            for (std::size_t d = 0; d < D; ++d) {
                double acc = 0.0;
                for (std::size_t p = 0; p < P; ++p) {
                    std::size_t w = d * P + p;
                    acc += C.at(t * P + p) * cum[t * DP + w] * inv[i * DP + w] *
                           bbar.at(i * DP + w);
                }
                y[t * D + d] += acc * x.at(i * D + d);
            }
    return Tensor::from_data({T, D}, std::move(y));
}

} // namespace mossnet::ssm
