#pragma once
#include <vector>

#include "mossnet/autograd.hpp"
#include "mossnet/tensor.hpp"

namespace mossnet {

// Fixed primitive set of the tape. Every op computes eagerly and records a
// node when any input is graph-attached; adding an op here means adding its
// backward and a finite-difference test.

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor recip(const Tensor& a);
Tensor scale(const Tensor& a, double c);

// rank-promoting vector broadcasts
Tensor add_rowvec(const Tensor& a, const Tensor& b);  // [n x d] + [d]
Tensor mul_colvec(const Tensor& a, const Tensor& s);  // [n x d] * [n] per row

// linear algebra (rank 2)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// shape ops
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor scatter_add_rows(const Tensor& base, const Tensor& rows, const std::vector<int>& idx);
Tensor take_flat(const Tensor& a, const std::vector<std::size_t>& idx); // flat picks -> [m]

// reductions
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// normalisation / probability
Tensor softmax(const Tensor& x);       // rank 1
Tensor softmax_rows(const Tensor& x);  // rank 2, rowwise, max-subtracted
Tensor rmsnorm(const Tensor& x, const Tensor& w, double eps = 1e-6);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets); // mean nats

// depthwise causal conv; x is [n x D] holding n/seq_len sequences back to
// back, each padded with zero history
Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t seq_len);

// fused selective-SSM primitive: ZOH-discretises (A = -exp(a_log), per-token
// delta), runs the linear state recurrence per sequence and reads out through
// C. use_scan picks the associative-scan path, otherwise the sequential
// recurrence; both are causal and agree to ~1e-10.
Tensor selective_ssm(const Tensor& delta,  // [n x D]
                     const Tensor& a_log,  // [D x P]
                     const Tensor& b,      // [n x P]
                     const Tensor& c,      // [n x P]
                     const Tensor& u,      // [n x D]
                     std::size_t seq_len, bool use_scan);

} // namespace mossnet
