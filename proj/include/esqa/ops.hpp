#pragma once

#include <cstddef>
#include <vector>

#include "esqa/tensor.hpp"

namespace esqa {

class Rng;

// Elementwise and matrix operations. Matrices are rank-2 tensors; rank-1
// tensors act as row vectors where broadcasting is involved.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x (n, m) + row vector b (m)
Tensor add_row(const Tensor& x, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Row gather; index -1 yields a zero row.
Tensor gather_rows(const Tensor& table, const std::vector<long>& index);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);

// Per-row scale: out[i, :] = x[i, :] * weights[i]. Weights are constants.
Tensor scale_rows(const Tensor& x, const std::vector<double>& weights);

// Inverted dropout; identity when p == 0 or rng is null.
Tensor dropout(const Tensor& x, double p, Rng* rng);

// Mean cross-entropy over rows whose target is >= 0; target -1 is ignored.
// Returns 0 when every row is ignored.
Tensor cross_entropy(const Tensor& logits, const std::vector<long>& targets);

// Rows of Q, K and V are grouped per batch item: item b owns query rows
// [b*query_len, (b+1)*query_len) and key rows [b*key_len, (b+1)*key_len).
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  bool causal = false;
  // Valid key count per item; keys at or past it are masked. Empty: all valid.
  std::vector<std::size_t> key_lengths;
};

// Scaled dot-product multi-head attention, softmax(QK^T/sqrt(d_h))V per head,
// with padding and optional causal masking.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout);

}  // namespace esqa
