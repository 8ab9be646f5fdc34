#include "esqa/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "esqa/error.hpp"
#include "esqa/rng.hpp"

namespace esqa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MMap mmat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": size mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void accumulate(detail::Node& parent, const std::vector<double>& g) {
  if (!parent.requires_grad) return;
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, Forward f, Derivative df) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a}, [df](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    auto& p = *self.parents[1];
    if (!p.requires_grad) return;
    auto& pg = p.ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_row(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.rows(), m = x.cols();
  if (b.size() != m) {
    throw ShapeError("add_row: bias of size " + std::to_string(b.size()) + " for width " +
                     std::to_string(m));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bd[j];
  return Tensor::make_result(x.shape(), std::move(out), {x, b}, [n, m](detail::Node& self) {
    accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (!pb.requires_grad) return;
    auto& g = pb.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k || (b.rank() == 1 && k != 1)) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<double> out(n * m);
  mmat(out, n, m).noalias() = cmat(a.node()->value, n, k) * cmat(b.node()->value, k, m);
  return Tensor::make_result(matrix_shape(n, m), std::move(out), {a, b},
                             [n, k, m](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               const auto g = cmat(self.grad, n, m);
                               if (pa.requires_grad) {
                                 mmat(pa.ensure_grad(), n, k).noalias() +=
                                     g * cmat(pb.value, k, m).transpose();
                               }
                               if (pb.requires_grad) {
                                 mmat(pb.ensure_grad(), k, m).noalias() +=
                                     cmat(pa.value, n, k).transpose() * g;
                               }
                             });
}

Tensor transpose(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  mmat(out, m, n) = cmat(a.node()->value, n, m).transpose();
  return Tensor::make_result(matrix_shape(m, n), std::move(out), {a}, [n, m](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    mmat(p.ensure_grad(), n, m) += cmat(self.grad, m, n).transpose();
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return Tensor::make_result({}, {s}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.rows(), m = x.cols();
  const auto in = x.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = in.data() + i * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [n, m](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * self.value[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        g[i * m + j] += self.value[i * m + j] * (self.grad[i * m + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.size() != m || bias.size() != m) throw ShapeError("layer_norm: parameter width mismatch");
  const auto in = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(n * m), xhat(n * m), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = in.data() + i * m;
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += row[j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(m);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (row[j] - mu) * rstd[i];
      out[i * m + j] = xhat[i * m + j] * gd[j] + bd[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [n, m, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
        }
        if (pg.requires_grad) {
          auto& g = pg.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j] * xhat[i * m + j];
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[i * m + j] * pg.value[j];
              mean_d += d;
              mean_dx += d * xhat[i * m + j];
            }
            mean_d *= inv_m;
            mean_dx *= inv_m;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[i * m + j] * pg.value[j];
              g[i * m + j] += rstd[i] * (d - mean_d - xhat[i * m + j] * mean_dx);
            }
          }
        }
      });
}

Tensor gather_rows(const Tensor& table, const std::vector<long>& index) {
  const std::size_t rows = table.rows(), m = table.cols();
  const auto td = table.data();
  std::vector<double> out(index.size() * m, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const long r = index[i];
    if (r < 0) continue;
    if (static_cast<std::size_t>(r) >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of " + std::to_string(rows));
    }
    std::copy_n(td.begin() + r * m, m, out.begin() + i * m);
  }
  return Tensor::make_result(matrix_shape(index.size(), m), std::move(out), {table},
                             [index, m](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < index.size(); ++i) {
                                 if (index[i] < 0) continue;
                                 const std::size_t r = static_cast<std::size_t>(index[i]);
                                 for (std::size_t j = 0; j < m; ++j) g[r * m + j] += self.grad[i * m + j];
                               }
                             });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.cols() != m) throw ShapeError("concat_rows: width mismatch");
    offsets.push_back(n);
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * m);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor::make_result(matrix_shape(n, m), std::move(out), parts,
                             [offsets, m](detail::Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 auto& p = *self.parents[k];
                                 if (!p.requires_grad) continue;
                                 auto& g = p.ensure_grad();
                                 const std::size_t base = offsets[k] * m;
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[base + i];
                               }
                             });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    offsets.push_back(m);
    widths.push_back(p.cols());
    m += p.cols();
  }
  std::vector<double> out(n * m);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(d.begin() + i * widths[k], widths[k], out.begin() + i * m + offsets[k]);
  }
  return Tensor::make_result(matrix_shape(n, m), std::move(out), parts,
                             [n, m, offsets, widths](detail::Node& self) {
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 auto& p = *self.parents[k];
                                 if (!p.requires_grad) continue;
                                 auto& g = p.ensure_grad();
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                     g[i * widths[k] + j] += self.grad[i * m + offsets[k] + j];
                               }
                             });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t m = x.cols();
  if (begin + count > x.rows()) throw ShapeError("slice_rows: out of range");
  const auto d = x.data();
  std::vector<double> out(d.begin() + begin * m, d.begin() + (begin + count) * m);
  return Tensor::make_result(matrix_shape(count, m), std::move(out), {x},
                             [begin, m](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[begin * m + i] += self.grad[i];
                             });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t n = x.rows(), m = x.cols();
  if (begin + count > m) throw ShapeError("slice_cols: out of range");
  const auto d = x.data();
  std::vector<double> out(n * count);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(d.begin() + i * m + begin, count, out.begin() + i * count);
  return Tensor::make_result(matrix_shape(n, count), std::move(out), {x},
                             [n, m, begin, count](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   g[i * m + begin + j] += self.grad[i * count + j];
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) throw ShapeError("reshape: size mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& weights) {
  const std::size_t n = x.rows(), m = x.cols();
  if (weights.size() != n) throw ShapeError("scale_rows: weight count mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= weights[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [weights, n, m](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * weights[i];
  });
}

Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  const double keep = 1.0 - p;
  std::vector<double> mask(x.size());
  for (auto& v : mask) v = rng->uniform() < keep ? 1.0 / keep : 0.0;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<long>& targets) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy: target count mismatch");
  const auto in = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= c) throw ShapeError("cross_entropy: target out of range");
    const double* row = in.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  return Tensor::make_result(
      {}, {total / denom}, {logits},
      [targets, probs = std::move(probs), c, denom](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const double s = self.grad[0] / denom;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (targets[i] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += s * probs[i * c + j];
          g[i * c + static_cast<std::size_t>(targets[i])] -= s;
        }
      });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
  const std::size_t B = layout.batch, tq = layout.query_len, tk = layout.key_len, H = layout.heads;
  const std::size_t d = q.cols();
  if (H == 0 || d % H != 0) throw ShapeError("attention: width not divisible by heads");
  if (q.rows() != B * tq || k.rows() != B * tk || v.rows() != B * tk) {
    throw ShapeError("attention: row counts do not match layout");
  }
  if (k.cols() != d || v.cols() != d) throw ShapeError("attention: key/value width mismatch");
  if (!layout.key_lengths.empty() && layout.key_lengths.size() != B) {
    throw ShapeError("attention: key_lengths size mismatch");
  }
  if (layout.causal && tq != tk) throw ShapeError("attention: causal mask needs square layout");
  const std::size_t dh = d / H;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;
  CMap Q = cmat(qv, B * tq, d), K = cmat(kv, B * tk, d), V = cmat(vv, B * tk, d);

  std::vector<double> out(B * tq * d, 0.0);
  MMap O = mmat(out, B * tq, d);
  std::vector<double> probs(B * H * tq * tk, 0.0);

  const auto Ti = static_cast<Eigen::Index>(tq), Tk = static_cast<Eigen::Index>(tk),
             Dh = static_cast<Eigen::Index>(dh);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = layout.key_lengths.empty() ? tk : std::min(layout.key_lengths[b], tk);
    for (std::size_t h = 0; h < H; ++h) {
      const auto qi = static_cast<Eigen::Index>(b * tq), ki = static_cast<Eigen::Index>(b * tk),
                 hc = static_cast<Eigen::Index>(h * dh);
      RowMat S = (Q.block(qi, hc, Ti, Dh) * K.block(ki, hc, Tk, Dh).transpose()) * scl;
      MMap P(probs.data() + (b * H + h) * tq * tk, Ti, Tk);
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t limit = layout.causal ? std::min(len, i + 1) : len;
        if (limit == 0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, S(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) z += (P(i, j) = std::exp(S(i, j) - mx));
        for (std::size_t j = 0; j < limit; ++j) P(i, j) /= z;
      }
      O.block(qi, hc, Ti, Dh).noalias() = P * V.block(ki, hc, Tk, Dh);
    }
  }

  return Tensor::make_result(
      matrix_shape(B * tq, d), std::move(out), {q, k, v},
      [B, H, tq, tk, d, dh, scl, probs = std::move(probs)](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        CMap Q = cmat(pq.value, B * tq, d), K = cmat(pk.value, B * tk, d), V = cmat(pv.value, B * tk, d);
        CMap G = cmat(self.grad, B * tq, d);
        std::vector<double>* gq = pq.requires_grad ? &pq.ensure_grad() : nullptr;
        std::vector<double>* gk = pk.requires_grad ? &pk.ensure_grad() : nullptr;
        std::vector<double>* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
        const auto Ti = static_cast<Eigen::Index>(tq), Tk = static_cast<Eigen::Index>(tk),
                   Dh = static_cast<Eigen::Index>(dh);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const auto qi = static_cast<Eigen::Index>(b * tq), ki = static_cast<Eigen::Index>(b * tk),
                       hc = static_cast<Eigen::Index>(h * dh);
            CMap P(probs.data() + (b * H + h) * tq * tk, Ti, Tk);
            const auto Gb = G.block(qi, hc, Ti, Dh);
            if (gv) mmat(*gv, B * tk, d).block(ki, hc, Tk, Dh).noalias() += P.transpose() * Gb;
            if (!gq && !gk) continue;
            RowMat dP = Gb * V.block(ki, hc, Tk, Dh).transpose();
            RowMat dS(Ti, Tk);
            for (Eigen::Index i = 0; i < Ti; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j < Tk; ++j) dot += dP(i, j) * P(i, j);
              for (Eigen::Index j = 0; j < Tk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scl;
            }
            if (gq) mmat(*gq, B * tq, d).block(qi, hc, Ti, Dh).noalias() += dS * K.block(ki, hc, Tk, Dh);
            if (gk)
              mmat(*gk, B * tk, d).block(ki, hc, Tk, Dh).noalias() += dS.transpose() * Q.block(qi, hc, Ti, Dh);
          }
        }
      });
}

}  // namespace esqa
