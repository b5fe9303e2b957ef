#include <algorithm>
#include <utility>
#include <cmath>
#include <numbers>

#include "tele/rng.hpp"
#include "tele/tensor.hpp"

namespace tele {

namespace {

using ConstMap = Eigen::Map<const MatrixRM>;
using MutMap = Eigen::Map<MatrixRM>;

ConstMap as_matrix(const Buffer& b, Index rows, Index cols) { return {b.data(), rows, cols}; }
MutMap as_matrix(Buffer& b, Index rows, Index cols) { return {b.data(), rows, cols}; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
  }
}

// Right-aligned broadcasting. `a_idx`/`b_idx` map each output element to its
// source element; they stay empty when the operand already has the output shape.
struct Broadcast {
  Shape out;
  std::vector<Index> a_idx;
  std::vector<Index> b_idx;
};

std::vector<Index> source_offsets(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t pad = rank - in.size();
  std::vector<Index> in_stride(rank, 0);
  Index stride = 1;
  for (std::size_t ax = rank; ax-- > pad;) {
    const Index d = in[ax - pad];
    in_stride[ax] = d == 1 ? 0 : stride;
    stride *= d;
  }
  const Index n = numel(out);
  std::vector<Index> offsets(static_cast<std::size_t>(n));
  std::vector<Index> counter(rank, 0);
  Index off = 0;
  for (Index i = 0; i < n; ++i) {
    offsets[static_cast<std::size_t>(i)] = off;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        off += in_stride[ax];
        break;
      }
      off -= in_stride[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return offsets;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcastable");
    }
    bc.out[i] = std::max(da, db);
  }
  if (a != bc.out) bc.a_idx = source_offsets(bc.out, a);
  if (b != bc.out) bc.b_idx = source_offsets(bc.out, b);
  return bc;
}

Buffer expand(const Buffer& src, const std::vector<Index>& idx) {
  if (idx.empty()) return src;
  Buffer out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = src[idx[i]];
  return out;
}

Buffer reduce_to(const Buffer& g, const std::vector<Index>& idx, Index size) {
  if (idx.empty()) return g;
  Buffer out = Buffer::Zero(size);
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += g[static_cast<Index>(i)];
  return out;
}

Tensor unary(const Tensor& x, Buffer value, std::function<Buffer(const Buffer&)> dx) {
  Shape shape = x.shape();
  return detail_make_result(std::move(shape), std::move(value), {x},
                            [x, dx = std::move(dx)](const Buffer& g) {
                              detail_accumulate(x, dx(g));
                            });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const Index m = a.dim(0);
  const Index p = a.dim(1);
  const Index n = b.dim(1);
  Buffer out(m * n);
  as_matrix(out, m, n).noalias() = a.matrix() * b.matrix();
  return detail_make_result({m, n}, std::move(out), {a, b}, [a, b, m, p, n](const Buffer& g) {
    const ConstMap gm = as_matrix(g, m, n);
    if (a.requires_grad()) {
      Buffer da(m * p);
      as_matrix(da, m, p).noalias() = gm * b.matrix().transpose();
      detail_accumulate(a, std::move(da));
    }
    if (b.requires_grad()) {
      Buffer db(p * n);
      as_matrix(db, p, n).noalias() = a.matrix().transpose() * gm;
      detail_accumulate(b, std::move(db));
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const Index rows = x.dim(0);
  const Index in = x.dim(1);
  const Index outd = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  if (bias.defined() && bias.numel() != outd) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  Buffer out(rows * outd);
  auto om = as_matrix(out, rows, outd);
  om.noalias() = x.matrix() * w.matrix().transpose();
  if (bias.defined()) om.rowwise() += bias.data().transpose();
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail_make_result({rows, outd}, std::move(out), std::move(inputs),
                            [x, w, bias, rows, in, outd](const Buffer& g) {
                              const ConstMap gm = as_matrix(g, rows, outd);
                              if (x.requires_grad()) {
                                Buffer dx(rows * in);
                                as_matrix(dx, rows, in).noalias() = gm * w.matrix();
                                detail_accumulate(x, std::move(dx));
                              }
                              if (w.requires_grad()) {
                                Buffer dw(outd * in);
                                as_matrix(dw, outd, in).noalias() = gm.transpose() * x.matrix();
                                detail_accumulate(w, std::move(dw));
                              }
                              if (bias.requires_grad()) {
                                detail_accumulate(bias, gm.colwise().sum().transpose());
                              }
                            });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), "add"));
  Buffer out = expand(a.data(), bc->a_idx) + expand(b.data(), bc->b_idx);
  return detail_make_result(bc->out, std::move(out), {a, b}, [a, b, bc](const Buffer& g) {
    if (a.requires_grad()) detail_accumulate(a, reduce_to(g, bc->a_idx, a.numel()));
    if (b.requires_grad()) detail_accumulate(b, reduce_to(g, bc->b_idx, b.numel()));
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), "sub"));
  Buffer out = expand(a.data(), bc->a_idx) - expand(b.data(), bc->b_idx);
  return detail_make_result(bc->out, std::move(out), {a, b}, [a, b, bc](const Buffer& g) {
    if (a.requires_grad()) detail_accumulate(a, reduce_to(g, bc->a_idx, a.numel()));
    if (b.requires_grad()) detail_accumulate(b, reduce_to(-g, bc->b_idx, b.numel()));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), "mul"));
  Buffer out = expand(a.data(), bc->a_idx).cwiseProduct(expand(b.data(), bc->b_idx));
  return detail_make_result(bc->out, std::move(out), {a, b}, [a, b, bc](const Buffer& g) {
    if (a.requires_grad()) {
      Buffer ga = g.cwiseProduct(expand(b.data(), bc->b_idx));
      detail_accumulate(a, reduce_to(ga, bc->a_idx, a.numel()));
    }
    if (b.requires_grad()) {
      Buffer gb = g.cwiseProduct(expand(a.data(), bc->a_idx));
      detail_accumulate(b, reduce_to(gb, bc->b_idx, b.numel()));
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, x.data() * s, [s](const Buffer& g) -> Buffer { return g * s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, x.data().array() + s, [](const Buffer& g) { return g; });
}

Tensor tanh(const Tensor& x) {
  auto y = std::make_shared<const Buffer>(x.data().array().tanh().matrix());
  return unary(x, *y, [y](const Buffer& g) -> Buffer {
    return (g.array() * (1.0 - y->array().square())).matrix();
  });
}

Tensor gelu(const Tensor& x) {
  const Buffer& xv = x.data();
  auto cdf = std::make_shared<Buffer>(xv.size());
  Buffer out(xv.size());
  for (Index i = 0; i < xv.size(); ++i) {
    (*cdf)[i] = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
    out[i] = xv[i] * (*cdf)[i];
  }
  return unary(x, std::move(out), [x, cdf](const Buffer& g) {
    const Buffer& xv = x.data();
    Buffer dx(xv.size());
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (Index i = 0; i < xv.size(); ++i) {
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
      dx[i] = g[i] * ((*cdf)[i] + xv[i] * pdf);
    }
    return dx;
  });
}

Tensor sum(const Tensor& x) {
  const Index n = x.numel();
  return detail_make_result({}, Buffer::Constant(1, x.data().sum()), {x},
                            [x, n](const Buffer& g) {
                              detail_accumulate(x, Buffer::Constant(n, g[0]));
                            });
}

Tensor mean(const Tensor& x) {
  const Index n = x.numel();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("mean_axis: axis out of range for " + to_string(s));
  const Index len = s[axis];
  if (len == 0) throw DimensionError("mean_axis over empty axis");
  Index outer = 1;
  Index inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer out = Buffer::Zero(outer * inner);
  const Buffer& xv = x.data();
  for (Index o = 0; o < outer; ++o) {
    for (Index l = 0; l < len; ++l) {
      out.segment(o * inner, inner) += xv.segment((o * len + l) * inner, inner);
    }
  }
  out /= static_cast<double>(len);
  return detail_make_result(std::move(out_shape), std::move(out), {x},
                            [x, outer, inner, len](const Buffer& g) {
                              Buffer dx(outer * len * inner);
                              for (Index o = 0; o < outer; ++o) {
                                for (Index l = 0; l < len; ++l) {
                                  dx.segment((o * len + l) * inner, inner) =
                                      g.segment(o * inner, inner) / static_cast<double>(len);
                                }
                              }
                              detail_accumulate(x, std::move(dx));
                            });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  }
  return detail_make_result(std::move(shape), x.data(), {x},
                            [x](const Buffer& g) { detail_accumulate(x, g); });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: shape " + to_string(s) + " incompatible with " +
                           to_string(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  Index outer = 1;
  Index inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const Index out_row = out_shape[axis] * inner;
  Buffer out(outer * out_row);
  std::vector<Index> widths;
  Index col = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o) out.segment(o * out_row + col, w) = p.data().segment(o * w, w);
    widths.push_back(w);
    col += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return detail_make_result(
      std::move(out_shape), std::move(out), inputs,
      [inputs, widths, outer, out_row](const Buffer& g) {
        Index c = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          const Index w = widths[k];
          if (inputs[k].requires_grad()) {
            Buffer d(outer * w);
            for (Index o = 0; o < outer; ++o) d.segment(o * w, w) = g.segment(o * out_row + c, w);
            detail_accumulate(inputs[k], std::move(d));
          }
          c += w;
        }
      });
}

Tensor slice(const Tensor& x, std::size_t axis, Index start, Index length) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + to_string(s));
  if (start < 0 || length < 0 || start + length > s[axis]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for " + to_string(s));
  }
  Index outer = 1;
  Index inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const Index src_row = s[axis] * inner;
  const Index dst_row = length * inner;
  Buffer out(outer * dst_row);
  for (Index o = 0; o < outer; ++o) {
    out.segment(o * dst_row, dst_row) = x.data().segment(o * src_row + start * inner, dst_row);
  }
  Shape out_shape = s;
  out_shape[axis] = length;
  return detail_make_result(std::move(out_shape), std::move(out), {x},
                            [x, outer, inner, src_row, dst_row, start](const Buffer& g) {
                              Buffer d = Buffer::Zero(outer * src_row);
                              for (Index o = 0; o < outer; ++o) {
                                d.segment(o * src_row + start * inner, dst_row) =
                                    g.segment(o * dst_row, dst_row);
                              }
                              detail_accumulate(x, std::move(d));
                            });
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<Index>> indices,
              Shape out_shape) {
  if (numel(out_shape) != static_cast<Index>(indices->size())) {
    throw DimensionError("gather: " + std::to_string(indices->size()) +
                         " indices for output shape " + to_string(out_shape));
  }
  const Index n = x.numel();
  Buffer out(static_cast<Index>(indices->size()));
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const Index src = (*indices)[i];
    if (src < 0 || src >= n) throw DimensionError("gather: index out of range");
    out[static_cast<Index>(i)] = x.data()[src];
  }
  return detail_make_result(std::move(out_shape), std::move(out), {x},
                            [x, indices, n](const Buffer& g) {
                              Buffer d = Buffer::Zero(n);
                              for (std::size_t i = 0; i < indices->size(); ++i) {
                                d[(*indices)[i]] += g[static_cast<Index>(i)];
                              }
                              detail_accumulate(x, std::move(d));
                            });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on scalar");
  const Index cols = x.shape().back();
  if (cols == 0) throw DimensionError("layer_norm over empty axis");
  const Index rows = x.numel() / cols;
  if ((gamma.defined() && gamma.numel() != cols) || (beta.defined() && beta.numel() != cols)) {
    throw DimensionError("layer_norm: affine parameters do not match last axis of " +
                         to_string(x.shape()));
  }
  auto xhat = std::make_shared<MatrixRM>(rows, cols);
  auto rstd = std::make_shared<Buffer>(rows);
  const ConstMap xm = as_matrix(x.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    (*rstd)[r] = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * (*rstd)[r];
  }
  Buffer out(rows * cols);
  auto om = as_matrix(out, rows, cols);
  om = *xhat;
  if (gamma.defined()) om.array().rowwise() *= gamma.data().transpose().array();
  if (beta.defined()) om.rowwise() += beta.data().transpose();
  std::vector<Tensor> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  return detail_make_result(
      x.shape(), std::move(out), std::move(inputs),
      [x, gamma, beta, xhat, rstd, rows, cols](const Buffer& g) {
        const ConstMap gm = as_matrix(g, rows, cols);
        if (gamma.requires_grad()) {
          detail_accumulate(gamma, gm.cwiseProduct(*xhat).colwise().sum().transpose());
        }
        if (beta.requires_grad()) detail_accumulate(beta, gm.colwise().sum().transpose());
        if (x.requires_grad()) {
          MatrixRM dxhat = gm;
          if (gamma.defined()) dxhat.array().rowwise() *= gamma.data().transpose().array();
          Buffer dx(rows * cols);
          auto dm = as_matrix(dx, rows, cols);
          for (Index r = 0; r < rows; ++r) {
            const double m1 = dxhat.row(r).mean();
            const double m2 = dxhat.row(r).cwiseProduct(xhat->row(r)).mean();
            dm.row(r) = (*rstd)[r] * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
          }
          detail_accumulate(x, std::move(dx));
        }
      });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax on scalar");
  const Index cols = x.shape().back();
  if (cols == 0) throw DimensionError("softmax over empty axis");
  const Index rows = x.numel() / cols;
  auto y = std::make_shared<Buffer>(x.numel());
  auto ym = as_matrix(*y, rows, cols);
  const ConstMap xm = as_matrix(x.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const double mx = xm.row(r).maxCoeff();
    ym.row(r) = (xm.row(r).array() - mx).exp();
    ym.row(r) /= ym.row(r).sum();
  }
  return detail_make_result(x.shape(), *y, {x}, [x, y, rows, cols](const Buffer& g) {
    const ConstMap ym = as_matrix(static_cast<const Buffer&>(*y), rows, cols);
    const ConstMap gm = as_matrix(g, rows, cols);
    Buffer dx(rows * cols);
    auto dm = as_matrix(dx, rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const double dot = gm.row(r).dot(ym.row(r));
      dm.row(r) = ym.row(r).array() * (gm.row(r).array() - dot);
    }
    detail_accumulate(x, std::move(dx));
  });
}

Tensor dropout(const Tensor& x, double p, bool training, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  // Four 16-bit lanes per draw; p is quantized to a multiple of 2^-16 and the
  // keep scale uses the quantized value, so E[mask] = 1 exactly.
  const std::uint64_t threshold = static_cast<std::uint64_t>(std::llround(p * 65536.0));
  const double keep = 1.0 / (1.0 - static_cast<double>(threshold) / 65536.0);
  auto mask = std::make_shared<Buffer>(x.numel());
  const Index n = x.numel();
  for (Index i = 0; i < n; i += 4) {
    std::uint64_t bits = rng.next_u64();
    for (Index j = i; j < std::min(i + 4, n); ++j, bits >>= 16) {
      (*mask)[j] = (bits & 0xFFFF) < threshold ? 0.0 : keep;
    }
  }
  return unary(x, x.data().cwiseProduct(*mask),
               [mask](const Buffer& g) -> Buffer { return g.cwiseProduct(*mask); });
}

Tensor conv_lag(const Tensor& input, const Tensor& kernel) {
  require_rank(input, 2, "conv_lag");
  require_rank(kernel, 3, "conv_lag");
  const Index ch = input.dim(0);
  const Index len = input.dim(1);
  const Index co = kernel.dim(0);
  const Index k = kernel.dim(2);
  if (kernel.dim(1) != ch) {
    throw DimensionError("conv_lag: kernel " + to_string(kernel.shape()) +
                         " does not match input " + to_string(input.shape()));
  }
  if (k > len) {
    throw DimensionError("conv_lag: kernel too long (k=" + std::to_string(k) +
                         " > L=" + std::to_string(len) + ")");
  }
  const Buffer& in = input.data();
  const Buffer& kw = kernel.data();
  Buffer out = Buffer::Zero(co * len);
  for (Index o = 0; o < co; ++o) {
    for (Index c = 0; c < ch; ++c) {
      for (Index j = 0; j < k; ++j) {
        const double w = kw[(o * ch + c) * k + j];
        const Index shift = j - (k - 1);
        for (Index t = std::max<Index>(0, -shift); t < len; ++t) {
          out[o * len + t] += w * in[c * len + t + shift];
        }
      }
    }
  }
  return detail_make_result({co, len}, std::move(out), {input, kernel},
                            [input, kernel, ch, len, co, k](const Buffer& g) {
                              const Buffer& in = input.data();
                              const Buffer& kw = kernel.data();
                              Buffer din = Buffer::Zero(ch * len);
                              Buffer dk = Buffer::Zero(co * ch * k);
                              for (Index o = 0; o < co; ++o) {
                                for (Index c = 0; c < ch; ++c) {
                                  for (Index j = 0; j < k; ++j) {
                                    const Index kidx = (o * ch + c) * k + j;
                                    const Index shift = j - (k - 1);
                                    double acc = 0.0;
                                    for (Index t = std::max<Index>(0, -shift); t < len; ++t) {
                                      const double go = g[o * len + t];
                                      acc += go * in[c * len + t + shift];
                                      din[c * len + t + shift] += go * kw[kidx];
                                    }
                                    dk[kidx] += acc;
                                  }
                                }
                              }
                              if (input.requires_grad()) detail_accumulate(input, std::move(din));
                              if (kernel.requires_grad()) detail_accumulate(kernel, std::move(dk));
                            });
}

Tensor window_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& bias_table,
                             std::shared_ptr<const WindowPartition> partition, Index heads) {
  require_rank(q, 2, "window_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("window_attention: q/k/v shapes differ");
  }
  const Index tokens = q.dim(0);
  const Index width = q.dim(1);
  if (heads <= 0 || width % heads != 0) {
    throw DimensionError("window_attention: width " + std::to_string(width) +
                         " not divisible into " + std::to_string(heads) + " heads");
  }
  const Index hd = width / heads;
  const Shape expect_bias{partition->bands, partition->relative_positions, heads};
  if (bias_table.shape() != expect_bias) {
    throw DimensionError("window_attention: bias table " + to_string(bias_table.shape()) +
                         " expected " + to_string(expect_bias));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const ConstMap qm = q.matrix();
  const ConstMap km = k.matrix();
  const ConstMap vm = v.matrix();
  const Buffer& bias = bias_table.data();
  const Index rel = partition->relative_positions;

  // Attention probabilities per (window, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<MatrixRM>>();
  probs->reserve(partition->windows.size() * static_cast<std::size_t>(heads));
  Buffer out = Buffer::Zero(tokens * width);
  auto om = as_matrix(out, tokens, width);
  for (const auto& win : partition->windows) {
    const Index n = static_cast<Index>(win.tokens.size());
    MatrixRM qw(n, width), kw(n, width), vw(n, width);
    for (Index i = 0; i < n; ++i) {
      qw.row(i) = qm.row(win.tokens[i]);
      kw.row(i) = km.row(win.tokens[i]);
      vw.row(i) = vm.row(win.tokens[i]);
    }
    for (Index h = 0; h < heads; ++h) {
      MatrixRM s(n, n);
      s.noalias() = qw.middleCols(h * hd, hd) * kw.middleCols(h * hd, hd).transpose();
      s *= inv_sqrt;
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
          s(i, j) += bias[(win.band * rel + win.relative[i * n + j]) * heads + h];
        }
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      MatrixRM o(n, hd);
      o.noalias() = s * vw.middleCols(h * hd, hd);
      for (Index i = 0; i < n; ++i) om.row(win.tokens[i]).segment(h * hd, hd) = o.row(i);
      probs->push_back(std::move(s));
    }
  }

  return detail_make_result(
      {tokens, width}, std::move(out), {q, k, v, bias_table},
      [q, k, v, bias_table, partition, probs, heads, hd, tokens, width, inv_sqrt,
       rel](const Buffer& g) {
        const ConstMap gm = as_matrix(g, tokens, width);
        const ConstMap qm = q.matrix();
        const ConstMap km = k.matrix();
        const ConstMap vm = v.matrix();
        Buffer dq = Buffer::Zero(tokens * width);
        Buffer dk = Buffer::Zero(tokens * width);
        Buffer dv = Buffer::Zero(tokens * width);
        Buffer dbias = Buffer::Zero(bias_table.numel());
        auto dqm = as_matrix(dq, tokens, width);
        auto dkm = as_matrix(dk, tokens, width);
        auto dvm = as_matrix(dv, tokens, width);
        std::size_t pi = 0;
        for (const auto& win : partition->windows) {
          const Index n = static_cast<Index>(win.tokens.size());
          MatrixRM qw(n, width), kw(n, width), vw(n, width), gw(n, width);
          for (Index i = 0; i < n; ++i) {
            qw.row(i) = qm.row(win.tokens[i]);
            kw.row(i) = km.row(win.tokens[i]);
            vw.row(i) = vm.row(win.tokens[i]);
            gw.row(i) = gm.row(win.tokens[i]);
          }
          MatrixRM dqw(n, width), dkw(n, width), dvw(n, width);
          for (Index h = 0; h < heads; ++h, ++pi) {
            const MatrixRM& p = (*probs)[pi];
            const auto go = gw.middleCols(h * hd, hd);
            dvw.middleCols(h * hd, hd).noalias() = p.transpose() * go;
            MatrixRM dp(n, n);
            dp.noalias() = go * vw.middleCols(h * hd, hd).transpose();
            for (Index i = 0; i < n; ++i) {
              const double dot = dp.row(i).dot(p.row(i));
              dp.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
              for (Index j = 0; j < n; ++j) {
                dbias[(win.band * rel + win.relative[i * n + j]) * heads + h] += dp(i, j);
              }
            }
            dqw.middleCols(h * hd, hd).noalias() = inv_sqrt * (dp * kw.middleCols(h * hd, hd));
            dkw.middleCols(h * hd, hd).noalias() =
                inv_sqrt * (dp.transpose() * qw.middleCols(h * hd, hd));
          }
          for (Index i = 0; i < n; ++i) {
            dqm.row(win.tokens[i]) += dqw.row(i);
            dkm.row(win.tokens[i]) += dkw.row(i);
            dvm.row(win.tokens[i]) += dvw.row(i);
          }
        }
        if (q.requires_grad()) detail_accumulate(q, std::move(dq));
        if (k.requires_grad()) detail_accumulate(k, std::move(dk));
        if (v.requires_grad()) detail_accumulate(v, std::move(dv));
        if (bias_table.requires_grad()) detail_accumulate(bias_table, std::move(dbias));
      });
}

}  // namespace tele
