// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "chordprompt/tape.hpp"
#include "kernels.hpp"

namespace chordprompt {

namespace {

void require_matrix(const Var& v, const char* op) {
  CP_REQUIRE(v.value().rank() == 2,
             std::string(op) + ": expected rank-2 input, got " + shape_str(v.shape()));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  CP_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                         " vs " + shape_str(b.shape()));
}

}  // namespace

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  CP_REQUIRE(b.value().rows() == k, "matmul: inner dimensions differ " + shape_str(a.shape()) +
                                        " x " + shape_str(b.shape()));
  Tensor out({m, n});
  detail::gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n, false);
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ia))
      detail::gemm_nt(g.ptr(), t.value(ib).ptr(), t.grad_accum(ia).ptr(), m, n, k, true);
    if (t.needs_grad(ib))
      detail::gemm_tn_acc(t.value(ia).ptr(), g.ptr(), t.grad_accum(ib).ptr(), k, m, n);
  });
}

Var matmul_nt(Var a, Var b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  CP_REQUIRE(b.value().cols() == k, "matmul_nt: inner dimensions differ " + shape_str(a.shape()) +
                                        " x " + shape_str(b.shape()) + "^T");
  Tensor out({m, n});
  detail::gemm_nt(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n, false);
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ia))
      detail::gemm_nn(g.ptr(), t.value(ib).ptr(), t.grad_accum(ia).ptr(), m, n, k, true);
    if (t.needs_grad(ib))
      detail::gemm_tn_acc(g.ptr(), t.value(ia).ptr(), t.grad_accum(ib).ptr(), n, m, k);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t idx : {ia, ib}) {
      if (!t.needs_grad(idx)) continue;
      Tensor& ga = t.grad_accum(idx);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_accum(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_accum(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  const std::size_t ia = a.index();
  return a.tape()->record(std::move(out), {a}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_accum(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_row(Var x, Var bias) {
  require_matrix(x, "add_row");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  CP_REQUIRE(bias.value().size() == cols, "add_row: bias length " +
                                              std::to_string(bias.value().size()) +
                                              " does not match width " + std::to_string(cols));
  Tensor out = x.value();
  const double* b = bias.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.ptr() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] += b[c];
  }
  const std::size_t ix = x.index(), ib = bias.index();
  return x.tape()->record(std::move(out), {x, bias}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ix)) {
      Tensor& gx = t.grad_accum(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_accum(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

Var add_tiled(Var x, Var block, std::size_t batch) {
  require_matrix(x, "add_tiled");
  require_matrix(block, "add_tiled");
  const std::size_t seq = block.value().rows(), cols = block.value().cols();
  CP_REQUIRE(x.value().cols() == cols && x.value().rows() == batch * seq,
             "add_tiled: " + shape_str(x.shape()) + " is not " + std::to_string(batch) +
                 " blocks of " + shape_str(block.shape()));
  Tensor out = x.value();
  const std::size_t blk = seq * cols;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < blk; ++i) out[b * blk + i] += block.value()[i];
  const std::size_t ix = x.index(), ik = block.index();
  return x.tape()->record(std::move(out), {x, block}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ix)) {
      Tensor& gx = t.grad_accum(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ik)) {
      Tensor& gk = t.grad_accum(ik);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < blk; ++i) gk[i] += g[b * blk + i];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  CP_REQUIRE(gain.value().size() == cols && bias.value().size() == cols,
             "layer_norm: gain/bias width mismatch");
  auto xhat = std::make_shared<std::vector<double>>(rows * cols);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out({rows, cols});
  const double* g = gain.value().ptr();
  const double* b = bias.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().ptr() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* hr = xhat->data() + r * cols;
    double* o = out.ptr() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      hr[c] = (xr[c] - mean) * rs;
      o[c] = hr[c] * g[c] + b[c];
    }
  }
  const std::size_t ix = x.index(), ig = gain.index(), ib = bias.index();
  return x.tape()->record(std::move(out), {x, gain, bias}, [=](Tape& t, std::size_t self) {
    const Tensor& gr = t.grad(self);
    const double* gv = t.value(ig).ptr();
    if (t.needs_grad(ix)) {
      Tensor& gx = t.grad_accum(ix);
      std::vector<double> dh(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* hr = xhat->data() + r * cols;
        const double* gro = gr.ptr() + r * cols;
        double mean_dh = 0.0, mean_dhh = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          dh[c] = gro[c] * gv[c];
          mean_dh += dh[c];
          mean_dhh += dh[c] * hr[c];
        }
        mean_dh /= static_cast<double>(cols);
        mean_dhh /= static_cast<double>(cols);
        double* gxr = gx.ptr() + r * cols;
        for (std::size_t c = 0; c < cols; ++c)
          gxr[c] += (*rstd)[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
      }
    }
    if (t.needs_grad(ig)) {
      Tensor& gg = t.grad_accum(ig);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gg[c] += gr[r * cols + c] * (*xhat)[r * cols + c];
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_accum(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += gr[r * cols + c];
    }
  });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Tensor out = x.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  const std::size_t ix = x.index();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    Tensor& gx = t.grad_accum(ix);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.index();
  return x.tape()->record(Tensor::scalar(s), {x}, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad_accum(ix).data()) v += g;
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.index();
  return x.tape()->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_accum(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t rows = table.value().rows(), cols = table.value().cols();
  Tensor out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    CP_REQUIRE(ids[i] < rows, "gather_rows: index " + std::to_string(ids[i]) +
                                  " out of range for " + std::to_string(rows) + " rows");
    std::copy_n(table.value().ptr() + ids[i] * cols, cols, out.ptr() + i * cols);
  }
  const std::size_t it = table.index();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad_accum(it);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) gt[idv[i] * cols + c] += g[i * cols + c];
  });
}

Var concat_rows(std::span<const Var> parts) {
  CP_REQUIRE(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_matrix(p, "concat_rows");
    CP_REQUIRE(p.value().cols() == cols, "concat_rows: width mismatch");
    total += p.value().rows();
  }
  Tensor out({total, cols});
  std::vector<std::size_t> offsets, idx;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().ptr(), p.value().size(), out.ptr() + off);
    offsets.push_back(off);
    idx.push_back(p.index());
    off += p.value().size();
  }
  return parts[0].tape()->record(std::move(out), parts, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (!t.needs_grad(idx[k])) continue;
      Tensor& gp = t.grad_accum(idx[k]);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
    }
  });
}

Var splice_rows(Var x, std::size_t batch, std::size_t seq, Var rows, bool front) {
  require_matrix(x, "splice_rows");
  require_matrix(rows, "splice_rows");
  const std::size_t cols = x.value().cols(), np = rows.value().rows();
  CP_REQUIRE(x.value().rows() == batch * seq, "splice_rows: input is not batch*seq rows");
  CP_REQUIRE(rows.value().cols() == cols,
             "splice_rows: inserted rows have width " + std::to_string(rows.value().cols()) +
                 ", expected " + std::to_string(cols));
  const std::size_t out_seq = seq + np;
  const std::size_t xoff = front ? np : 0, roff = front ? 0 : seq;
  Tensor out({batch * out_seq, cols});
  for (std::size_t b = 0; b < batch; ++b) {
    double* o = out.ptr() + b * out_seq * cols;
    std::copy_n(x.value().ptr() + b * seq * cols, seq * cols, o + xoff * cols);
    std::copy_n(rows.value().ptr(), np * cols, o + roff * cols);
  }
  const std::size_t ix = x.index(), ir = rows.index();
  return x.tape()->record(std::move(out), {x, rows}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(ix)) {
      Tensor& gx = t.grad_accum(ix);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* gs = g.ptr() + (b * out_seq + xoff) * cols;
        double* gd = gx.ptr() + b * seq * cols;
        for (std::size_t i = 0; i < seq * cols; ++i) gd[i] += gs[i];
      }
    }
    if (t.needs_grad(ir)) {
      Tensor& gr = t.grad_accum(ir);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* gs = g.ptr() + (b * out_seq + roff) * cols;
        for (std::size_t i = 0; i < np * cols; ++i) gr[i] += gs[i];
      }
    }
  });
}

Var l2_normalize_rows(Var x) {
  require_matrix(x, "l2_normalize_rows");
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  auto norms = std::make_shared<std::vector<double>>(rows);
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += out(r, c) * out(r, c);
    const double n = std::sqrt(s);
    if (!(n > 0.0)) throw DegenerateInput("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    (*norms)[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out(r, c) /= n;
  }
  const std::size_t ix = x.index();
  Tape* tape = x.tape();
  const std::size_t self_idx = tape->size();
  return tape->record(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self_idx);
    Tensor& gx = t.grad_accum(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y(r, c) * g(r, c);
      for (std::size_t c = 0; c < cols; ++c) gx(r, c) += (g(r, c) - y(r, c) * dot) / (*norms)[r];
    }
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
  CP_REQUIRE(labels.size() == rows, "cross_entropy: " + std::to_string(labels.size()) +
                                        " labels for " + std::to_string(rows) + " rows");
  CP_REQUIRE(rows > 0, "cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(rows * cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    CP_REQUIRE(labels[r] < cols, "cross_entropy: label " + std::to_string(labels[r]) +
                                     " out of range for " + std::to_string(cols) + " classes");
    const auto row = logits.value().row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] /= z;
    total += -(row[labels[r]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(rows);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.index();
  return logits.tape()->record(Tensor::scalar(total * inv), {logits},
                               [=](Tape& t, std::size_t self) {
                                 const double g = t.grad(self)[0] * inv;
                                 Tensor& gl = t.grad_accum(il);
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < cols; ++c)
                                     gl(r, c) += g * ((*probs)[r * cols + c] -
                                                      (c == lab[r] ? 1.0 : 0.0));
                               });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::vector<Tensor>* probs_out) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  require_matrix(q, "attention");
  const std::size_t cols = q.value().cols();
  CP_REQUIRE(q.value().rows() == batch * seq, "attention: rows != batch*seq");
  CP_REQUIRE(heads > 0 && cols % heads == 0, "attention: width not divisible by heads");
  const std::size_t dh = cols / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<Tensor>(Shape{batch, heads, seq, seq});
  Tensor out({batch * seq, cols});
  const double* qp = q.value().ptr();
  const double* kp = k.value().ptr();
  const double* vp = v.value().ptr();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->ptr() + ((b * heads + h) * seq) * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qp + (b * seq + i) * cols + h * dh;
        double* Pi = P + i * seq;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = kp + (b * seq + j) * cols + h * dh;
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          Pi[j] = s * sc;
          mx = std::max(mx, Pi[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          Pi[j] = std::exp(Pi[j] - mx);
          z += Pi[j];
        }
        for (std::size_t j = 0; j < seq; ++j) Pi[j] /= z;
        double* oi = out.ptr() + (b * seq + i) * cols + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* vj = vp + (b * seq + j) * cols + h * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += Pi[j] * vj[d];
        }
      }
    }
  }
  if (probs_out) probs_out->push_back(*probs);

  const std::size_t iq = q.index(), ik = k.index(), iv = v.index();
  return q.tape()->record(std::move(out), {q, k, v}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const double* qv = t.value(iq).ptr();
    const double* kv = t.value(ik).ptr();
    const double* vv = t.value(iv).ptr();
    const bool need_q = t.needs_grad(iq), need_k = t.needs_grad(ik), need_v = t.needs_grad(iv);
    double* gq = need_q ? t.grad_accum(iq).ptr() : nullptr;
    double* gk = need_k ? t.grad_accum(ik).ptr() : nullptr;
    double* gv = need_v ? t.grad_accum(iv).ptr() : nullptr;
    std::vector<double> dP(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs->ptr() + ((b * heads + h) * seq) * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const double* gi = g.ptr() + (b * seq + i) * cols + h * dh;
          const double* Pi = P + i * seq;
          if (gv) {
            for (std::size_t j = 0; j < seq; ++j) {
              double* gvj = gv + (b * seq + j) * cols + h * dh;
              for (std::size_t d = 0; d < dh; ++d) gvj[d] += Pi[j] * gi[d];
            }
          }
          if (!gq && !gk) continue;
          double row_dot = 0.0;
          for (std::size_t j = 0; j < seq; ++j) {
            const double* vj = vv + (b * seq + j) * cols + h * dh;
            double s = 0.0;
            for (std::size_t d = 0; d < dh; ++d) s += gi[d] * vj[d];
            dP[j] = s;
            row_dot += Pi[j] * s;
          }
          const double* qi = qv + (b * seq + i) * cols + h * dh;
          double* gqi = gq ? gq + (b * seq + i) * cols + h * dh : nullptr;
          for (std::size_t j = 0; j < seq; ++j) {
            const double ds = Pi[j] * (dP[j] - row_dot) * sc;
            const double* kj = kv + (b * seq + j) * cols + h * dh;
            if (gqi)
              for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
            if (gk) {
              double* gkj = gk + (b * seq + j) * cols + h * dh;
              for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
            }
          }
        }
      }
    }
  });
}

}  // namespace chordprompt
