#include "promptlab/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "promptlab/core/error.hpp"
#include "promptlab/core/kernels.hpp"

namespace promptlab::core {

namespace {

bool wants_grad(Tape* tape, const Tensor& a) {
  return tape != nullptr && a.requires_grad();
}

bool wants_grad(Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                     t.shape_str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

}  // namespace

Tensor add(Tape* tape, Tensor a, Tensor b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      const double* g = out.grad();
      const size_t m = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad();
        for (size_t i = 0; i < m; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        for (size_t i = 0; i < m; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add_rowvec(Tape* tape, Tensor x, Tensor v) {
  require_rank2(x, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError("add_rowvec: vector " + v.shape_str() +
                     " does not match row width of " + x.shape_str());
  }
  const int r = x.dim(0), c = x.dim(1);
  Tensor out({r, c});
  const double* px = x.data();
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      po[static_cast<size_t>(i) * c + j] = px[static_cast<size_t>(i) * c + j] + pv[j];
    }
  }
  if (wants_grad(tape, x, v)) {
    out.set_requires_grad(true);
    tape->record([x, v, out, r, c]() mutable {
      const double* g = out.grad();
      if (x.requires_grad()) {
        double* gx = x.grad();
        const size_t n = static_cast<size_t>(r) * c;
        for (size_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (v.requires_grad()) {
        double* gv = v.grad();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gv[j] += g[static_cast<size_t>(i) * c + j];
        }
      }
    });
  }
  return out;
}

Tensor mul(Tape* tape, Tensor a, Tensor b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      const double* g = out.grad();
      const size_t m = out.size();
      if (a.requires_grad()) {
        double* ga = a.grad();
        const double* pb2 = b.data();
        for (size_t i = 0; i < m; ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        const double* pa2 = a.data();
        for (size_t i = 0; i < m; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tape, Tensor a, double factor) {
  Tensor out(a.shape());
  const size_t n = out.size();
  const double* pa = a.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] * factor;
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, factor]() mutable {
      const double* g = out.grad();
      double* ga = a.grad();
      const size_t m = out.size();
      for (size_t i = 0; i < m; ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor matmul(Tape* tape, Tensor a, Tensor b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  kernels::matmul(out.data(), a.data(), b.data(), m, k, n, false);
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      const double* g = out.grad();
      if (a.requires_grad()) {
        // dA = dC * B^T
        kernels::matmul_nt(a.grad(), g, b.data(), m, n, k, true);
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        kernels::matmul_tn(b.grad(), a.data(), g, m, k, n, true);
      }
    });
  }
  return out;
}

Tensor transpose(Tape* tape, Tensor a) {
  require_rank2(a, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  const double* pa = a.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      po[static_cast<size_t>(j) * r + i] = pa[static_cast<size_t>(i) * c + j];
    }
  }
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, r, c]() mutable {
      const double* g = out.grad();
      double* ga = a.grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
        }
      }
    });
  }
  return out;
}

Tensor reshape(Tape* tape, Tensor a, std::vector<int> new_shape) {
  if (shape_size(new_shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + a.shape_str() + " as " +
                     std::to_string(shape_size(new_shape)) + " elements");
  }
  Tensor out = Tensor::from_data(std::move(new_shape),
                                 std::vector<double>(a.data(), a.data() + a.size()));
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      const double* g = out.grad();
      double* ga = a.grad();
      const size_t n = a.size();
      for (size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor softmax_rows(Tape* tape, Tensor x) {
  if (x.rank() < 1) throw ShapeError("softmax_rows: rank-0 input");
  const int c = x.dim(x.rank() - 1);
  const size_t rows = x.size() / static_cast<size_t>(c);
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double* orow = po + r * c;
    double mx = row[0];
    for (int j = 0; j < c; ++j) {
      if (!std::isfinite(row[j])) {
        throw NumericError("softmax_rows: non-finite input");
      }
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= sum;
  }
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, rows, c]() mutable {
      const double* y = out.data();
      const double* g = out.grad();
      double* gx = x.grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* yr = y + r * c;
        const double* gr = g + r * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
        double* gxr = gx + r * c;
        for (int j = 0; j < c; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tape, Tensor x, Tensor gamma, Tensor beta,
                  double eps) {
  require_rank2(x, "layer_norm");
  const int r = x.dim(0), c = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 ||
      beta.dim(0) != c) {
    throw ShapeError("layer_norm: affine params must be rank-1 [" +
                     std::to_string(c) + "]");
  }
  Tensor out({r, c});
  // Saved for backward: per-row inverse std and the normalized values.
  Tensor inv_std({r});
  Tensor normed({r, c});
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  double* pis = inv_std.data();
  double* pn = normed.data();
  for (int i = 0; i < r; ++i) {
    const double* row = px + static_cast<size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    pis[i] = is;
    for (int j = 0; j < c; ++j) {
      const double nv = (row[j] - mean) * is;
      pn[static_cast<size_t>(i) * c + j] = nv;
      po[static_cast<size_t>(i) * c + j] = nv * pg[j] + pb[j];
    }
  }
  if (tape && (x.requires_grad() || gamma.requires_grad() ||
               beta.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([x, gamma, beta, out, inv_std, normed, r, c]() mutable {
      const double* g = out.grad();
      const double* pn2 = normed.data();
      const double* pg2 = gamma.data();
      const double* pis2 = inv_std.data();
      if (gamma.requires_grad()) {
        double* gg = gamma.grad();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) {
            gg[j] += g[static_cast<size_t>(i) * c + j] *
                     pn2[static_cast<size_t>(i) * c + j];
          }
        }
      }
      if (beta.requires_grad()) {
        double* gb = beta.grad();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gb[j] += g[static_cast<size_t>(i) * c + j];
        }
      }
      if (x.requires_grad()) {
        double* gx = x.grad();
        for (int i = 0; i < r; ++i) {
          const double* gr = g + static_cast<size_t>(i) * c;
          const double* nr = pn2 + static_cast<size_t>(i) * c;
          // dy/dn = gamma; reduce the two row sums then distribute.
          double sum_dn = 0.0, sum_dn_n = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dn = gr[j] * pg2[j];
            sum_dn += dn;
            sum_dn_n += dn * nr[j];
          }
          const double is = pis2[i];
          double* gxr = gx + static_cast<size_t>(i) * c;
          for (int j = 0; j < c; ++j) {
            const double dn = gr[j] * pg2[j];
            gxr[j] += is * (dn - sum_dn / c - nr[j] * sum_dn_n / c);
          }
        }
      }
    });
  }
  return out;
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

Tensor gelu(Tape* tape, Tensor x) {
  Tensor out(x.shape());
  const size_t n = out.size();
  const double* px = x.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) {
    const double v = px[i];
    const double t = std::tanh(kGeluC0 * (v + kGeluC1 * v * v * v));
    po[i] = 0.5 * v * (1.0 + t);
  }
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      const double* g = out.grad();
      const double* px2 = x.data();
      double* gx = x.grad();
      const size_t m = out.size();
      for (size_t i = 0; i < m; ++i) {
        const double v = px2[i];
        const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

Tensor embedding_lookup(Tape* tape, Tensor table,
                        const std::vector<int>& ids) {
  require_rank2(table, "embedding_lookup");
  if (ids.empty()) throw ValueError("embedding_lookup: empty id list");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " outside vocabulary of size " + std::to_string(v));
    }
  }
  const int t = static_cast<int>(ids.size());
  Tensor out({t, d});
  const double* pt = table.data();
  double* po = out.data();
  for (int i = 0; i < t; ++i) {
    std::copy_n(pt + static_cast<size_t>(ids[i]) * d, d,
                po + static_cast<size_t>(i) * d);
  }
  if (wants_grad(tape, table)) {
    out.set_requires_grad(true);
    tape->record([table, out, ids, d]() mutable {
      const double* g = out.grad();
      double* gt = table.grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        double* row = gt + static_cast<size_t>(ids[i]) * d;
        const double* gr = g + i * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor concat_rows(Tape* tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw ValueError("concat_rows: no parts");
  const int c = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  int rows = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != c) {
      throw ShapeError("concat_rows: column mismatch " + p.shape_str());
    }
    rows += p.dim(0);
    any_grad |= p.requires_grad();
  }
  Tensor out({rows, c});
  double* po = out.data();
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.data(), p.size(), po + off);
    off += p.size();
  }
  if (tape && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out]() mutable {
      const double* g = out.grad();
      size_t off2 = 0;
      for (Tensor& p : parts) {
        if (p.requires_grad()) {
          double* gp = p.grad();
          const size_t n = p.size();
          for (size_t i = 0; i < n; ++i) gp[i] += g[off2 + i];
        }
        off2 += p.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(Tape* tape, std::vector<Tensor> parts) {
  if (parts.empty()) throw ValueError("concat_cols: no parts");
  const int r = parts[0].rank() == 2 ? parts[0].dim(0) : -1;
  int cols = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != r) {
      throw ShapeError("concat_cols: row mismatch " + p.shape_str());
    }
    cols += p.dim(1);
    any_grad |= p.requires_grad();
  }
  Tensor out({r, cols});
  double* po = out.data();
  int coff = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    const double* pp = p.data();
    for (int i = 0; i < r; ++i) {
      std::copy_n(pp + static_cast<size_t>(i) * pc, pc,
                  po + static_cast<size_t>(i) * cols + coff);
    }
    coff += pc;
  }
  if (tape && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out, r, cols]() mutable {
      const double* g = out.grad();
      int coff2 = 0;
      for (Tensor& p : parts) {
        const int pc = p.dim(1);
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (int i = 0; i < r; ++i) {
            const double* gr = g + static_cast<size_t>(i) * cols + coff2;
            double* gpr = gp + static_cast<size_t>(i) * pc;
            for (int j = 0; j < pc; ++j) gpr[j] += gr[j];
          }
        }
        coff2 += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(Tape* tape, Tensor a, int start, int len) {
  require_rank2(a, "slice_rows");
  if (start < 0 || len <= 0 || start + len > a.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") outside " + a.shape_str());
  }
  const int c = a.dim(1);
  Tensor out({len, c});
  std::copy_n(a.data() + static_cast<size_t>(start) * c,
              static_cast<size_t>(len) * c, out.data());
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, start, len, c]() mutable {
      const double* g = out.grad();
      double* ga = a.grad() + static_cast<size_t>(start) * c;
      const size_t n = static_cast<size_t>(len) * c;
      for (size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(Tape* tape, Tensor a, int start, int len) {
  require_rank2(a, "slice_cols");
  if (start < 0 || len <= 0 || start + len > a.dim(1)) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") outside " + a.shape_str());
  }
  const int r = a.dim(0), c = a.dim(1);
  Tensor out({r, len});
  const double* pa = a.data();
  double* po = out.data();
  for (int i = 0; i < r; ++i) {
    std::copy_n(pa + static_cast<size_t>(i) * c + start, len,
                po + static_cast<size_t>(i) * len);
  }
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, start, len, r, c]() mutable {
      const double* g = out.grad();
      double* ga = a.grad();
      for (int i = 0; i < r; ++i) {
        double* row = ga + static_cast<size_t>(i) * c + start;
        const double* gr = g + static_cast<size_t>(i) * len;
        for (int j = 0; j < len; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor mean_rows(Tape* tape, Tensor a) {
  require_rank2(a, "mean_rows");
  const int r = a.dim(0), c = a.dim(1);
  Tensor out({1, c});
  const double* pa = a.data();
  double* po = out.data();
  for (int j = 0; j < c; ++j) {
    double s = 0.0;
    for (int i = 0; i < r; ++i) s += pa[static_cast<size_t>(i) * c + j];
    po[j] = s / r;
  }
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, r, c]() mutable {
      const double* g = out.grad();
      double* ga = a.grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          ga[static_cast<size_t>(i) * c + j] += g[j] / r;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(Tape* tape, Tensor a) {
  Tensor out = Tensor::scalar(0.0);
  const double* pa = a.data();
  double s = 0.0;
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) s += pa[i];
  out.data()[0] = s;
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      const double g = out.grad()[0];
      double* ga = a.grad();
      const size_t m = a.size();
      for (size_t i = 0; i < m; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor cross_entropy(Tape* tape, Tensor logits,
                     const std::vector<int>& targets,
                     const std::vector<bool>& mask) {
  require_rank2(logits, "cross_entropy");
  const int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t ||
      static_cast<int>(mask.size()) != t) {
    throw ShapeError("cross_entropy: targets/mask length " +
                     std::to_string(targets.size()) + "/" +
                     std::to_string(mask.size()) + " vs " +
                     std::to_string(t) + " positions");
  }
  int active = 0;
  for (int i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    ++active;
    if (targets[i] < 0 || targets[i] >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocabulary of size " + std::to_string(v));
    }
  }
  if (active == 0) {
    throw ValueError("cross_entropy: no active positions in mask");
  }
  // Per-position softmax saved for backward.
  Tensor probs({t, v});
  const double* pl = logits.data();
  double* pp = probs.data();
  double loss = 0.0;
  for (int i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    const double* row = pl + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* prow = pp + static_cast<size_t>(i) * v;
    for (int j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < v; ++j) prow[j] /= sum;
    loss += -(row[targets[i]] - mx - std::log(sum));
  }
  loss /= active;
  Tensor out = Tensor::scalar(loss);
  if (wants_grad(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([logits, out, probs, targets, mask, t, v, active]() mutable {
      const double g = out.grad()[0] / active;
      double* gl = logits.grad();
      const double* pp2 = probs.data();
      for (int i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        double* grow = gl + static_cast<size_t>(i) * v;
        const double* prow = pp2 + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) grow[j] += g * prow[j];
        grow[targets[i]] -= g;
      }
    });
  }
  return out;
}

Tensor conv2d(Tape* tape, Tensor x, Tensor w, Tensor bias, int stride,
              int pad) {
  if (x.rank() != 3) {
    throw ShapeError("conv2d: input must be [c,h,w], got " + x.shape_str());
  }
  if (w.rank() != 4) {
    throw ShapeError("conv2d: weight must be [cout,cin,kh,kw], got " +
                     w.shape_str());
  }
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input channels " + x.shape_str() +
                     " vs weight " + w.shape_str());
  }
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  const int cin = x.dim(0), h = x.dim(1), win = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (bias.rank() != 1 || bias.dim(0) != cout) {
    throw ShapeError("conv2d: bias must be rank-1 [" + std::to_string(cout) +
                     "]");
  }
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (win + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  Tensor out({cout, oh, ow});
  kernels::conv2d_fwd(out.data(), x.data(), w.data(), bias.data(), cin, h, win,
                      cout, kh, kw, stride, pad, oh, ow);
  if (tape &&
      (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->record([x, w, bias, out, cin, h, win, cout, kh, kw, stride, pad, oh,
                  ow]() mutable {
      const double* g = out.grad();
      if (x.requires_grad()) {
        kernels::conv2d_din(x.grad(), g, w.data(), cin, h, win, cout, kh, kw,
                            stride, pad, oh, ow);
      }
      if (w.requires_grad() || bias.requires_grad()) {
        kernels::conv2d_dw(w.requires_grad() ? w.grad() : nullptr,
                           bias.requires_grad() ? bias.grad() : nullptr, g,
                           x.data(), cin, h, win, cout, kh, kw, stride, pad,
                           oh, ow);
      }
    });
  }
  return out;
}

Tensor adaptive_avg_pool2d(Tape* tape, Tensor x, int out_h, int out_w) {
  if (x.rank() != 3) {
    throw ShapeError("adaptive_avg_pool2d: input must be [c,h,w], got " +
                     x.shape_str());
  }
  if (out_h < 1 || out_w < 1) {
    throw ValueError("adaptive_avg_pool2d: output grid must be positive");
  }
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool2d: output grid exceeds input " +
                     x.shape_str());
  }
  Tensor out({c, out_h, out_w});
  const double* px = x.data();
  double* po = out.data();
  auto lo = [](int i, int in, int on) { return (i * in) / on; };
  auto hi = [](int i, int in, int on) { return ((i + 1) * in + on - 1) / on; };
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        double s = 0.0;
        for (int y = y0; y < y1; ++y) {
          for (int xx = x0; xx < x1; ++xx) {
            s += px[(static_cast<size_t>(ch) * h + y) * w + xx];
          }
        }
        po[(static_cast<size_t>(ch) * out_h + oy) * out_w + ox] =
            s / ((y1 - y0) * (x1 - x0));
      }
    }
  }
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, c, h, w, out_h, out_w, lo, hi]() mutable {
      const double* g = out.grad();
      double* gx = x.grad();
      for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < out_h; ++oy) {
          const int y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
          for (int ox = 0; ox < out_w; ++ox) {
            const int x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
            const double gv =
                g[(static_cast<size_t>(ch) * out_h + oy) * out_w + ox] /
                ((y1 - y0) * (x1 - x0));
            for (int y = y0; y < y1; ++y) {
              for (int xx = x0; xx < x1; ++xx) {
                gx[(static_cast<size_t>(ch) * h + y) * w + xx] += gv;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace promptlab::core
