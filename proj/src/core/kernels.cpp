#include "promptlab/core/kernels.hpp"

#include <algorithm>

namespace promptlab::core::kernels {

namespace {
// Below this many multiply-adds the OpenMP fork/join overhead dominates.
constexpr long kParallelCutoff = 16384;
}  // namespace

void matmul_serial(double* c, const double* a, const double* b, int m, int k,
                   int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<size_t>(i) * n + j] : 0.0;
      for (int kk = 0; kk < k; ++kk) {
        s += a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(kk) * n + j];
      }
      c[static_cast<size_t>(i) * n + j] = s;
    }
  }
}

void matmul(double* c, const double* a, const double* b, int m, int k, int n,
            bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && m > 1)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt_serial(double* c, const double* a, const double* b, int m,
                      int k, int n, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<size_t>(i) * n + j] : 0.0;
      const double* arow = a + static_cast<size_t>(i) * k;
      const double* brow = b + static_cast<size_t>(j) * k;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      c[static_cast<size_t>(i) * n + j] = s;
    }
  }
}

void matmul_nt(double* c, const double* a, const double* b, int m, int k,
               int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && m > 1)
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? crow[j] : 0.0;
      const double* brow = b + static_cast<size_t>(j) * k;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] = s;
    }
  }
}

void matmul_tn_serial(double* c, const double* a, const double* b, int m,
                      int k, int n, bool accumulate) {
  for (int kk = 0; kk < k; ++kk) {
    for (int j = 0; j < n; ++j) {
      double s = accumulate ? c[static_cast<size_t>(kk) * n + j] : 0.0;
      for (int i = 0; i < m; ++i) {
        s += a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(i) * n + j];
      }
      c[static_cast<size_t>(kk) * n + j] = s;
    }
  }
}

void matmul_tn(double* c, const double* a, const double* b, int m, int k,
               int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && k > 1)
  for (int kk = 0; kk < k; ++kk) {
    double* crow = c + static_cast<size_t>(kk) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (int i = 0; i < m; ++i) {
      const double av = a[static_cast<size_t>(i) * k + kk];
      const double* brow = b + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void conv2d_fwd_serial(double* out, const double* in, const double* w,
                       const double* bias, int cin, int h, int win, int cout,
                       int kh, int kw, int stride, int pad, int oh, int ow) {
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double s = bias ? bias[co] : 0.0;
        for (int ci = 0; ci < cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= win) continue;
              s += in[(static_cast<size_t>(ci) * h + iy) * win + ix] *
                   w[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = s;
      }
    }
  }
}

void conv2d_fwd(double* out, const double* in, const double* w,
                const double* bias, int cin, int h, int win, int cout, int kh,
                int kw, int stride, int pad, int oh, int ow) {
  const long work = static_cast<long>(cout) * oh * ow * cin * kh * kw;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && cout > 1)
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double s = bias ? bias[co] : 0.0;
        for (int ci = 0; ci < cin; ++ci) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= win) continue;
              s += in[(static_cast<size_t>(ci) * h + iy) * win + ix] *
                   w[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = s;
      }
    }
  }
}

// Gather formulation: each (ci,iy,ix) cell sums its own contributions, so
// parallelizing over ci is write-disjoint and deterministic.
void conv2d_din(double* din, const double* dout, const double* w, int cin,
                int h, int win, int cout, int kh, int kw, int stride, int pad,
                int oh, int ow) {
  const long work = static_cast<long>(cin) * h * win * cout * kh * kw;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && cin > 1)
  for (int ci = 0; ci < cin; ++ci) {
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < win; ++ix) {
        double s = 0.0;
        for (int co = 0; co < cout; ++co) {
          for (int ky = 0; ky < kh; ++ky) {
            const int num_y = iy + pad - ky;
            if (num_y < 0 || num_y % stride != 0) continue;
            const int oy = num_y / stride;
            if (oy >= oh) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int num_x = ix + pad - kx;
              if (num_x < 0 || num_x % stride != 0) continue;
              const int ox = num_x / stride;
              if (ox >= ow) continue;
              s += dout[(static_cast<size_t>(co) * oh + oy) * ow + ox] *
                   w[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            }
          }
        }
        din[(static_cast<size_t>(ci) * h + iy) * win + ix] += s;
      }
    }
  }
}

void conv2d_dw(double* dw, double* db, const double* dout, const double* in,
               int cin, int h, int win, int cout, int kh, int kw, int stride,
               int pad, int oh, int ow) {
  const long work = static_cast<long>(cout) * cin * kh * kw * oh * ow;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff && cout > 1)
  for (int co = 0; co < cout; ++co) {
    const double* dout_c = dout + static_cast<size_t>(co) * oh * ow;
    if (db) {
      double s = 0.0;
      for (int i = 0; i < oh * ow; ++i) s += dout_c[i];
      db[co] += s;
    }
    for (int ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          double s = 0.0;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= win) continue;
              s += dout_c[static_cast<size_t>(oy) * ow + ox] *
                   in[(static_cast<size_t>(ci) * h + iy) * win + ix];
            }
          }
          dw[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx] += s;
        }
      }
    }
  }
}

}  // namespace promptlab::core::kernels
