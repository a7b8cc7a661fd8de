#pragma once

#include <cstddef>

namespace promptlab::core::kernels {

// Dense f64 kernels behind the tensor ops. Each hot kernel comes in two
// builds: the OpenMP version used by the library and a serial reference.
// The parallel loops split work across independent output rows/elements and
// keep every per-element accumulation order unchanged, so outputs are
// bitwise identical to the serial reference for any thread count. Tests
// assert this; bench/kernel_bench compares their throughput.

// c[m,n] (+)= a[m,k] * b[k,n]
void matmul(double* c, const double* a, const double* b, int m, int k, int n,
            bool accumulate);
void matmul_serial(double* c, const double* a, const double* b, int m, int k,
                   int n, bool accumulate);

// c[m,n] (+)= a[m,k] * b[n,k]^T   (b stored row-major [n,k])
void matmul_nt(double* c, const double* a, const double* b, int m, int k,
               int n, bool accumulate);
void matmul_nt_serial(double* c, const double* a, const double* b, int m,
                      int k, int n, bool accumulate);

// c[k,n] (+)= a[m,k]^T * b[m,n]   (a stored row-major [m,k])
void matmul_tn(double* c, const double* a, const double* b, int m, int k,
               int n, bool accumulate);
void matmul_tn_serial(double* c, const double* a, const double* b, int m,
                      int k, int n, bool accumulate);

// out[cout,oh,ow] = conv(in[cin,h,w], w[cout,cin,kh,kw]) + bias[cout],
// zero padding `pad`, stride `stride`.
void conv2d_fwd(double* out, const double* in, const double* w,
                const double* bias, int cin, int h, int win, int cout, int kh,
                int kw, int stride, int pad, int oh, int ow);
void conv2d_fwd_serial(double* out, const double* in, const double* w,
                       const double* bias, int cin, int h, int win, int cout,
                       int kh, int kw, int stride, int pad, int oh, int ow);

// din[cin,h,w] += gather of dout[cout,oh,ow] * w (gradient w.r.t. input).
void conv2d_din(double* din, const double* dout, const double* w, int cin,
                int h, int win, int cout, int kh, int kw, int stride, int pad,
                int oh, int ow);

// dw[cout,cin,kh,kw] += ..., db[cout] += ... (gradients w.r.t. weights/bias).
void conv2d_dw(double* dw, double* db, const double* dout, const double* in,
               int cin, int h, int win, int cout, int kh, int kw, int stride,
               int pad, int oh, int ow);

}  // namespace promptlab::core::kernels
