// Compares the OpenMP kernels against their serial references: throughput
// and bitwise agreement, over the shapes the model actually runs.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "promptlab/core/kernels.hpp"
#include "promptlab/core/rng.hpp"

using namespace promptlab::core;

namespace {

using Clock = std::chrono::steady_clock;

std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
         reps;
}

void bench_matmul(int m, int k, int n, int reps) {
  Rng rng(42);
  const std::vector<double> a = random_vec(static_cast<size_t>(m) * k, rng);
  const std::vector<double> b = random_vec(static_cast<size_t>(k) * n, rng);
  std::vector<double> c_par(static_cast<size_t>(m) * n);
  std::vector<double> c_ser(static_cast<size_t>(m) * n);

  const double t_ser = time_ms(
      [&] { kernels::matmul_serial(c_ser.data(), a.data(), b.data(), m, k, n, false); },
      reps);
  const double t_par = time_ms(
      [&] { kernels::matmul(c_par.data(), a.data(), b.data(), m, k, n, false); },
      reps);
  const bool bitwise =
      std::memcmp(c_par.data(), c_ser.data(), c_par.size() * sizeof(double)) == 0;
  const double gflop = 2.0 * m * k * n / 1e6;  // per ms
  std::printf(
      "matmul %4dx%4dx%4d  serial %8.3f ms (%6.2f GFLOP/s)  omp %8.3f ms "
      "(%6.2f GFLOP/s)  speedup %4.2fx  bitwise %s\n",
      m, k, n, t_ser, gflop / t_ser, t_par, gflop / t_par, t_ser / t_par,
      bitwise ? "ok" : "MISMATCH");
}

void bench_conv(int cin, int hw, int cout, int stride, int reps) {
  Rng rng(7);
  const int kh = 3, kw = 3, pad = 1;
  const int oh = (hw + 2 * pad - kh) / stride + 1;
  const int ow = oh;
  const std::vector<double> in = random_vec(static_cast<size_t>(cin) * hw * hw, rng);
  const std::vector<double> w =
      random_vec(static_cast<size_t>(cout) * cin * kh * kw, rng);
  const std::vector<double> bias = random_vec(cout, rng);
  std::vector<double> out_par(static_cast<size_t>(cout) * oh * ow);
  std::vector<double> out_ser(out_par.size());

  const double t_ser = time_ms(
      [&] {
        kernels::conv2d_fwd_serial(out_ser.data(), in.data(), w.data(),
                                   bias.data(), cin, hw, hw, cout, kh, kw,
                                   stride, pad, oh, ow);
      },
      reps);
  const double t_par = time_ms(
      [&] {
        kernels::conv2d_fwd(out_par.data(), in.data(), w.data(), bias.data(),
                            cin, hw, hw, cout, kh, kw, stride, pad, oh, ow);
      },
      reps);
  const bool bitwise =
      std::memcmp(out_par.data(), out_ser.data(),
                  out_par.size() * sizeof(double)) == 0;
  std::printf(
      "conv2d c%d->%d %3dx%3d s%d     serial %8.3f ms              omp %8.3f "
      "ms              speedup %4.2fx  bitwise %s\n",
      cin, cout, hw, hw, stride, t_ser, t_par, t_ser / t_par,
      bitwise ? "ok" : "MISMATCH");
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  // LM shapes (T x d x 3d etc. at the desk config) and a larger sanity point.
  bench_matmul(80, 64, 192, 200);
  bench_matmul(80, 64, 64, 400);
  bench_matmul(80, 64, 256, 200);
  bench_matmul(80, 256, 64, 200);
  bench_matmul(256, 256, 256, 20);
  bench_matmul(512, 512, 512, 4);
  // VE shapes.
  bench_conv(3, 32, 8, 2, 400);
  bench_conv(8, 16, 16, 2, 400);
  bench_conv(8, 64, 16, 1, 40);
  return 0;
}
