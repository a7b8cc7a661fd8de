#include "promptlab/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "promptlab/core/error.hpp"
#include "promptlab/core/rng.hpp"

namespace promptlab::core {

namespace {

struct Entry {
  size_t param;
  size_t index;
};

GradCheckReport run_check(const std::function<Tensor(Tape*)>& forward,
                          const std::vector<Tensor>& params,
                          const std::vector<Entry>& entries, double h) {
  if (h <= 0) throw ValueError("grad_check: step h must be positive");

  const double v1 = forward(nullptr).item();
  const double v2 = forward(nullptr).item();
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0) {
    throw DeterminismError("grad_check: two forward passes disagree (" +
                           std::to_string(v1) + " vs " + std::to_string(v2) +
                           ")");
  }

  for (const Tensor& p : params) {
    Tensor handle = p;
    handle.zero_grad();
  }
  Tape tape;
  Tensor loss = forward(&tape);
  tape.backward(loss);

  std::vector<std::vector<double>> ad_grads;
  ad_grads.reserve(params.size());
  for (const Tensor& p : params) {
    if (!p.requires_grad()) {
      throw ValueError("grad_check: parameter does not require gradients");
    }
    ad_grads.emplace_back(p.grad(), p.grad() + p.size());
  }

  GradCheckReport report;
  report.entries_checked = entries.size();
  for (const Entry& e : entries) {
    Tensor p = params[e.param];
    const double saved = p.at(e.index);
    p.at(e.index) = saved + h;
    const double f_plus = forward(nullptr).item();
    p.at(e.index) = saved - h;
    const double f_minus = forward(nullptr).item();
    p.at(e.index) = saved;

    const double g_fd = (f_plus - f_minus) / (2.0 * h);
    const double g_ad = ad_grads[e.param][e.index];
    const double rel = std::abs(g_ad - g_fd) /
                       std::max({1.0, std::abs(g_ad), std::abs(g_fd)});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_entry =
          std::to_string(e.param) + ":" + std::to_string(e.index);
    }
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(Tape*)>& forward,
                           const std::vector<Tensor>& params, double h) {
  std::vector<Entry> entries;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (size_t i = 0; i < params[pi].size(); ++i) entries.push_back({pi, i});
  }
  return run_check(forward, params, entries, h);
}

GradCheckReport grad_check_sampled(const std::function<Tensor(Tape*)>& forward,
                                   const std::vector<Tensor>& params,
                                   size_t max_entries, uint64_t seed,
                                   double h) {
  size_t total = 0;
  for (const Tensor& p : params) total += p.size();
  if (total <= max_entries) return grad_check(forward, params, h);

  // Without-replacement sample over the flattened entry space.
  std::vector<size_t> flat(total);
  for (size_t i = 0; i < total; ++i) flat[i] = i;
  Rng rng(derive_seed(seed, {0x6c4dc0de}));
  rng.shuffle(flat);
  flat.resize(max_entries);
  std::sort(flat.begin(), flat.end());

  std::vector<Entry> entries;
  entries.reserve(max_entries);
  for (size_t f : flat) {
    size_t pi = 0;
    size_t off = f;
    while (off >= params[pi].size()) {
      off -= params[pi].size();
      ++pi;
    }
    entries.push_back({pi, off});
  }
  return run_check(forward, params, entries, h);
}

}  // namespace promptlab::core
