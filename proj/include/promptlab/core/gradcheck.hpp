#pragma once

#include <functional>
#include <string>
#include <vector>

#include "promptlab/core/tensor.hpp"

namespace promptlab::core {

// Central finite-difference gradient verification against the tape.
//
// `forward` must be a deterministic scalar function of the given parameter
// tensors: called with a tape it must return a loss that requires gradients;
// called with nullptr it must return the same value bitwise (this is checked
// and a DeterminismError is raised otherwise).

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t entries_checked = 0;
  std::string worst_entry;  // "param_index:flat_index"
};

// Checks every entry of every parameter.
GradCheckReport grad_check(const std::function<Tensor(Tape*)>& forward,
                           const std::vector<Tensor>& params, double h = 1e-5);

// Checks a deterministic pseudo-random subset of at most `max_entries`
// entries across all parameters; used where full sweeps are too slow.
GradCheckReport grad_check_sampled(const std::function<Tensor(Tape*)>& forward,
                                   const std::vector<Tensor>& params,
                                   size_t max_entries, uint64_t seed,
                                   double h = 1e-5);

}  // namespace promptlab::core
