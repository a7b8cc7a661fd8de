#pragma once

#include <string>
#include <vector>

namespace promptlab::selftest {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured quantity (e.g. max relative error)
  double threshold = 0.0;  // pass bound, 0 for exact checks
  std::string detail;
};

// Finite-difference verification of every primitive op, the composed VLM
// pretraining loss (full sweep on a small config, sampled entries on the
// default config) and the ProL / Robust-ProL soft-token losses through a
// frozen default-size model. Everything at f64, h = 1e-5, bound 1e-4.
std::vector<CheckResult> gradient_suite();

// Brute-force oracle equivalence for KNN and RICE (>= 100 randomized cases
// each), label-permutation invariance of classify (>= 100 randomized label
// sets), fast-path vs per-label scoring equality, and the identical-member
// Ensemble-SS collapse.
std::vector<CheckResult> oracle_suite(uint64_t seed);

// Frozen-digest stability across every adaptation method plus bitwise
// checkpoint round-trips (writes scratch files under tmp_dir).
std::vector<CheckResult> frozen_contract_suite(const std::string& tmp_dir);

bool all_passed(const std::vector<CheckResult>& results);
void print_results(const std::vector<CheckResult>& results);

}  // namespace promptlab::selftest
