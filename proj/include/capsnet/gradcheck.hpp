#pragma once

#include <string>
#include <vector>

#include "capsnet/common.hpp"

namespace capsnet {

struct GradCheckResult {
  std::string layer;
  double max_rel_err = 0;
  int probes = 0;
  bool pass = false;
};

struct GradCheckOptions {
  uint64_t seed = 1;
  std::string filter;  // substring of the check name; empty runs everything
  int probes = 24;     // per layer
  double tolerance = 0;  // 0 = default for the build's precision
  bool inject_fault = false;  // adds a negative control with a wrong backward rule
};

// tolerance of the analytic-vs-central-difference comparison:
// 1e-2 for the 32-bit build, 1e-5 for the 64-bit build
double default_gradcheck_tolerance();

// Finite-difference verification of every layer and loss, plus the full
// network in both head modes. Probes are seed-fixed random parameter entries;
// the numeric side uses only forward passes and is independent of the
// backward rules it checks.
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options);

}  // namespace capsnet
