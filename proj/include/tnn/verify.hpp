#pragma once

#include <string>
#include <vector>

namespace tnn {

// Outcome of one verified property: gradient checks, algebraic identities,
// decomposition exactness, or cost-model agreement.
struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string detail;  // measured errors or the failure reason
};

// Runs one invariant suite: "gradcheck" (tape gradients vs. finite
// differences), "equivalence" (algebraic reductions, factorized-layer
// expansion, convolution adjoint, compound oracle), "decomposition"
// (full-rank exactness, rank-one recovery, monotone sweeps), "flops"
// (cost model vs. instrumented multiply counter), or "all" (everything,
// in that order). Unknown suite names are rejected.
std::vector<PropertyResult> run_verify_suite(const std::string& suite);

}  // namespace tnn
