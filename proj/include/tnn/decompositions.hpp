#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "tnn/autodiff.hpp"
#include "tnn/ops.hpp"
#include "tnn/rng.hpp"
#include "tnn/tensor.hpp"

// Tensor decompositions: the three classical formats (CP, Tucker,
// tensor-train) with reconstruction and fitting routines, plus a general
// factor-network form — an arbitrary linear program over factor tensors
// fitted to a target by gradient descent through the autodiff tape.

namespace tnn {

// ---- classical factor containers ----

// Sum of `rank` rank-1 terms:
//   t[i0,..,i_{m-1}] = sum_r  factors[0][r,i0] * ... * factors[m-1][r,i_{m-1}]
struct CpFactors {
  int rank = 1;
  std::vector<Tensor> factors;  // factors[l] is rank x I_l
};

// Small core contracted with one matrix per mode:
//   t[i...] = sum_{r...} core[r0,..,r_{m-1}] * prod_l factors[l][r_l, i_l]
struct TuckerFactors {
  Tensor core;                  // R_0 x ... x R_{m-1}
  std::vector<Tensor> factors;  // factors[l] is R_l x I_l with R_l <= I_l
};

// Chain of cores sharing rank modes between neighbours:
//   t[i0,..,i_{m-1}] = sum_{r0,..,r_{m-2}} cores[0][i0,r0]
//                      * cores[1][r0,i1,r1] * ... * cores[m-1][r_{m-2},i_{m-1}]
// Needs at least two cores (a chain of one has no shared modes).
struct TtFactors {
  std::vector<Tensor> cores;  // [I0,R0], [R_{l-1},I_l,R_l], .., [R_{m-2},I_{m-1}]
};

// Check the structural invariants; throws std::invalid_argument on violation.
void validate(const CpFactors& f);
void validate(const TuckerFactors& f);
void validate(const TtFactors& f);

// Stored entries across all factors (the compressed size).
std::int64_t param_count(const CpFactors& f);
std::int64_t param_count(const TuckerFactors& f);
std::int64_t param_count(const TtFactors& f);

// Evaluate the formats back to a dense tensor, composed from the generalized
// ops: CP contracts an all-ones vector with the shared-mode outer-product
// chain of the factors; Tucker is the mode-multiplication chain of the core;
// tensor-train contracts each core's trailing rank mode with the next core's
// leading one.
Tensor cp_reconstruct(const CpFactors& f);
Tensor tucker_reconstruct(const TuckerFactors& f);
Tensor tt_reconstruct(const TtFactors& f);

// ---- fitting: classical algorithms ----

// ||t - t_hat|| / ||t||, with the conventions 0/0 = 0 and x/0 = inf (x > 0).
// Shapes must match.
double relative_error(const Tensor& t, const Tensor& t_hat);

struct CpResult {
  CpFactors factors;
  double relative_error = 0.0;
  std::vector<double> sweep_errors;  // relative error after each ALS sweep
};

// Alternating least squares from a deterministic seeded random start. Each
// factor update solves its normal equations with Tikhonov regularization
// (lambda = 1e-9), so rank-deficient systems never crash. Sweeps stop early
// once the error improves by less than `tol`; the recorded per-sweep errors
// are non-increasing up to that regularization.
CpResult cp_decompose(const Tensor& t, int rank, int max_sweeps = 100,
                      double tol = 1e-10, std::uint64_t seed = 0);

struct TuckerResult {
  TuckerFactors factors;
  double relative_error = 0.0;
  std::vector<double> sweep_errors;  // after init and after each HOOI sweep
};

// Orthogonal-factor fit: leading left singular vectors of each mode unfolding
// (HOSVD) refined by up to `max_sweeps` HOOI sweeps, stopping once the error
// improves by less than `tol`. Requires 1 <= ranks[l] <= t.dim(l); with full
// ranks the reconstruction is exact.
TuckerResult tucker_decompose(const Tensor& t,
                              const std::vector<std::int64_t>& ranks,
                              int max_sweeps = 50, double tol = 1e-10);

struct TtResult {
  TtFactors factors;
  double relative_error = 0.0;
};

// Sequential truncated SVD of the carry matrix (one pass, no iteration).
// `ranks` must hold order-1 entries, all >= 1; ranks at least the exact
// unfolding ranks give exact reconstruction. Requested ranks beyond what the
// unfolding supports are honoured by zero-padding the cores.
TtResult tt_decompose(const Tensor& t, const std::vector<std::int64_t>& ranks);

// ---- general factor networks ----

// Operand of a program step: a trainable factor, a fixed constant, or the
// result of an earlier step.
struct ArgRef {
  enum class Source { Factor, Constant, Step };
  Source source = Source::Factor;
  int index = 0;
};
inline ArgRef factor_arg(int i) { return {ArgRef::Source::Factor, i}; }
inline ArgRef constant_arg(int i) { return {ArgRef::Source::Constant, i}; }
inline ArgRef step_arg(int i) { return {ArgRef::Source::Step, i}; }

struct ApplyStep {  // one generalized binary op
  OpDesc op;
  ArgRef a, b;
};
struct ReshapeStep {  // same data, new dims
  ArgRef a;
  Shape shape{};
};
struct SwapaxesStep {  // mode permutation
  ArgRef a;
  std::vector<int> perm;
};
using ProgramStep = std::variant<ApplyStep, ReshapeStep, SwapaxesStep>;

// Trainable factor tensors plus a fixed program — generalized ops and layout
// moves — mapping them to one output tensor (the last step's result). The
// program is linear in every factor, so it is a decomposition format: fitting
// the factors to a target inverts it.
struct FactorNetwork {
  std::vector<Tensor> factors;    // fitted
  std::vector<Tensor> constants;  // held fixed (e.g. all-ones border vectors)
  std::vector<ProgramStep> program;
};

// Structural checks: non-empty program, in-range references, steps refer only
// backwards. Shape agreement along the program is checked by evaluation.
void validate(const FactorNetwork& net);
// Trainable entries only; constants are not stored parameters.
std::int64_t param_count(const FactorNetwork& net);
// Output shape without touching data (validates shapes along the program).
Shape network_output_shape(const FactorNetwork& net);
// Run the program eagerly.
Tensor network_output(const FactorNetwork& net);

// Builders that turn fitted classical factors into the equivalent network
// (factors keep their order; CP gains an all-ones constant):
FactorNetwork cp_network(const CpFactors& f);
FactorNetwork tucker_network(const TuckerFactors& f);
FactorNetwork tt_network(const TtFactors& f);
// Matrix-product chain with a (row, column) mode pair per core — cores
// [S0,T0,R0], [R_{l-1},S_l,T_l,R_l], .., [R_{m-2},S_{m-1},T_{m-1}] — whose
// output collects all row modes, then all column modes:
// S0 x .. x S_{m-1} x T0 x .. x T_{m-1}. A single core [S0,T0] passes
// through. This is the factorized form of a dense layer's matrix reshaped to
// paired input/output modes.
FactorNetwork tt_matrix_network(const std::vector<Tensor>& cores);

// ---- fitting: gradient descent through the tape ----

struct GdOptions {
  int max_iters = 2000;
  double lr = 1e-2;  // initial Adam step size
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // A step that does not decrease the loss is rejected and retried with the
  // step size scaled by `decay`, until it drops below `min_lr` (which stops
  // the fit). Accepted losses are therefore non-increasing.
  double decay = 0.5;
  double min_lr = 1e-14;
  // Stop once an accepted step improves the loss by at most `tol`.
  double tol = 0.0;
  // Redraw every factor uniformly from [-init_scale, init_scale] before
  // fitting (otherwise the factors are taken as the starting point and the
  // rng is untouched).
  bool reinitialize = false;
  double init_scale = 0.5;
};

struct GdResult {
  FactorNetwork net;
  double relative_error = 0.0;
  int iterations = 0;
  std::vector<double> losses;  // accepted 0.5*||target - output||^2 values
};

// Fit net's factors to minimize 0.5 * ||target - network_output(net)||^2 with
// Adam steps under the accept/decay rule above. Gradients flow through the
// autodiff tape, so any program built from the generalized ops works. The
// program's output shape must equal the target's shape.
GdResult general_decompose(const Tensor& target, FactorNetwork net, Rng& rng,
                           const GdOptions& opts = {});

}  // namespace tnn
