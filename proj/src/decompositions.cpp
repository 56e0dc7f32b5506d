#include "tnn/decompositions.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "tnn/common.hpp"
#include "tnn/kernels.hpp"

namespace tnn {
namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

Tensor transpose2(const Tensor& t) { return swapaxes(t, {1, 0}); }

Tensor from_mat(const RowMat& m, Shape shape) {
  return Tensor::from_data(std::move(shape),
                           std::vector<double>(m.data(), m.data() + m.size()));
}

// Mode-k unfolding: rows indexed by mode k, columns by the remaining modes in
// their original order.
RowMat unfold(const Tensor& t, int k) {
  std::vector<int> perm(t.order());
  perm[0] = k;
  int at = 1;
  for (int j = 0; j < t.order(); ++j)
    if (j != k) perm[at++] = j;
  const Tensor moved = swapaxes(t, perm);
  return ConstMap(moved.data(), t.dim(k), t.numel() / t.dim(k));
}

// Leading `rank` left singular vectors as columns, zero-padded on the right
// when the matrix holds fewer singular pairs than asked for.
RowMat leading_left_singular(const RowMat& m, std::int64_t rank) {
  Eigen::BDCSVD<RowMat> svd(m, Eigen::ComputeThinU);
  RowMat u = RowMat::Zero(m.rows(), rank);
  const std::int64_t have =
      std::min<std::int64_t>(rank, svd.matrixU().cols());
  u.leftCols(have) = svd.matrixU().leftCols(have);
  return u;
}

}  // namespace

// ---- classical factor containers ----

void validate(const CpFactors& f) {
  if (f.rank < 1) fail("CpFactors: rank is ", f.rank, ", must be >= 1");
  if (f.factors.empty()) fail("CpFactors: needs at least one factor matrix");
  for (std::size_t l = 0; l < f.factors.size(); ++l) {
    const Tensor& m = f.factors[l];
    if (m.order() != 2)
      fail("CpFactors: factor ", l, " has order ", m.order(),
           ", must be a matrix");
    if (m.dim(0) != f.rank)
      fail("CpFactors: factor ", l, " has ", m.dim(0), " rows, expected rank ",
           f.rank);
  }
}

void validate(const TuckerFactors& f) {
  if (f.core.order() != static_cast<int>(f.factors.size()))
    fail("TuckerFactors: core has order ", f.core.order(), " but there are ",
         f.factors.size(), " factor matrices");
  for (std::size_t l = 0; l < f.factors.size(); ++l) {
    const Tensor& m = f.factors[l];
    if (m.order() != 2)
      fail("TuckerFactors: factor ", l, " has order ", m.order(),
           ", must be a matrix");
    if (m.dim(0) != f.core.dim(static_cast<int>(l)))
      fail("TuckerFactors: factor ", l, " has ", m.dim(0),
           " rows, expected core dim ", f.core.dim(static_cast<int>(l)));
    if (m.dim(0) > m.dim(1))
      fail("TuckerFactors: factor ", l, " rank ", m.dim(0),
           " exceeds its mode dim ", m.dim(1));
  }
}

void validate(const TtFactors& f) {
  const std::size_t m = f.cores.size();
  if (m < 2) fail("TtFactors: needs at least two cores, got ", m);
  for (std::size_t l = 0; l < m; ++l) {
    const int want = (l == 0 || l + 1 == m) ? 2 : 3;
    if (f.cores[l].order() != want)
      fail("TtFactors: core ", l, " has order ", f.cores[l].order(),
           ", expected ", want);
  }
  for (std::size_t l = 0; l + 1 < m; ++l) {
    const Tensor& a = f.cores[l];
    const std::int64_t out_rank = a.dim(a.order() - 1);
    const std::int64_t in_rank = f.cores[l + 1].dim(0);
    if (out_rank != in_rank)
      fail("TtFactors: cores ", l, " and ", l + 1,
           " disagree on the shared rank: ", out_rank, " vs ", in_rank);
  }
}

std::int64_t param_count(const CpFactors& f) {
  validate(f);
  std::int64_t n = 0;
  for (const Tensor& m : f.factors) n += m.numel();
  return n;
}

std::int64_t param_count(const TuckerFactors& f) {
  validate(f);
  std::int64_t n = f.core.numel();
  for (const Tensor& m : f.factors) n += m.numel();
  return n;
}

std::int64_t param_count(const TtFactors& f) {
  validate(f);
  std::int64_t n = 0;
  for (const Tensor& c : f.cores) n += c.numel();
  return n;
}

// ---- reconstructions ----

Tensor cp_reconstruct(const CpFactors& f) {
  validate(f);
  Tensor chain = f.factors[0];
  for (std::size_t l = 1; l < f.factors.size(); ++l)
    chain = partial_outer(chain, f.factors[l], 0, 0);
  return contract(Tensor::ones(Shape{f.rank}), chain, 0, 0);
}

Tensor tucker_reconstruct(const TuckerFactors& f) {
  validate(f);
  Tensor t = f.core;
  for (std::size_t l = 0; l < f.factors.size(); ++l)
    t = multiply_mode(t, f.factors[l], static_cast<int>(l));
  return t;
}

Tensor tt_reconstruct(const TtFactors& f) {
  validate(f);
  Tensor t = f.cores[0];
  for (std::size_t l = 1; l < f.cores.size(); ++l)
    t = contract(t, f.cores[l], -1, 0);
  return t;
}

// ---- fitting: classical algorithms ----

double relative_error(const Tensor& t, const Tensor& t_hat) {
  if (!(t.shape() == t_hat.shape()))
    fail("relative_error: shape ", t.shape().str(), " vs ",
         t_hat.shape().str());
  const double dn = sub(t, t_hat).norm();
  const double tn = t.norm();
  if (tn == 0.0)
    return dn == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return dn / tn;
}

CpResult cp_decompose(const Tensor& t, int rank, int max_sweeps, double tol,
                      std::uint64_t seed) {
  if (rank < 1) fail("cp_decompose: rank is ", rank, ", must be >= 1");
  if (t.order() < 1) fail("cp_decompose: target must have order >= 1");
  if (max_sweeps < 1)
    fail("cp_decompose: max_sweeps is ", max_sweeps, ", must be >= 1");
  const int m = t.order();
  constexpr double kLambda = 1e-9;  // Tikhonov weight on every solve

  Rng rng(seed);
  CpFactors f;
  f.rank = rank;
  for (int l = 0; l < m; ++l)
    f.factors.push_back(Tensor::random_uniform(Shape{rank, t.dim(l)}, rng, 1.0));

  CpResult res;
  double prev = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (int l = 0; l < m; ++l) {
      // Normal matrix: entrywise product of the other factors' Gram matrices
      // (all-ones when this is the only factor).
      Tensor gram = Tensor::ones(Shape{rank, rank});
      for (int j = 0; j < m; ++j)
        if (j != l) gram = hadamard(gram, contract(f.factors[j], f.factors[j], 1, 1));

      // Right-hand side: target contracted with every other factor.
      Tensor rhs;  // rank x I_l
      if (m == 1) {
        rhs = outer(Tensor::ones(Shape{rank}), t);
      } else {
        Tensor chain;  // rank x (other dims, in mode order)
        bool first = true;
        CompoundSpec links;
        int pos = 1;
        for (int j = 0; j < m; ++j) {
          if (j == l) continue;
          chain = first ? f.factors[j]
                        : partial_outer(chain, f.factors[j], 0, 0);
          first = false;
          links.links.push_back({LinkKind::Contract, pos++, j});
        }
        rhs = compound_apply(chain, t, links);
      }

      RowMat a = ConstMap(gram.data(), rank, rank);
      a.diagonal().array() += kLambda;
      const RowMat x =
          a.ldlt().solve(RowMat(ConstMap(rhs.data(), rank, t.dim(l))));
      f.factors[l] = from_mat(x, Shape{rank, t.dim(l)});
    }
    const double err = relative_error(t, cp_reconstruct(f));
    res.sweep_errors.push_back(err);
    const double improve = prev - err;
    prev = err;
    if (improve < tol) break;
  }
  res.factors = std::move(f);
  res.relative_error = prev;
  return res;
}

TuckerResult tucker_decompose(const Tensor& t,
                              const std::vector<std::int64_t>& ranks,
                              int max_sweeps, double tol) {
  const int m = t.order();
  if (static_cast<int>(ranks.size()) != m)
    fail("tucker_decompose: got ", ranks.size(), " ranks for order ", m);
  for (int l = 0; l < m; ++l)
    if (ranks[l] < 1 || ranks[l] > t.dim(l))
      fail("tucker_decompose: rank ", ranks[l], " at mode ", l,
           " out of range [1, ", t.dim(l), "]");
  if (max_sweeps < 0)
    fail("tucker_decompose: max_sweeps is ", max_sweeps, ", must be >= 0");

  // Back-projectors u[l] (I_l x R_l): leading left singular vectors of each
  // mode unfolding.
  std::vector<Tensor> u;
  for (int l = 0; l < m; ++l)
    u.push_back(from_mat(leading_left_singular(unfold(t, l), ranks[l]),
                         Shape{t.dim(l), ranks[l]}));

  const auto assemble = [&]() {
    TuckerFactors f;
    Tensor core = t;
    for (int l = 0; l < m; ++l) core = multiply_mode(core, u[l], l);
    f.core = std::move(core);
    for (int l = 0; l < m; ++l) f.factors.push_back(transpose2(u[l]));
    return f;
  };

  TuckerResult res;
  TuckerFactors f = assemble();
  res.sweep_errors.push_back(relative_error(t, tucker_reconstruct(f)));
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    for (int l = 0; l < m; ++l) {
      // Project every mode but l, then refit u[l] on the slimmed tensor.
      Tensor y = t;
      for (int j = 0; j < m; ++j)
        if (j != l) y = multiply_mode(y, u[j], j);
      u[l] = from_mat(leading_left_singular(unfold(y, l), ranks[l]),
                      Shape{t.dim(l), ranks[l]});
    }
    f = assemble();
    const double err = relative_error(t, tucker_reconstruct(f));
    res.sweep_errors.push_back(err);
    const double improve =
        res.sweep_errors[res.sweep_errors.size() - 2] - err;
    if (improve < tol) break;
  }
  res.factors = std::move(f);
  res.relative_error = res.sweep_errors.back();
  return res;
}

TtResult tt_decompose(const Tensor& t, const std::vector<std::int64_t>& ranks) {
  const int m = t.order();
  if (m < 2) fail("tt_decompose: target must have order >= 2, got ", m);
  if (static_cast<int>(ranks.size()) != m - 1)
    fail("tt_decompose: got ", ranks.size(), " ranks for order ", m,
         ", need ", m - 1);
  for (std::size_t l = 0; l < ranks.size(); ++l)
    if (ranks[l] < 1)
      fail("tt_decompose: rank ", ranks[l], " at position ", l,
           ", must be >= 1");

  TtFactors f;
  RowMat carry = ConstMap(t.data(), t.dim(0), t.numel() / t.dim(0));
  std::int64_t lead = 1;  // leading rank of the carry block
  for (int l = 0; l + 1 < m; ++l) {
    const std::int64_t r = ranks[l];
    const RowMat u = leading_left_singular(carry, r);
    f.cores.push_back(l == 0 ? from_mat(u, Shape{t.dim(0), r})
                             : from_mat(u, Shape{lead, t.dim(l), r}));
    const RowMat next = u.transpose() * carry;  // r x (trailing dims)
    if (l + 2 < m) {
      const std::int64_t il = t.dim(l + 1);
      carry = ConstMap(next.data(), r * il, next.cols() / il);
    } else {
      carry = next;  // final core: R_{m-2} x I_{m-1}
    }
    lead = r;
  }
  f.cores.push_back(from_mat(carry, Shape{lead, t.dim(m - 1)}));

  TtResult res;
  res.relative_error = relative_error(t, tt_reconstruct(f));
  res.factors = std::move(f);
  return res;
}

// ---- general factor networks ----

namespace {

void check_ref(const FactorNetwork& net, const ArgRef& ref, std::size_t step) {
  switch (ref.source) {
    case ArgRef::Source::Factor:
      if (ref.index < 0 || ref.index >= static_cast<int>(net.factors.size()))
        fail("FactorNetwork: step ", step, " references factor ", ref.index,
             " of ", net.factors.size());
      return;
    case ArgRef::Source::Constant:
      if (ref.index < 0 || ref.index >= static_cast<int>(net.constants.size()))
        fail("FactorNetwork: step ", step, " references constant ", ref.index,
             " of ", net.constants.size());
      return;
    case ArgRef::Source::Step:
      if (ref.index < 0 || ref.index >= static_cast<int>(step))
        fail("FactorNetwork: step ", step, " references step ", ref.index,
             ", but only earlier steps are available");
      return;
  }
  fail("FactorNetwork: step ", step, " has a corrupt operand source");
}

void check_perm(const std::vector<int>& perm, int order, std::size_t step) {
  if (static_cast<int>(perm.size()) != order)
    fail("FactorNetwork: step ", step, " permutes ", perm.size(),
         " modes of an order-", order, " value");
  std::vector<bool> seen(order, false);
  for (int p : perm) {
    if (p < 0 || p >= order || seen[p])
      fail("FactorNetwork: step ", step, " permutation is not a bijection");
    seen[p] = true;
  }
}

}  // namespace

void validate(const FactorNetwork& net) {
  if (net.program.empty())
    fail("FactorNetwork: program must have at least one step");
  for (std::size_t i = 0; i < net.program.size(); ++i) {
    const ProgramStep& step = net.program[i];
    if (const auto* ap = std::get_if<ApplyStep>(&step)) {
      check_ref(net, ap->a, i);
      check_ref(net, ap->b, i);
    } else if (const auto* rs = std::get_if<ReshapeStep>(&step)) {
      check_ref(net, rs->a, i);
    } else {
      check_ref(net, std::get<SwapaxesStep>(step).a, i);
    }
  }
}

std::int64_t param_count(const FactorNetwork& net) {
  std::int64_t n = 0;
  for (const Tensor& f : net.factors) n += f.numel();
  return n;
}

Shape network_output_shape(const FactorNetwork& net) {
  validate(net);
  std::vector<Shape> shapes;
  const auto shape_of = [&](const ArgRef& ref) -> const Shape& {
    switch (ref.source) {
      case ArgRef::Source::Factor:
        return net.factors[ref.index].shape();
      case ArgRef::Source::Constant:
        return net.constants[ref.index].shape();
      default:
        return shapes[ref.index];
    }
  };
  for (std::size_t i = 0; i < net.program.size(); ++i) {
    const ProgramStep& step = net.program[i];
    if (const auto* ap = std::get_if<ApplyStep>(&step)) {
      shapes.push_back(op_result_shape(ap->op, shape_of(ap->a), shape_of(ap->b)));
    } else if (const auto* rs = std::get_if<ReshapeStep>(&step)) {
      if (shape_of(rs->a).numel() != rs->shape.numel())
        fail("FactorNetwork: step ", i, " reshapes ", shape_of(rs->a).str(),
             " to ", rs->shape.str(), ", which changes the element count");
      shapes.push_back(rs->shape);
    } else {
      const auto& sw = std::get<SwapaxesStep>(step);
      const Shape& in = shape_of(sw.a);
      check_perm(sw.perm, in.order(), i);
      std::vector<std::int64_t> dims(in.order());
      for (int d = 0; d < in.order(); ++d) dims[d] = in.dim(sw.perm[d]);
      shapes.push_back(Shape{std::move(dims)});
    }
  }
  return shapes.back();
}

Tensor network_output(const FactorNetwork& net) {
  validate(net);
  std::vector<Tensor> results;
  const auto value_of = [&](const ArgRef& ref) -> const Tensor& {
    switch (ref.source) {
      case ArgRef::Source::Factor:
        return net.factors[ref.index];
      case ArgRef::Source::Constant:
        return net.constants[ref.index];
      default:
        return results[ref.index];
    }
  };
  for (const ProgramStep& step : net.program) {
    if (const auto* ap = std::get_if<ApplyStep>(&step)) {
      results.push_back(apply_op(ap->op, value_of(ap->a), value_of(ap->b)));
    } else if (const auto* rs = std::get_if<ReshapeStep>(&step)) {
      results.push_back(reshape(value_of(rs->a), rs->shape));
    } else {
      const auto& sw = std::get<SwapaxesStep>(step);
      results.push_back(swapaxes(value_of(sw.a), sw.perm));
    }
  }
  return results.back();
}

FactorNetwork cp_network(const CpFactors& f) {
  validate(f);
  FactorNetwork net;
  net.factors = f.factors;
  net.constants = {Tensor::ones(Shape{f.rank})};
  const int m = static_cast<int>(f.factors.size());
  if (m == 1) {
    net.program.push_back(
        ApplyStep{OpContract{0, 0}, constant_arg(0), factor_arg(0)});
    return net;
  }
  net.program.push_back(
      ApplyStep{OpPartialOuter{0, 0}, factor_arg(0), factor_arg(1)});
  for (int l = 2; l < m; ++l)
    net.program.push_back(
        ApplyStep{OpPartialOuter{0, 0}, step_arg(l - 2), factor_arg(l)});
  net.program.push_back(
      ApplyStep{OpContract{0, 0}, constant_arg(0), step_arg(m - 2)});
  return net;
}

FactorNetwork tucker_network(const TuckerFactors& f) {
  validate(f);
  FactorNetwork net;
  net.factors.push_back(f.core);
  for (const Tensor& m : f.factors) net.factors.push_back(m);
  const int m = static_cast<int>(f.factors.size());
  if (m == 0) {
    // Order-0 core with no factor matrices: pass the core through.
    net.constants = {Tensor::scalar(1.0)};
    net.program.push_back(
        ApplyStep{OpOuter{}, factor_arg(0), constant_arg(0)});
    return net;
  }
  net.program.push_back(
      ApplyStep{OpMultiplyMode{0}, factor_arg(0), factor_arg(1)});
  for (int l = 1; l < m; ++l)
    net.program.push_back(
        ApplyStep{OpMultiplyMode{l}, step_arg(l - 1), factor_arg(l + 1)});
  return net;
}

FactorNetwork tt_network(const TtFactors& f) {
  validate(f);
  FactorNetwork net;
  net.factors = f.cores;
  const int m = static_cast<int>(f.cores.size());
  net.program.push_back(
      ApplyStep{OpContract{-1, 0}, factor_arg(0), factor_arg(1)});
  for (int l = 2; l < m; ++l)
    net.program.push_back(
        ApplyStep{OpContract{-1, 0}, step_arg(l - 2), factor_arg(l)});
  return net;
}

FactorNetwork tt_matrix_network(const std::vector<Tensor>& cores) {
  const int m = static_cast<int>(cores.size());
  if (m == 0) fail("tt_matrix_network: needs at least one core");
  for (int l = 0; l < m; ++l) {
    const int want = m == 1 ? 2 : (l == 0 || l + 1 == m) ? 3 : 4;
    if (cores[l].order() != want)
      fail("tt_matrix_network: core ", l, " has order ", cores[l].order(),
           ", expected ", want);
  }
  for (int l = 0; l + 1 < m; ++l) {
    const std::int64_t out_rank = cores[l].dim(cores[l].order() - 1);
    if (out_rank != cores[l + 1].dim(0))
      fail("tt_matrix_network: cores ", l, " and ", l + 1,
           " disagree on the shared rank: ", out_rank, " vs ",
           cores[l + 1].dim(0));
  }

  FactorNetwork net;
  net.factors = cores;
  if (m == 1) {
    net.program.push_back(SwapaxesStep{factor_arg(0), {0, 1}});
    return net;
  }
  net.program.push_back(
      ApplyStep{OpContract{-1, 0}, factor_arg(0), factor_arg(1)});
  for (int l = 2; l < m; ++l)
    net.program.push_back(
        ApplyStep{OpContract{-1, 0}, step_arg(l - 2), factor_arg(l)});
  // The chain interleaves row and column modes (S0,T0,S1,T1,...); gather the
  // rows, then the columns.
  std::vector<int> perm(2 * m);
  for (int i = 0; i < m; ++i) {
    perm[i] = 2 * i;
    perm[m + i] = 2 * i + 1;
  }
  net.program.push_back(SwapaxesStep{step_arg(m - 2), std::move(perm)});
  return net;
}

// ---- fitting: gradient descent through the tape ----

GdResult general_decompose(const Tensor& target, FactorNetwork net, Rng& rng,
                           const GdOptions& opts) {
  validate(net);
  const Shape out_shape = network_output_shape(net);
  if (!(out_shape == target.shape()))
    fail("general_decompose: program yields ", out_shape.str(),
         ", target is ", target.shape().str());
  if (opts.max_iters < 0)
    fail("general_decompose: max_iters is ", opts.max_iters,
         ", must be >= 0");
  if (!(opts.lr > 0.0))
    fail("general_decompose: lr is ", opts.lr, ", must be > 0");
  if (!(opts.decay > 0.0 && opts.decay < 1.0))
    fail("general_decompose: decay is ", opts.decay, ", must be in (0, 1)");

  if (opts.reinitialize)
    for (Tensor& f : net.factors)
      f = Tensor::random_uniform(f.shape(), rng, opts.init_scale);

  const std::size_t nf = net.factors.size();
  std::vector<std::vector<double>> params(nf), mom(nf), sq(nf);
  for (std::size_t i = 0; i < nf; ++i) {
    const Tensor& f = net.factors[i];
    params[i].assign(f.data(), f.data() + f.numel());
    mom[i].assign(f.numel(), 0.0);
    sq[i].assign(f.numel(), 0.0);
  }

  const auto rebuild = [&](const std::vector<std::vector<double>>& blocks) {
    std::vector<Tensor> fs;
    fs.reserve(nf);
    for (std::size_t i = 0; i < nf; ++i)
      fs.push_back(Tensor::from_data(net.factors[i].shape(),
                                     std::vector<double>(blocks[i])));
    return fs;
  };
  const auto loss_of = [&](const std::vector<Tensor>& fs) {
    FactorNetwork probe = net;
    probe.factors = fs;
    const Tensor resid = sub(network_output(probe), target);
    return 0.5 * kernels::nrm2sq(resid.data(),
                                 static_cast<std::size_t>(resid.numel()));
  };
  // One tape pass: records the program, seeds backward with the residual
  // (the gradient of 0.5*||output - target||^2 w.r.t. the output).
  const auto gradients = [&](const std::vector<Tensor>& fs) {
    Tape tape;
    std::vector<ValueId> fids, cids, sids;
    for (const Tensor& f : fs) fids.push_back(tape.leaf(f, true));
    for (const Tensor& c : net.constants) cids.push_back(tape.leaf(c));
    const auto id_of = [&](const ArgRef& ref) {
      switch (ref.source) {
        case ArgRef::Source::Factor:
          return fids[ref.index];
        case ArgRef::Source::Constant:
          return cids[ref.index];
        default:
          return sids[ref.index];
      }
    };
    for (const ProgramStep& step : net.program) {
      if (const auto* ap = std::get_if<ApplyStep>(&step)) {
        sids.push_back(tape.apply(ap->op, id_of(ap->a), id_of(ap->b)));
      } else if (const auto* rs = std::get_if<ReshapeStep>(&step)) {
        sids.push_back(tape.reshape(id_of(rs->a), rs->shape));
      } else {
        const auto& sw = std::get<SwapaxesStep>(step);
        sids.push_back(tape.swapaxes(id_of(sw.a), sw.perm));
      }
    }
    const GradMap g =
        tape.backward(sids.back(), sub(tape.value(sids.back()), target));
    std::vector<Tensor> out;
    out.reserve(nf);
    for (ValueId id : fids) out.push_back(g.at(id));
    return out;
  };

  GdResult res;
  std::vector<Tensor> cur = rebuild(params);
  double loss = loss_of(cur);
  double lr = opts.lr;
  double b1p = 1.0, b2p = 1.0;
  int iters = 0;
  while (iters < opts.max_iters && loss > 0.0 && lr >= opts.min_lr) {
    const std::vector<Tensor> grads = gradients(cur);
    const double nb1p = b1p * opts.beta1;
    const double nb2p = b2p * opts.beta2;
    bool accepted = false;
    bool plateau = false;
    while (lr >= opts.min_lr) {
      auto pc = params;
      auto mc = mom;
      auto vc = sq;
      for (std::size_t i = 0; i < nf; ++i)
        kernels::adam_step(pc[i].data(), mc[i].data(), vc[i].data(),
                           grads[i].data(), pc[i].size(), lr, opts.beta1,
                           opts.beta2, opts.eps, nb1p, nb2p);
      std::vector<Tensor> cand = rebuild(pc);
      const double cand_loss = loss_of(cand);
      if (cand_loss <= loss) {
        params = std::move(pc);
        mom = std::move(mc);
        sq = std::move(vc);
        cur = std::move(cand);
        b1p = nb1p;
        b2p = nb2p;
        res.losses.push_back(cand_loss);
        plateau = loss - cand_loss <= opts.tol;
        loss = cand_loss;
        accepted = true;
        ++iters;
        break;
      }
      lr *= opts.decay;
    }
    if (!accepted || plateau) break;
  }

  net.factors = std::move(cur);
  res.relative_error = relative_error(target, network_output(net));
  res.net = std::move(net);
  res.iterations = iters;
  return res;
}

}  // namespace tnn
