#include "tnn/ops.hpp"

#include <algorithm>
#include <numeric>

#include "tnn/kernels.hpp"

namespace tnn {
namespace {

bool is_identity(const std::vector<int>& perm) {
  for (int i = 0; i < static_cast<int>(perm.size()); ++i)
    if (perm[i] != i) return false;
  return true;
}

Tensor permuted(const Tensor& t, const std::vector<int>& perm) {
  return is_identity(perm) ? t : swapaxes(t, perm);
}

// Modes in original order with k moved last.
std::vector<int> move_to_back(int n, int k) {
  std::vector<int> p;
  p.reserve(n);
  for (int i = 0; i < n; ++i)
    if (i != k) p.push_back(i);
  p.push_back(k);
  return p;
}

// Modes in original order with k moved first.
std::vector<int> move_to_front(int n, int k) {
  std::vector<int> p;
  p.reserve(n);
  p.push_back(k);
  for (int i = 0; i < n; ++i)
    if (i != k) p.push_back(i);
  return p;
}

std::vector<int> invert_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (int i = 0; i < static_cast<int>(perm.size()); ++i) inv[perm[i]] = i;
  return inv;
}

std::int64_t prod_except(const Shape& s, int k) {
  std::int64_t p = 1;
  for (int m = 0; m < s.order(); ++m)
    if (m != k) p *= s.dim(m);
  return p;
}

const char* kind_name(LinkKind k) {
  switch (k) {
    case LinkKind::Contract:
      return "contract";
    case LinkKind::Convolve:
      return "convolve";
    case LinkKind::PartialOuter:
      return "partial-outer";
  }
  return "?";
}

}  // namespace

std::int64_t conv_out_len(std::int64_t in_len, std::int64_t kernel_len,
                          Padding padding) {
  switch (padding) {
    case Padding::Valid:
      if (in_len < kernel_len)
        fail("convolve: valid padding needs input length >= kernel length, "
             "got ", in_len, " < ", kernel_len);
      return in_len - kernel_len + 1;
    case Padding::Same:
      return in_len;
    case Padding::Full:
      return in_len + kernel_len - 1;
  }
  return 0;
}

std::int64_t conv_offset(std::int64_t kernel_len, Padding padding) {
  switch (padding) {
    case Padding::Valid:
      return 0;
    case Padding::Same:
      return kernel_len / 2;  // ceil((J-1)/2): pad more on the left
    case Padding::Full:
      return kernel_len - 1;
  }
  return 0;
}

std::uint64_t conv_pairs(std::int64_t in_len, std::int64_t kernel_len,
                         Padding padding) {
  const std::int64_t out = conv_out_len(in_len, kernel_len, padding);
  const std::int64_t off = conv_offset(kernel_len, padding);
  switch (padding) {
    case Padding::Valid:
      return static_cast<std::uint64_t>(out) * kernel_len;
    case Padding::Full:
      // every (input, tap) pair is used exactly once
      return static_cast<std::uint64_t>(in_len) * kernel_len;
    case Padding::Same: {
      std::uint64_t total = 0;
      for (std::int64_t j = 0; j < kernel_len; ++j) {
        const std::int64_t lo = std::max<std::int64_t>(0, off - j);
        const std::int64_t hi = std::min(out - 1, in_len - 1 + off - j);
        if (hi >= lo) total += static_cast<std::uint64_t>(hi - lo + 1);
      }
      return total;
    }
  }
  return 0;
}

// ---- result shapes (each performs the op's full validation) ----

Shape contract_shape(const Shape& a, const Shape& b, int k, int l) {
  const int kk = norm_mode(k, a.order(), "contract");
  const int ll = norm_mode(l, b.order(), "contract");
  if (a.dim(kk) != b.dim(ll))
    fail("contract: mode ", k, " of ", a.str(), " has dim ", a.dim(kk),
         ", mode ", l, " of ", b.str(), " has dim ", b.dim(ll));
  std::vector<std::int64_t> dims;
  for (int m = 0; m < a.order(); ++m)
    if (m != kk) dims.push_back(a.dim(m));
  for (int m = 0; m < b.order(); ++m)
    if (m != ll) dims.push_back(b.dim(m));
  return Shape(std::move(dims));
}

Shape multiply_mode_shape(const Shape& t, const Shape& m, int k) {
  const int kk = norm_mode(k, t.order(), "multiply_mode");
  if (m.order() != 2)
    fail("multiply_mode: operand must be a matrix, got order ", m.order());
  if (t.dim(kk) != m.dim(0))
    fail("multiply_mode: mode ", k, " of ", t.str(), " has dim ", t.dim(kk),
         ", matrix has ", m.dim(0), " rows");
  std::vector<std::int64_t> dims = t.dims();
  dims[kk] = m.dim(1);
  return Shape(std::move(dims));
}

Shape convolve_shape(const Shape& a, const Shape& b, int k, int l,
                     ConvMode mode) {
  const int kk = norm_mode(k, a.order(), "convolve");
  const int ll = norm_mode(l, b.order(), "convolve");
  std::vector<std::int64_t> dims;
  for (int m = 0; m < a.order(); ++m)
    dims.push_back(m == kk ? conv_out_len(a.dim(kk), b.dim(ll), mode.padding)
                           : a.dim(m));
  for (int m = 0; m < b.order(); ++m)
    if (m != ll) dims.push_back(b.dim(m));
  return Shape(std::move(dims));
}

Shape outer_shape(const Shape& a, const Shape& b) {
  std::vector<std::int64_t> dims = a.dims();
  dims.insert(dims.end(), b.dims().begin(), b.dims().end());
  return Shape(std::move(dims));
}

Shape partial_outer_shape(const Shape& a, const Shape& b, int k, int l) {
  const int kk = norm_mode(k, a.order(), "partial_outer");
  const int ll = norm_mode(l, b.order(), "partial_outer");
  if (a.dim(kk) != b.dim(ll))
    fail("partial_outer: mode ", k, " of ", a.str(), " has dim ", a.dim(kk),
         ", mode ", l, " of ", b.str(), " has dim ", b.dim(ll));
  std::vector<std::int64_t> dims = a.dims();
  for (int m = 0; m < b.order(); ++m)
    if (m != ll) dims.push_back(b.dim(m));
  return Shape(std::move(dims));
}

namespace {

// Normalized view of a compound spec against concrete operand shapes.
struct CompoundPlan {
  std::vector<LinkSpec> links;  // modes normalized to non-negative
  Shape out_shape;
  bool all_contract;
};

CompoundPlan analyze_compound(const Shape& a, const Shape& b,
                              const CompoundSpec& spec) {
  if (spec.links.empty()) fail("compound: needs at least one link");
  CompoundPlan plan;
  plan.all_contract = true;
  std::vector<int> link_of_a(a.order(), -1), link_of_b(b.order(), -1);
  for (std::size_t i = 0; i < spec.links.size(); ++i) {
    LinkSpec link = spec.links[i];
    link.mode_a = norm_mode(link.mode_a, a.order(), "compound");
    link.mode_b = norm_mode(link.mode_b, b.order(), "compound");
    if (link_of_a[link.mode_a] >= 0)
      fail("compound: mode ", link.mode_a, " of the first operand linked twice");
    if (link_of_b[link.mode_b] >= 0)
      fail("compound: mode ", link.mode_b,
           " of the second operand linked twice");
    link_of_a[link.mode_a] = static_cast<int>(i);
    link_of_b[link.mode_b] = static_cast<int>(i);
    switch (link.kind) {
      case LinkKind::Contract:
      case LinkKind::PartialOuter:
        if (a.dim(link.mode_a) != b.dim(link.mode_b))
          fail("compound: ", kind_name(link.kind), " link dims differ: ",
               a.dim(link.mode_a), " vs ", b.dim(link.mode_b));
        break;
      case LinkKind::Convolve:
        conv_out_len(a.dim(link.mode_a), b.dim(link.mode_b),
                     link.conv.padding);
        break;
    }
    if (link.kind != LinkKind::Contract) plan.all_contract = false;
    plan.links.push_back(link);
  }

  std::vector<std::int64_t> dims;
  for (int m = 0; m < a.order(); ++m) {
    const int li = link_of_a[m];
    if (li < 0) {
      dims.push_back(a.dim(m));
      continue;
    }
    const LinkSpec& link = plan.links[li];
    switch (link.kind) {
      case LinkKind::Contract:
        break;  // gone
      case LinkKind::Convolve:
        dims.push_back(
            conv_out_len(a.dim(m), b.dim(link.mode_b), link.conv.padding));
        break;
      case LinkKind::PartialOuter:
        dims.push_back(a.dim(m));
        break;
    }
  }
  for (int m = 0; m < b.order(); ++m)
    if (link_of_b[m] < 0) dims.push_back(b.dim(m));
  plan.out_shape = Shape(std::move(dims));
  return plan;
}

}  // namespace

Shape compound_shape(const Shape& a, const Shape& b, const CompoundSpec& spec) {
  return analyze_compound(a, b, spec).out_shape;
}

// ---- primitive evaluation ----

Tensor contract(const Tensor& a, const Tensor& b, int k, int l) {
  const Shape out_shape = contract_shape(a.shape(), b.shape(), k, l);
  const int kk = norm_mode(k, a.order(), "contract");
  const int ll = norm_mode(l, b.order(), "contract");
  const Tensor a2 = permuted(a, move_to_back(a.order(), kk));
  const Tensor b2 = permuted(b, move_to_front(b.order(), ll));
  const std::int64_t kd = a.dim(kk);
  const std::int64_t m = a.numel() / kd;
  const std::int64_t n = b.numel() / kd;
  std::vector<double> out(m * n, 0.0);
  kernels::gemm(a2.data(), b2.data(), out.data(), m, kd, n);
  return Tensor::from_data(out_shape, std::move(out));
}

Tensor multiply_mode(const Tensor& t, const Tensor& m, int k) {
  const Shape out_shape = multiply_mode_shape(t.shape(), m.shape(), k);
  const int kk = norm_mode(k, t.order(), "multiply_mode");
  const std::vector<int> to_back = move_to_back(t.order(), kk);
  const Tensor t2 = permuted(t, to_back);
  const std::int64_t kd = t.dim(kk);
  const std::int64_t rows = t.numel() / kd;
  const std::int64_t cols = m.dim(1);
  std::vector<double> out(rows * cols, 0.0);
  kernels::gemm(t2.data(), m.data(), out.data(), rows, kd, cols);
  std::vector<std::int64_t> tmp_dims;
  for (int i = 0; i < t.order(); ++i)
    if (i != kk) tmp_dims.push_back(t.dim(i));
  tmp_dims.push_back(cols);
  const Tensor staged = Tensor::from_data(Shape(std::move(tmp_dims)), std::move(out));
  return permuted(staged, invert_perm(to_back));
}

Tensor convolve(const Tensor& a, const Tensor& b, int k, int l, ConvMode mode) {
  const Shape out_shape = convolve_shape(a.shape(), b.shape(), k, l, mode);
  const int kk = norm_mode(k, a.order(), "convolve");
  const int ll = norm_mode(l, b.order(), "convolve");
  const std::int64_t in_len = a.dim(kk);
  const std::int64_t ker_len = b.dim(ll);
  const std::int64_t out_len = conv_out_len(in_len, ker_len, mode.padding);
  const std::int64_t off = conv_offset(ker_len, mode.padding);

  Tensor a2 = permuted(a, move_to_back(a.order(), kk));
  Tensor b2 = permuted(b, move_to_back(b.order(), ll));
  if (mode.flavor == ConvFlavor::Convolution && b2.order() > 0)
    b2 = flipaxis(b2, -1);

  const std::int64_t ra = a.numel() / in_len;
  const std::int64_t rb = b.numel() / ker_len;
  std::vector<double> out(ra * rb * out_len, 0.0);
  for (std::int64_t ia = 0; ia < ra; ++ia) {
    const double* x = a2.data() + ia * in_len;
    for (std::int64_t ib = 0; ib < rb; ++ib) {
      const double* w = b2.data() + ib * ker_len;
      double* y = out.data() + (ia * rb + ib) * out_len;
      if (mode.padding == Padding::Valid)
        kernels::corr_valid(x, in_len, w, ker_len, y);
      else
        kernels::corr_shift(x, in_len, w, ker_len, y, out_len, off);
    }
  }

  // current order: [a-rest, b-rest, fiber]; fiber belongs at position kk.
  const int na = a.order(), nb = b.order();
  const int out_order = na + nb - 1;
  std::vector<int> perm(out_order);
  for (int t = 0; t < out_order; ++t) {
    if (t < kk)
      perm[t] = t;
    else if (t == kk)
      perm[t] = out_order - 1;
    else if (t < na)
      perm[t] = t - 1;
    else
      perm[t] = t - 1;
  }
  std::vector<std::int64_t> staged_dims;
  for (int m2 = 0; m2 < na; ++m2)
    if (m2 != kk) staged_dims.push_back(a.dim(m2));
  for (int m2 = 0; m2 < nb; ++m2)
    if (m2 != ll) staged_dims.push_back(b.dim(m2));
  staged_dims.push_back(out_len);
  const Tensor staged =
      Tensor::from_data(Shape(std::move(staged_dims)), std::move(out));
  const Tensor result = permuted(staged, perm);
  if (result.shape() != out_shape)
    fail("convolve: internal shape mismatch");  // defensive; never expected
  return result;
}

Tensor outer(const Tensor& a, const Tensor& b) {
  const Shape out_shape = outer_shape(a.shape(), b.shape());
  std::vector<double> out(a.numel() * b.numel(), 0.0);
  kernels::gemm(a.data(), b.data(), out.data(), a.numel(), 1, b.numel());
  return Tensor::from_data(out_shape, std::move(out));
}

Tensor partial_outer(const Tensor& a, const Tensor& b, int k, int l) {
  const Shape out_shape = partial_outer_shape(a.shape(), b.shape(), k, l);
  const int kk = norm_mode(k, a.order(), "partial_outer");
  const int ll = norm_mode(l, b.order(), "partial_outer");
  const Tensor a2 = permuted(a, move_to_front(a.order(), kk));
  const Tensor b2 = permuted(b, move_to_front(b.order(), ll));
  const std::int64_t r = a.dim(kk);
  const std::int64_t ma = a.numel() / r;
  const std::int64_t nb = b.numel() / r;
  std::vector<double> out(r * ma * nb, 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    kernels::gemm(a2.data() + i * ma, b2.data() + i * nb,
                  out.data() + i * ma * nb, ma, 1, nb);

  // current order: [shared, a-rest, b-rest]; shared belongs at position kk.
  const int na = a.order();
  const int out_order = na + b.order() - 1;
  std::vector<int> perm(out_order);
  for (int t = 0; t < out_order; ++t) {
    if (t < kk)
      perm[t] = t + 1;
    else if (t == kk)
      perm[t] = 0;
    else
      perm[t] = t;
  }
  std::vector<std::int64_t> staged_dims;
  staged_dims.push_back(r);
  for (int m2 = 0; m2 < na; ++m2)
    if (m2 != kk) staged_dims.push_back(a.dim(m2));
  for (int m2 = 0; m2 < b.order(); ++m2)
    if (m2 != ll) staged_dims.push_back(b.dim(m2));
  const Tensor staged =
      Tensor::from_data(Shape(std::move(staged_dims)), std::move(out));
  return permuted(staged, perm);
}

// ---- compound evaluation ----

namespace {

Tensor compound_all_contract(const Tensor& a, const Tensor& b,
                             const CompoundPlan& plan) {
  const int na = a.order(), nb = b.order();
  std::vector<bool> linked_a(na, false), linked_b(nb, false);
  for (const LinkSpec& link : plan.links) {
    linked_a[link.mode_a] = true;
    linked_b[link.mode_b] = true;
  }
  std::vector<int> perm_a, perm_b;
  for (int m = 0; m < na; ++m)
    if (!linked_a[m]) perm_a.push_back(m);
  std::int64_t shared = 1;
  for (const LinkSpec& link : plan.links) {
    perm_a.push_back(link.mode_a);
    perm_b.push_back(link.mode_b);
    shared *= a.dim(link.mode_a);
  }
  for (int m = 0; m < nb; ++m)
    if (!linked_b[m]) perm_b.push_back(m);

  const Tensor a2 = permuted(a, perm_a);
  const Tensor b2 = permuted(b, perm_b);
  const std::int64_t rows = a.numel() / shared;
  const std::int64_t cols = b.numel() / shared;
  std::vector<double> out(rows * cols, 0.0);
  kernels::gemm(a2.data(), b2.data(), out.data(), rows, shared, cols);
  return Tensor::from_data(plan.out_shape, std::move(out));
}

Tensor compound_direct(const Tensor& a, const Tensor& b,
                       const CompoundPlan& plan) {
  const int na = a.order(), nb = b.order();
  const std::vector<std::int64_t> sa = row_major_strides(a.shape());
  const std::vector<std::int64_t> sb = row_major_strides(b.shape());

  std::vector<int> link_of_a(na, -1), link_of_b(nb, -1);
  for (std::size_t i = 0; i < plan.links.size(); ++i) {
    link_of_a[plan.links[i].mode_a] = static_cast<int>(i);
    link_of_b[plan.links[i].mode_b] = static_cast<int>(i);
  }

  // Output modes: per-mode strides into a and b for everything that is fully
  // determined by the output index (a survivors, partial-outer shared modes,
  // b survivors). Convolution output positions are resolved per tap.
  struct ConvAxis {
    std::int64_t stride_a, stride_b;  // strides along the linked modes
    std::int64_t in_len, ker_len, off;
    bool flip;
    int out_pos;  // which output mode carries the sliding position
  };
  const Shape& out_shape = plan.out_shape;
  const int no = out_shape.order();
  std::vector<std::int64_t> out_sa(no, 0), out_sb(no, 0);
  std::vector<ConvAxis> convs;
  struct ContractAxis {
    std::int64_t stride_a, stride_b, dim;
  };
  std::vector<ContractAxis> contracts;

  int pos = 0;
  for (int m = 0; m < na; ++m) {
    const int li = link_of_a[m];
    if (li < 0) {
      out_sa[pos++] = sa[m];
      continue;
    }
    const LinkSpec& link = plan.links[li];
    switch (link.kind) {
      case LinkKind::Contract:
        contracts.push_back({sa[m], sb[link.mode_b], a.dim(m)});
        break;
      case LinkKind::PartialOuter:
        out_sa[pos] = sa[m];
        out_sb[pos] = sb[link.mode_b];
        ++pos;
        break;
      case LinkKind::Convolve:
        convs.push_back({sa[m], sb[link.mode_b], a.dim(m), b.dim(link.mode_b),
                         conv_offset(b.dim(link.mode_b), link.conv.padding),
                         link.conv.flavor == ConvFlavor::Convolution, pos});
        ++pos;
        break;
    }
  }
  for (int m = 0; m < nb; ++m)
    if (link_of_b[m] < 0) out_sb[pos++] = sb[m];

  // Inner space: all contract indices, then one tap index per conv link.
  std::vector<std::int64_t> inner_dims;
  for (const ContractAxis& c : contracts) inner_dims.push_back(c.dim);
  for (const ConvAxis& c : convs) inner_dims.push_back(c.ker_len);
  const int ni = static_cast<int>(inner_dims.size());

  std::vector<double> out(out_shape.numel(), 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  std::vector<std::int64_t> oidx(no, 0), iidx(ni, 0);
  std::uint64_t mults = 0;

  for (std::int64_t o = 0; o < out_shape.numel(); ++o) {
    std::int64_t base_a = 0, base_b = 0;
    for (int m = 0; m < no; ++m) {
      base_a += out_sa[m] * oidx[m];
      base_b += out_sb[m] * oidx[m];
    }
    double acc = 0.0;
    std::fill(iidx.begin(), iidx.end(), 0);
    bool more = true;
    while (more) {
      std::int64_t ia = base_a, ib = base_b;
      bool ok = true;
      for (std::size_t c = 0; c < contracts.size(); ++c) {
        ia += contracts[c].stride_a * iidx[c];
        ib += contracts[c].stride_b * iidx[c];
      }
      for (std::size_t c = 0; c < convs.size(); ++c) {
        const ConvAxis& cv = convs[c];
        const std::int64_t j = iidx[contracts.size() + c];
        const std::int64_t x = oidx[cv.out_pos] + j - cv.off;
        if (x < 0 || x >= cv.in_len) {
          ok = false;
          break;
        }
        ia += cv.stride_a * x;
        ib += cv.stride_b * (cv.flip ? cv.ker_len - 1 - j : j);
      }
      if (ok) {
        acc += pa[ia] * pb[ib];
        ++mults;
      }
      more = false;
      for (int m = ni - 1; m >= 0; --m) {
        if (++iidx[m] < inner_dims[m]) {
          more = true;
          break;
        }
        iidx[m] = 0;
      }
      if (ni == 0) break;
    }
    out[o] = acc;
    for (int m = no - 1; m >= 0; --m) {
      if (++oidx[m] < out_shape.dim(m)) break;
      oidx[m] = 0;
    }
  }
  kernels::count_multiplies(mults);
  return Tensor::from_data(out_shape, std::move(out));
}

}  // namespace

Tensor compound_apply(const Tensor& a, const Tensor& b,
                      const CompoundSpec& spec) {
  const CompoundPlan plan = analyze_compound(a.shape(), b.shape(), spec);
  if (plan.all_contract) return compound_all_contract(a, b, plan);
  return compound_direct(a, b, plan);
}

void compound_backward(const Tensor& a, const Tensor& b,
                       const CompoundSpec& spec, const Tensor& grad_out,
                       Tensor* grad_a, Tensor* grad_b) {
  const CompoundPlan plan = analyze_compound(a.shape(), b.shape(), spec);
  if (grad_out.shape() != plan.out_shape)
    fail("compound_backward: gradient shape ", grad_out.shape().str(),
         " does not match the output shape ", plan.out_shape.str());
  if (!grad_a && !grad_b) return;
  const int na = a.order(), nb = b.order();

  if (plan.all_contract) {
    // Mirror of the GEMM fast path. With the forward written as
    // G[afree, bfree] = A2[afree, links] * B2[links, bfree], the gradients
    // are G * B2^T and A2^T * G, permuted back to the operand mode orders.
    std::vector<bool> linked_a(na, false), linked_b(nb, false);
    for (const LinkSpec& link : plan.links) {
      linked_a[link.mode_a] = true;
      linked_b[link.mode_b] = true;
    }
    std::vector<int> afree, bfree, alink, blink;
    for (int m = 0; m < na; ++m)
      if (!linked_a[m]) afree.push_back(m);
    for (int m = 0; m < nb; ++m)
      if (!linked_b[m]) bfree.push_back(m);
    std::int64_t shared = 1;
    for (const LinkSpec& link : plan.links) {
      alink.push_back(link.mode_a);
      blink.push_back(link.mode_b);
      shared *= a.dim(link.mode_a);
    }
    const std::int64_t rows = a.numel() / shared;
    const std::int64_t cols = b.numel() / shared;

    if (grad_a) {
      std::vector<int> perm_bT = bfree;
      perm_bT.insert(perm_bT.end(), blink.begin(), blink.end());
      const Tensor bT = permuted(b, perm_bT);  // [cols, shared]
      std::vector<double> ga2(static_cast<std::size_t>(rows * shared), 0.0);
      kernels::gemm(grad_out.data(), bT.data(), ga2.data(), rows, cols,
                    shared);
      std::vector<std::int64_t> staged_dims;
      std::vector<int> perm_a = afree;
      perm_a.insert(perm_a.end(), alink.begin(), alink.end());
      for (int m : perm_a) staged_dims.push_back(a.dim(m));
      const Tensor staged =
          Tensor::from_data(Shape(std::move(staged_dims)), std::move(ga2));
      *grad_a = permuted(staged, invert_perm(perm_a));
    }
    if (grad_b) {
      std::vector<int> perm_aT = alink;
      perm_aT.insert(perm_aT.end(), afree.begin(), afree.end());
      const Tensor aT = permuted(a, perm_aT);  // [shared, rows]
      std::vector<double> gb2(static_cast<std::size_t>(shared * cols), 0.0);
      kernels::gemm(aT.data(), grad_out.data(), gb2.data(), shared, rows,
                    cols);
      std::vector<std::int64_t> staged_dims;
      std::vector<int> perm_b = blink;
      perm_b.insert(perm_b.end(), bfree.begin(), bfree.end());
      for (int m : perm_b) staged_dims.push_back(b.dim(m));
      const Tensor staged =
          Tensor::from_data(Shape(std::move(staged_dims)), std::move(gb2));
      *grad_b = permuted(staged, invert_perm(perm_b));
    }
    return;
  }

  // Direct mirrored loop: walk exactly the forward (output, inner) pairs and
  // scatter each term's contribution into the requested operand gradients.
  const std::vector<std::int64_t> sa = row_major_strides(a.shape());
  const std::vector<std::int64_t> sb = row_major_strides(b.shape());
  std::vector<int> link_of_a(na, -1), link_of_b(nb, -1);
  for (std::size_t i = 0; i < plan.links.size(); ++i) {
    link_of_a[plan.links[i].mode_a] = static_cast<int>(i);
    link_of_b[plan.links[i].mode_b] = static_cast<int>(i);
  }

  struct ConvAxis {
    std::int64_t stride_a, stride_b;
    std::int64_t in_len, ker_len, off;
    bool flip;
    int out_pos;
  };
  const Shape& out_shape = plan.out_shape;
  const int no = out_shape.order();
  std::vector<std::int64_t> out_sa(no, 0), out_sb(no, 0);
  std::vector<ConvAxis> convs;
  struct ContractAxis {
    std::int64_t stride_a, stride_b, dim;
  };
  std::vector<ContractAxis> contracts;

  int pos = 0;
  for (int m = 0; m < na; ++m) {
    const int li = link_of_a[m];
    if (li < 0) {
      out_sa[pos++] = sa[m];
      continue;
    }
    const LinkSpec& link = plan.links[li];
    switch (link.kind) {
      case LinkKind::Contract:
        contracts.push_back({sa[m], sb[link.mode_b], a.dim(m)});
        break;
      case LinkKind::PartialOuter:
        out_sa[pos] = sa[m];
        out_sb[pos] = sb[link.mode_b];
        ++pos;
        break;
      case LinkKind::Convolve:
        convs.push_back({sa[m], sb[link.mode_b], a.dim(m), b.dim(link.mode_b),
                         conv_offset(b.dim(link.mode_b), link.conv.padding),
                         link.conv.flavor == ConvFlavor::Convolution, pos});
        ++pos;
        break;
    }
  }
  for (int m = 0; m < nb; ++m)
    if (link_of_b[m] < 0) out_sb[pos++] = sb[m];

  std::vector<std::int64_t> inner_dims;
  for (const ContractAxis& c : contracts) inner_dims.push_back(c.dim);
  for (const ConvAxis& c : convs) inner_dims.push_back(c.ker_len);
  const int ni = static_cast<int>(inner_dims.size());

  std::vector<double> ga(grad_a ? a.numel() : 0, 0.0);
  std::vector<double> gb(grad_b ? b.numel() : 0, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  const double* pg = grad_out.data();
  std::vector<std::int64_t> oidx(no, 0), iidx(ni, 0);
  std::uint64_t mults = 0;

  for (std::int64_t o = 0; o < out_shape.numel(); ++o) {
    std::int64_t base_a = 0, base_b = 0;
    for (int m = 0; m < no; ++m) {
      base_a += out_sa[m] * oidx[m];
      base_b += out_sb[m] * oidx[m];
    }
    const double g = pg[o];
    std::fill(iidx.begin(), iidx.end(), 0);
    bool more = true;
    while (more) {
      std::int64_t ia = base_a, ib = base_b;
      bool ok = true;
      for (std::size_t c = 0; c < contracts.size(); ++c) {
        ia += contracts[c].stride_a * iidx[c];
        ib += contracts[c].stride_b * iidx[c];
      }
      for (std::size_t c = 0; c < convs.size(); ++c) {
        const ConvAxis& cv = convs[c];
        const std::int64_t j = iidx[contracts.size() + c];
        const std::int64_t x = oidx[cv.out_pos] + j - cv.off;
        if (x < 0 || x >= cv.in_len) {
          ok = false;
          break;
        }
        ia += cv.stride_a * x;
        ib += cv.stride_b * (cv.flip ? cv.ker_len - 1 - j : j);
      }
      if (ok) {
        if (grad_a) {
          ga[ia] += g * pb[ib];
          ++mults;
        }
        if (grad_b) {
          gb[ib] += g * pa[ia];
          ++mults;
        }
      }
      more = false;
      for (int m = ni - 1; m >= 0; --m) {
        if (++iidx[m] < inner_dims[m]) {
          more = true;
          break;
        }
        iidx[m] = 0;
      }
      if (ni == 0) break;
    }
    for (int m = no - 1; m >= 0; --m) {
      if (++oidx[m] < out_shape.dim(m)) break;
      oidx[m] = 0;
    }
  }
  kernels::count_multiplies(mults);
  if (grad_a) *grad_a = Tensor::from_data(a.shape(), std::move(ga));
  if (grad_b) *grad_b = Tensor::from_data(b.shape(), std::move(gb));
}

// ---- cost model ----

CostEstimate cost_contract(const Shape& a, const Shape& b, int k, int l) {
  contract_shape(a, b, k, l);
  const int ll = norm_mode(l, b.order(), "contract");
  const std::uint64_t n =
      static_cast<std::uint64_t>(a.numel()) * prod_except(b, ll);
  return {n, "contract: prod(I) * prod(J)/J_l"};
}

CostEstimate cost_multiply_mode(const Shape& t, const Shape& m, int k) {
  multiply_mode_shape(t, m, k);
  const std::uint64_t n = static_cast<std::uint64_t>(t.numel()) * m.dim(1);
  return {n, "multiply-mode: prod(I) * J"};
}

CostEstimate cost_convolve(const Shape& a, const Shape& b, int k, int l,
                           ConvMode mode) {
  convolve_shape(a, b, k, l, mode);
  const int kk = norm_mode(k, a.order(), "convolve");
  const int ll = norm_mode(l, b.order(), "convolve");
  const std::uint64_t fibers = static_cast<std::uint64_t>(prod_except(a, kk)) *
                               prod_except(b, ll);
  const std::uint64_t n = fibers * conv_pairs(a.dim(kk), b.dim(ll), mode.padding);
  return {n, "convolve: prod(I)/I_k * prod(J)/J_l * pairs(I_k, J_l)"};
}

CostEstimate cost_outer(const Shape& a, const Shape& b) {
  return {static_cast<std::uint64_t>(a.numel()) * b.numel(),
          "outer: prod(I) * prod(J)"};
}

CostEstimate cost_partial_outer(const Shape& a, const Shape& b, int k, int l) {
  partial_outer_shape(a, b, k, l);
  const int ll = norm_mode(l, b.order(), "partial_outer");
  const std::uint64_t n =
      static_cast<std::uint64_t>(a.numel()) * prod_except(b, ll);
  return {n, "partial-outer: prod(I) * prod(J)/J_l"};
}

CostEstimate cost_compound(const Shape& a, const Shape& b,
                           const CompoundSpec& spec) {
  const CompoundPlan plan = analyze_compound(a, b, spec);
  // Non-conv output extent x contracted extent x in-range conv pairs. This is
  // exactly what the direct loop executes; the all-contract GEMM path
  // multiplies the same number of times.
  std::uint64_t n = 1;
  std::vector<bool> linked_a(a.order(), false), linked_b(b.order(), false);
  for (const LinkSpec& link : plan.links) {
    linked_a[link.mode_a] = true;
    linked_b[link.mode_b] = true;
    switch (link.kind) {
      case LinkKind::Contract:
      case LinkKind::PartialOuter:
        n *= static_cast<std::uint64_t>(a.dim(link.mode_a));
        break;
      case LinkKind::Convolve:
        n *= conv_pairs(a.dim(link.mode_a), b.dim(link.mode_b),
                        link.conv.padding);
        break;
    }
  }
  for (int m = 0; m < a.order(); ++m)
    if (!linked_a[m]) n *= static_cast<std::uint64_t>(a.dim(m));
  for (int m = 0; m < b.order(); ++m)
    if (!linked_b[m]) n *= static_cast<std::uint64_t>(b.dim(m));
  return {n, "compound: prod(free) * prod(linked pairs)"};
}

// ---- attachments ----

namespace {

struct Slot {
  std::int64_t dim;
  int origin_att;   // -1: original hub mode, else attachment index
  int origin_mode;  // hub mode or factor mode
};

struct AttachSim {
  std::vector<Slot> slots;

  Shape shape() const {
    std::vector<std::int64_t> dims;
    dims.reserve(slots.size());
    for (const Slot& s : slots) dims.push_back(s.dim);
    return Shape(std::move(dims));
  }

  int position_of_hub_mode(int hub_mode) const {
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i].origin_att == -1 && slots[i].origin_mode == hub_mode)
        return static_cast<int>(i);
    fail("compound_attach: hub mode ", hub_mode, " already consumed");
  }
};

int rank_of_kind(LinkKind k) {
  switch (k) {
    case LinkKind::Contract:
      return 0;
    case LinkKind::Convolve:
      return 1;
    case LinkKind::PartialOuter:
      return 2;
  }
  return 3;
}

struct SimResult {
  std::uint64_t total = 0;
  std::vector<std::uint64_t> step_cost;
  std::vector<std::pair<int, int>> key;  // (kind rank, attachment index)
};

// Validate attachments against the original hub shape and normalize modes.
std::vector<Attachment> normalize_attachments(const Shape& hub,
                                              const AttachmentSpec& spec) {
  if (spec.items.empty()) fail("compound_attach: needs at least one attachment");
  std::vector<bool> used(hub.order(), false);
  std::vector<Attachment> items;
  for (const Attachment& raw : spec.items) {
    Attachment att = raw;
    att.hub_mode = norm_mode(att.hub_mode, hub.order(), "compound_attach");
    att.factor_mode =
        norm_mode(att.factor_mode, att.factor.order(), "compound_attach");
    if (used[att.hub_mode])
      fail("compound_attach: hub mode ", att.hub_mode, " attached twice");
    used[att.hub_mode] = true;
    switch (att.kind) {
      case LinkKind::Contract:
      case LinkKind::PartialOuter:
        if (hub.dim(att.hub_mode) != att.factor.dim(att.factor_mode))
          fail("compound_attach: ", kind_name(att.kind), " dims differ: ",
               hub.dim(att.hub_mode), " vs ", att.factor.dim(att.factor_mode));
        break;
      case LinkKind::Convolve:
        conv_out_len(hub.dim(att.hub_mode), att.factor.dim(att.factor_mode),
                     att.conv.padding);
        break;
    }
    items.push_back(std::move(att));
  }
  return items;
}

// Cost and bookkeeping of applying the attachments in the given order.
SimResult simulate_order(const Shape& hub,
                         const std::vector<Attachment>& items,
                         const std::vector<int>& order) {
  AttachSim sim;
  for (int m = 0; m < hub.order(); ++m)
    sim.slots.push_back({hub.dim(m), -1, m});

  SimResult res;
  for (int ai : order) {
    const Attachment& att = items[ai];
    const int p = sim.position_of_hub_mode(att.hub_mode);
    const Shape cur = sim.shape();
    const CompoundSpec step{{LinkSpec{att.kind, p, att.factor_mode, att.conv}}};
    const std::uint64_t c =
        cost_compound(cur, att.factor.shape(), step).multiplies;
    res.total += c;
    res.step_cost.push_back(c);
    res.key.push_back({rank_of_kind(att.kind), ai});

    // update slots
    switch (att.kind) {
      case LinkKind::Contract:
        sim.slots.erase(sim.slots.begin() + p);
        break;
      case LinkKind::Convolve:
        sim.slots[p].dim = conv_out_len(
            sim.slots[p].dim, att.factor.dim(att.factor_mode), att.conv.padding);
        break;
      case LinkKind::PartialOuter:
        break;
    }
    for (int m = 0; m < att.factor.order(); ++m)
      if (m != att.factor_mode)
        sim.slots.push_back({att.factor.dim(m), ai, m});
  }
  return res;
}

}  // namespace

Plan plan_order(const Shape& hub, const AttachmentSpec& spec) {
  const std::vector<Attachment> items = normalize_attachments(hub, spec);
  const int n = static_cast<int>(items.size());

  std::vector<int> best_order;
  SimResult best;
  bool have_best = false;

  auto consider = [&](const std::vector<int>& order) {
    SimResult r = simulate_order(hub, items, order);
    if (!have_best || r.total < best.total ||
        (r.total == best.total && r.key < best.key)) {
      best = std::move(r);
      best_order = order;
      have_best = true;
    }
  };

  if (n <= 8) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    do {
      consider(order);
    } while (std::next_permutation(order.begin(), order.end()));
  } else {
    // Greedy: repeatedly take the cheapest next step (ties by kind, index).
    AttachSim sim;
    for (int m = 0; m < hub.order(); ++m)
      sim.slots.push_back({hub.dim(m), -1, m});
    std::vector<bool> done(n, false);
    std::vector<int> order;
    for (int step = 0; step < n; ++step) {
      int pick = -1;
      std::uint64_t pick_cost = 0;
      std::pair<int, int> pick_key{};
      for (int ai = 0; ai < n; ++ai) {
        if (done[ai]) continue;
        const Attachment& att = items[ai];
        const int p = sim.position_of_hub_mode(att.hub_mode);
        const CompoundSpec one{{LinkSpec{att.kind, p, att.factor_mode, att.conv}}};
        const std::uint64_t c =
            cost_compound(sim.shape(), att.factor.shape(), one).multiplies;
        const std::pair<int, int> key{rank_of_kind(att.kind), ai};
        if (pick < 0 || c < pick_cost || (c == pick_cost && key < pick_key)) {
          pick = ai;
          pick_cost = c;
          pick_key = key;
        }
      }
      done[pick] = true;
      order.push_back(pick);
      const Attachment& att = items[pick];
      const int p = sim.position_of_hub_mode(att.hub_mode);
      switch (att.kind) {
        case LinkKind::Contract:
          sim.slots.erase(sim.slots.begin() + p);
          break;
        case LinkKind::Convolve:
          sim.slots[p].dim =
              conv_out_len(sim.slots[p].dim, att.factor.dim(att.factor_mode),
                           att.conv.padding);
          break;
        case LinkKind::PartialOuter:
          break;
      }
      for (int m = 0; m < att.factor.order(); ++m)
        if (m != att.factor_mode)
          sim.slots.push_back({att.factor.dim(m), pick, m});
    }
    consider(order);
  }

  Plan plan;
  for (std::size_t i = 0; i < best_order.size(); ++i)
    plan.steps.push_back({best_order[i], best.step_cost[i]});
  plan.total_multiplies = best.total;
  return plan;
}

Tensor compound_attach(const Tensor& hub, const AttachmentSpec& spec) {
  const std::vector<Attachment> items = normalize_attachments(hub.shape(), spec);
  const Plan plan = plan_order(hub.shape(), spec);

  AttachSim sim;
  for (int m = 0; m < hub.order(); ++m)
    sim.slots.push_back({hub.dim(m), -1, m});

  Tensor cur = hub;
  for (const PlanStep& step : plan.steps) {
    const Attachment& att = items[step.attachment];
    const int p = sim.position_of_hub_mode(att.hub_mode);
    cur = compound_apply(
        cur, att.factor,
        CompoundSpec{{LinkSpec{att.kind, p, att.factor_mode, att.conv}}});
    switch (att.kind) {
      case LinkKind::Contract:
        sim.slots.erase(sim.slots.begin() + p);
        break;
      case LinkKind::Convolve:
        sim.slots[p].dim = conv_out_len(
            sim.slots[p].dim, att.factor.dim(att.factor_mode), att.conv.padding);
        break;
      case LinkKind::PartialOuter:
        break;
    }
    for (int m = 0; m < att.factor.order(); ++m)
      if (m != att.factor_mode)
        sim.slots.push_back({att.factor.dim(m), step.attachment, m});
  }

  // Canonical order: hub survivors in hub order, then each attachment's
  // surviving factor modes in attachment-list order.
  std::vector<std::pair<int, int>> target;
  for (const Slot& s : sim.slots)
    if (s.origin_att == -1) target.push_back({-1, s.origin_mode});
  std::sort(target.begin(), target.end(),
            [](const auto& x, const auto& y) { return x.second < y.second; });
  for (std::size_t ai = 0; ai < items.size(); ++ai)
    for (int m = 0; m < items[ai].factor.order(); ++m)
      if (m != items[ai].factor_mode)
        target.push_back({static_cast<int>(ai), m});

  std::vector<int> perm;
  for (const auto& want : target)
    for (std::size_t i = 0; i < sim.slots.size(); ++i)
      if (sim.slots[i].origin_att == want.first &&
          sim.slots[i].origin_mode == want.second) {
        perm.push_back(static_cast<int>(i));
        break;
      }
  return permuted(cur, perm);
}

// ---- descriptor dispatch ----

Tensor apply_op(const OpDesc& op, const Tensor& a, const Tensor& b) {
  return std::visit(
      [&](const auto& o) -> Tensor {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OpContract>)
          return contract(a, b, o.k, o.l);
        else if constexpr (std::is_same_v<T, OpMultiplyMode>)
          return multiply_mode(a, b, o.k);
        else if constexpr (std::is_same_v<T, OpConvolve>)
          return convolve(a, b, o.k, o.l, o.mode);
        else if constexpr (std::is_same_v<T, OpOuter>)
          return outer(a, b);
        else if constexpr (std::is_same_v<T, OpPartialOuter>)
          return partial_outer(a, b, o.k, o.l);
        else
          return compound_apply(a, b, o.spec);
      },
      op);
}

Shape op_result_shape(const OpDesc& op, const Shape& a, const Shape& b) {
  return std::visit(
      [&](const auto& o) -> Shape {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OpContract>)
          return contract_shape(a, b, o.k, o.l);
        else if constexpr (std::is_same_v<T, OpMultiplyMode>)
          return multiply_mode_shape(a, b, o.k);
        else if constexpr (std::is_same_v<T, OpConvolve>)
          return convolve_shape(a, b, o.k, o.l, o.mode);
        else if constexpr (std::is_same_v<T, OpOuter>)
          return outer_shape(a, b);
        else if constexpr (std::is_same_v<T, OpPartialOuter>)
          return partial_outer_shape(a, b, o.k, o.l);
        else
          return compound_shape(a, b, o.spec);
      },
      op);
}

CostEstimate op_cost(const OpDesc& op, const Shape& a, const Shape& b) {
  return std::visit(
      [&](const auto& o) -> CostEstimate {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, OpContract>)
          return cost_contract(a, b, o.k, o.l);
        else if constexpr (std::is_same_v<T, OpMultiplyMode>)
          return cost_multiply_mode(a, b, o.k);
        else if constexpr (std::is_same_v<T, OpConvolve>)
          return cost_convolve(a, b, o.k, o.l, o.mode);
        else if constexpr (std::is_same_v<T, OpOuter>)
          return cost_outer(a, b);
        else if constexpr (std::is_same_v<T, OpPartialOuter>)
          return cost_partial_outer(a, b, o.k, o.l);
        else
          return cost_compound(a, b, o.spec);
      },
      op);
}

}  // namespace tnn
