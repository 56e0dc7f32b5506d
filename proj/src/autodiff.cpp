#include "tnn/autodiff.hpp"

#include <algorithm>
#include <utility>

#include "tnn/common.hpp"
#include "tnn/kernels.hpp"

namespace tnn {
namespace {

bool is_identity(const std::vector<int>& perm) {
  for (int i = 0; i < static_cast<int>(perm.size()); ++i)
    if (perm[i] != i) return false;
  return true;
}

Tensor permuted(const Tensor& t, const std::vector<int>& perm) {
  if (is_identity(perm)) return t;
  return swapaxes(t, perm);
}

// perm moving mode k to the back, everything else closing ranks.
std::vector<int> move_to_back(int n, int k) {
  std::vector<int> p;
  for (int i = 0; i < n; ++i)
    if (i != k) p.push_back(i);
  p.push_back(k);
  return p;
}

std::vector<int> invert_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (int i = 0; i < static_cast<int>(perm.size()); ++i) inv[perm[i]] = i;
  return inv;
}

// perm taking a [shared, rest...] layout back to one with shared at mode k.
std::vector<int> move_front_home(int n, int k) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i < k ? i + 1 : (i == k ? 0 : i);
  return p;
}

// ---- per-op gradient rules ----

VjpResult vjp_contract(const Tensor& a, const Tensor& b, int k, int l,
                       const Tensor& grad, bool need_a, bool need_b) {
  const int m = a.order(), n = b.order();
  const int kk = norm_mode(k, m, "contract");
  const int ll = norm_mode(l, n, "contract");
  VjpResult r;
  // grad has modes [a-rest (m-1), b-rest (n-1)]. Contracting its b-rest
  // block against the surviving modes of b regenerates the contracted mode
  // of a at the back; a mode shuffle puts it home (and symmetrically for b).
  if (need_a) {
    Tensor staged;  // [a-rest..., I_k]
    if (n == 1) {
      staged = outer(grad, b);
    } else {
      CompoundSpec s;
      int pos = m - 1;
      for (int v = 0; v < n; ++v)
        if (v != ll) s.links.push_back({LinkKind::Contract, pos++, v, {}});
      staged = compound_apply(grad, b, s);
    }
    r.grad_a = permuted(staged, invert_perm(move_to_back(m, kk)));
  }
  if (need_b) {
    Tensor staged;  // [b-rest..., J_l]
    if (m == 1) {
      staged = outer(grad, a);
    } else {
      CompoundSpec s;
      int pos = 0;
      for (int u = 0; u < m; ++u)
        if (u != kk) s.links.push_back({LinkKind::Contract, pos++, u, {}});
      staged = compound_apply(grad, a, s);
    }
    r.grad_b = permuted(staged, invert_perm(move_to_back(n, ll)));
  }
  return r;
}

VjpResult vjp_multiply_mode(const Tensor& t, const Tensor& m, int k,
                            const Tensor& grad, bool need_a, bool need_b) {
  const int kk = norm_mode(k, t.order(), "multiply_mode");
  VjpResult r;
  // The replaced mode stays in place, so the input gradient is the same
  // mode-k product against the transposed matrix; the matrix gradient
  // contracts input and output over every other mode.
  if (need_a) r.grad_a = multiply_mode(grad, swapaxes(m, {1, 0}), kk);
  if (need_b) {
    if (t.order() == 1) {
      r.grad_b = outer(t, grad);
    } else {
      CompoundSpec s;
      for (int u = 0; u < t.order(); ++u)
        if (u != kk) s.links.push_back({LinkKind::Contract, u, u, {}});
      r.grad_b = compound_apply(t, grad, s);
    }
  }
  return r;
}

VjpResult vjp_convolve(const Tensor& a, const Tensor& b, int k, int l,
                       ConvMode mode, const Tensor& grad, bool need_a,
                       bool need_b) {
  const int m = a.order(), n = b.order();
  const int kk = norm_mode(k, m, "convolve");
  const int ll = norm_mode(l, n, "convolve");
  const std::int64_t in_len = a.dim(kk);
  const std::int64_t ker_len = b.dim(ll);
  const std::int64_t out_len = conv_out_len(in_len, ker_len, mode.padding);
  const std::int64_t off = conv_offset(ker_len, mode.padding);

  // grad modes: a-modes with the output fiber at kk, then b survivors.
  // Flattened with the fiber last: [RA, RB, out_len].
  const Tensor g2 = permuted(grad, move_to_back(grad.order(), kk));
  const std::int64_t ra_count = a.numel() / in_len;
  const std::int64_t rb_count = b.numel() / ker_len;

  VjpResult r;
  if (need_a) {
    // d/dx of y[p] = sum_j x[p+j-off] w[j] is a sliding pass of the output
    // gradient against the reversed kernel with offset (J-1-off); under the
    // Convolution flavor the forward kernel is already reversed, so the
    // adjoint uses it as stored.
    Tensor w = permuted(b, move_to_back(n, ll));  // [b-rest..., J]
    if (mode.flavor == ConvFlavor::Correlation && ker_len > 1)
      w = flipaxis(w, -1);
    std::vector<double> ga(static_cast<std::size_t>(a.numel()), 0.0);
    for (std::int64_t ra = 0; ra < ra_count; ++ra)
      for (std::int64_t rb = 0; rb < rb_count; ++rb)
        kernels::corr_shift(g2.data() + (ra * rb_count + rb) * out_len,
                            out_len, w.data() + rb * ker_len, ker_len,
                            ga.data() + ra * in_len, in_len,
                            ker_len - 1 - off);
    std::vector<std::int64_t> dims;
    for (int u = 0; u < m; ++u)
      if (u != kk) dims.push_back(a.dim(u));
    dims.push_back(in_len);
    const Tensor staged =
        Tensor::from_data(Shape(std::move(dims)), std::move(ga));
    r.grad_a = permuted(staged, invert_perm(move_to_back(m, kk)));
  }
  if (need_b) {
    // d/dw of the same pass slides the input against the output gradient
    // with the forward offset; under the Convolution flavor the result is
    // the gradient w.r.t. the reversed kernel, so reverse it once more.
    const Tensor a2 = permuted(a, move_to_back(m, kk));  // [a-rest..., I]
    std::vector<double> gb(static_cast<std::size_t>(b.numel()), 0.0);
    for (std::int64_t ra = 0; ra < ra_count; ++ra)
      for (std::int64_t rb = 0; rb < rb_count; ++rb)
        kernels::corr_shift(a2.data() + ra * in_len, in_len,
                            g2.data() + (ra * rb_count + rb) * out_len,
                            out_len, gb.data() + rb * ker_len, ker_len, off);
    std::vector<std::int64_t> dims;
    for (int v = 0; v < n; ++v)
      if (v != ll) dims.push_back(b.dim(v));
    dims.push_back(ker_len);
    Tensor staged = Tensor::from_data(Shape(std::move(dims)), std::move(gb));
    if (mode.flavor == ConvFlavor::Convolution && ker_len > 1)
      staged = flipaxis(staged, -1);
    r.grad_b = permuted(staged, invert_perm(move_to_back(n, ll)));
  }
  return r;
}

VjpResult vjp_outer(const Tensor& a, const Tensor& b, const Tensor& grad,
                    bool need_a, bool need_b) {
  const int m = a.order(), n = b.order();
  VjpResult r;
  if (n == 0) {  // outer with a scalar degenerates to scaling
    if (need_a) r.grad_a = scale(grad, b.flat(0));
    if (need_b)
      r.grad_b = Tensor::scalar(kernels::dot(grad.data(), a.data(), a.numel()));
    return r;
  }
  if (m == 0) {
    if (need_a)
      r.grad_a = Tensor::scalar(kernels::dot(grad.data(), b.data(), b.numel()));
    if (need_b) r.grad_b = scale(grad, a.flat(0));
    return r;
  }
  if (need_a) {
    CompoundSpec s;
    for (int v = 0; v < n; ++v)
      s.links.push_back({LinkKind::Contract, m + v, v, {}});
    r.grad_a = compound_apply(grad, b, s);
  }
  if (need_b) {
    CompoundSpec s;
    for (int u = 0; u < m; ++u)
      s.links.push_back({LinkKind::Contract, u, u, {}});
    r.grad_b = compound_apply(grad, a, s);
  }
  return r;
}

VjpResult vjp_partial_outer(const Tensor& a, const Tensor& b, int k, int l,
                            const Tensor& grad, bool need_a, bool need_b) {
  const int m = a.order(), n = b.order();
  const int kk = norm_mode(k, m, "partial_outer");
  const int ll = norm_mode(l, n, "partial_outer");
  VjpResult r;
  // The shared mode rides along (partial outer link); all other modes of the
  // counterpart operand are contracted away.
  if (need_a) {
    CompoundSpec s;
    s.links.push_back({LinkKind::PartialOuter, kk, ll, {}});
    int pos = m;
    for (int v = 0; v < n; ++v)
      if (v != ll) s.links.push_back({LinkKind::Contract, pos++, v, {}});
    r.grad_a = compound_apply(grad, b, s);  // already a-shaped
  }
  if (need_b) {
    CompoundSpec s;
    s.links.push_back({LinkKind::PartialOuter, kk, kk, {}});
    for (int u = 0; u < m; ++u)
      if (u != kk) s.links.push_back({LinkKind::Contract, u, u, {}});
    const Tensor staged = compound_apply(grad, a, s);  // [shared, b-rest...]
    r.grad_b = permuted(staged, move_front_home(n, ll));
  }
  return r;
}

}  // namespace

Tensor adjoint_convolve(const Tensor& grad_fiber, const Tensor& kernel_fiber,
                        ConvMode mode) {
  if (grad_fiber.order() != 1 || kernel_fiber.order() != 1)
    fail("adjoint_convolve: expects 1-D fibers, got orders ",
         grad_fiber.order(), " and ", kernel_fiber.order());
  const std::int64_t out_len = grad_fiber.dim(0);
  const std::int64_t ker_len = kernel_fiber.dim(0);
  std::int64_t in_len = 0;
  switch (mode.padding) {
    case Padding::Valid:
      in_len = out_len + ker_len - 1;
      break;
    case Padding::Same:
      in_len = out_len;
      break;
    case Padding::Full:
      in_len = out_len - ker_len + 1;
      break;
  }
  if (in_len < 1)
    fail("adjoint_convolve: gradient length ", out_len,
         " is inconsistent with kernel length ", ker_len,
         " under this padding");
  const std::int64_t off = conv_offset(ker_len, mode.padding);
  const Tensor w = mode.flavor == ConvFlavor::Correlation && ker_len > 1
                       ? flipaxis(kernel_fiber, 0)
                       : kernel_fiber;
  std::vector<double> out(static_cast<std::size_t>(in_len), 0.0);
  kernels::corr_shift(grad_fiber.data(), out_len, w.data(), ker_len,
                      out.data(), in_len, ker_len - 1 - off);
  return Tensor::from_data(Shape{in_len}, std::move(out));
}

VjpResult vjp(const OpDesc& op, const Tensor& a, const Tensor& b,
              const Tensor& grad_out, bool need_a, bool need_b) {
  const Shape want = op_result_shape(op, a.shape(), b.shape());
  if (grad_out.shape() != want)
    fail("vjp: gradient shape ", grad_out.shape().str(),
         " does not match the op output shape ", want.str());

  VjpResult r;
  if (const auto* o = std::get_if<OpContract>(&op)) {
    r = vjp_contract(a, b, o->k, o->l, grad_out, need_a, need_b);
  } else if (const auto* o = std::get_if<OpMultiplyMode>(&op)) {
    r = vjp_multiply_mode(a, b, o->k, grad_out, need_a, need_b);
  } else if (const auto* o = std::get_if<OpConvolve>(&op)) {
    r = vjp_convolve(a, b, o->k, o->l, o->mode, grad_out, need_a, need_b);
  } else if (std::get_if<OpOuter>(&op)) {
    r = vjp_outer(a, b, grad_out, need_a, need_b);
  } else if (const auto* o = std::get_if<OpPartialOuter>(&op)) {
    r = vjp_partial_outer(a, b, o->k, o->l, grad_out, need_a, need_b);
  } else {
    const auto& spec = std::get<OpCompound>(op).spec;
    Tensor ga, gb;
    compound_backward(a, b, spec, grad_out, need_a ? &ga : nullptr,
                      need_b ? &gb : nullptr);
    if (need_a) r.grad_a = std::move(ga);
    if (need_b) r.grad_b = std::move(gb);
  }

  if (need_a && (!r.grad_a || r.grad_a->shape() != a.shape()))
    fail("vjp: internal shape mismatch in the first operand gradient");
  if (need_b && (!r.grad_b || r.grad_b->shape() != b.shape()))
    fail("vjp: internal shape mismatch in the second operand gradient");
  return r;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double eps) {
  if (!(eps > 0)) fail("finite_difference_grad: eps must be positive");
  const std::vector<double> base(x.data(), x.data() + x.numel());
  std::vector<double> g(static_cast<std::size_t>(x.numel()), 0.0);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    std::vector<double> bumped = base;
    bumped[i] = base[i] + eps;
    const double fp = f(Tensor::from_data(x.shape(), std::move(bumped)));
    bumped = base;
    bumped[i] = base[i] - eps;
    const double fm = f(Tensor::from_data(x.shape(), std::move(bumped)));
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return Tensor::from_data(x.shape(), std::move(g));
}

// ---- tape ----

namespace {

// Sum g over every mode except `mode`; result is 1-D of length g.dim(mode).
Tensor sum_except(const Tensor& g, int mode) {
  const std::vector<std::int64_t> strides = row_major_strides(g.shape());
  std::vector<double> out(static_cast<std::size_t>(g.dim(mode)), 0.0);
  for (std::int64_t i = 0; i < g.numel(); ++i)
    out[(i / strides[mode]) % g.dim(mode)] += g.flat(i);
  return Tensor::from_data(Shape{g.dim(mode)}, std::move(out));
}

Tensor add_broadcast(const Tensor& t, const Tensor& bias, int mode) {
  const std::vector<std::int64_t> strides = row_major_strides(t.shape());
  std::vector<double> out(t.data(), t.data() + t.numel());
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out[i] += bias.flat((i / strides[mode]) % t.dim(mode));
  return Tensor::from_data(t.shape(), std::move(out));
}

}  // namespace

const Tensor& GradMap::at(ValueId id) const {
  const auto it = grads_.find(id);
  if (it == grads_.end()) fail("GradMap: no gradient recorded for value ", id);
  return it->second;
}

const Tape::Node& Tape::node(ValueId id, const char* what) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    fail(what, ": unknown value id ", id);
  return nodes_[id];
}

ValueId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

ValueId Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.kind = Kind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

ValueId Tape::apply(const OpDesc& op, ValueId a, ValueId b) {
  const Node& na = node(a, "Tape::apply");
  const Node& nb = node(b, "Tape::apply");
  Node n;
  n.kind = Kind::Binary;
  n.op = op;
  n.a = a;
  n.b = b;
  n.value = apply_op(op, na.value, nb.value);
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

ValueId Tape::reshape(ValueId a, const Shape& shape) {
  const Node& na = node(a, "Tape::reshape");
  Node n;
  n.kind = Kind::Reshape;
  n.a = a;
  n.value = tnn::reshape(na.value, shape);
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

ValueId Tape::swapaxes(ValueId a, std::vector<int> perm) {
  const Node& na = node(a, "Tape::swapaxes");
  Node n;
  n.kind = Kind::Swapaxes;
  n.a = a;
  n.value = tnn::swapaxes(na.value, perm);
  n.perm = std::move(perm);
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

ValueId Tape::relu(ValueId a) {
  const Node& na = node(a, "Tape::relu");
  Node n;
  n.kind = Kind::Relu;
  n.a = a;
  n.value = tnn::relu(na.value);
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Node& na = node(a, "Tape::add");
  const Node& nb = node(b, "Tape::add");
  Node n;
  n.kind = Kind::Add;
  n.a = a;
  n.b = b;
  n.value = tnn::add(na.value, nb.value);
  n.needs_grad = na.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

ValueId Tape::add_bias(ValueId t, ValueId bias, int mode) {
  const Node& nt = node(t, "Tape::add_bias");
  const Node& nb = node(bias, "Tape::add_bias");
  const int kk = norm_mode(mode, nt.value.order(), "add_bias");
  if (nb.value.order() != 1 || nb.value.dim(0) != nt.value.dim(kk))
    fail("add_bias: bias shape ", nb.value.shape().str(),
         " does not match mode ", kk, " of ", nt.value.shape().str());
  Node n;
  n.kind = Kind::Bias;
  n.a = t;
  n.b = bias;
  n.bias_mode = kk;
  n.value = add_broadcast(nt.value, nb.value, kk);
  n.needs_grad = nt.needs_grad || nb.needs_grad;
  return push(std::move(n));
}

ValueId Tape::scale(ValueId a, double factor) {
  const Node& na = node(a, "Tape::scale");
  Node n;
  n.kind = Kind::Scale;
  n.a = a;
  n.factor = factor;
  n.value = tnn::scale(na.value, factor);
  n.needs_grad = na.needs_grad;
  return push(std::move(n));
}

const Tensor& Tape::value(ValueId id) const {
  return node(id, "Tape::value").value;
}

bool Tape::requires_grad(ValueId id) const {
  return node(id, "Tape::requires_grad").requires_grad;
}

GradMap Tape::backward(ValueId root, const Tensor& seed) const {
  const Node& rn = node(root, "Tape::backward");
  if (seed.shape() != rn.value.shape())
    fail("Tape::backward: seed shape ", seed.shape().str(),
         " does not match the root value shape ", rn.value.shape().str());

  std::vector<std::optional<Tensor>> g(nodes_.size());
  if (rn.needs_grad) g[root] = seed;

  const auto accumulate = [&](int id, const Tensor& t) {
    if (!nodes_[id].needs_grad) return;
    if (g[id])
      g[id] = tnn::add(*g[id], t);
    else
      g[id] = t;
  };

  for (int i = root; i >= 0; --i) {
    if (!g[i]) continue;
    const Node& nd = nodes_[i];
    const Tensor& go = *g[i];
    switch (nd.kind) {
      case Kind::Leaf:
        break;
      case Kind::Binary: {
        const bool na = nodes_[nd.a].needs_grad;
        const bool nb = nodes_[nd.b].needs_grad;
        const VjpResult r =
            vjp(nd.op, nodes_[nd.a].value, nodes_[nd.b].value, go, na, nb);
        if (na) accumulate(nd.a, *r.grad_a);
        if (nb) accumulate(nd.b, *r.grad_b);
        break;
      }
      case Kind::Reshape:
        accumulate(nd.a, tnn::reshape(go, nodes_[nd.a].value.shape()));
        break;
      case Kind::Swapaxes:
        accumulate(nd.a, tnn::swapaxes(go, invert_perm(nd.perm)));
        break;
      case Kind::Relu: {
        const Tensor& x = nodes_[nd.a].value;
        std::vector<double> out(static_cast<std::size_t>(x.numel()), 0.0);
        kernels::relu_grad(x.data(), go.data(), out.data(), x.numel());
        accumulate(nd.a, Tensor::from_data(x.shape(), std::move(out)));
        break;
      }
      case Kind::Add:
        accumulate(nd.a, go);
        accumulate(nd.b, go);
        break;
      case Kind::Bias:
        accumulate(nd.a, go);
        if (nodes_[nd.b].needs_grad)
          accumulate(nd.b, sum_except(go, nd.bias_mode));
        break;
      case Kind::Scale:
        accumulate(nd.a, tnn::scale(go, nd.factor));
        break;
    }
  }

  GradMap out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == Kind::Leaf && nodes_[i].requires_grad)
      out.grads_[static_cast<int>(i)] =
          g[i] ? *g[i] : Tensor::zeros(nodes_[i].value.shape());
  return out;
}

}  // namespace tnn
