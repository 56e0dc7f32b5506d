#include "tnn/compression.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <thread>
#include <utility>

#include "tnn/common.hpp"
#include "tnn/decompositions.hpp"
#include "tnn/kernels.hpp"
#include "tnn/ops.hpp"

namespace tnn {

namespace {

Tensor transpose2(const Tensor& t) { return swapaxes(t, {1, 0}); }

std::vector<std::int64_t> cat_dims(
    std::initializer_list<std::vector<std::int64_t>> parts) {
  std::vector<std::int64_t> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Separated channel pairs [S0..S_{m-1}, T0..T_{m-1}] -> interleaved
// [S0, T0, S1, T1, ...]; undone by the interleaving permutation the layer
// expansions use.
std::vector<int> pair_perm(int m) {
  std::vector<int> perm(2 * m);
  for (int l = 0; l < m; ++l) {
    perm[2 * l] = l;
    perm[2 * l + 1] = m + l;
  }
  return perm;
}

// [H, W, S0.., T0..] -> [S0, T0, .., S_{m-1}, T_{m-1}, H, W]
std::vector<int> pair_spatial_perm(int m) {
  std::vector<int> perm(2 * m + 2);
  for (int l = 0; l < m; ++l) {
    perm[2 * l] = 2 + l;
    perm[2 * l + 1] = 2 + m + l;
  }
  perm[2 * m] = 0;
  perm[2 * m + 1] = 1;
  return perm;
}

// {S0*T0, ..., S_{m-1}*T_{m-1}}
std::vector<std::int64_t> merged_pairs(const TensorizedGeometry& tg) {
  std::vector<std::int64_t> dims;
  for (int l = 0; l < tg.order(); ++l)
    dims.push_back(tg.in_dims[l] * tg.out_dims[l]);
  return dims;
}

void check_labels(const Dataset& data) {
  if (!data.labels.empty() &&
      static_cast<std::int64_t>(data.labels.size()) != example_count(data))
    fail("dataset: ", data.labels.size(), " labels for ", example_count(data),
         " examples");
}

// Runs fn(lo, hi, worker) over a contiguous partition of [0, n). Workers are
// joined before returning; callers reduce per-worker results in worker order,
// which keeps floating-point accumulation deterministic for a fixed thread
// count.
template <class Fn>
void parallel_chunks(std::int64_t n, int threads, const Fn& fn) {
  const int workers =
      static_cast<int>(std::min<std::int64_t>(std::max(1, threads), n));
  if (workers <= 1) {
    fn(std::int64_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = n * w / workers;
    const std::int64_t hi = n * (w + 1) / workers;
    pool.emplace_back([&fn, lo, hi, w] { fn(lo, hi, w); });
  }
  for (std::thread& th : pool) th.join();
}

// Adam over a set of tensors, with an optional monotone mode: a candidate
// step whose loss rises beyond the slack is rolled back and retried at half
// the step size, so accepted losses never increase. Parameters live in raw
// buffers; fresh tensors are rebuilt after each accepted step.
class FactorAdam {
 public:
  FactorAdam(const std::vector<Tensor>& init, double lr) : lr_(lr) {
    for (const Tensor& t : init) {
      const auto n = static_cast<std::size_t>(t.numel());
      shapes_.push_back(t.shape());
      p_.emplace_back(t.data(), t.data() + n);
      m_.emplace_back(n, 0.0);
      v_.emplace_back(n, 0.0);
    }
    rebuild();
  }

  const std::vector<Tensor>& params() const { return tensors_; }
  bool exhausted() const { return lr_ < kMinLr; }

  void step(const std::vector<std::vector<double>>& grads) {
    advance(grads, lr_);
    rebuild();
  }

  // One monotone step from `prev_loss`; returns the accepted loss (or
  // prev_loss with the state restored, once the step size is exhausted).
  double monotone_step(const std::vector<std::vector<double>>& grads,
                       const std::function<double(const std::vector<Tensor>&)>&
                           loss_of,
                       double prev_loss, double slack) {
    const State saved = save();
    double lr = lr_;
    while (lr >= kMinLr) {
      restore(saved);
      advance(grads, lr);
      rebuild();
      const double candidate = loss_of(tensors_);
      if (candidate <= prev_loss + slack) {
        lr_ = lr;
        return candidate;
      }
      lr /= 2;
    }
    restore(saved);
    rebuild();
    lr_ = lr;
    return prev_loss;
  }

 private:
  static constexpr double kMinLr = 1e-14;

  struct State {
    std::vector<std::vector<double>> p, m, v;
    std::int64_t t;
    double beta1_pow, beta2_pow;
  };

  State save() const { return {p_, m_, v_, t_, beta1_pow_, beta2_pow_}; }

  void restore(const State& s) {
    p_ = s.p;
    m_ = s.m;
    v_ = s.v;
    t_ = s.t;
    beta1_pow_ = s.beta1_pow;
    beta2_pow_ = s.beta2_pow;
  }

  void advance(const std::vector<std::vector<double>>& grads, double lr) {
    if (grads.size() != p_.size())
      fail("optimizer: ", grads.size(), " gradients for ", p_.size(),
           " parameter tensors");
    t_ += 1;
    beta1_pow_ *= kBeta1;
    beta2_pow_ *= kBeta2;
    for (std::size_t j = 0; j < p_.size(); ++j)
      kernels::adam_step(p_[j].data(), m_[j].data(), v_[j].data(),
                         grads[j].data(), p_[j].size(), lr, kBeta1, kBeta2,
                         kEps, beta1_pow_, beta2_pow_);
  }

  void rebuild() {
    tensors_.clear();
    for (std::size_t j = 0; j < p_.size(); ++j)
      tensors_.push_back(Tensor::from_data(shapes_[j], p_[j]));
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Shape> shapes_;
  std::vector<std::vector<double>> p_, m_, v_;
  std::vector<Tensor> tensors_;
  std::int64_t t_ = 0;
  double beta1_pow_ = 1.0, beta2_pow_ = 1.0;
  double lr_;
};

std::vector<std::vector<double>> zero_grads(const std::vector<Tensor>& like) {
  std::vector<std::vector<double>> grads;
  for (const Tensor& t : like)
    grads.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
  return grads;
}

void add_into(std::vector<std::vector<double>>& acc,
              const std::vector<std::vector<double>>& part) {
  for (std::size_t j = 0; j < acc.size(); ++j)
    kernels::axpy(1.0, part[j].data(), acc[j].data(), acc[j].size());
}

void scale_grads(std::vector<std::vector<double>>& grads, double factor) {
  for (auto& g : grads) kernels::scal(factor, g.data(), g.size());
}

std::vector<Tensor> collect_factors(const Model& model) {
  std::vector<Tensor> flat;
  for (const Layer& layer : model.layers)
    flat.insert(flat.end(), layer.factors.begin(), layer.factors.end());
  return flat;
}

void assign_factors(Model& model, const std::vector<Tensor>& flat) {
  std::size_t k = 0;
  for (Layer& layer : model.layers)
    for (Tensor& f : layer.factors) f = flat[k++];
}

double squared_norm(const Tensor& t) {
  return kernels::nrm2sq(t.data(), static_cast<std::size_t>(t.numel()));
}

// Mean batch loss and gradient of 0.5*||layer(input_i) - target_i||^2 over
// the listed examples (deterministic fixed-order reduction across workers).
struct BatchGrad {
  std::vector<std::vector<double>> grad;
  double loss = 0.0;
};

BatchGrad layer_batch_gradient(const Layer& layer,
                               const std::vector<Tensor>& inputs,
                               const std::vector<Tensor>& targets,
                               const std::vector<std::int64_t>& idx,
                               std::int64_t lo, std::int64_t hi, int threads) {
  const std::int64_t count = hi - lo;
  std::vector<BatchGrad> parts(
      static_cast<std::size_t>(std::max<std::int64_t>(
          1, std::min<std::int64_t>(std::max(1, threads), count))));
  parallel_chunks(count, threads, [&](std::int64_t a, std::int64_t b, int w) {
    BatchGrad& part = parts[static_cast<std::size_t>(w)];
    part.grad = zero_grads(layer.factors);
    for (std::int64_t ii = a; ii < b; ++ii) {
      const std::int64_t i = idx[static_cast<std::size_t>(lo + ii)];
      const LayerTape rec = record_forward(layer, inputs[i]);
      const Tensor diff = sub(rec.tape.value(rec.output), targets[i]);
      part.loss += 0.5 * squared_norm(diff);
      const GradMap gm = rec.tape.backward(rec.output, diff);
      for (std::size_t j = 0; j < layer.factors.size(); ++j) {
        const Tensor& g = gm.at(rec.factors[j]);
        kernels::axpy(1.0, g.data(), part.grad[j].data(),
                      static_cast<std::size_t>(g.numel()));
      }
    }
  });
  BatchGrad total;
  total.grad = zero_grads(layer.factors);
  for (const BatchGrad& part : parts) {
    if (part.grad.empty()) continue;
    add_into(total.grad, part.grad);
    total.loss += part.loss;
  }
  const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
  scale_grads(total.grad, inv);
  total.loss *= inv;
  return total;
}

double layer_mean_loss(const Layer& layer, const std::vector<Tensor>& inputs,
                       const std::vector<Tensor>& targets, int threads) {
  const std::int64_t n = static_cast<std::int64_t>(inputs.size());
  std::vector<double> partial(static_cast<std::size_t>(std::max<std::int64_t>(
      1, std::min<std::int64_t>(std::max(1, threads), n))));
  parallel_chunks(n, threads, [&](std::int64_t a, std::int64_t b, int w) {
    double s = 0.0;
    for (std::int64_t i = a; i < b; ++i)
      s += 0.5 * squared_norm(sub(layer_forward(layer, inputs[i]), targets[i]));
    partial[static_cast<std::size_t>(w)] = s;
  });
  double sum = 0.0;
  for (double s : partial) sum += s;
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

// Per-example loss and output-gradient seed for whole-model tuning: squared
// distance against a fixed target, or cross-entropy against a label.
struct E2eObjective {
  const Dataset* data = nullptr;
  const std::vector<Tensor>* targets = nullptr;  // null => cross_entropy
  bool cross_entropy = false;

  double loss_and_seed(std::int64_t i, const Tensor& out, Tensor* seed) const {
    if (cross_entropy)
      return softmax_cross_entropy(
          out, data->labels[static_cast<std::size_t>(i)], seed);
    const Tensor diff = sub(out, tensorize_input((*targets)[i], out.shape()));
    if (seed) *seed = diff;
    return 0.5 * squared_norm(diff);
  }
};

BatchGrad model_batch_gradient(const Model& model, const Dataset& data,
                               const E2eObjective& objective,
                               const std::vector<std::int64_t>& idx,
                               std::int64_t lo, std::int64_t hi, int threads) {
  const std::vector<Tensor> flat = collect_factors(model);
  const std::int64_t count = hi - lo;
  std::vector<BatchGrad> parts(
      static_cast<std::size_t>(std::max<std::int64_t>(
          1, std::min<std::int64_t>(std::max(1, threads), count))));
  parallel_chunks(count, threads, [&](std::int64_t a, std::int64_t b, int w) {
    BatchGrad& part = parts[static_cast<std::size_t>(w)];
    part.grad = zero_grads(flat);
    for (std::int64_t ii = a; ii < b; ++ii) {
      const std::int64_t i = idx[static_cast<std::size_t>(lo + ii)];
      const ModelTape mt = record_model_forward(model, example_input(data, i));
      Tensor seed;
      part.loss += objective.loss_and_seed(i, mt.tape.value(mt.output), &seed);
      const GradMap gm = mt.tape.backward(mt.output, seed);
      std::size_t j = 0;
      for (const auto& layer_ids : mt.factors)
        for (ValueId id : layer_ids) {
          const Tensor& g = gm.at(id);
          kernels::axpy(1.0, g.data(), part.grad[j++].data(),
                        static_cast<std::size_t>(g.numel()));
        }
    }
  });
  BatchGrad total;
  total.grad = zero_grads(flat);
  for (const BatchGrad& part : parts) {
    if (part.grad.empty()) continue;
    add_into(total.grad, part.grad);
    total.loss += part.loss;
  }
  const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
  scale_grads(total.grad, inv);
  total.loss *= inv;
  return total;
}

double model_mean_loss(const Model& model, const Dataset& data,
                       const E2eObjective& objective, int threads) {
  const std::int64_t n = example_count(data);
  std::vector<double> partial(static_cast<std::size_t>(std::max<std::int64_t>(
      1, std::min<std::int64_t>(std::max(1, threads), n))));
  parallel_chunks(n, threads, [&](std::int64_t a, std::int64_t b, int w) {
    double s = 0.0;
    for (std::int64_t i = a; i < b; ++i)
      s += objective.loss_and_seed(
          i, model_forward(model, example_input(data, i)), nullptr);
    partial[static_cast<std::size_t>(w)] = s;
  });
  double sum = 0.0;
  for (double s : partial) sum += s;
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

std::vector<std::int64_t> identity_index(std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

int argmax_lowest(const Tensor& t) {
  int best = 0;
  double best_v = t.flat(0);
  for (std::int64_t i = 1; i < t.numel(); ++i)
    if (t.flat(i) > best_v) {
      best_v = t.flat(i);
      best = static_cast<int>(i);
    }
  return best;
}

// RMS-over-examples l2 distance and (when labeled) accuracy of the student,
// comparing flattened outputs so differently shaped heads still compare.
void fill_output_metrics(const Model& student, const Model& teacher,
                         const Dataset& data, Metrics& metrics, int threads) {
  const std::int64_t n = example_count(data);
  struct Part {
    double sq = 0.0;
    std::int64_t correct = 0;
  };
  std::vector<Part> parts(static_cast<std::size_t>(std::max<std::int64_t>(
      1, std::min<std::int64_t>(std::max(1, threads), n))));
  parallel_chunks(n, threads, [&](std::int64_t a, std::int64_t b, int w) {
    Part& part = parts[static_cast<std::size_t>(w)];
    for (std::int64_t i = a; i < b; ++i) {
      const Tensor u = example_input(data, i);
      const Tensor s_out = model_forward(student, u);
      const Tensor t_out = model_forward(teacher, u);
      part.sq += squared_norm(sub(s_out, tensorize_input(t_out, s_out.shape())));
      if (!data.labels.empty() &&
          argmax_lowest(s_out) == data.labels[static_cast<std::size_t>(i)])
        part.correct += 1;
    }
  });
  double sq = 0.0;
  std::int64_t correct = 0;
  for (const Part& part : parts) {
    sq += part.sq;
    correct += part.correct;
  }
  metrics.output_distance = n > 0 ? std::sqrt(sq / static_cast<double>(n)) : 0;
  metrics.accuracy = data.labels.empty() || n == 0
                         ? 0.0
                         : static_cast<double>(correct) / static_cast<double>(n);
  metrics.teacher_params = param_count(teacher);
  metrics.student_params = param_count(student);
  metrics.compression_rate = static_cast<double>(metrics.student_params) /
                             static_cast<double>(metrics.teacher_params);
  metrics.teacher_multiplies = forward_multiplies(teacher);
  metrics.student_multiplies = forward_multiplies(student);
}

}  // namespace

// ---- models ----

Shape input_shape(const Model& model) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  return input_shape(model.layers.front());
}

Shape output_shape(const Model& model) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  return output_shape(model.layers.back());
}

void validate(const Model& model) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  for (const Layer& layer : model.layers) validate(layer);
  for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) {
    const Shape out = output_shape(model.layers[l]);
    const Shape in = input_shape(model.layers[l + 1]);
    if (out.numel() != in.numel())
      fail("model: layer ", l, " output ", out.str(), " cannot feed layer ",
           l + 1, " input ", in.str(), " (", out.numel(), " vs. ", in.numel(),
           " elements)");
  }
}

std::int64_t param_count(const Model& model) {
  std::int64_t total = 0;
  for (const Layer& layer : model.layers) total += param_count(layer);
  return total;
}

std::uint64_t forward_multiplies(const Model& model) {
  std::uint64_t total = 0;
  for (const Layer& layer : model.layers) total += forward_multiplies(layer);
  return total;
}

Tensor model_forward(const Model& model, const Tensor& u) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  Tensor cur = u;
  for (const Layer& layer : model.layers)
    cur = layer_forward(layer, tensorize_input(cur, input_shape(layer)));
  return cur;
}

std::vector<Tensor> model_activations(const Model& model, const Tensor& u) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  std::vector<Tensor> acts;
  Tensor cur = u;
  for (const Layer& layer : model.layers) {
    cur = layer_forward(layer, tensorize_input(cur, input_shape(layer)));
    acts.push_back(cur);
  }
  return acts;
}

ModelTape record_model_forward(const Model& model, const Tensor& u) {
  if (model.layers.empty()) fail("model: needs at least one layer");
  ModelTape mt;
  mt.input = mt.tape.leaf(u, /*requires_grad=*/false);
  ValueId cur = mt.input;
  for (const Layer& layer : model.layers) {
    const Shape want = input_shape(layer);
    const Shape& got = mt.tape.value(cur).shape();
    if (!(got == want)) {
      if (got.numel() != want.numel())
        fail("model: activation ", got.str(), " cannot fill layer input ",
             want.str());
      cur = mt.tape.reshape(cur, want);
    }
    mt.factors.emplace_back();
    cur = record_forward_on(layer, mt.tape, cur, mt.factors.back());
  }
  mt.output = cur;
  return mt;
}

// ---- data ----

std::int64_t example_count(const Dataset& data) {
  if (data.inputs.order() < 1)
    fail("dataset: inputs need a leading example mode");
  return data.inputs.dim(0);
}

Tensor example_input(const Dataset& data, std::int64_t i) {
  const std::int64_t n = example_count(data);
  if (i < 0 || i >= n)
    fail("dataset: example ", i, " out of range [0, ", n, ")");
  const std::int64_t stride = data.inputs.numel() / n;
  std::vector<double> buf(static_cast<std::size_t>(stride));
  std::memcpy(buf.data(), data.inputs.data() + i * stride,
              static_cast<std::size_t>(stride) * sizeof(double));
  std::vector<std::int64_t> dims;
  for (int m = 1; m < data.inputs.order(); ++m)
    dims.push_back(data.inputs.dim(m));
  return Tensor::from_data(Shape(dims), std::move(buf));
}

Dataset make_separable(std::int64_t n, std::int64_t dims, int classes,
                       Rng& rng) {
  if (classes < 1 || dims < classes)
    fail("make_separable: needs 1 <= classes <= dims, got ", classes,
         " classes in ", dims, " dims");
  std::vector<double> data(static_cast<std::size_t>(n * dims));
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    labels[static_cast<std::size_t>(i)] = c;
    for (std::int64_t j = 0; j < dims; ++j)
      data[static_cast<std::size_t>(i * dims + j)] =
          (j == c ? 3.0 : 0.0) + rng.uniform(-1.0, 1.0);
  }
  Dataset out;
  out.inputs = Tensor::from_data(Shape{n, dims}, std::move(data));
  out.labels = std::move(labels);
  return out;
}

// ---- tensorization ----

Tensor tensorize_input(const Tensor& u, const Shape& target_shape) {
  if (u.numel() != target_shape.numel())
    fail("tensorize_input: ", u.numel(), " elements cannot fill ",
         target_shape.str(), " (", target_shape.numel(), " elements)");
  if (u.shape() == target_shape) return u;
  return reshape(u, target_shape);
}

// ---- decomposition-based initialization ----

InitReport init_from_decomposition(const Layer& source,
                                   const PlanEntry& entry) {
  validate(source);
  if (source.kind != LayerKind::Dense && source.kind != LayerKind::Conv2d)
    fail("init_from_decomposition: source must be dense or conv2d, got ",
         to_string(source.kind));
  if (entry.kind == source.kind) return {source, 0.0};

  Layer target;
  target.kind = entry.kind;
  target.activation = source.activation;
  target.ranks = entry.ranks;
  const Tensor& k = source.factors[0];

  if (is_conv_kind(entry.kind)) {
    if (source.kind != LayerKind::Conv2d)
      fail("init_from_decomposition: ", to_string(entry.kind),
           " needs a conv2d source, got ", to_string(source.kind));
    target.conv = source.conv;
    target.tens = entry.tens;
  } else {
    if (source.kind != LayerKind::Dense)
      fail("init_from_decomposition: ", to_string(entry.kind),
           " needs a dense source, got ", to_string(source.kind));
    target.tens = entry.tens;
    if (entry.tens.in_total() != k.dim(0) ||
        entry.tens.out_total() != k.dim(1))
      fail("init_from_decomposition: channel factors (", entry.tens.in_total(),
           " x ", entry.tens.out_total(), ") do not match the kernel (",
           k.dim(0), " x ", k.dim(1), ")");
  }
  // Validates kind-specific geometry/rank structure before ranks are indexed.
  const std::vector<Shape> want_shapes = factor_shapes(target);

  const std::int64_t h = target.conv.filter_h, w = target.conv.filter_w;
  const std::int64_t s = target.conv.in_channels,
                     t = target.conv.out_channels;
  const TensorizedGeometry& tg = target.tens;
  const int m = tg.order();
  const std::vector<std::int64_t>& rin = target.ranks.in;

  switch (entry.kind) {
    case LayerKind::SvdConv: {
      const Tensor mat = reshape(swapaxes(k, {0, 2, 1, 3}), Shape{h * s, w * t});
      const TtResult tt = tt_decompose(mat, {rin[0]});
      target.factors = {
          reshape(tt.factors.cores[0], Shape{h, s, rin[0]}),
          swapaxes(reshape(tt.factors.cores[1], Shape{rin[0], w, t}),
                   {1, 0, 2})};
      break;
    }
    case LayerKind::CpConv: {
      const Tensor g = reshape(swapaxes(k, {2, 0, 1, 3}), Shape{s, h * w, t});
      const CpResult cp = cp_decompose(g, static_cast<int>(rin[0]));
      target.factors = {
          transpose2(cp.factors.factors[0]),
          swapaxes(reshape(cp.factors.factors[1], Shape{rin[0], h, w}),
                   {1, 2, 0}),
          cp.factors.factors[2]};
      break;
    }
    case LayerKind::TkConv: {
      const TuckerResult tk =
          tucker_decompose(k, {h, w, rin[0], target.ranks.out[0]});
      const Tensor core = multiply_mode(
          multiply_mode(tk.factors.core, tk.factors.factors[0], 0),
          tk.factors.factors[1], 1);
      target.factors = {transpose2(tk.factors.factors[2]), core,
                        tk.factors.factors[3]};
      break;
    }
    case LayerKind::TtConv: {
      const TtResult tt =
          tt_decompose(swapaxes(k, {2, 0, 1, 3}), {rin[0], rin[1], rin[2]});
      target.factors = tt.factors.cores;
      break;
    }
    case LayerKind::RcpDense: {
      const Tensor kt =
          reshape(k, Shape(cat_dims({tg.in_dims, tg.out_dims})));
      if (m == 1) {
        // Exact at any rank: the first rank slice carries the kernel.
        std::vector<double> data(
            static_cast<std::size_t>(rin[0] * k.numel()), 0.0);
        std::memcpy(data.data(), k.data(),
                    static_cast<std::size_t>(k.numel()) * sizeof(double));
        target.factors = {Tensor::from_data(
            Shape{rin[0], tg.in_dims[0], tg.out_dims[0]}, std::move(data))};
        break;
      }
      const Tensor g =
          reshape(swapaxes(kt, pair_perm(m)), Shape(merged_pairs(tg)));
      const CpResult cp = cp_decompose(g, static_cast<int>(rin[0]));
      for (int l = 0; l < m; ++l)
        target.factors.push_back(reshape(
            cp.factors.factors[l], Shape{rin[0], tg.in_dims[l], tg.out_dims[l]}));
      break;
    }
    case LayerKind::RtkDense: {
      const Tensor kt =
          reshape(k, Shape(cat_dims({tg.in_dims, tg.out_dims})));
      const TuckerResult tk =
          tucker_decompose(kt, cat_dims({target.ranks.in, target.ranks.out}));
      for (int l = 0; l < m; ++l)
        target.factors.push_back(transpose2(tk.factors.factors[l]));
      target.factors.push_back(tk.factors.core);
      for (int l = 0; l < m; ++l)
        target.factors.push_back(tk.factors.factors[m + l]);
      break;
    }
    case LayerKind::RttDense: {
      if (m == 1) {
        target.factors = {k};
        break;
      }
      const Tensor kt =
          reshape(k, Shape(cat_dims({tg.in_dims, tg.out_dims})));
      const Tensor g =
          reshape(swapaxes(kt, pair_perm(m)), Shape(merged_pairs(tg)));
      const TtResult tt = tt_decompose(g, rin);
      for (int l = 0; l < m; ++l)
        target.factors.push_back(
            reshape(tt.factors.cores[l], want_shapes[l]));
      break;
    }
    case LayerKind::RcpConv: {
      const Tensor kt =
          reshape(k, Shape(cat_dims({{h, w}, tg.in_dims, tg.out_dims})));
      std::vector<std::int64_t> dims = merged_pairs(tg);
      dims.push_back(h * w);
      const Tensor g =
          reshape(swapaxes(kt, pair_spatial_perm(m)), Shape(dims));
      const CpResult cp = cp_decompose(g, static_cast<int>(rin[0]));
      for (int l = 0; l < m; ++l)
        target.factors.push_back(reshape(
            cp.factors.factors[l], Shape{rin[0], tg.in_dims[l], tg.out_dims[l]}));
      target.factors.push_back(
          reshape(cp.factors.factors[m], Shape{rin[0], h, w}));
      break;
    }
    case LayerKind::RtkConv: {
      const Tensor kt =
          reshape(k, Shape(cat_dims({{h, w}, tg.in_dims, tg.out_dims})));
      const TuckerResult tk = tucker_decompose(
          kt, cat_dims({{h, w}, target.ranks.in, target.ranks.out}));
      const Tensor core = multiply_mode(
          multiply_mode(tk.factors.core, tk.factors.factors[0], 0),
          tk.factors.factors[1], 1);
      for (int l = 0; l < m; ++l)
        target.factors.push_back(transpose2(tk.factors.factors[2 + l]));
      target.factors.push_back(core);
      for (int l = 0; l < m; ++l)
        target.factors.push_back(tk.factors.factors[2 + m + l]);
      break;
    }
    case LayerKind::RttConv: {
      const Tensor kt =
          reshape(k, Shape(cat_dims({{h, w}, tg.in_dims, tg.out_dims})));
      std::vector<std::int64_t> dims = merged_pairs(tg);
      dims.push_back(h * w);
      const Tensor g =
          reshape(swapaxes(kt, pair_spatial_perm(m)), Shape(dims));
      const TtResult tt = tt_decompose(g, rin);
      for (std::size_t l = 0; l < tt.factors.cores.size(); ++l)
        target.factors.push_back(
            reshape(tt.factors.cores[l], want_shapes[l]));
      break;
    }
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      fail("init_from_decomposition: ", to_string(entry.kind),
           " target must match the source kind");
  }

  validate(target);
  InitReport report;
  report.layer = std::move(target);
  report.kernel_error = relative_error(k, expand_full_kernel(report.layer));
  return report;
}

// ---- sequential compression ----

CompressResult seq_compress(const Model& teacher, const CompressionPlan& plan,
                            const Dataset& data, Rng& rng,
                            const ProgressFn& progress) {
  validate(teacher);
  check_labels(data);
  if (plan.layers.size() != teacher.layers.size())
    fail("seq_compress: plan has ", plan.layers.size(), " entries for ",
         teacher.layers.size(), " layers");
  const std::int64_t n = example_count(data);
  if (n == 0) fail("seq_compress: empty dataset");

  CompressResult result;
  Metrics& metrics = result.metrics;

  std::vector<Tensor> teacher_prev(static_cast<std::size_t>(n));
  std::vector<Tensor> student_prev(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    teacher_prev[static_cast<std::size_t>(i)] = example_input(data, i);
    student_prev[static_cast<std::size_t>(i)] =
        teacher_prev[static_cast<std::size_t>(i)];
  }

  for (std::size_t l = 0; l < teacher.layers.size(); ++l) {
    const Layer& teacher_layer = teacher.layers[l];
    InitReport init = init_from_decomposition(teacher_layer, plan.layers[l]);
    metrics.layer_init_errors.push_back(init.kernel_error);

    // The tuned copy drops its activation when matching pre-activations.
    Layer tuned = std::move(init.layer);
    Layer matching = tuned;
    if (plan.match_preactivation) matching.activation = Activation::None;
    Layer teacher_matching = teacher_layer;
    if (plan.match_preactivation)
      teacher_matching.activation = Activation::None;

    // Fixed per-example inputs and targets for this layer's subproblem.
    std::vector<Tensor> inputs(static_cast<std::size_t>(n));
    std::vector<Tensor> targets(static_cast<std::size_t>(n));
    std::vector<Tensor> teacher_post(static_cast<std::size_t>(n));
    const Shape student_out = output_shape(matching);
    parallel_chunks(n, plan.threads,
                    [&](std::int64_t a, std::int64_t b, int) {
      for (std::int64_t i = a; i < b; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const Tensor t_in =
            tensorize_input(teacher_prev[ui], input_shape(teacher_layer));
        teacher_post[ui] = layer_forward(teacher_layer, t_in);
        targets[ui] = tensorize_input(plan.match_preactivation
                                          ? layer_forward(teacher_matching, t_in)
                                          : teacher_post[ui],
                                      student_out);
        inputs[ui] = tensorize_input(student_prev[ui], input_shape(matching));
      }
    });

    if (plan.seq_epochs > 0) {
      FactorAdam opt(matching.factors, plan.learning_rate);
      const std::vector<std::int64_t> idx = identity_index(n);
      if (plan.batch_size <= 0) {
        auto loss_of = [&](const std::vector<Tensor>& fs) {
          Layer candidate = matching;
          candidate.factors = fs;
          return layer_mean_loss(candidate, inputs, targets, plan.threads);
        };
        double loss = loss_of(opt.params());
        for (int epoch = 0; epoch < plan.seq_epochs; ++epoch) {
          Layer current = matching;
          current.factors = opt.params();
          const BatchGrad bg = layer_batch_gradient(current, inputs, targets,
                                                    idx, 0, n, plan.threads);
          loss = opt.monotone_step(bg.grad, loss_of, loss, plan.descent_slack);
          if (progress) progress("seq", static_cast<int>(l), epoch, loss);
          if (opt.exhausted()) break;
        }
      } else {
        std::vector<std::int64_t> order = identity_index(n);
        for (int epoch = 0; epoch < plan.seq_epochs; ++epoch) {
          rng.shuffle(order);
          double epoch_loss = 0.0;
          for (std::int64_t lo = 0; lo < n; lo += plan.batch_size) {
            const std::int64_t hi = std::min<std::int64_t>(n, lo + plan.batch_size);
            Layer current = matching;
            current.factors = opt.params();
            const BatchGrad bg = layer_batch_gradient(
                current, inputs, targets, order, lo, hi, plan.threads);
            opt.step(bg.grad);
            epoch_loss += bg.loss * static_cast<double>(hi - lo);
          }
          epoch_loss /= static_cast<double>(n);
          if (progress) progress("seq", static_cast<int>(l), epoch, epoch_loss);
        }
      }
      matching.factors = opt.params();
    }
    tuned.factors = matching.factors;

    // Relative reconstruction error on post-activation outputs, and the
    // propagated activations for the next layer.
    std::vector<double> part_num(static_cast<std::size_t>(
        std::max<std::int64_t>(1, std::min<std::int64_t>(
                                      std::max(1, plan.threads), n))));
    std::vector<double> part_den(part_num.size());
    parallel_chunks(n, plan.threads,
                    [&](std::int64_t a, std::int64_t b, int w) {
      double num = 0.0, den = 0.0;
      for (std::int64_t i = a; i < b; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const Tensor s_out = layer_forward(tuned, inputs[ui]);
        num += squared_norm(
            sub(s_out, tensorize_input(teacher_post[ui], s_out.shape())));
        den += squared_norm(teacher_post[ui]);
        student_prev[ui] = s_out;
        teacher_prev[ui] = teacher_post[ui];
      }
      part_num[static_cast<std::size_t>(w)] = num;
      part_den[static_cast<std::size_t>(w)] = den;
    });
    double num = 0.0, den = 0.0;
    for (std::size_t w = 0; w < part_num.size(); ++w) {
      num += part_num[w];
      den += part_den[w];
    }
    metrics.layer_recon_errors.push_back(
        den > 0 ? std::sqrt(num / den)
                : (num > 0 ? std::numeric_limits<double>::infinity() : 0.0));

    result.student.layers.push_back(std::move(tuned));
  }

  fill_output_metrics(result.student, teacher, data, metrics, plan.threads);
  return result;
}

// ---- end-to-end fine-tuning ----

CompressResult e2e_finetune(const Model& student, const Model& teacher,
                            const CompressionPlan& plan, const Dataset& data,
                            Rng& rng, const ProgressFn& progress) {
  validate(student);
  validate(teacher);
  check_labels(data);
  const std::int64_t n = example_count(data);
  if (n == 0) fail("e2e_finetune: empty dataset");
  if (plan.e2e_cross_entropy && data.labels.empty())
    fail("e2e_finetune: cross-entropy tuning needs labels");

  CompressResult result;
  result.student = student;

  std::vector<Tensor> teacher_out;
  E2eObjective objective;
  objective.data = &data;
  objective.cross_entropy = plan.e2e_cross_entropy;
  if (!plan.e2e_cross_entropy) {
    teacher_out.resize(static_cast<std::size_t>(n));
    parallel_chunks(n, plan.threads,
                    [&](std::int64_t a, std::int64_t b, int) {
      for (std::int64_t i = a; i < b; ++i)
        teacher_out[static_cast<std::size_t>(i)] =
            model_forward(teacher, example_input(data, i));
    });
    objective.targets = &teacher_out;
  }

  if (plan.e2e_epochs > 0) {
    FactorAdam opt(collect_factors(result.student), plan.learning_rate);
    const std::vector<std::int64_t> idx = identity_index(n);
    if (plan.batch_size <= 0) {
      auto loss_of = [&](const std::vector<Tensor>& fs) {
        Model candidate = result.student;
        assign_factors(candidate, fs);
        return model_mean_loss(candidate, data, objective, plan.threads);
      };
      double loss = loss_of(opt.params());
      for (int epoch = 0; epoch < plan.e2e_epochs; ++epoch) {
        Model current = result.student;
        assign_factors(current, opt.params());
        const BatchGrad bg = model_batch_gradient(current, data, objective,
                                                  idx, 0, n, plan.threads);
        loss = opt.monotone_step(bg.grad, loss_of, loss, plan.descent_slack);
        if (progress) progress("e2e", -1, epoch, loss);
        if (opt.exhausted()) break;
      }
    } else {
      std::vector<std::int64_t> order = identity_index(n);
      for (int epoch = 0; epoch < plan.e2e_epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::int64_t lo = 0; lo < n; lo += plan.batch_size) {
          const std::int64_t hi = std::min<std::int64_t>(n, lo + plan.batch_size);
          Model current = result.student;
          assign_factors(current, opt.params());
          const BatchGrad bg = model_batch_gradient(current, data, objective,
                                                    order, lo, hi, plan.threads);
          opt.step(bg.grad);
          epoch_loss += bg.loss * static_cast<double>(hi - lo);
        }
        epoch_loss /= static_cast<double>(n);
        if (progress) progress("e2e", -1, epoch, epoch_loss);
      }
    }
    assign_factors(result.student, opt.params());
  }

  fill_output_metrics(result.student, teacher, data, result.metrics,
                      plan.threads);
  return result;
}

// ---- reference training ----

TrainResult train_reference(const Model& init, const Dataset& data,
                            const TrainOptions& opts, Rng& rng,
                            const ProgressFn& progress) {
  validate(init);
  check_labels(data);
  if (data.labels.empty()) fail("train_reference: needs labeled data");
  const std::int64_t n = example_count(data);
  if (n == 0) fail("train_reference: empty dataset");

  TrainResult result;
  result.model = init;
  if (opts.epochs <= 0) return result;

  E2eObjective objective;
  objective.data = &data;
  objective.cross_entropy = true;

  FactorAdam opt(collect_factors(result.model), opts.learning_rate);
  std::vector<std::int64_t> order = identity_index(n);
  const std::int64_t batch = opts.batch_size > 0 ? opts.batch_size : n;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (opts.batch_size > 0) rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::int64_t lo = 0; lo < n; lo += batch) {
      const std::int64_t hi = std::min<std::int64_t>(n, lo + batch);
      Model current = result.model;
      assign_factors(current, opt.params());
      const BatchGrad bg = model_batch_gradient(current, data, objective,
                                                order, lo, hi, opts.threads);
      opt.step(bg.grad);
      epoch_loss += bg.loss * static_cast<double>(hi - lo);
    }
    epoch_loss /= static_cast<double>(n);
    result.loss_curve.push_back(epoch_loss);
    if (progress) progress("train", -1, epoch, epoch_loss);
  }
  assign_factors(result.model, opt.params());
  return result;
}

// ---- evaluation ----

Metrics evaluate(const Model& model, const Dataset& data) {
  validate(model);
  check_labels(data);
  const std::int64_t n = example_count(data);
  Metrics metrics;
  metrics.teacher_params = metrics.student_params = param_count(model);
  metrics.teacher_multiplies = metrics.student_multiplies =
      forward_multiplies(model);
  metrics.compression_rate = 1.0;
  if (data.labels.empty() || n == 0) return metrics;
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i)
    if (argmax_lowest(model_forward(model, example_input(data, i))) ==
        data.labels[static_cast<std::size_t>(i)])
      correct += 1;
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return metrics;
}

double softmax_cross_entropy(const Tensor& logits, int label, Tensor* grad) {
  const std::int64_t n = logits.numel();
  if (label < 0 || label >= n)
    fail("cross-entropy: label ", label, " outside [0, ", n, ")");
  double mx = logits.flat(0);
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, logits.flat(i));
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) sum += std::exp(logits.flat(i) - mx);
  const double lse = mx + std::log(sum);
  if (grad) {
    std::vector<double> g(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
      g[static_cast<std::size_t>(i)] = std::exp(logits.flat(i) - mx) / sum;
    g[static_cast<std::size_t>(label)] -= 1.0;
    *grad = Tensor::from_data(logits.shape(), std::move(g));
  }
  return lse - logits.flat(label);
}

}  // namespace tnn
