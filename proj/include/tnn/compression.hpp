#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tnn/autodiff.hpp"
#include "tnn/layers.hpp"
#include "tnn/rng.hpp"
#include "tnn/tensor.hpp"

// The compression pipeline: reshape inputs into higher-order tensors,
// initialize factorized layers from classical decompositions of pre-trained
// kernels, tune each layer against the reference network's activations
// (sequential, bottom-up), then fine-tune the whole student end to end.
// Includes a small reference trainer (Adam + softmax cross-entropy) and an
// evaluator for desk-scale experiments.

namespace tnn {

// ---- models ----

// An ordered chain of layers. Between layers (and at the model entry) an
// activation is reshaped to the next layer's declared input whenever the
// element counts agree — the per-layer tensorization — so a flat reference
// network and a tensorized student can consume the same data.
struct Model {
  std::vector<Layer> layers;
};

// Non-empty, each layer valid, adjacent element counts compose.
void validate(const Model& model);
Shape input_shape(const Model& model);
Shape output_shape(const Model& model);
std::int64_t param_count(const Model& model);
std::uint64_t forward_multiplies(const Model& model);

Tensor model_forward(const Model& model, const Tensor& u);
// Post-activation output of every layer; activations[l] is layers[l]'s.
std::vector<Tensor> model_activations(const Model& model, const Tensor& u);

// A whole-model forward recorded on one tape (inter-layer reshapes included),
// so one backward pass yields gradients for every layer's factors. The input
// is a non-differentiable leaf; factors[l][j] is layer l's factor j.
struct ModelTape {
  Tape tape;
  ValueId input = -1;
  std::vector<std::vector<ValueId>> factors;
  ValueId output = -1;
};
ModelTape record_model_forward(const Model& model, const Tensor& u);

// ---- data ----

// Labeled (or unlabeled, labels empty) examples; inputs stacks one example
// per leading index, labels[i] is the class id of example i.
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;
};

std::int64_t example_count(const Dataset& data);
// Example i as its own tensor (the leading mode dropped).
Tensor example_input(const Dataset& data, std::int64_t i);

// Built-in synthetic set: `classes` point clouds in `dims` dimensions with
// centers 3 * e_c and uniform(-1, 1) noise, so classes are linearly separable
// with margin. Requires classes <= dims. Labels cycle 0, 1, ..., classes - 1.
Dataset make_separable(std::int64_t n, std::int64_t dims, int classes,
                       Rng& rng);

// ---- plan & metrics ----

// Compression target for one layer: the factorized kind, the channel
// factorizations (tensorized kinds), and the ranks.
struct PlanEntry {
  LayerKind kind = LayerKind::Dense;
  TensorizedGeometry tens;
  Ranks ranks;
};

struct CompressionPlan {
  std::vector<PlanEntry> layers;  // one per reference layer, bottom-up

  // Tuning schedule. In full-batch mode (batch_size == 0) an epoch is one
  // descent step under the monotone rule below; otherwise epochs are passes
  // over the shuffled data with one plain Adam step per mini-batch.
  int seq_epochs = 0;  // per layer
  int e2e_epochs = 0;
  double learning_rate = 1e-3;  // Adam, with beta 0.9/0.999, eps 1e-8
  int batch_size = 0;
  int threads = 1;

  // Match pre-activation outputs during sequential tuning instead of the
  // default post-activation outputs.
  bool match_preactivation = false;
  // Fine-tune on softmax cross-entropy against the labels instead of the
  // squared distance to the reference outputs.
  bool e2e_cross_entropy = false;

  // Full-batch steps that would raise the loss by more than this slack are
  // rejected and retried at half the step size (descent stays monotone).
  double descent_slack = 1e-12;
};

struct Metrics {
  // Kernel relative error of each layer's decomposition init, and the
  // relative data reconstruction error sqrt(sum ||V - V'||^2 / sum ||V||^2)
  // of each layer's post-activation outputs after tuning.
  std::vector<double> layer_init_errors;
  std::vector<double> layer_recon_errors;
  // Root-mean-square over examples of the l2 distance between student and
  // reference outputs.
  double output_distance = 0.0;
  // Fraction of argmax-correct predictions (0 when the data has no labels).
  double accuracy = 0.0;
  std::int64_t teacher_params = 0;
  std::int64_t student_params = 0;
  double compression_rate = 1.0;
  std::uint64_t teacher_multiplies = 0;
  std::uint64_t student_multiplies = 0;
};

// phase is "seq", "e2e", or "train"; layer is -1 for whole-network phases;
// loss is the epoch's objective value (mean over examples).
using ProgressFn =
    std::function<void(const std::string& phase, int layer, int epoch,
                       double loss)>;

// ---- operations ----

// Big-endian reshape of the input to the target shape; element counts must
// agree. Invertible: tensorizing back to the original shape restores the
// tensor exactly.
Tensor tensorize_input(const Tensor& u, const Shape& target_shape);

struct InitReport {
  Layer layer;
  // relative_error(source kernel, expanded student kernel)
  double kernel_error = 0.0;
};

// Builds the factorized layer the plan entry names and initializes its
// factors from the matching classical decomposition of the source kernel
// (truncated SVD for svd-conv, CP for the cp/rcp kinds, Tucker for tk/rtk,
// tensor-train for tt/rtt) after the kind's reshape/permute of the kernel.
// A plan entry naming the source's own kind returns the source unchanged.
InitReport init_from_decomposition(const Layer& source, const PlanEntry& entry);

struct CompressResult {
  Model student;
  Metrics metrics;
};

// Bottom-up sequential tuning: for each layer l, initialize from the plan,
// then minimize the mean of 0.5 * ||V_l - V'_l||^2 over the data, where the
// reference layer sees the reference's previous activation and the student
// layer sees the student's own propagated activation. Earlier layers are
// frozen once tuned.
CompressResult seq_compress(const Model& teacher, const CompressionPlan& plan,
                            const Dataset& data, Rng& rng,
                            const ProgressFn& progress = {});

// Whole-network fine-tuning of every student factor, minimizing the mean of
// 0.5 * ||h(u) - g(u)||^2 (or the mean cross-entropy when the plan selects
// it and labels exist) by backpropagation through all layers.
CompressResult e2e_finetune(const Model& student, const Model& teacher,
                            const CompressionPlan& plan, const Dataset& data,
                            Rng& rng, const ProgressFn& progress = {});

struct TrainOptions {
  int epochs = 0;
  double learning_rate = 1e-3;
  int batch_size = 0;  // 0 = full batch
  int threads = 1;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_curve;  // mean cross-entropy per epoch
};

// Trains the model on softmax cross-entropy with plain Adam steps.
// Deterministic for a fixed seed and thread count; zero epochs returns the
// initial model unchanged.
TrainResult train_reference(const Model& init, const Dataset& data,
                            const TrainOptions& opts, Rng& rng,
                            const ProgressFn& progress = {});

// Accuracy (argmax over the flattened output; ties break toward the lowest
// class index) plus the model's parameter and multiply counts.
Metrics evaluate(const Model& model, const Dataset& data);

// Numerically stable mean-free softmax cross-entropy of one example; logits
// are flattened. Optionally writes d(loss)/d(logits) (softmax - onehot).
double softmax_cross_entropy(const Tensor& logits, int label,
                             Tensor* grad = nullptr);

}  // namespace tnn
