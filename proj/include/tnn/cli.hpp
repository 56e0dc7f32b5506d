#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tnn/compression.hpp"
#include "tnn/layers.hpp"
#include "tnn/tensor.hpp"

// Everything behind the `tnn` command-line binary, exposed as plain
// functions so the behaviors are testable without spawning processes:
// IDX data loading, the strict JSON experiment config, the model archive
// format, and the five subcommands.

namespace tnn {

// ---- IDX data files ----

// Reads one IDX file: big-endian magic (0, 0, dtype, ndim), then ndim
// big-endian u32 dims, then the payload. Supported layouts are the two the
// datasets use: unsigned-byte images (ndim 3, returned as [N, H, W] scaled
// to [0, 1]) and unsigned-byte labels (ndim 1, returned as [N] raw class
// ids). Malformed headers and short payloads name the offending bytes.
Tensor read_idx(const std::string& path);

// ---- datasets ----

struct DatasetSpec {
  std::string kind;  // "idx" or "separable"
  // kind == "idx": absolute paths (already resolved against the config's
  // directory). test_* may be empty.
  std::string images, labels, test_images, test_labels;
  // kind == "separable"
  std::int64_t examples = 0, test_examples = 0, dims = 0;
  int classes = 0;
  std::uint64_t seed = 0;
};

struct DataSplits {
  Dataset train;
  Dataset test;
  bool has_test = false;
};

DataSplits load_dataset(const DatasetSpec& spec);

// ---- experiment config ----

struct Config {
  std::string experiment;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string output_dir = ".";
  DatasetSpec dataset;
  bool has_dataset = false;
  std::vector<Layer> model;  // structure only; factors stay empty
  bool has_model = false;
  TrainOptions train;
  bool has_train = false;
  CompressionPlan plan;  // threads/learning rates filled from the file
  bool has_plan = false;
};

// Parses a JSON config document. Unknown keys anywhere are rejected by
// name; dataset file paths are resolved against base_dir and must exist.
Config parse_config(const std::string& json_text, const std::string& base_dir);
Config load_config(const std::string& path);

// ---- model archives ----

inline constexpr int kArchiveVersion = 1;

// Single-file archive: a text manifest (format version, per-layer kinds,
// shapes, ranks, activations, and the byte layout of every tensor) followed
// by the raw factor data. Round-trips bitwise.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// ---- subcommands ----
// Each returns a process exit code, writes line-oriented key=value metrics
// to `out`, and mirrors them to <output_dir>/<experiment>.<command>.metrics.
// Failures throw with a message naming what went wrong.

int cmd_train(const Config& config, std::ostream& out);
int cmd_compress(const Config& config, const std::string& teacher_path,
                 std::ostream& out);
int cmd_eval(const Config& config, const std::string& archive_path,
             std::ostream& out);
int cmd_flops(const Config& config, std::ostream& out);
int cmd_verify(const std::string& suite, std::ostream& out);

}  // namespace tnn
