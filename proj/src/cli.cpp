#include "tnn/cli.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <ostream>
#include <string>
#include <vector>

#include "tnn/common.hpp"
#include "tnn/compression.hpp"
#include "tnn/layers.hpp"
#include "tnn/rng.hpp"
#include "tnn/shape.hpp"
#include "tnn/tensor.hpp"
#include "tnn/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tnn {

namespace {

// ---- small file helpers ----

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io("cannot open ", what, " \"", path, "\"");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) fail_io("cannot read ", what, " \"", path, "\"");
  return text;
}

void write_file(const std::string& path, const std::string& bytes,
                const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_io("cannot create ", what, " \"", path, "\"");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out.good()) fail_io("cannot write ", what, " \"", path, "\"");
}

std::string hex_byte(unsigned char b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "0x%02x", b);
  return buf;
}

// ---- strict JSON access ----

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) fail(where, " is not an object");
}

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) fail("unknown key \"", item.key(), "\" in ", where);
  }
}

const json* find(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

std::string str_field(const json& j, const std::string& where, const char* key,
                      const char* fallback = nullptr) {
  const json* v = find(j, key);
  if (!v) {
    if (fallback) return fallback;
    fail(where, " is missing \"", key, "\"");
  }
  if (!v->is_string()) fail(where, ".", key, " is not a string");
  return v->get<std::string>();
}

std::int64_t int_field(const json& j, const std::string& where,
                       const char* key, std::int64_t fallback,
                       bool required = false) {
  const json* v = find(j, key);
  if (!v) {
    if (required) fail(where, " is missing \"", key, "\"");
    return fallback;
  }
  if (!v->is_number_integer())
    fail(where, ".", key, " is not an integer");
  return v->get<std::int64_t>();
}

double num_field(const json& j, const std::string& where, const char* key,
                 double fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number()) fail(where, ".", key, " is not a number");
  return v->get<double>();
}

bool bool_field(const json& j, const std::string& where, const char* key,
                bool fallback) {
  const json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_boolean()) fail(where, ".", key, " is not a boolean");
  return v->get<bool>();
}

std::vector<std::int64_t> int_list(const json& v, const std::string& where,
                                   const char* key) {
  std::vector<std::int64_t> out;
  if (v.is_number_integer()) {
    out.push_back(v.get<std::int64_t>());
    return out;
  }
  if (!v.is_array())
    fail(where, ".", key, " is not an integer list");
  for (const json& e : v) {
    if (!e.is_number_integer())
      fail(where, ".", key, " is not an integer list");
    out.push_back(e.get<std::int64_t>());
  }
  return out;
}

std::vector<std::int64_t> int_list_field(const json& j,
                                         const std::string& where,
                                         const char* key,
                                         bool required = false) {
  const json* v = find(j, key);
  if (!v) {
    if (required) fail(where, " is missing \"", key, "\"");
    return {};
  }
  return int_list(*v, where, key);
}

// ---- layer / plan grammar (shared by configs and archive manifests) ----

Padding parse_padding(const std::string& name, const std::string& where) {
  if (name == "valid") return Padding::Valid;
  if (name == "same") return Padding::Same;
  if (name == "full") return Padding::Full;
  fail(where, ": unknown padding \"", name,
       "\" (valid | same | full)");
}

ConvFlavor parse_flavor(const std::string& name, const std::string& where) {
  if (name == "correlation") return ConvFlavor::Correlation;
  if (name == "convolution") return ConvFlavor::Convolution;
  fail(where, ": unknown flavor \"", name,
       "\" (correlation | convolution)");
}

const char* padding_name(Padding p) {
  switch (p) {
    case Padding::Valid: return "valid";
    case Padding::Same: return "same";
    case Padding::Full: return "full";
  }
  fail("unhandled padding");
}

const char* flavor_name(ConvFlavor f) {
  return f == ConvFlavor::Correlation ? "correlation" : "convolution";
}

Activation parse_activation(const std::string& name,
                            const std::string& where) {
  if (name == "none") return Activation::None;
  if (name == "relu") return Activation::Relu;
  fail(where, ": unknown activation \"", name,
       "\" (none | relu)");
}

// Kinds whose channels carry an explicit in/out factorization.
bool layer_uses_tens(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense:
    case LayerKind::RcpDense:
    case LayerKind::RtkDense:
    case LayerKind::RttDense:
    case LayerKind::RcpConv:
    case LayerKind::RtkConv:
    case LayerKind::RttConv:
      return true;
    default:
      return false;
  }
}

std::int64_t pair_entry(const json& v, const std::string& where,
                        const char* key, int i) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() ||
      !v[1].is_number_integer())
    fail(where, ".", key, " is not a pair of integers");
  return v[static_cast<std::size_t>(i)].get<std::int64_t>();
}

ConvGeometry parse_conv(const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, where, {"filter", "channels", "input", "padding", "flavor"});
  ConvGeometry cg;
  const json* filter = find(j, "filter");
  const json* channels = find(j, "channels");
  const json* input = find(j, "input");
  if (!filter || !channels || !input)
    fail(where, " needs \"filter\", \"channels\", and \"input\"");
  cg.filter_h = pair_entry(*filter, where, "filter", 0);
  cg.filter_w = pair_entry(*filter, where, "filter", 1);
  cg.in_channels = pair_entry(*channels, where, "channels", 0);
  cg.out_channels = pair_entry(*channels, where, "channels", 1);
  cg.in_h = pair_entry(*input, where, "input", 0);
  cg.in_w = pair_entry(*input, where, "input", 1);
  cg.conv.padding = parse_padding(str_field(j, where, "padding", "valid"), where);
  cg.conv.flavor =
      parse_flavor(str_field(j, where, "flavor", "correlation"), where);
  return cg;
}

Ranks parse_ranks(const json& v, const std::string& where) {
  Ranks ranks;
  if (v.is_object()) {
    expect_keys(v, where + ".ranks", {"in", "out"});
    ranks.in = int_list_field(v, where + ".ranks", "in");
    ranks.out = int_list_field(v, where + ".ranks", "out");
  } else {
    ranks.in = int_list(v, where, "ranks");
  }
  return ranks;
}

TensorizedGeometry parse_tens(const json& j, const std::string& where,
                              bool required) {
  TensorizedGeometry tens;
  const bool has_in = find(j, "in") != nullptr;
  const bool has_out = find(j, "out") != nullptr;
  if (has_in != has_out)
    fail(where, ": \"in\" and \"out\" come together");
  if (!has_in) {
    if (required)
      fail(where, " needs \"in\" and \"out\" dimension lists");
    return tens;
  }
  tens.in_dims = int_list_field(j, where, "in");
  tens.out_dims = int_list_field(j, where, "out");
  return tens;
}

Layer parse_layer_spec(const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, where, {"kind", "activation", "in", "out", "conv", "ranks"});
  Layer layer;
  layer.kind = parse_layer_kind(str_field(j, where, "kind"));
  layer.activation =
      parse_activation(str_field(j, where, "activation", "none"), where);

  if (is_conv_kind(layer.kind)) {
    const json* conv = find(j, "conv");
    if (!conv) fail(where, " needs a \"conv\" object");
    layer.conv = parse_conv(*conv, where + ".conv");
  } else if (find(j, "conv")) {
    fail(where, ": \"conv\" only applies to convolutional kinds");
  }

  if (layer_uses_tens(layer.kind)) {
    layer.tens = parse_tens(j, where, /*required=*/true);
    if (is_conv_kind(layer.kind)) {
      // Tensorized convolutions factor the channel counts; the products
      // must reproduce the conv geometry.
      if (layer.tens.in_total() != layer.conv.in_channels ||
          layer.tens.out_total() != layer.conv.out_channels)
        fail(where,
             ": channel factorization does not multiply out to the conv "
             "channels");
    }
  } else if (find(j, "in") || find(j, "out")) {
    fail(where,
         ": \"in\"/\"out\" only apply to dense and tensorized kinds");
  }

  if (is_factorized_kind(layer.kind)) {
    const json* ranks = find(j, "ranks");
    if (!ranks) fail(where, " needs \"ranks\"");
    layer.ranks = parse_ranks(*ranks, where);
  } else if (find(j, "ranks")) {
    fail(where, ": \"ranks\" only applies to factorized kinds");
  }

  try {
    factor_shapes(layer);  // structural validation before any data exists
  } catch (const std::exception& e) {
    fail(where, ": ", e.what());
  }
  return layer;
}

PlanEntry parse_plan_entry(const json& j, const std::string& where) {
  expect_object(j, where);
  expect_keys(j, where, {"kind", "in", "out", "ranks"});
  PlanEntry entry;
  entry.kind = parse_layer_kind(str_field(j, where, "kind"));
  entry.tens = parse_tens(j, where, /*required=*/false);
  if (const json* ranks = find(j, "ranks"))
    entry.ranks = parse_ranks(*ranks, where);
  return entry;
}

DatasetSpec parse_dataset(const json& j, const std::string& where,
                          const fs::path& base) {
  expect_object(j, where);
  DatasetSpec spec;
  spec.kind = str_field(j, where, "kind");
  if (spec.kind == "idx") {
    expect_keys(j, where,
                {"kind", "images", "labels", "test_images", "test_labels"});
    auto resolve = [&](const char* key, bool required) {
      std::string name = str_field(j, where, key, required ? nullptr : "");
      if (name.empty()) return name;
      fs::path p(name);
      if (p.is_relative()) p = base / p;
      if (!fs::exists(p))
        fail("dataset file \"", p.string(), "\" (", where, ".", key,
             ") does not exist");
      return p.lexically_normal().string();
    };
    spec.images = resolve("images", true);
    spec.labels = resolve("labels", true);
    spec.test_images = resolve("test_images", false);
    spec.test_labels = resolve("test_labels", false);
    if (spec.test_images.empty() != spec.test_labels.empty())
      fail(where,
           ": \"test_images\" and \"test_labels\" come together");
  } else if (spec.kind == "separable") {
    expect_keys(j, where, {"kind", "examples", "test_examples", "dims",
                           "classes", "seed"});
    spec.examples = int_field(j, where, "examples", 0, /*required=*/true);
    spec.test_examples = int_field(j, where, "test_examples", 0);
    spec.dims = int_field(j, where, "dims", 0, /*required=*/true);
    spec.classes =
        static_cast<int>(int_field(j, where, "classes", 0, /*required=*/true));
    spec.seed =
        static_cast<std::uint64_t>(int_field(j, where, "seed", 0));
    if (spec.examples < 1) fail(where, ".examples must be >= 1");
    if (spec.test_examples < 0)
      fail(where, ".test_examples must be >= 0");
  } else {
    fail(where, ": unknown dataset kind \"", spec.kind,
         "\" (idx | separable)");
  }
  return spec;
}

// ---- archive encoding ----

void append_f64_le(std::string& out, double d) {
  const std::uint64_t u = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | p[i];
  return std::bit_cast<double>(u);
}

json layer_manifest(const Layer& layer) {
  json e;
  e["kind"] = to_string(layer.kind);
  e["activation"] = layer.activation == Activation::Relu ? "relu" : "none";
  if (is_conv_kind(layer.kind)) {
    json conv;
    conv["filter"] = {layer.conv.filter_h, layer.conv.filter_w};
    conv["channels"] = {layer.conv.in_channels, layer.conv.out_channels};
    conv["input"] = {layer.conv.in_h, layer.conv.in_w};
    conv["padding"] = padding_name(layer.conv.conv.padding);
    conv["flavor"] = flavor_name(layer.conv.conv.flavor);
    e["conv"] = conv;
  }
  if (layer_uses_tens(layer.kind)) {
    e["in"] = layer.tens.in_dims;
    e["out"] = layer.tens.out_dims;
  }
  if (!layer.ranks.in.empty() || !layer.ranks.out.empty())
    e["ranks"] = {{"in", layer.ranks.in}, {"out", layer.ranks.out}};
  json shapes = json::array();
  for (const Tensor& f : layer.factors) shapes.push_back(f.shape().dims());
  e["factors"] = shapes;
  return e;
}

constexpr const char* kArchiveMagic = "TNN-ARCHIVE\n";

// ---- metrics ----

// Accumulates key=value lines, echoing each to the command's stream, and
// saves the whole block to the experiment's metrics file at the end.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& out) : out_(out) {}

  void kv(const std::string& key, const std::string& value) {
    line(key + "=" + value);
  }
  void kv(const std::string& key, const char* value) {
    kv(key, std::string(value));
  }
  void kv(const std::string& key, double value) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    line(key + "=" + buf);
  }
  void kv(const std::string& key, std::int64_t value) {
    line(key + "=" + std::to_string(value));
  }
  void kv(const std::string& key, std::uint64_t value) {
    line(key + "=" + std::to_string(value));
  }
  void kv(const std::string& key, int value) {
    kv(key, static_cast<std::int64_t>(value));
  }

  void save(const std::string& path) {
    write_file(path, text_, "metrics file");
  }

 private:
  void line(const std::string& s) {
    out_ << s << "\n";
    text_ += s;
    text_ += "\n";
  }

  std::ostream& out_;
  std::string text_;
};

std::string out_path(const Config& config, const char* suffix) {
  fs::create_directories(config.output_dir);
  return (fs::path(config.output_dir) / (config.experiment + suffix)).string();
}

// The loss keys a running phase writes: train_epoch3_loss=...,
// seq_layer0_epoch2_loss=..., e2e_epoch1_loss=...
ProgressFn progress_logger(MetricsWriter& mw) {
  return [&mw](const std::string& phase, int layer, int epoch, double loss) {
    std::string key = phase;
    if (layer >= 0) key += "_layer" + std::to_string(layer);
    key += "_epoch" + std::to_string(epoch) + "_loss";
    mw.kv(key, loss);
  };
}

Metrics split_metrics(const Model& model, const DataSplits& data,
                      bool use_test) {
  return evaluate(model, use_test ? data.test : data.train);
}

}  // namespace

// ---- IDX data files ----

Tensor read_idx(const std::string& path) {
  const std::string bytes = read_file(path, "IDX file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4)
    fail("IDX file \"", path, "\": only ", bytes.size(),
         " bytes, the 4-byte magic does not fit");
  if (p[0] != 0 || p[1] != 0)
    fail("IDX file \"", path, "\": magic begins ", hex_byte(p[0]), " ",
         hex_byte(p[1]), ", want 0x00 0x00");
  if (p[2] != 0x08)
    fail("IDX file \"", path, "\": dtype byte is ", hex_byte(p[2]),
         ", only 0x08 (unsigned byte) is supported");
  const int ndim = p[3];
  if (ndim != 1 && ndim != 3)
    fail("IDX file \"", path, "\": ", ndim,
         " dimensions, only 1 (labels) or 3 (images) are supported");
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndim);
  if (bytes.size() < header)
    fail("IDX file \"", path, "\": header needs ", header, " bytes, only ",
         bytes.size(), " present");
  std::vector<std::int64_t> dims;
  std::size_t count = 1;
  for (int d = 0; d < ndim; ++d) {
    const unsigned char* q = p + 4 + 4 * d;
    const std::uint32_t v = (std::uint32_t(q[0]) << 24) |
                            (std::uint32_t(q[1]) << 16) |
                            (std::uint32_t(q[2]) << 8) | std::uint32_t(q[3]);
    if (v == 0) fail("IDX file \"", path, "\": dimension ", d, " is 0");
    dims.push_back(static_cast<std::int64_t>(v));
    count *= v;
  }
  if (bytes.size() != header + count)
    fail("IDX file \"", path, "\": expected ", count,
         " payload bytes after the ", header, "-byte header, found ",
         bytes.size() - header);
  std::vector<double> data(count);
  const double scale = ndim == 3 ? 1.0 / 255.0 : 1.0;
  for (std::size_t i = 0; i < count; ++i)
    data[i] = scale * static_cast<double>(p[header + i]);
  return Tensor::from_data(Shape(dims), std::move(data));
}

// ---- datasets ----

DataSplits load_dataset(const DatasetSpec& spec) {
  DataSplits out;
  if (spec.kind == "idx") {
    auto load_pair = [](const std::string& images, const std::string& labels) {
      Dataset d;
      d.inputs = read_idx(images);
      if (d.inputs.order() != 3)
        fail("IDX file \"", images, "\" holds labels, not images");
      const Tensor raw = read_idx(labels);
      if (raw.order() != 1)
        fail("IDX file \"", labels, "\" holds images, not labels");
      if (raw.dim(0) != d.inputs.dim(0))
        fail("dataset mismatch: \"", images, "\" holds ", d.inputs.dim(0),
             " examples but \"", labels, "\" holds ", raw.dim(0), " labels");
      d.labels.resize(static_cast<std::size_t>(raw.numel()));
      for (std::int64_t i = 0; i < raw.numel(); ++i)
        d.labels[static_cast<std::size_t>(i)] = static_cast<int>(raw.flat(i));
      return d;
    };
    out.train = load_pair(spec.images, spec.labels);
    if (!spec.test_images.empty()) {
      out.test = load_pair(spec.test_images, spec.test_labels);
      out.has_test = true;
    }
  } else if (spec.kind == "separable") {
    Rng rng(spec.seed);
    out.train = make_separable(spec.examples, spec.dims, spec.classes, rng);
    if (spec.test_examples > 0) {
      out.test = make_separable(spec.test_examples, spec.dims, spec.classes,
                                rng);
      out.has_test = true;
    }
  } else {
    fail("unknown dataset kind \"", spec.kind, "\" (idx | separable)");
  }
  return out;
}

// ---- experiment config ----

Config parse_config(const std::string& json_text,
                    const std::string& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail("config: ", e.what());
  }
  expect_object(j, "config");
  expect_keys(j, "config",
              {"experiment", "seed", "threads", "output_dir", "dataset",
               "model", "train", "compression"});

  Config c;
  c.experiment = str_field(j, "config", "experiment");
  if (c.experiment.empty()) fail("config: experiment name is empty");
  if (c.experiment.find('/') != std::string::npos)
    fail("config: experiment name must not contain '/'");
  const std::int64_t seed = int_field(j, "config", "seed", 0);
  if (seed < 0) fail("config: seed must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.threads = static_cast<int>(int_field(j, "config", "threads", 1));
  if (c.threads < 1) fail("config: threads must be >= 1");
  c.output_dir = str_field(j, "config", "output_dir", ".");

  const fs::path base = base_dir.empty() ? fs::path(".") : fs::path(base_dir);
  if (const json* dataset = find(j, "dataset")) {
    c.dataset = parse_dataset(*dataset, "config.dataset", base);
    c.has_dataset = true;
  }

  if (const json* model = find(j, "model")) {
    expect_object(*model, "config.model");
    expect_keys(*model, "config.model", {"layers"});
    const json* layers = find(*model, "layers");
    if (!layers || !layers->is_array() || layers->empty())
      fail("config.model.layers must be a non-empty array");
    for (std::size_t i = 0; i < layers->size(); ++i)
      c.model.push_back(parse_layer_spec(
          (*layers)[i], "config.model.layers[" + std::to_string(i) + "]"));
    c.has_model = true;
  }

  if (const json* train = find(j, "train")) {
    expect_object(*train, "config.train");
    expect_keys(*train, "config.train",
                {"epochs", "learning_rate", "batch_size"});
    c.train.epochs = static_cast<int>(
        int_field(*train, "config.train", "epochs", 0, /*required=*/true));
    c.train.learning_rate =
        num_field(*train, "config.train", "learning_rate", 1e-3);
    c.train.batch_size =
        static_cast<int>(int_field(*train, "config.train", "batch_size", 0));
    if (c.train.epochs < 0) fail("config.train.epochs must be >= 0");
    if (c.train.batch_size < 0)
      fail("config.train.batch_size must be >= 0");
    if (!(c.train.learning_rate > 0))
      fail("config.train.learning_rate must be > 0");
    c.has_train = true;
  }

  if (const json* comp = find(j, "compression")) {
    expect_object(*comp, "config.compression");
    expect_keys(*comp, "config.compression",
                {"layers", "seq_epochs", "e2e_epochs", "learning_rate",
                 "batch_size", "match_preactivation", "e2e_cross_entropy",
                 "descent_slack"});
    const json* layers = find(*comp, "layers");
    if (!layers || !layers->is_array() || layers->empty())
      fail("config.compression.layers must be a non-empty array");
    for (std::size_t i = 0; i < layers->size(); ++i)
      c.plan.layers.push_back(parse_plan_entry(
          (*layers)[i],
          "config.compression.layers[" + std::to_string(i) + "]"));
    c.plan.seq_epochs = static_cast<int>(
        int_field(*comp, "config.compression", "seq_epochs", 0));
    c.plan.e2e_epochs = static_cast<int>(
        int_field(*comp, "config.compression", "e2e_epochs", 0));
    c.plan.learning_rate =
        num_field(*comp, "config.compression", "learning_rate", 1e-3);
    c.plan.batch_size = static_cast<int>(
        int_field(*comp, "config.compression", "batch_size", 0));
    c.plan.match_preactivation = bool_field(
        *comp, "config.compression", "match_preactivation", false);
    c.plan.e2e_cross_entropy =
        bool_field(*comp, "config.compression", "e2e_cross_entropy", false);
    c.plan.descent_slack =
        num_field(*comp, "config.compression", "descent_slack", 1e-12);
    if (c.plan.seq_epochs < 0 || c.plan.e2e_epochs < 0)
      fail("config.compression epochs must be >= 0");
    if (c.plan.batch_size < 0)
      fail("config.compression.batch_size must be >= 0");
    if (!(c.plan.learning_rate > 0))
      fail("config.compression.learning_rate must be > 0");
    c.has_plan = true;
  }

  c.train.threads = c.threads;
  c.plan.threads = c.threads;
  return c;
}

Config load_config(const std::string& path) {
  const std::string text = read_file(path, "config file");
  const fs::path dir = fs::path(path).parent_path();
  return parse_config(text, dir.empty() ? "." : dir.string());
}

// ---- model archives ----

void save_model(const Model& model, const std::string& path) {
  validate(model);
  json manifest;
  manifest["format_version"] = kArchiveVersion;
  manifest["blob_encoding"] = "float64 little-endian";
  manifest["index_order"] = "row-major, big-endian mode order";
  json layers = json::array();
  for (const Layer& layer : model.layers) layers.push_back(layer_manifest(layer));
  manifest["layers"] = layers;

  const std::string head = manifest.dump(2);
  std::string bytes = kArchiveMagic;
  bytes += std::to_string(head.size());
  bytes += "\n";
  bytes += head;
  bytes += "\n";
  for (const Layer& layer : model.layers)
    for (const Tensor& f : layer.factors)
      for (std::int64_t i = 0; i < f.numel(); ++i)
        append_f64_le(bytes, f.flat(i));
  write_file(path, bytes, "model archive");
}

Model load_model(const std::string& path) {
  const std::string bytes = read_file(path, "model archive");
  const std::size_t magic_len = std::string(kArchiveMagic).size();
  if (bytes.size() < magic_len || bytes.compare(0, magic_len, kArchiveMagic) != 0)
    fail("\"", path, "\" is not a model archive (bad magic)");

  const std::size_t eol = bytes.find('\n', magic_len);
  if (eol == std::string::npos)
    fail("model archive \"", path, "\": manifest length line is missing");
  const std::string len_line = bytes.substr(magic_len, eol - magic_len);
  if (len_line.empty() ||
      len_line.find_first_not_of("0123456789") != std::string::npos)
    fail("model archive \"", path, "\": manifest length line \"", len_line,
         "\" is not a decimal number");
  const std::size_t head_len = std::stoull(len_line);
  const std::size_t head_off = eol + 1;
  if (head_off + head_len + 1 > bytes.size())
    fail("model archive \"", path, "\": manifest claims ", head_len,
         " bytes, only ", bytes.size() - head_off, " remain");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(head_off, head_len));
  } catch (const json::parse_error& e) {
    fail("model archive \"", path, "\": manifest is not valid JSON: ",
         e.what());
  }
  expect_object(manifest, "archive manifest");
  const std::int64_t version =
      int_field(manifest, "archive manifest", "format_version", -1,
                /*required=*/true);
  if (version != kArchiveVersion)
    fail("model archive \"", path, "\" has format version ", version,
         ", this build reads version ", kArchiveVersion);
  expect_keys(manifest, "archive manifest",
              {"format_version", "blob_encoding", "index_order", "layers"});
  const std::string encoding =
      str_field(manifest, "archive manifest", "blob_encoding");
  if (encoding != "float64 little-endian")
    fail("model archive \"", path, "\": unsupported blob encoding \"",
         encoding, "\"");
  const json* layers = find(manifest, "layers");
  if (!layers || !layers->is_array() || layers->empty())
    fail("model archive \"", path, "\": manifest has no layers");

  if (bytes[head_off + head_len] != '\n')
    fail("model archive \"", path,
         "\": manifest is not followed by a newline");
  std::size_t off = head_off + head_len + 1;

  Model model;
  std::int64_t tensor_index = 0;
  for (std::size_t l = 0; l < layers->size(); ++l) {
    const std::string where = "archive layer " + std::to_string(l);
    const json& e = (*layers)[l];
    expect_object(e, where);
    expect_keys(e, where,
                {"kind", "activation", "conv", "in", "out", "ranks",
                 "factors"});
    Layer layer;
    layer.kind = parse_layer_kind(str_field(e, where, "kind"));
    layer.activation =
        parse_activation(str_field(e, where, "activation", "none"), where);
    if (is_conv_kind(layer.kind)) {
      const json* conv = find(e, "conv");
      if (!conv) fail(where, " needs a \"conv\" object");
      layer.conv = parse_conv(*conv, where + ".conv");
    }
    if (layer_uses_tens(layer.kind))
      layer.tens = parse_tens(e, where, /*required=*/true);
    if (const json* ranks = find(e, "ranks"))
      layer.ranks = parse_ranks(*ranks, where);

    const json* shapes = find(e, "factors");
    if (!shapes || !shapes->is_array())
      fail(where, " has no factor shape list");
    std::vector<Shape> declared;
    for (std::size_t f = 0; f < shapes->size(); ++f)
      declared.emplace_back(
          int_list((*shapes)[f], where, "factors"));
    const std::vector<Shape> want = factor_shapes(layer);
    if (declared.size() != want.size())
      fail(where, " declares ", declared.size(), " factors, its geometry has ",
           want.size());
    for (std::size_t f = 0; f < want.size(); ++f)
      if (!(declared[f] == want[f]))
        fail(where, " factor ", f, ": declared shape ", declared[f].str(),
             ", geometry implies ", want[f].str());

    for (const Shape& s : declared) {
      const std::size_t need = static_cast<std::size_t>(s.numel()) * 8;
      if (off + need > bytes.size())
        fail("model archive \"", path, "\": tensor ", tensor_index,
             " needs ", need, " blob bytes, only ", bytes.size() - off,
             " remain");
      std::vector<double> data(static_cast<std::size_t>(s.numel()));
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + off;
      for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = read_f64_le(p + 8 * i);
      layer.factors.push_back(Tensor::from_data(s, std::move(data)));
      off += need;
      ++tensor_index;
    }
    model.layers.push_back(std::move(layer));
  }
  if (off != bytes.size())
    fail("model archive \"", path, "\": ", bytes.size() - off,
         " trailing bytes after the last tensor");
  validate(model);
  return model;
}

// ---- subcommands ----

int cmd_train(const Config& config, std::ostream& out) {
  if (!config.has_model) fail("train needs a \"model\" section");
  if (!config.has_dataset) fail("train needs a \"dataset\" section");
  if (!config.has_train) fail("train needs a \"train\" section");

  const DataSplits data = load_dataset(config.dataset);
  Rng rng(config.seed);
  Model model;
  model.layers = config.model;
  for (Layer& layer : model.layers) init_factors(layer, rng);
  validate(model);

  MetricsWriter mw(out);
  mw.kv("command", "train");
  mw.kv("experiment", config.experiment);
  mw.kv("seed", static_cast<std::int64_t>(config.seed));
  mw.kv("threads", config.threads);

  const TrainResult result =
      train_reference(model, data.train, config.train, rng,
                      progress_logger(mw));

  mw.kv("params", param_count(result.model));
  mw.kv("forward_multiplies", forward_multiplies(result.model));
  mw.kv("accuracy", evaluate(result.model, data.train).accuracy);
  if (data.has_test)
    mw.kv("test_accuracy", evaluate(result.model, data.test).accuracy);

  const std::string archive = out_path(config, ".model.tnn");
  save_model(result.model, archive);
  mw.kv("archive", archive);
  mw.save(out_path(config, ".train.metrics"));
  return 0;
}

int cmd_compress(const Config& config, const std::string& teacher_path,
                 std::ostream& out) {
  if (teacher_path.empty()) fail("compress needs --teacher <archive>");
  if (!config.has_plan) fail("compress needs a \"compression\" section");
  if (!config.has_dataset) fail("compress needs a \"dataset\" section");

  const Model teacher = load_model(teacher_path);
  const DataSplits data = load_dataset(config.dataset);
  Rng rng(config.seed);

  MetricsWriter mw(out);
  mw.kv("command", "compress");
  mw.kv("experiment", config.experiment);
  mw.kv("seed", static_cast<std::int64_t>(config.seed));
  mw.kv("teacher", teacher_path);

  const ProgressFn progress = progress_logger(mw);
  CompressResult result = seq_compress(teacher, config.plan, data.train, rng,
                                       progress);
  if (config.plan.e2e_epochs > 0) {
    const Metrics seq_metrics = result.metrics;
    result = e2e_finetune(result.student, teacher, config.plan, data.train,
                          rng, progress);
    result.metrics.layer_init_errors = seq_metrics.layer_init_errors;
    result.metrics.layer_recon_errors = seq_metrics.layer_recon_errors;
  }

  const Metrics& m = result.metrics;
  for (std::size_t l = 0; l < m.layer_init_errors.size(); ++l)
    mw.kv("layer" + std::to_string(l) + "_init_error", m.layer_init_errors[l]);
  for (std::size_t l = 0; l < m.layer_recon_errors.size(); ++l)
    mw.kv("layer" + std::to_string(l) + "_recon_error",
          m.layer_recon_errors[l]);

  std::int64_t predicted_params = 0;
  std::uint64_t predicted_multiplies = 0;
  for (std::size_t l = 0; l < result.student.layers.size(); ++l) {
    const CostReport report =
        cost_report(result.student.layers[l], teacher.layers[l]);
    mw.kv("layer" + std::to_string(l) + "_params", report.parameter_count);
    mw.kv("layer" + std::to_string(l) + "_multiplies",
          report.forward_multiplies);
    mw.kv("layer" + std::to_string(l) + "_rate", report.compression_rate);
    predicted_params += report.parameter_count;
    predicted_multiplies += report.forward_multiplies;
  }
  const double predicted_rate = static_cast<double>(predicted_params) /
                                static_cast<double>(param_count(teacher));

  mw.kv("params_teacher", m.teacher_params);
  mw.kv("params_student", m.student_params);
  mw.kv("multiplies_teacher", m.teacher_multiplies);
  mw.kv("multiplies_student", m.student_multiplies);
  mw.kv("multiplies_predicted", predicted_multiplies);
  mw.kv("compression_rate", m.compression_rate);
  mw.kv("compression_rate_predicted", predicted_rate);
  mw.kv("output_distance", m.output_distance);

  mw.kv("accuracy_teacher",
        split_metrics(teacher, data, data.has_test).accuracy);
  mw.kv("accuracy_student",
        split_metrics(result.student, data, data.has_test).accuracy);

  const std::string archive = out_path(config, ".student.tnn");
  save_model(result.student, archive);
  mw.kv("archive", archive);
  mw.save(out_path(config, ".compress.metrics"));
  return 0;
}

int cmd_eval(const Config& config, const std::string& archive_path,
             std::ostream& out) {
  if (archive_path.empty()) fail("eval needs --teacher <archive>");
  if (!config.has_dataset) fail("eval needs a \"dataset\" section");

  const Model model = load_model(archive_path);
  const DataSplits data = load_dataset(config.dataset);

  MetricsWriter mw(out);
  mw.kv("command", "eval");
  mw.kv("experiment", config.experiment);
  mw.kv("archive", archive_path);
  mw.kv("examples", example_count(data.train));
  mw.kv("params", param_count(model));
  mw.kv("forward_multiplies", forward_multiplies(model));
  mw.kv("accuracy", evaluate(model, data.train).accuracy);
  if (data.has_test) {
    mw.kv("test_examples", example_count(data.test));
    mw.kv("test_accuracy", evaluate(model, data.test).accuracy);
  }
  mw.save(out_path(config, ".eval.metrics"));
  return 0;
}

int cmd_flops(const Config& config, std::ostream& out) {
  if (!config.has_model) fail("flops needs a \"model\" section");

  Rng rng(config.seed);
  Model model;
  model.layers = config.model;
  for (Layer& layer : model.layers) init_factors(layer, rng);
  validate(model);

  MetricsWriter mw(out);
  mw.kv("command", "flops");
  mw.kv("experiment", config.experiment);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const Layer& layer = model.layers[l];
    const std::string tag = "layer" + std::to_string(l);
    mw.kv(tag + "_kind", to_string(layer.kind));
    mw.kv(tag + "_params", param_count(layer));
    mw.kv(tag + "_multiplies", forward_multiplies(layer));
  }
  mw.kv("params", param_count(model));
  mw.kv("forward_multiplies", forward_multiplies(model));

  if (config.has_plan) {
    if (config.plan.layers.size() != model.layers.size())
      fail("compression plan has ", config.plan.layers.size(),
           " entries for ", model.layers.size(), " layers");
    std::int64_t plan_params = 0;
    std::uint64_t plan_multiplies = 0;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const Layer& src = model.layers[l];
      const PlanEntry& entry = config.plan.layers[l];
      const TensorizedGeometry tens =
          entry.tens.order() > 0 ? entry.tens : src.tens;
      const Layer student = make_layer(entry.kind, src.conv, tens,
                                       entry.ranks, rng, src.activation);
      const CostReport report = cost_report(student, src);
      const std::string tag = "plan_layer" + std::to_string(l);
      mw.kv(tag + "_kind", to_string(entry.kind));
      mw.kv(tag + "_params", report.parameter_count);
      mw.kv(tag + "_multiplies", report.forward_multiplies);
      mw.kv(tag + "_rate", report.compression_rate);
      plan_params += report.parameter_count;
      plan_multiplies += report.forward_multiplies;
    }
    mw.kv("plan_params", plan_params);
    mw.kv("plan_multiplies", plan_multiplies);
    mw.kv("plan_rate", static_cast<double>(plan_params) /
                           static_cast<double>(param_count(model)));
  }
  mw.save(out_path(config, ".flops.metrics"));
  return 0;
}

int cmd_verify(const std::string& suite, std::ostream& out) {
  const std::vector<PropertyResult> results = run_verify_suite(suite);
  bool all = true;
  for (const PropertyResult& r : results) {
    out << (r.pass ? "PASS" : "FAIL") << " " << r.name;
    if (!r.detail.empty()) out << " (" << r.detail << ")";
    out << "\n";
    all = all && r.pass;
  }
  out << (all ? "OK" : "FAILED") << " " << results.size() << " properties ("
      << suite << ")\n";
  return all ? 0 : 1;
}

}  // namespace tnn
