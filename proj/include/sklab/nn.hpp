#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sklab/tensor.hpp"

namespace sk {

enum class LayerKind : std::uint32_t {
  kConv = 0,
  kLinear = 1,
  kRelu = 2,
  kMaxPool = 3,
  kAvgPool = 4,
  kFlatten = 5,
};

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t out = 0;  // channels (conv) or features (linear)
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Architecture {
  std::string name;
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// conv3x3(16)-relu-pool-conv3x3(32)-relu-pool-flatten-linear(64)-relu-linear(L)
Architecture cnn_s(std::size_t num_classes);
// flatten-linear(128)-relu-linear(L)
Architecture mlp_s(std::size_t num_classes);
// "cnn-s" or "mlp-s".
Architecture architecture_by_name(const std::string& name, std::size_t num_classes);

class Model {
 public:
  // He/fan-in normal weights, zero biases, drawn from `seed`.
  Model(Architecture arch, Shape input_shape, std::size_t num_classes, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }

  // N x C x H x W batch -> N x L logits.
  Tensor forward(const Tensor& batch) const;
  // Activations feeding the final linear layer, N x penultimate_dim().
  Tensor penultimate(const Tensor& batch) const;
  std::size_t penultimate_dim() const { return penultimate_dim_; }
  std::size_t penultimate_tap() const { return penultimate_tap_; }

  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return param_names_; }
  std::size_t param_count() const;

  void set_params(std::vector<Tensor> params);
  std::vector<double> flat_params() const;
  void load_flat_params(std::span<const double> flat);

 private:
  Tensor run(const Tensor& batch, std::size_t stop_before) const;

  Architecture arch_;
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::size_t penultimate_tap_ = 0;
  std::size_t penultimate_dim_ = 0;
  std::vector<Tensor> params_;
  std::vector<std::string> param_names_;
  // params_ offset of each layer, or npos for layers without parameters.
  std::vector<std::size_t> param_slot_;
};

// Argmax class per image, evaluated without recording in chunks of `chunk`.
std::vector<int> predict(const Model& model, const Tensor& batch, std::size_t chunk = 256);

// Mean cross-entropy of logits against labels.
Tensor loss_ce(const Tensor& logits, std::span<const int> labels);

// dloss/dtheta concatenated in layer order. Throws when `loss` does not
// depend on any parameter of `model`.
Tensor param_grad_vector(const Model& model, const Tensor& loss, bool create_graph);

// Splits a flat parameter-sized vector back into per-parameter tensors.
std::vector<Tensor> unflatten_params(const Model& model, const Tensor& flat);

// Checkpoint container: "SKMD" | u32 version | u32 name length | name bytes |
// u32 classes | u32 rank | u32 dims... | u32 layer count |
// per layer 5 x u32 (kind, out, kernel, stride, padding) | u64 P | P x f64.
// All integers and doubles little-endian.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace sk
