#include "sklab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "sklab/error.hpp"

namespace sk {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kNoParams = static_cast<std::size_t>(-1);

}  // namespace

Architecture cnn_s(std::size_t num_classes) {
  return {"cnn-s",
          {{LayerKind::kConv, 16, 3, 1, 1},
           {LayerKind::kRelu},
           {LayerKind::kMaxPool, 0, 2, 2, 0},
           {LayerKind::kConv, 32, 3, 1, 1},
           {LayerKind::kRelu},
           {LayerKind::kMaxPool, 0, 2, 2, 0},
           {LayerKind::kFlatten},
           {LayerKind::kLinear, 64},
           {LayerKind::kRelu},
           {LayerKind::kLinear, num_classes}}};
}

Architecture mlp_s(std::size_t num_classes) {
  return {"mlp-s",
          {{LayerKind::kFlatten},
           {LayerKind::kLinear, 128},
           {LayerKind::kRelu},
           {LayerKind::kLinear, num_classes}}};
}

Architecture architecture_by_name(const std::string& name, std::size_t num_classes) {
  if (name == "cnn-s") return cnn_s(num_classes);
  if (name == "mlp-s") return mlp_s(num_classes);
  throw Error(ErrorKind::kInvalidArgument, "architecture", "unknown architecture '" + name + "'");
}

Model::Model(Architecture arch, Shape input_shape, std::size_t num_classes, std::uint64_t seed)
    : arch_(std::move(arch)), input_shape_(std::move(input_shape)), num_classes_(num_classes) {
  if (input_shape_.size() != 3 || numel(input_shape_) == 0) {
    throw Error(ErrorKind::kInvalidArgument, "Model", "input shape must be C x H x W, got " +
                                                          to_string(input_shape_));
  }
  if (num_classes_ < 2) throw Error(ErrorKind::kInvalidArgument, "Model", "need at least 2 classes");
  if (arch_.layers.empty() || arch_.layers.back().kind != LayerKind::kLinear ||
      arch_.layers.back().out != num_classes_) {
    throw Error(ErrorKind::kInvalidArgument, "Model",
                "architecture must end in a linear layer with one output per class");
  }

  std::mt19937_64 rng(seed);
  auto he_normal = [&rng](std::size_t fan_in, std::size_t count) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> v(count);
    for (double& x : v) x = dist(rng);
    return v;
  };

  std::size_t c = input_shape_[0], h = input_shape_[1], w = input_shape_[2];
  std::size_t features = 0;
  bool flat = false;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& layer = arch_.layers[i];
    const std::string prefix = std::to_string(i) + ".";
    param_slot_.push_back(kNoParams);
    switch (layer.kind) {
      case LayerKind::kConv: {
        if (flat || layer.out == 0 || layer.kernel == 0 || layer.stride == 0 ||
            h + 2 * layer.padding < layer.kernel || w + 2 * layer.padding < layer.kernel) {
          throw Error(ErrorKind::kInvalidArgument, "Model", "invalid conv layer " + std::to_string(i));
        }
        const std::size_t fan_in = c * layer.kernel * layer.kernel;
        param_slot_.back() = params_.size();
        params_.emplace_back(Shape{layer.out, c, layer.kernel, layer.kernel},
                             he_normal(fan_in, layer.out * fan_in), true);
        params_.push_back(Tensor::zeros({layer.out}, true));
        param_names_.push_back(prefix + "weight");
        param_names_.push_back(prefix + "bias");
        h = (h + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        w = (w + 2 * layer.padding - layer.kernel) / layer.stride + 1;
        c = layer.out;
        break;
      }
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        if (flat || layer.kernel == 0 || layer.stride == 0 || h < layer.kernel || w < layer.kernel) {
          throw Error(ErrorKind::kInvalidArgument, "Model", "invalid pool layer " + std::to_string(i));
        }
        h = (h - layer.kernel) / layer.stride + 1;
        w = (w - layer.kernel) / layer.stride + 1;
        break;
      case LayerKind::kFlatten:
        if (!flat) features = c * h * w;
        flat = true;
        break;
      case LayerKind::kLinear: {
        if (!flat || layer.out == 0) {
          throw Error(ErrorKind::kInvalidArgument, "Model",
                      "linear layer " + std::to_string(i) + " needs flattened input");
        }
        param_slot_.back() = params_.size();
        params_.emplace_back(Shape{layer.out, features}, he_normal(features, layer.out * features), true);
        params_.push_back(Tensor::zeros({layer.out}, true));
        param_names_.push_back(prefix + "weight");
        param_names_.push_back(prefix + "bias");
        penultimate_dim_ = features;
        features = layer.out;
        break;
      }
      case LayerKind::kRelu:
        break;
      default:
        throw Error(ErrorKind::kInvalidArgument, "Model", "unknown layer kind");
    }
  }
  penultimate_tap_ = arch_.layers.size() - 1;
}

Tensor Model::run(const Tensor& batch, std::size_t stop_before) const {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != input_shape_[0] || s[2] != input_shape_[1] ||
      s[3] != input_shape_[2] || s[0] == 0) {
    throw Error(ErrorKind::kShapeMismatch, "forward",
                "batch " + to_string(s) + " does not match input " + to_string(input_shape_));
  }
  Tensor x = batch;
  for (std::size_t i = 0; i < stop_before; ++i) {
    const LayerSpec& layer = arch_.layers[i];
    switch (layer.kind) {
      case LayerKind::kConv: {
        const std::size_t p = param_slot_[i];
        x = conv2d(x, params_[p], params_[p + 1], {layer.stride, layer.padding});
        break;
      }
      case LayerKind::kLinear: {
        const std::size_t p = param_slot_[i];
        x = add(matmul(x, transpose(params_[p])), params_[p + 1]);
        break;
      }
      case LayerKind::kRelu:
        x = relu(x);
        break;
      case LayerKind::kMaxPool:
        x = max_pool2d(x, layer.kernel, layer.stride);
        break;
      case LayerKind::kAvgPool:
        x = avg_pool2d(x, layer.kernel, layer.stride);
        break;
      case LayerKind::kFlatten:
        x = flatten(x);
        break;
    }
  }
  return x;
}

Tensor Model::forward(const Tensor& batch) const { return run(batch, arch_.layers.size()); }

Tensor Model::penultimate(const Tensor& batch) const {
  const Tensor x = run(batch, penultimate_tap_);
  return x.dim() == 2 ? x : flatten(x);
}

std::size_t Model::param_count() const {
  std::size_t total = 0;
  for (const Tensor& p : params_) total += p.numel();
  return total;
}

void Model::set_params(std::vector<Tensor> params) {
  if (params.size() != params_.size()) {
    throw Error(ErrorKind::kShapeMismatch, "set_params", "wrong number of parameter tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != params_[i].shape()) {
      throw Error(ErrorKind::kShapeMismatch, "set_params",
                  param_names_[i] + ": " + to_string(params[i].shape()) + " vs " +
                      to_string(params_[i].shape()));
    }
    if (!params[i].requires_grad()) params[i] = Tensor(params[i].shape(), params[i].to_vector(), true);
  }
  params_ = std::move(params);
}

std::vector<double> Model::flat_params() const {
  std::vector<double> flat;
  flat.reserve(param_count());
  for (const Tensor& p : params_) {
    const auto d = p.data();
    flat.insert(flat.end(), d.begin(), d.end());
  }
  return flat;
}

void Model::load_flat_params(std::span<const double> flat) {
  if (flat.size() != param_count()) {
    throw Error(ErrorKind::kShapeMismatch, "load_flat_params",
                "expected " + std::to_string(param_count()) + " values, got " +
                    std::to_string(flat.size()));
  }
  std::vector<Tensor> next;
  std::size_t offset = 0;
  for (const Tensor& p : params_) {
    const std::size_t n = p.numel();
    next.emplace_back(p.shape(), std::vector<double>(flat.begin() + offset, flat.begin() + offset + n),
                      true);
    offset += n;
  }
  params_ = std::move(next);
}

std::vector<int> predict(const Model& model, const Tensor& batch, std::size_t chunk) {
  NoGradGuard guard;
  const Shape& s = batch.shape();
  if (s.size() != 4) throw Error(ErrorKind::kShapeMismatch, "predict", "expected N x C x H x W");
  const std::size_t n = s[0];
  const std::size_t per = batch.numel() / std::max<std::size_t>(n, 1);
  const auto data = batch.data();
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    const Tensor part({count, s[1], s[2], s[3]},
                      std::vector<double>(data.begin() + start * per, data.begin() + (start + count) * per));
    const Tensor logits = model.forward(part);
    const auto l = logits.data();
    const std::size_t classes = logits.size(1);
    for (std::size_t r = 0; r < count; ++r) {
      const auto row = l.subspan(r * classes, classes);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

Tensor loss_ce(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels);
}

Tensor param_grad_vector(const Model& model, const Tensor& loss, bool create_graph) {
  const auto& params = model.params();
  bool connected = false;
  if (loss.requires_grad()) {
    for (const Tensor& p : params) {
      if (depends_on(loss, p)) {
        connected = true;
        break;
      }
    }
  }
  if (!connected) {
    throw Error(ErrorKind::kNotOnTape, "param_grad_vector",
                "loss is not connected to the model parameters");
  }
  return concat_flat(grad(loss, params, create_graph));
}

std::vector<Tensor> unflatten_params(const Model& model, const Tensor& flat) {
  if (flat.numel() != model.param_count()) {
    throw Error(ErrorKind::kShapeMismatch, "unflatten_params",
                "expected " + std::to_string(model.param_count()) + " values");
  }
  std::vector<Tensor> out;
  std::size_t offset = 0;
  const Tensor line = reshape(flat, {flat.numel()});
  for (const Tensor& p : model.params()) {
    out.push_back(reshape(slice_flat(line, offset, p.numel()), p.shape()));
    offset += p.numel();
  }
  return out;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "save_model", "cannot open " + path.string());
  io::write_magic(os, "SKMD");
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string& name = model.architecture().name;
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.num_classes()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.input_shape().size()));
  for (std::size_t d : model.input_shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  const auto& layers = model.architecture().layers;
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(layers.size()));
  for (const LayerSpec& l : layers) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.kind));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.kernel));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.stride));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.padding));
  }
  const auto flat = model.flat_params();
  io::write_le<std::uint64_t>(os, flat.size());
  for (double v : flat) io::write_le<double>(os, v);
  if (!os) throw Error(ErrorKind::kIo, "save_model", "write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "load_model", "cannot open " + path.string());
  io::expect_magic(is, "SKMD", "load_model");
  const auto version = io::read_le<std::uint32_t>(is, "load_model");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, "load_model", "unsupported version " + std::to_string(version));
  }
  const auto name_len = io::read_le<std::uint32_t>(is, "load_model");
  if (name_len > 256) throw Error(ErrorKind::kFormat, "load_model", "implausible name length");
  std::string name(name_len, '\0');
  if (!is.read(name.data(), name_len)) throw Error(ErrorKind::kFormat, "load_model", "truncated file");
  const auto classes = io::read_le<std::uint32_t>(is, "load_model");
  const auto rank = io::read_le<std::uint32_t>(is, "load_model");
  if (rank != 3) throw Error(ErrorKind::kFormat, "load_model", "input rank must be 3");
  Shape input(rank);
  for (auto& d : input) d = io::read_le<std::uint32_t>(is, "load_model");
  const auto count = io::read_le<std::uint32_t>(is, "load_model");
  if (count > 1024) throw Error(ErrorKind::kFormat, "load_model", "implausible layer count");
  Architecture arch{name, {}};
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const auto kind = io::read_le<std::uint32_t>(is, "load_model");
    if (kind > static_cast<std::uint32_t>(LayerKind::kFlatten)) {
      throw Error(ErrorKind::kFormat, "load_model", "unknown layer kind " + std::to_string(kind));
    }
    l.kind = static_cast<LayerKind>(kind);
    l.out = io::read_le<std::uint32_t>(is, "load_model");
    l.kernel = io::read_le<std::uint32_t>(is, "load_model");
    l.stride = io::read_le<std::uint32_t>(is, "load_model");
    l.padding = io::read_le<std::uint32_t>(is, "load_model");
    arch.layers.push_back(l);
  }
  Model model(std::move(arch), std::move(input), classes, 0);
  const auto p = io::read_le<std::uint64_t>(is, "load_model");
  if (p != model.param_count()) {
    throw Error(ErrorKind::kFormat, "load_model", "parameter count does not match layers");
  }
  std::vector<double> flat(p);
  for (double& v : flat) v = io::read_le<double>(is, "load_model");
  model.load_flat_params(flat);
  return model;
}

}  // namespace sk
