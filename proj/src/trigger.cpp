#include "sklab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "sklab/error.hpp"

namespace sk {

namespace {

constexpr std::uint32_t kTriggerVersion = 1;

void check_fits(const TriggerSpec& spec, const Shape& image_shape, const char* op) {
  if (image_shape.size() != 3 || spec.shape.size() != 3) {
    throw Error(ErrorKind::kShapeMismatch, op, "trigger and image must be C x H x W");
  }
  if (spec.is_patch()) {
    if (spec.shape[0] != image_shape[0] || spec.shape[1] > image_shape[1] ||
        spec.shape[2] > image_shape[2]) {
      throw Error(ErrorKind::kShapeMismatch, op,
                  "patch " + to_string(spec.shape) + " does not fit image " + to_string(image_shape));
    }
  } else if (spec.shape != image_shape) {
    throw Error(ErrorKind::kShapeMismatch, op,
                "additive trigger " + to_string(spec.shape) + " vs image " + to_string(image_shape));
  }
}

double project(const TriggerSpec& spec, double v) {
  return spec.is_patch() ? std::clamp(v, 0.0, 1.0) : std::clamp(v, -spec.epsilon, spec.epsilon);
}

std::vector<std::size_t> crafting_subset(std::size_t available, std::size_t wanted, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (wanted < available) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(wanted);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

std::vector<Placement> draw_placements(const TriggerSpec& spec, const Shape& image_shape, std::size_t n,
                                       std::mt19937_64& rng) {
  std::vector<Placement> out;
  if (!spec.is_patch()) return out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_placement(spec, image_shape, rng));
  return out;
}

Tensor triggered_batch(const Dataset& samples, const TriggerSpec& spec, std::mt19937_64& rng) {
  const Tensor images = samples.all_images();
  const auto placements = draw_placements(spec, samples.image_shape, samples.size(), rng);
  return apply_trigger_batch(images, Tensor(spec.shape, spec.delta), spec, placements);
}

}  // namespace

std::string to_string(TriggerMode mode) {
  switch (mode) {
    case TriggerMode::kAdditive: return "additive";
    case TriggerMode::kPatch: return "patch";
    case TriggerMode::kPredefinedPatch: return "predefined_patch";
  }
  return "unknown";
}

TriggerMode trigger_mode_from_string(const std::string& name) {
  if (name == "additive") return TriggerMode::kAdditive;
  if (name == "patch") return TriggerMode::kPatch;
  if (name == "predefined_patch") return TriggerMode::kPredefinedPatch;
  throw Error(ErrorKind::kInvalidArgument, "trigger_mode", "unknown trigger mode '" + name + "'");
}

void TriggerSpec::validate() const {
  if (shape.size() != 3 || numel(shape) == 0) {
    throw Error(ErrorKind::kInvalidArgument, "trigger", "shape must be C x h x w");
  }
  if (delta.size() != numel(shape)) throw Error(ErrorKind::kShapeMismatch, "trigger", "delta size mismatch");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "trigger", "epsilon must lie in (0,1]");
  }
  for (double v : delta) {
    const bool ok = is_patch() ? (v >= 0.0 && v <= 1.0) : (std::abs(v) <= epsilon);
    if (!ok) throw Error(ErrorKind::kInvalidArgument, "trigger", "delta violates its projection set");
  }
}

TriggerSpec additive_trigger(const Shape& image_shape, double epsilon) {
  return {TriggerMode::kAdditive, image_shape, std::vector<double>(numel(image_shape), 0.0), epsilon};
}

TriggerSpec patch_trigger(std::size_t channels, std::size_t height, std::size_t width) {
  return {TriggerMode::kPatch, {channels, height, width},
          std::vector<double>(channels * height * width, 0.0), 1.0};
}

Placement sample_placement(const TriggerSpec& spec, const Shape& image_shape, std::mt19937_64& rng) {
  check_fits(spec, image_shape, "sample_placement");
  if (!spec.is_patch()) return {};
  std::uniform_int_distribution<std::size_t> row(0, image_shape[1] - spec.shape[1]);
  std::uniform_int_distribution<std::size_t> col(0, image_shape[2] - spec.shape[2]);
  const std::size_t r = row(rng);
  return {r, col(rng)};
}

std::vector<double> apply_trigger(std::span<const double> image, const Shape& image_shape,
                                  const TriggerSpec& spec, Placement placement) {
  check_fits(spec, image_shape, "apply_trigger");
  if (image.size() != numel(image_shape)) {
    throw Error(ErrorKind::kShapeMismatch, "apply_trigger", "image buffer does not match shape");
  }
  std::vector<double> out(image.begin(), image.end());
  if (!spec.is_patch()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + spec.delta[i], 0.0, 1.0);
    return out;
  }
  const std::size_t c = spec.shape[0], h = spec.shape[1], w = spec.shape[2];
  const std::size_t H = image_shape[1], W = image_shape[2];
  if (placement.row + h > H || placement.col + w > W) {
    throw Error(ErrorKind::kInvalidArgument, "apply_trigger", "patch placement outside the image");
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        out[(ch * H + placement.row + i) * W + placement.col + j] = spec.delta[(ch * h + i) * w + j];
      }
    }
  }
  return out;
}

std::vector<double> apply_trigger(std::span<const double> image, const Shape& image_shape,
                                  const TriggerSpec& spec, std::mt19937_64& rng) {
  return apply_trigger(image, image_shape, spec, sample_placement(spec, image_shape, rng));
}

Dataset apply_trigger(const Dataset& data, const TriggerSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset out = data;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = apply_trigger(data.image(i), data.image_shape, spec, rng);
    std::copy(img.begin(), img.end(), out.mutable_image(i).begin());
  }
  return out;
}

Tensor apply_trigger_batch(const Tensor& batch, const Tensor& delta, const TriggerSpec& spec,
                           std::span<const Placement> placements) {
  const Shape& bs = batch.shape();
  if (bs.size() != 4) throw Error(ErrorKind::kShapeMismatch, "apply_trigger_batch", "expected N x C x H x W");
  const Shape image_shape{bs[1], bs[2], bs[3]};
  check_fits(spec, image_shape, "apply_trigger_batch");
  if (delta.shape() != spec.shape) {
    throw Error(ErrorKind::kShapeMismatch, "apply_trigger_batch", "delta does not match trigger shape");
  }
  if (!spec.is_patch()) return clip(add(batch, delta), 0.0, 1.0);

  if (placements.size() != bs[0]) {
    throw Error(ErrorKind::kInvalidArgument, "apply_trigger_batch", "one placement per image required");
  }
  const std::size_t n = bs[0], c = bs[1], H = bs[2], W = bs[3];
  const std::size_t h = spec.shape[1], w = spec.shape[2];
  auto map = std::make_shared<SparseMap>();
  map->in_shape = spec.shape;
  map->out_shape = bs;
  std::vector<double> keep(batch.numel(), 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const Placement p = placements[k];
    if (p.row + h > H || p.col + w > W) {
      throw Error(ErrorKind::kInvalidArgument, "apply_trigger_batch", "patch placement outside the image");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t dst = ((k * c + ch) * H + p.row + i) * W + p.col + j;
          keep[dst] = 0.0;
          map->out_idx.push_back(static_cast<std::uint32_t>(dst));
          map->in_idx.push_back(static_cast<std::uint32_t>((ch * h + i) * w + j));
          map->weight.push_back(1.0);
        }
      }
    }
  }
  return add(mul(batch, Tensor(bs, std::move(keep))), sparse_apply(delta, map));
}

void TriggerCraftParams::validate() const {
  if (steps < 1) throw Error(ErrorKind::kInvalidArgument, "trigger_params", "steps must be >= 1");
  if (!(step_size >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "trigger_params", "negative step size");
  if (!(init_variance >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "trigger_params", "negative variance");
  if (max_samples < 1) throw Error(ErrorKind::kInvalidArgument, "trigger_params", "need at least one sample");
}

CraftedTrigger craft_trigger(const Model& surrogate, const Dataset& source_samples, int source_label,
                             int target_label, const TriggerSpec& initial,
                             const TriggerCraftParams& params, std::uint64_t seed) {
  if (source_label == target_label) {
    throw Error(ErrorKind::kInvalidArgument, "craft_trigger", "source and target labels must differ");
  }
  if (source_samples.size() == 0) throw Error(ErrorKind::kInvalidArgument, "craft_trigger", "no source samples");
  for (int l : source_samples.labels) {
    if (l != source_label) {
      throw Error(ErrorKind::kInvalidArgument, "craft_trigger", "crafting samples must carry the source label");
    }
  }
  if (target_label < 0 || static_cast<std::size_t>(target_label) >= surrogate.num_classes()) {
    throw Error(ErrorKind::kInvalidArgument, "craft_trigger", "target label out of range");
  }
  params.validate();
  check_fits(initial, source_samples.image_shape, "craft_trigger");

  std::mt19937_64 rng(seed);
  TriggerSpec spec = initial;
  spec.delta.assign(numel(spec.shape), 0.0);
  if (params.init == TriggerInit::kNormal) {
    std::normal_distribution<double> dist(0.0, std::sqrt(params.init_variance));
    for (double& v : spec.delta) v = project(spec, dist(rng));
  } else if (params.init == TriggerInit::kUniform) {
    const double lo = spec.is_patch() ? 0.0 : -spec.epsilon;
    const double hi = spec.is_patch() ? 1.0 : spec.epsilon;
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : spec.delta) v = dist(rng);
  }

  const auto subset = crafting_subset(source_samples.size(), params.max_samples, rng);
  const Tensor images = source_samples.batch(subset);
  const std::vector<int> targets(subset.size(), target_label);

  CraftedTrigger result;
  result.loss_trace.reserve(params.steps + 1);
  for (std::size_t step = 0; step <= params.steps; ++step) {
    const auto placements = draw_placements(spec, source_samples.image_shape, subset.size(), rng);
    if (step == params.steps) {
      NoGradGuard guard;
      const Tensor x = apply_trigger_batch(images, Tensor(spec.shape, spec.delta), spec, placements);
      result.loss_trace.push_back(cross_entropy(surrogate.forward(x), targets).item());
      break;
    }
    const Tensor delta(spec.shape, spec.delta, true);
    const Tensor loss =
        cross_entropy(surrogate.forward(apply_trigger_batch(images, delta, spec, placements)), targets);
    result.loss_trace.push_back(loss.item());
    const Tensor g_tensor = grad(loss, {delta})[0];
    const auto g = g_tensor.data();
    for (std::size_t i = 0; i < spec.delta.size(); ++i) {
      const double direction = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      spec.delta[i] = project(spec, spec.delta[i] - params.step_size * direction);
    }
  }
  spec.validate();
  result.spec = std::move(spec);
  return result;
}

double targeted_trigger_loss(const Model& surrogate, const Dataset& samples, int target_label,
                             const TriggerSpec& spec, std::uint64_t seed) {
  if (samples.size() == 0) throw Error(ErrorKind::kInvalidArgument, "targeted_trigger_loss", "no samples");
  NoGradGuard guard;
  std::mt19937_64 rng(seed);
  const std::vector<int> targets(samples.size(), target_label);
  return cross_entropy(surrogate.forward(triggered_batch(samples, spec, rng)), targets).item();
}

double targeted_fooling_rate(const Model& model, const Dataset& samples, int target_label,
                             const TriggerSpec& spec, std::uint64_t seed) {
  if (samples.size() == 0) throw Error(ErrorKind::kInvalidArgument, "targeted_fooling_rate", "no samples");
  std::mt19937_64 rng(seed);
  const auto preds = predict(model, triggered_batch(samples, spec, rng));
  const auto hits = std::count(preds.begin(), preds.end(), target_label);
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

TriggerSpec predefined_patch(const std::filesystem::path& path, std::size_t height, std::size_t width,
                             std::size_t channels) {
  if (height == 0 || width == 0 || channels == 0) {
    throw Error(ErrorKind::kInvalidArgument, "predefined_patch", "patch dimensions must be positive");
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "predefined_patch", "missing file " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  if (bytes.size() != height * width * channels) {
    throw Error(ErrorKind::kFormat, "predefined_patch",
                "file holds " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(height * width * channels));
  }
  TriggerSpec spec{TriggerMode::kPredefinedPatch, {channels, height, width},
                   std::vector<double>(bytes.size()), 1.0};
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      for (std::size_t c = 0; c < channels; ++c) {
        const auto b = static_cast<std::uint8_t>(bytes[(i * width + j) * channels + c]);
        spec.delta[(c * height + i) * width + j] = static_cast<double>(b) / 255.0;
      }
    }
  }
  return spec;
}

void write_patch_bytes(const TriggerSpec& spec, const std::filesystem::path& path) {
  if (!spec.is_patch()) throw Error(ErrorKind::kInvalidArgument, "write_patch_bytes", "not a patch trigger");
  const std::size_t c = spec.shape[0], h = spec.shape[1], w = spec.shape[2];
  std::vector<std::uint8_t> bytes(c * h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        bytes[(i * w + j) * c + ch] = to_byte(spec.delta[(ch * h + i) * w + j]);
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "write_patch_bytes", "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TriggerSpec make_predefined_patch(std::size_t height, std::size_t width, std::size_t channels,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bit(0.5);
  TriggerSpec spec{TriggerMode::kPredefinedPatch, {channels, height, width},
                   std::vector<double>(channels * height * width), 1.0};
  for (double& v : spec.delta) v = bit(rng) ? 1.0 : 0.0;
  return spec;
}

void save_trigger(const TriggerSpec& spec, const std::filesystem::path& path) {
  spec.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "save_trigger", "cannot open " + path.string());
  io::write_magic(os, "SKTR");
  io::write_le<std::uint32_t>(os, kTriggerVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.mode));
  io::write_le<double>(os, spec.epsilon);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.shape.size()));
  for (std::size_t d : spec.shape) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (double v : spec.delta) io::write_le<double>(os, v);
  if (!os) throw Error(ErrorKind::kIo, "save_trigger", "write failed for " + path.string());
}

TriggerSpec load_trigger(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "load_trigger", "cannot open " + path.string());
  io::expect_magic(is, "SKTR", "load_trigger");
  if (io::read_le<std::uint32_t>(is, "load_trigger") != kTriggerVersion) {
    throw Error(ErrorKind::kFormat, "load_trigger", "unsupported version");
  }
  TriggerSpec spec;
  const auto mode = io::read_le<std::uint32_t>(is, "load_trigger");
  if (mode > static_cast<std::uint32_t>(TriggerMode::kPredefinedPatch)) {
    throw Error(ErrorKind::kFormat, "load_trigger", "unknown trigger mode");
  }
  spec.mode = static_cast<TriggerMode>(mode);
  spec.epsilon = io::read_le<double>(is, "load_trigger");
  const auto rank = io::read_le<std::uint32_t>(is, "load_trigger");
  if (rank != 3) throw Error(ErrorKind::kFormat, "load_trigger", "trigger rank must be 3");
  spec.shape.resize(rank);
  for (auto& d : spec.shape) d = io::read_le<std::uint32_t>(is, "load_trigger");
  if (numel(spec.shape) > (1u << 24)) throw Error(ErrorKind::kFormat, "load_trigger", "implausible size");
  spec.delta.resize(numel(spec.shape));
  for (double& v : spec.delta) v = io::read_le<double>(is, "load_trigger");
  spec.validate();
  return spec;
}

}  // namespace sk
