#include "sklab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"
#include "sklab/error.hpp"

namespace sk {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

std::span<const double> Dataset::image(std::size_t i) const {
  if (i >= size()) throw Error(ErrorKind::kInvalidArgument, "image", "index out of range");
  const std::size_t n = image_numel();
  return {pixels.data() + i * n, n};
}

std::span<double> Dataset::mutable_image(std::size_t i) {
  if (i >= size()) throw Error(ErrorKind::kInvalidArgument, "image", "index out of range");
  const std::size_t n = image_numel();
  return {pixels.data() + i * n, n};
}

std::vector<std::size_t> Dataset::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(i);
  }
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = image_numel();
  std::vector<double> data;
  data.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    const auto img = image(i);
    data.insert(data.end(), img.begin(), img.end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  return Tensor(std::move(shape), std::move(data));
}

Tensor Dataset::all_images() const {
  Shape shape{size()};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  return Tensor(std::move(shape), pixels);
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw Error(ErrorKind::kInvalidArgument, "labels_of", "index out of range");
    out.push_back(labels[i]);
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.image_shape = image_shape;
  out.class_names = class_names;
  out.split = split;
  out.pixels.reserve(indices.size() * image_numel());
  for (std::size_t i : indices) {
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (image_shape.size() != 3 || image_numel() == 0) {
    throw Error(ErrorKind::kInvalidArgument, "dataset", "image shape must be C x H x W");
  }
  if (pixels.size() != labels.size() * image_numel()) {
    throw Error(ErrorKind::kShapeMismatch, "dataset", "pixel buffer does not match label count");
  }
  for (double p : pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "dataset", "pixel outside [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes()) {
      throw Error(ErrorKind::kInvalidArgument, "dataset", "label " + std::to_string(l) + " out of range");
    }
  }
}

std::uint8_t to_byte(double pixel) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(pixel, 0.0, 1.0) * 255.0));
}

Dataset quantize(const Dataset& data) {
  Dataset out = data;
  for (double& p : out.pixels) p = static_cast<double>(to_byte(p)) / 255.0;
  return out;
}

namespace {

std::vector<char> read_file(const fs::path& path, const char* op) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, op, "missing file " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const void* data, std::size_t size, const char* op) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, op, "cannot write " + path.string());
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!os) throw Error(ErrorKind::kIo, op, "write failed for " + path.string());
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  const auto meta_bytes = read_file(dir / "meta.json", "load_dataset");
  json meta;
  try {
    meta = json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "load_dataset", std::string("meta.json: ") + e.what());
  }
  Dataset data;
  try {
    data.class_names = meta.at("classes").get<std::vector<std::string>>();
    data.image_shape = meta.at("shape").get<Shape>();
    const auto count = meta.at("count").get<std::size_t>();
    if (meta.contains("split")) {
      data.split = meta["split"].get<std::string>() == "test" ? Split::kTest : Split::kTrain;
    }
    if (data.image_shape.size() != 3 || numel(data.image_shape) == 0) {
      throw Error(ErrorKind::kFormat, "load_dataset", "shape must be [C,H,W]");
    }
    if (data.class_names.size() < 2 || data.class_names.size() > 256) {
      throw Error(ErrorKind::kFormat, "load_dataset", "class count must be in [2,256]");
    }
    const auto images = read_file(dir / "images.bin", "load_dataset");
    const auto labels = read_file(dir / "labels.bin", "load_dataset");
    if (images.size() != count * numel(data.image_shape)) {
      throw Error(ErrorKind::kFormat, "load_dataset",
                  "images.bin holds " + std::to_string(images.size()) + " bytes, meta implies " +
                      std::to_string(count * numel(data.image_shape)));
    }
    if (labels.size() != count) {
      throw Error(ErrorKind::kFormat, "load_dataset",
                  "labels.bin holds " + std::to_string(labels.size()) + " labels, meta says " +
                      std::to_string(count));
    }
    data.pixels.resize(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      data.pixels[i] = static_cast<double>(static_cast<std::uint8_t>(images[i])) / 255.0;
    }
    data.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int l = static_cast<std::uint8_t>(labels[i]);
      if (static_cast<std::size_t>(l) >= data.class_names.size()) {
        throw Error(ErrorKind::kFormat, "load_dataset",
                    "label " + std::to_string(l) + " at index " + std::to_string(i) + " out of range");
      }
      data.labels[i] = l;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "load_dataset", std::string("meta.json: ") + e.what());
  }
  return data;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  data.validate();
  if (data.num_classes() > 256) throw Error(ErrorKind::kInvalidArgument, "save_dataset", "too many classes");
  fs::create_directories(dir);
  json meta = {{"classes", data.class_names},
               {"shape", data.image_shape},
               {"count", data.size()},
               {"split", to_string(data.split)}};
  const std::string text = meta.dump(2) + "\n";
  write_file(dir / "meta.json", text.data(), text.size(), "save_dataset");
  std::vector<std::uint8_t> bytes(data.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(data.pixels[i]);
  write_file(dir / "images.bin", bytes.data(), bytes.size(), "save_dataset");
  std::vector<std::uint8_t> labels(data.labels.begin(), data.labels.end());
  write_file(dir / "labels.bin", labels.data(), labels.size(), "save_dataset");
}

std::vector<double> synth_template(const SynthOptions& options, int label, double offset) {
  const Shape& s = options.shape;
  const std::size_t c = s[0], h = s[1], w = s[2];
  const double angle = std::numbers::pi * static_cast<double>(label) /
                       static_cast<double>(options.num_classes);
  const double nx = -std::sin(angle), ny = std::cos(angle);
  const double width = static_cast<double>(std::max(h, w)) / 10.0;
  const double ci = (static_cast<double>(h) - 1.0) / 2.0;
  const double cj = (static_cast<double>(w) - 1.0) / 2.0;
  std::vector<double> out(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    // colour images get a class-dependent tint per channel
    const double tint =
        c == 1 ? 1.0 : 0.6 + 0.4 * std::cos(angle + 2.0 * std::numbers::pi * ch / static_cast<double>(c));
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double d = (static_cast<double>(j) - cj) * nx + (static_cast<double>(i) - ci) * ny - offset;
        const double bar = std::exp(-d * d / (2.0 * width * width));
        out[(ch * h + i) * w + j] = std::clamp(options.background + options.contrast * tint * bar, 0.0, 1.0);
      }
    }
  }
  return out;
}

Dataset synth_dataset(const SynthOptions& options) {
  if (options.num_classes < 2) throw Error(ErrorKind::kInvalidArgument, "synth_dataset", "need L >= 2");
  if (options.num_classes > 256) throw Error(ErrorKind::kInvalidArgument, "synth_dataset", "need L <= 256");
  if (options.shape.size() != 3 || numel(options.shape) == 0 || options.shape[1] < 2 ||
      options.shape[2] < 2) {
    throw Error(ErrorKind::kInvalidArgument, "synth_dataset",
                "degenerate image shape " + to_string(options.shape));
  }
  if (options.noise_sigma < 0.0) throw Error(ErrorKind::kInvalidArgument, "synth_dataset", "negative noise");
  if (options.jitter < 0.0) throw Error(ErrorKind::kInvalidArgument, "synth_dataset", "negative jitter");
  Dataset data;
  data.image_shape = options.shape;
  data.split = options.split;
  for (std::size_t c = 0; c < options.num_classes; ++c) data.class_names.push_back("class" + std::to_string(c));
  const std::size_t n = numel(options.shape);
  data.pixels.reserve(options.num_classes * options.per_class * n);
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> shift(-options.jitter, options.jitter);
  for (std::size_t c = 0; c < options.num_classes; ++c) {
    auto tmpl = synth_template(options, static_cast<int>(c));
    for (std::size_t k = 0; k < options.per_class; ++k) {
      if (options.jitter > 0.0) tmpl = synth_template(options, static_cast<int>(c), shift(rng));
      for (std::size_t p = 0; p < n; ++p) {
        const double v = tmpl[p] + options.noise_sigma * noise(rng);
        data.pixels.push_back(static_cast<double>(to_byte(v)) / 255.0);
      }
      data.labels.push_back(static_cast<int>(c));
    }
  }
  return data;
}

void PoisonAssembly::validate() const {
  if (deltas.size() != indices.size()) {
    throw Error(ErrorKind::kShapeMismatch, "poison_assembly", "one delta per poison index required");
  }
  if (!(epsilon > 0.0 && epsilon <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "poison_assembly", "epsilon must lie in (0,1]");
  }
  std::vector<std::size_t> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorKind::kInvalidArgument, "poison_assembly", "duplicate poison index");
  }
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= base.size()) {
      throw Error(ErrorKind::kInvalidArgument, "poison_assembly",
                  "index " + std::to_string(indices[k]) + " out of range");
    }
    if (base.labels[indices[k]] != target_label) {
      throw Error(ErrorKind::kInvalidArgument, "poison_assembly",
                  "index " + std::to_string(indices[k]) + " is not labeled with the target class");
    }
    if (deltas[k].size() != base.image_numel()) {
      throw Error(ErrorKind::kShapeMismatch, "poison_assembly", "delta size does not match image size");
    }
    for (double d : deltas[k]) {
      if (!(std::abs(d) <= epsilon + 1e-12)) {
        throw Error(ErrorKind::kInvalidArgument, "poison_assembly", "delta exceeds the epsilon budget");
      }
    }
  }
}

Dataset assemble_poisoned(const PoisonAssembly& assembly) {
  assembly.validate();
  Dataset out = assembly.base;
  for (std::size_t k = 0; k < assembly.indices.size(); ++k) {
    auto img = out.mutable_image(assembly.indices[k]);
    for (std::size_t p = 0; p < img.size(); ++p) {
      img[p] = std::clamp(img[p] + assembly.deltas[k][p], 0.0, 1.0);
    }
  }
  return out;
}

void export_poisoned(const PoisonAssembly& assembly, const fs::path& dir) {
  save_dataset(assemble_poisoned(assembly), dir);
  json manifest = {{"indices", assembly.indices},
                   {"epsilon_p", assembly.epsilon},
                   {"target_label", assembly.target_label},
                   {"source_label", assembly.source_label},
                   {"seed", assembly.seed}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "poison_manifest.json", text.data(), text.size(), "export_poisoned");
}

PoisonManifest load_poison_manifest(const fs::path& dir) {
  const auto bytes = read_file(dir / "poison_manifest.json", "load_poison_manifest");
  try {
    const json j = json::parse(bytes.begin(), bytes.end());
    PoisonManifest m;
    m.indices = j.at("indices").get<std::vector<std::size_t>>();
    m.epsilon = j.at("epsilon_p").get<double>();
    m.target_label = j.at("target_label").get<int>();
    m.source_label = j.value("source_label", 0);
    m.seed = j.value("seed", std::uint64_t{0});
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "load_poison_manifest", e.what());
  }
}

}  // namespace sk
