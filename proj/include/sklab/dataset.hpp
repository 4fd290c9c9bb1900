#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sklab/tensor.hpp"

namespace sk {

enum class Split { kTrain, kTest };

std::string to_string(Split split);

// Labeled images with pixels in [0,1], stored N x C x H x W row-major.
struct Dataset {
  Shape image_shape;  // C x H x W
  std::vector<double> pixels;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return numel(image_shape); }
  std::size_t num_classes() const { return class_names.size(); }
  std::span<const double> image(std::size_t i) const;
  std::span<double> mutable_image(std::size_t i);

  std::vector<std::size_t> indices_of_class(int label) const;
  // N x C x H x W tensor of the selected images.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all_images() const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  // Throws unless pixels lie in [0,1], labels are valid and sizes agree.
  void validate() const;
};

// Directory container: meta.json {"classes":[...],"shape":[C,H,W],"count":N},
// images.bin (N*C*H*W unsigned bytes) and labels.bin (N unsigned bytes).
Dataset load_dataset(const std::filesystem::path& dir);
// Pixels are rounded to the nearest 1/255 step on write.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);

// Rounds every pixel to the nearest multiple of 1/255.
Dataset quantize(const Dataset& data);
std::uint8_t to_byte(double pixel);

struct SynthOptions {
  std::size_t num_classes = 4;
  std::size_t per_class = 500;
  Shape shape{3, 16, 16};
  std::uint64_t seed = 0;
  double noise_sigma = 0.2;
  double background = 0.35;
  double contrast = 0.25;
  // Per-sample bar offset, uniform in [-jitter, jitter] pixels along the bar normal.
  double jitter = 0.0;
  Split split = Split::kTrain;
};

// Per-class oriented-bar template plus seeded Gaussian pixel noise, clipped to
// [0,1] and quantized to bytes. Samples are ordered class-major.
Dataset synth_dataset(const SynthOptions& options);
// The noiseless template for one class, C x H x W, bar shifted by `offset` pixels.
std::vector<double> synth_template(const SynthOptions& options, int label, double offset = 0.0);

// Clean-label poisoning plan over a base dataset.
struct PoisonAssembly {
  Dataset base;
  std::vector<std::size_t> indices;         // into base, all labeled target_label
  std::vector<std::vector<double>> deltas;  // one image-sized perturbation per index
  double epsilon = 16.0 / 255.0;            // L-infinity budget
  int target_label = 0;
  int source_label = 0;
  std::uint64_t seed = 0;

  // Throws when the plan breaks the clean-label or budget invariants.
  void validate() const;
};

// D_p: base images with x_j <- clip(x_j + delta_j, 0, 1) at the poison indices.
// Labels are never touched.
Dataset assemble_poisoned(const PoisonAssembly& assembly);

// Writes the (byte-quantized) poisoned dataset plus poison_manifest.json.
void export_poisoned(const PoisonAssembly& assembly, const std::filesystem::path& dir);

struct PoisonManifest {
  std::vector<std::size_t> indices;
  double epsilon = 0.0;
  int target_label = 0;
  int source_label = 0;
  std::uint64_t seed = 0;
};

PoisonManifest load_poison_manifest(const std::filesystem::path& dir);

}  // namespace sk
