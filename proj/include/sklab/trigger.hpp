#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sklab/dataset.hpp"
#include "sklab/nn.hpp"
#include "sklab/tensor.hpp"

namespace sk {

enum class TriggerMode : std::uint32_t { kAdditive = 0, kPatch = 1, kPredefinedPatch = 2 };

std::string to_string(TriggerMode mode);
TriggerMode trigger_mode_from_string(const std::string& name);

// The universal trigger and how it is stamped into images.
//  additive: x -> clip(x + delta, 0, 1), delta is C x H x W, |delta| <= epsilon
//  patch:    delta (C x h x w, values in [0,1]) replaces a window whose
//            top-left corner is drawn uniformly over all valid positions
struct TriggerSpec {
  TriggerMode mode = TriggerMode::kAdditive;
  Shape shape;
  std::vector<double> delta;
  double epsilon = 16.0 / 255.0;

  bool is_patch() const { return mode != TriggerMode::kAdditive; }
  void validate() const;
};

TriggerSpec additive_trigger(const Shape& image_shape, double epsilon = 16.0 / 255.0);
TriggerSpec patch_trigger(std::size_t channels, std::size_t height = 8, std::size_t width = 8);

struct Placement {
  std::size_t row = 0;
  std::size_t col = 0;
};

Placement sample_placement(const TriggerSpec& spec, const Shape& image_shape, std::mt19937_64& rng);

std::vector<double> apply_trigger(std::span<const double> image, const Shape& image_shape,
                                  const TriggerSpec& spec, Placement placement);
// Draws the placement from `rng` (ignored for additive triggers).
std::vector<double> apply_trigger(std::span<const double> image, const Shape& image_shape,
                                  const TriggerSpec& spec, std::mt19937_64& rng);
// Copy of `data` with the trigger stamped into every image.
Dataset apply_trigger(const Dataset& data, const TriggerSpec& spec, std::uint64_t seed);

// Differentiable in `delta`. `placements` has one entry per batch row for
// patch triggers and is ignored for additive ones.
Tensor apply_trigger_batch(const Tensor& batch, const Tensor& delta, const TriggerSpec& spec,
                           std::span<const Placement> placements);

enum class TriggerInit { kNormal, kUniform, kZeros };

struct TriggerCraftParams {
  std::size_t steps = 500;               // R_t
  double step_size = 1.0 / 255.0;        // alpha_t
  double init_variance = 0.01;           // sigma^2
  std::size_t max_samples = 256;         // M
  TriggerInit init = TriggerInit::kNormal;

  void validate() const;
};

struct CraftedTrigger {
  TriggerSpec spec;
  // Targeted crafting loss before each step plus one entry after the last.
  std::vector<double> loss_trace;
};

// Signed descent of the mean cross-entropy toward `target_label` over the
// triggered source samples, projecting after every step.
CraftedTrigger craft_trigger(const Model& surrogate, const Dataset& source_samples, int source_label,
                             int target_label, const TriggerSpec& initial,
                             const TriggerCraftParams& params, std::uint64_t seed);

// The quantity craft_trigger descends: mean CE toward target over triggered samples.
double targeted_trigger_loss(const Model& surrogate, const Dataset& samples, int target_label,
                             const TriggerSpec& spec, std::uint64_t seed);

// Fraction of samples the model assigns to `target_label` once triggered.
double targeted_fooling_rate(const Model& model, const Dataset& samples, int target_label,
                             const TriggerSpec& spec, std::uint64_t seed);

// Predefined patch file: h*w*C unsigned bytes in h x w x C order.
TriggerSpec predefined_patch(const std::filesystem::path& path, std::size_t height, std::size_t width,
                             std::size_t channels);
void write_patch_bytes(const TriggerSpec& spec, const std::filesystem::path& path);
// A fixed high-contrast random patch standing in for hand-picked triggers.
TriggerSpec make_predefined_patch(std::size_t height, std::size_t width, std::size_t channels,
                                  std::uint64_t seed);

// Trigger file: "SKTR" | u32 version | u32 mode | f64 epsilon | u32 rank |
// u32 dims... | f64 values, little-endian.
void save_trigger(const TriggerSpec& spec, const std::filesystem::path& path);
TriggerSpec load_trigger(const std::filesystem::path& path);

}  // namespace sk
