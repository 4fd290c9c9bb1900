#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sklab/dataset.hpp"
#include "sklab/nn.hpp"
#include "sklab/trigger.hpp"

namespace sk {

struct PoisonCraftParams {
  std::size_t budget = 0;           // N; 0 means budget_fraction of the training set
  double budget_fraction = 0.01;
  std::size_t attacker_samples = 256;  // K
  std::size_t steps = 250;             // R_p
  double step_size = 1.0 / 255.0;      // alpha_p
  double epsilon = 16.0 / 255.0;       // epsilon_p
  double init_variance = 0.01;
  bool signed_updates = true;
  // Align the gradient of the summed poison loss instead of each sample's own.
  bool batched = false;
  std::size_t jobs = 1;

  void validate() const;
  std::size_t resolve_budget(std::size_t train_size) const;
};

// Gradient over the surrogate's parameters of the mean cross-entropy toward
// `target_label` on up to `max_samples` triggered source samples.
Tensor attacker_gradient(const Model& surrogate, const Dataset& source_samples, const TriggerSpec& trigger,
                         int target_label, std::uint64_t seed, std::size_t max_samples = 256);

// ||d L(F(x), label) / d theta|| for every image of `data` at `indices`.
std::vector<double> gradient_norms(const Model& model, const Dataset& data, std::span<const std::size_t> indices,
                                   int label);

struct PoisonSelection {
  std::vector<std::size_t> indices;  // ascending
  std::vector<double> scores;        // aligned with indices
};

// The n candidates with the largest clean-gradient norm, lower index first on ties.
PoisonSelection select_poison_targets(const Model& surrogate, const Dataset& train,
                                      std::span<const std::size_t> candidates, int target_label, std::size_t n);

// Per-sample N(0, variance) draws seeded by (seed, dataset index), clipped to
// [-epsilon, epsilon] and so that base + delta stays in [0,1].
std::vector<std::vector<double>> init_poison_deltas(const Dataset& base, std::span<const std::size_t> indices,
                                                    double epsilon, double variance, std::uint64_t seed);

// A_j for one poison image and its differentiable building blocks.
Tensor poison_alignment(const Model& surrogate, const Tensor& poisoned_image, int label,
                        const Tensor& attacker_grad);

struct CraftedPoison {
  PoisonAssembly assembly;
  // Per poison sample: A_j before each step plus one entry after the last.
  std::vector<std::vector<double>> alignment_trace;
};

// Signed descent of each A_j over its own delta_j with the surrogate frozen.
CraftedPoison craft_poison(const Model& surrogate, const PoisonAssembly& init, const Tensor& attacker_grad,
                           const PoisonCraftParams& params);

}  // namespace sk
