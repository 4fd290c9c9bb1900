#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sklab/dataset.hpp"
#include "sklab/defenses.hpp"
#include "sklab/nn.hpp"
#include "sklab/trigger.hpp"

namespace sk {

struct TrainParams {
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double learning_rate = 0.02;
  double momentum = 0.9;
  // Fractions of `epochs` after which the rate is multiplied by lr_decay_factor.
  std::vector<double> lr_decay_milestones{0.5, 0.75};
  double lr_decay_factor = 0.1;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  bool hflip = false;
  // Only gradient_shaping and mixup act during training.
  std::optional<DefenseConfig> defense;

  void validate() const;
  double rate_for_epoch(std::size_t epoch) const;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_curve;  // mean minibatch loss per epoch
};

// Minibatch SGD with momentum from a fresh model seeded by params.seed; the
// per-epoch shuffle draws from the same seed, so equal-sized datasets see
// identical initialisation and batch order.
TrainResult train(const Architecture& arch, const Dataset& data, const TrainParams& params);

struct EvalReport {
  double asr = 0.0;
  double clean_accuracy = 0.0;
  std::size_t n_success = 0;
  std::size_t n_total = 0;
  std::size_t n_other_class = 0;
  std::size_t n_still_source = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted] on the clean test set
};

// Triggered source-class samples: argmax == target counts as success, any
// class other than source and target is tallied separately.
EvalReport evaluate_asr(const Model& model, const Dataset& source_test, const TriggerSpec& trigger,
                        int source_label, int target_label, std::uint64_t seed);
double evaluate_clean(const Model& model, const Dataset& test);
std::vector<std::vector<std::size_t>> confusion_matrix(const Model& model, const Dataset& test);

// ASR on the source-class part of `test` plus clean accuracy and confusion on all of it.
EvalReport evaluate(const Model& model, const Dataset& test, const TriggerSpec& trigger, int source_label,
                    int target_label, std::uint64_t seed);

}  // namespace sk
