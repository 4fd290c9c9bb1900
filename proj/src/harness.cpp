#include "sklab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sklab/error.hpp"

namespace sk {

void TrainParams::validate() const {
  if (epochs < 1) throw Error(ErrorKind::kInvalidArgument, "train_params", "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::kInvalidArgument, "train_params", "batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "train_params", "negative learning rate");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "train_params", "momentum must lie in [0,1)");
  }
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "train_params", "negative weight decay");
  if (!(lr_decay_factor > 0.0)) throw Error(ErrorKind::kInvalidArgument, "train_params", "decay factor must be > 0");
  for (double m : lr_decay_milestones) {
    if (!(m > 0.0 && m <= 1.0)) {
      throw Error(ErrorKind::kInvalidArgument, "train_params", "milestones are fractions in (0,1]");
    }
  }
  if (defense) {
    defense->validate();
    if (defense->kind == DefenseKind::kMixup && batch_size < 2) {
      throw Error(ErrorKind::kInvalidArgument, "train_params", "mixup needs batch_size >= 2");
    }
  }
}

double TrainParams::rate_for_epoch(std::size_t epoch) const {
  double lr = learning_rate;
  for (double m : lr_decay_milestones) {
    const auto at = static_cast<std::size_t>(std::llround(m * static_cast<double>(epochs)));
    if (epoch >= at) lr *= lr_decay_factor;
  }
  return lr;
}

namespace {

void flip_rows(std::vector<double>& pixels, const Shape& image_shape, std::size_t image) {
  const std::size_t c = image_shape[0], h = image_shape[1], w = image_shape[2];
  double* base = pixels.data() + image * c * h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) std::reverse(base + (ch * h + i) * w, base + (ch * h + i + 1) * w);
  }
}

}  // namespace

TrainResult train(const Architecture& arch, const Dataset& data, const TrainParams& params) {
  params.validate();
  if (data.size() == 0) throw Error(ErrorKind::kInvalidArgument, "train", "empty dataset");
  data.validate();
  Model model(arch, data.image_shape, data.num_classes(), params.seed);
  std::mt19937_64 order_rng(params.seed ^ 0x5eedULL);
  std::mt19937_64 aug_rng(params.seed ^ 0xa11ceULL);

  const bool shaping = params.defense && params.defense->kind == DefenseKind::kGradientShaping;
  const bool mixing = params.defense && params.defense->kind == DefenseKind::kMixup;

  std::vector<double> theta = model.flat_params();
  std::vector<double> velocity(theta.size(), 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result{model, {}};
  for (std::size_t epoch = 0; epoch < params.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    const double lr = params.rate_for_epoch(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += params.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(params.batch_size, order.size() - start));
      if (mixing && idx.size() < 2) continue;
      Tensor images = data.batch(idx);
      if (params.hflip) {
        std::vector<double> px = images.to_vector();
        std::bernoulli_distribution coin(0.5);
        for (std::size_t k = 0; k < idx.size(); ++k) {
          if (coin(aug_rng)) flip_rows(px, data.image_shape, k);
        }
        images = Tensor(images.shape(), std::move(px));
      }
      const auto labels = data.labels_of(idx);
      std::vector<double> g;
      double loss_value = 0.0;
      try {
        Tensor loss;
        if (mixing) {
          const MixedBatch mixed =
              mixup_batch(images, one_hot(labels, data.num_classes()), params.defense->mixup_alpha, aug_rng);
          loss = soft_cross_entropy(model.forward(mixed.images), mixed.targets);
        } else {
          loss = loss_ce(model.forward(images), labels);
        }
        loss_value = loss.item();
        g = param_grad_vector(model, loss, false).to_vector();
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNonFinite) throw;
        throw Error(ErrorKind::kDivergence, "train",
                    "non-finite value at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(loss_value)) {
        throw Error(ErrorKind::kDivergence, "train", "loss is not finite at epoch " + std::to_string(epoch));
      }
      if (shaping) g = shaped_gradient_step(g, *params.defense, aug_rng);
      for (std::size_t p = 0; p < theta.size(); ++p) {
        const double step = g[p] + params.weight_decay * theta[p];
        velocity[p] = params.momentum * velocity[p] + step;
        theta[p] -= lr * velocity[p];
        if (!std::isfinite(theta[p])) {
          throw Error(ErrorKind::kDivergence, "train", "parameters diverged at epoch " + std::to_string(epoch));
        }
      }
      model.load_flat_params(theta);
      loss_sum += loss_value;
      ++batches;
    }
    result.loss_curve.push_back(batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches));
  }
  result.model = std::move(model);
  return result;
}

EvalReport evaluate_asr(const Model& model, const Dataset& source_test, const TriggerSpec& trigger,
                        int source_label, int target_label, std::uint64_t seed) {
  if (source_test.size() == 0) throw Error(ErrorKind::kInvalidArgument, "evaluate_asr", "empty test set");
  for (int l : source_test.labels) {
    if (l != source_label) {
      throw Error(ErrorKind::kInvalidArgument, "evaluate_asr", "test samples must carry the source label");
    }
  }
  const Dataset triggered = apply_trigger(source_test, trigger, seed);
  const auto preds = predict(model, triggered.all_images());
  EvalReport r;
  r.n_total = preds.size();
  for (int p : preds) {
    if (p == target_label) {
      ++r.n_success;
    } else if (p == source_label) {
      ++r.n_still_source;
    } else {
      ++r.n_other_class;
    }
  }
  r.asr = static_cast<double>(r.n_success) / static_cast<double>(r.n_total);
  return r;
}

std::vector<std::vector<std::size_t>> confusion_matrix(const Model& model, const Dataset& test) {
  const std::size_t classes = model.num_classes();
  std::vector<std::vector<std::size_t>> m(classes, std::vector<std::size_t>(classes, 0));
  const auto preds = predict(model, test.all_images());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (test.labels[i] < 0 || static_cast<std::size_t>(test.labels[i]) >= classes) {
      throw Error(ErrorKind::kInvalidArgument, "confusion_matrix", "label outside the model's classes");
    }
    ++m[static_cast<std::size_t>(test.labels[i])][static_cast<std::size_t>(preds[i])];
  }
  return m;
}

double evaluate_clean(const Model& model, const Dataset& test) {
  if (test.size() == 0) throw Error(ErrorKind::kInvalidArgument, "evaluate_clean", "empty test set");
  const auto m = confusion_matrix(model, test);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < m.size(); ++c) correct += m[c][c];
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

EvalReport evaluate(const Model& model, const Dataset& test, const TriggerSpec& trigger, int source_label,
                    int target_label, std::uint64_t seed) {
  EvalReport r =
      evaluate_asr(model, test.subset(test.indices_of_class(source_label)), trigger, source_label, target_label, seed);
  r.confusion = confusion_matrix(model, test);
  std::size_t correct = 0;
  for (std::size_t c = 0; c < r.confusion.size(); ++c) correct += r.confusion[c][c];
  r.clean_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return r;
}

}  // namespace sk
