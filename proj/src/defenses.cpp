#include "sklab/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sklab/error.hpp"

namespace sk {

std::string to_string(DefenseKind kind) {
  switch (kind) {
    case DefenseKind::kActivationClustering: return "activation_clustering";
    case DefenseKind::kGradientShaping: return "gradient_shaping";
    case DefenseKind::kMixup: return "mixup";
  }
  return "unknown";
}

DefenseKind defense_kind_from_string(const std::string& name) {
  if (name == "ac" || name == "activation_clustering") return DefenseKind::kActivationClustering;
  if (name == "dpsgd" || name == "gradient_shaping") return DefenseKind::kGradientShaping;
  if (name == "mixup") return DefenseKind::kMixup;
  throw Error(ErrorKind::kInvalidArgument, "defense", "unknown defense '" + name + "'");
}

void DefenseConfig::validate() const {
  if (!(clip_bound > 0.0)) throw Error(ErrorKind::kInvalidArgument, "defense", "clip_bound must be > 0");
  if (!(noise_variance >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "defense", "noise_variance must be >= 0");
  if (!(mixup_alpha > 0.0)) throw Error(ErrorKind::kInvalidArgument, "defense", "mixup_alpha must be > 0");
  if (kmeans_k < 2) throw Error(ErrorKind::kInvalidArgument, "defense", "kmeans_k must be >= 2");
  if (kmeans_restarts < 1) throw Error(ErrorKind::kInvalidArgument, "defense", "kmeans_restarts must be >= 1");
}

std::vector<double> shaped_gradient_step(std::span<const double> grads, const DefenseConfig& config,
                                         std::mt19937_64& rng) {
  config.validate();
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  const double factor = norm > config.clip_bound ? config.clip_bound / norm : 1.0;
  std::vector<double> out(grads.begin(), grads.end());
  for (double& g : out) g *= factor;
  if (config.noise_variance > 0.0) {
    std::normal_distribution<double> noise(0.0, std::sqrt(config.noise_variance));
    for (double& g : out) g += noise(rng);
  }
  return out;
}

Tensor shaped_gradient_step(const Tensor& grads, const DefenseConfig& config, std::mt19937_64& rng) {
  return Tensor(grads.shape(), shaped_gradient_step(grads.data(), config, rng));
}

double sample_beta(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw Error(ErrorKind::kInvalidArgument, "sample_beta", "alpha must be > 0");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  if (a + b == 0.0) return 0.5;
  return a / (a + b);
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  std::vector<double> out(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error(ErrorKind::kInvalidArgument, "one_hot", "label " + std::to_string(labels[i]) + " out of range");
    }
    out[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor({labels.size(), num_classes}, std::move(out));
}

MixedBatch mixup_with(const Tensor& images, const Tensor& targets, double lambda,
                      std::vector<std::size_t> partner) {
  const std::size_t n = images.dim() > 0 ? images.size(0) : 0;
  if (n < 2) throw Error(ErrorKind::kInvalidArgument, "mixup", "batch must hold at least two samples");
  if (targets.dim() != 2 || targets.size(0) != n) {
    throw Error(ErrorKind::kShapeMismatch, "mixup", "targets must be N x L");
  }
  if (partner.size() != n) throw Error(ErrorKind::kInvalidArgument, "mixup", "one partner per sample required");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "mixup", "lambda outside [0,1]");
  const auto mix = [&](const Tensor& t) {
    const std::size_t per = t.numel() / n;
    const auto src = t.data();
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < n; ++i) {
      if (partner[i] >= n) throw Error(ErrorKind::kInvalidArgument, "mixup", "partner index out of range");
      for (std::size_t p = 0; p < per; ++p) {
        out[i * per + p] = lambda * src[i * per + p] + (1.0 - lambda) * src[partner[i] * per + p];
      }
    }
    return Tensor(t.shape(), std::move(out));
  };
  return {mix(images), mix(targets), lambda, std::move(partner)};
}

MixedBatch mixup_batch(const Tensor& images, const Tensor& targets, double alpha, std::mt19937_64& rng) {
  const double lambda = sample_beta(alpha, rng);
  std::vector<std::size_t> partner(images.dim() > 0 ? images.size(0) : 0);
  std::iota(partner.begin(), partner.end(), std::size_t{0});
  std::shuffle(partner.begin(), partner.end(), rng);
  return mixup_with(images, targets, lambda, std::move(partner));
}

namespace {

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double diff = a[d] - b[d];
    s += diff * diff;
  }
  return s;
}

KMeansResult lloyd(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                   std::mt19937_64& rng, std::size_t max_iterations) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  KMeansResult r;
  r.centroids.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double* p = points.data() + order[c] * dim;
    r.centroids[c].assign(p, p + dim);
  }
  r.assignment.assign(n, 0);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points.data() + i * dim, r.centroids[c].data(), dim);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (iter == 0 || r.assignment[i] != best) changed = true;
      r.assignment[i] = best;
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = points.data() + i * dim;
      auto& s = sums[r.assignment[i]];
      for (std::size_t d = 0; d < dim; ++d) s[d] += p[d];
      ++counts[r.assignment[i]];
    }
    // empty clusters keep their previous centroid
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) r.centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
  }
  r.sizes.assign(k, 0);
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ++r.sizes[r.assignment[i]];
    r.inertia += squared_distance(points.data() + i * dim, r.centroids[r.assignment[i]].data(), dim);
  }
  return r;
}

}  // namespace

KMeansResult kmeans(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                    std::size_t restarts, std::uint64_t seed, std::size_t max_iterations) {
  if (points.size() != n * dim || dim == 0) {
    throw Error(ErrorKind::kShapeMismatch, "kmeans", "points must be n x dim");
  }
  if (k < 1 || k > n) throw Error(ErrorKind::kInvalidArgument, "kmeans", "need 1 <= k <= n");
  if (restarts < 1) throw Error(ErrorKind::kInvalidArgument, "kmeans", "need at least one restart");
  std::mt19937_64 rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < restarts; ++r) {
    KMeansResult run = lloyd(points, n, dim, k, rng, max_iterations);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

ClusteringResult activation_clustering_filter(const Model& model, const Dataset& train,
                                              const DefenseConfig& config, std::uint64_t seed) {
  config.validate();
  ClusteringResult result;
  std::vector<bool> removed(train.size(), false);
  const std::size_t dim = model.penultimate_dim();
  for (std::size_t label = 0; label < train.num_classes(); ++label) {
    const auto idx = train.indices_of_class(static_cast<int>(label));
    ClusterLabelReport entry;
    entry.label = static_cast<int>(label);
    entry.count = idx.size();
    if (idx.size() < std::max<std::size_t>(2, config.kmeans_k)) {
      entry.skipped = true;
      result.report.warnings.push_back("label " + std::to_string(label) + " has " +
                                       std::to_string(idx.size()) + " samples, skipped");
      result.report.per_label.push_back(std::move(entry));
      continue;
    }
    std::vector<double> acts;
    acts.reserve(idx.size() * dim);
    {
      NoGradGuard guard;
      constexpr std::size_t kChunk = 256;
      for (std::size_t start = 0; start < idx.size(); start += kChunk) {
        const std::span<const std::size_t> part(idx.data() + start, std::min(kChunk, idx.size() - start));
        const Tensor a = model.penultimate(train.batch(part));
        acts.insert(acts.end(), a.data().begin(), a.data().end());
      }
    }
    const KMeansResult km =
        kmeans(acts, idx.size(), dim, config.kmeans_k, config.kmeans_restarts, seed + label);
    entry.cluster_sizes = km.sizes;
    const auto [min_it, max_it] = std::minmax_element(km.sizes.begin(), km.sizes.end());
    const auto smallest = static_cast<std::size_t>(min_it - km.sizes.begin());
    const bool unique_smallest = std::count(km.sizes.begin(), km.sizes.end(), *min_it) == 1;
    if (*min_it == 0 || *min_it == *max_it || !unique_smallest) {
      entry.flagged = true;
    } else {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (km.assignment[i] == smallest) {
          removed[idx[i]] = true;
          ++entry.removed;
        }
      }
    }
    result.report.per_label.push_back(std::move(entry));
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    (removed[i] ? result.report.removed_indices : result.report.kept_indices).push_back(i);
  }
  result.filtered = train.subset(result.report.kept_indices);
  return result;
}

PoisonRemoval reconcile_removal(const ClusteringReport& report, std::span<const std::size_t> poison_indices) {
  PoisonRemoval r;
  r.poison_total = poison_indices.size();
  for (std::size_t i : report.removed_indices) {
    if (std::find(poison_indices.begin(), poison_indices.end(), i) != poison_indices.end()) {
      ++r.poison_removed;
    } else {
      ++r.clean_removed;
    }
  }
  r.fraction_removed =
      r.poison_total == 0 ? 0.0 : static_cast<double>(r.poison_removed) / static_cast<double>(r.poison_total);
  return r;
}

}  // namespace sk
