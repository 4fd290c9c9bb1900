#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sklab/dataset.hpp"
#include "sklab/nn.hpp"
#include "sklab/tensor.hpp"

namespace sk {

enum class DefenseKind { kActivationClustering, kGradientShaping, kMixup };

std::string to_string(DefenseKind kind);
// Accepts the long names and the CLI short forms "ac", "dpsgd", "mixup".
DefenseKind defense_kind_from_string(const std::string& name);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::kActivationClustering;
  double clip_bound = 4.0;
  double noise_variance = 1e-5;
  double mixup_alpha = 1.0;
  std::size_t kmeans_k = 2;
  std::size_t kmeans_restarts = 10;

  void validate() const;
};

// g * min(1, clip_bound / ||g||) + N(0, noise_variance I).
std::vector<double> shaped_gradient_step(std::span<const double> grads, const DefenseConfig& config,
                                         std::mt19937_64& rng);
Tensor shaped_gradient_step(const Tensor& grads, const DefenseConfig& config, std::mt19937_64& rng);

// Beta(alpha, alpha) via the ratio of two gamma draws.
double sample_beta(double alpha, std::mt19937_64& rng);

// N x L rows with a single 1 at each label.
Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

struct MixedBatch {
  Tensor images;
  Tensor targets;  // N x L label weights, rows sum to 1
  double lambda = 1.0;
  std::vector<std::size_t> partner;
};

// lambda * x_a + (1 - lambda) * x_partner(a), same for the targets.
MixedBatch mixup_with(const Tensor& images, const Tensor& targets, double lambda,
                      std::vector<std::size_t> partner);
// Draws lambda ~ Beta(alpha, alpha) and a uniform permutation of partners.
MixedBatch mixup_batch(const Tensor& images, const Tensor& targets, double alpha, std::mt19937_64& rng);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> sizes;
  double inertia = 0.0;
};

// Lloyd iterations from `restarts` seeded initialisations (k distinct rows
// drawn uniformly), keeping the run with the lowest inertia. `points` is
// n x dim row-major. Points go to the nearest centroid, lowest index on ties.
KMeansResult kmeans(std::span<const double> points, std::size_t n, std::size_t dim, std::size_t k,
                    std::size_t restarts, std::uint64_t seed, std::size_t max_iterations = 100);

struct ClusterLabelReport {
  int label = 0;
  std::size_t count = 0;
  std::vector<std::size_t> cluster_sizes;
  std::size_t removed = 0;
  bool flagged = false;  // equal or empty clusters, nothing removed
  bool skipped = false;  // fewer than two samples
};

struct ClusteringReport {
  std::vector<ClusterLabelReport> per_label;
  std::vector<std::size_t> removed_indices;  // ascending, into the input dataset
  std::vector<std::size_t> kept_indices;
  std::vector<std::string> warnings;
};

struct ClusteringResult {
  Dataset filtered;
  ClusteringReport report;
};

// Per label: k-means over penultimate activations, drop the smaller cluster.
ClusteringResult activation_clustering_filter(const Model& model, const Dataset& train,
                                              const DefenseConfig& config, std::uint64_t seed);

struct PoisonRemoval {
  std::size_t poison_total = 0;
  std::size_t poison_removed = 0;
  std::size_t clean_removed = 0;
  double fraction_removed = 0.0;
};

// How many of the manifest's indices the filter dropped.
PoisonRemoval reconcile_removal(const ClusteringReport& report, std::span<const std::size_t> poison_indices);

}  // namespace sk
