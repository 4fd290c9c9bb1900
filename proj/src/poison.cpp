#include "sklab/poison.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "sklab/error.hpp"

namespace sk {

void PoisonCraftParams::validate() const {
  if (budget == 0 && !(budget_fraction > 0.0 && budget_fraction <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "poison_params", "budget_fraction must lie in (0,1]");
  }
  if (attacker_samples < 1) throw Error(ErrorKind::kInvalidArgument, "poison_params", "K must be >= 1");
  if (!(step_size >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "poison_params", "negative step size");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "poison_params", "epsilon must lie in (0,1]");
  }
  if (!(init_variance >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "poison_params", "negative variance");
  if (jobs < 1) throw Error(ErrorKind::kInvalidArgument, "poison_params", "jobs must be >= 1");
}

std::size_t PoisonCraftParams::resolve_budget(std::size_t train_size) const {
  if (budget > 0) return budget;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(budget_fraction * train_size)));
}

Tensor attacker_gradient(const Model& surrogate, const Dataset& source_samples, const TriggerSpec& trigger,
                         int target_label, std::uint64_t seed, std::size_t max_samples) {
  if (source_samples.size() == 0 || max_samples == 0) {
    throw Error(ErrorKind::kInvalidArgument, "attacker_gradient", "no source samples");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(source_samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_samples < idx.size()) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_samples);
    std::sort(idx.begin(), idx.end());
  }
  const Tensor images = source_samples.batch(idx);
  std::vector<Placement> placements;
  if (trigger.is_patch()) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
      placements.push_back(sample_placement(trigger, source_samples.image_shape, rng));
    }
  }
  const Tensor triggered = apply_trigger_batch(images, Tensor(trigger.shape, trigger.delta), trigger, placements);
  const std::vector<int> targets(idx.size(), target_label);
  return param_grad_vector(surrogate, loss_ce(surrogate.forward(triggered), targets), false);
}

std::vector<double> gradient_norms(const Model& model, const Dataset& data, std::span<const std::size_t> indices,
                                   int label) {
  std::vector<double> out;
  out.reserve(indices.size());
  const std::vector<int> labels{label};
  for (std::size_t i : indices) {
    const std::size_t one[] = {i};
    const Tensor g = param_grad_vector(model, loss_ce(model.forward(data.batch(one)), labels), false);
    out.push_back(l2norm(g).item());
  }
  return out;
}

PoisonSelection select_poison_targets(const Model& surrogate, const Dataset& train,
                                      std::span<const std::size_t> candidates, int target_label, std::size_t n) {
  if (candidates.size() < n) {
    throw Error(ErrorKind::kInvalidArgument, "select_poison_targets",
                "need " + std::to_string(n) + " candidates, have " + std::to_string(candidates.size()));
  }
  for (std::size_t i : candidates) {
    if (i >= train.size() || train.labels[i] != target_label) {
      throw Error(ErrorKind::kInvalidArgument, "select_poison_targets",
                  "candidate " + std::to_string(i) + " is not a target-class sample");
    }
  }
  const auto scores = gradient_norms(surrogate, train, candidates, target_label);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  order.resize(n);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return candidates[a] < candidates[b]; });
  PoisonSelection sel;
  for (std::size_t k : order) {
    sel.indices.push_back(candidates[k]);
    sel.scores.push_back(scores[k]);
  }
  return sel;
}

namespace {

// Keeps |delta| <= epsilon and x + delta inside [0,1].
void project_delta(std::span<double> delta, std::span<const double> image, double epsilon) {
  for (std::size_t p = 0; p < delta.size(); ++p) {
    delta[p] = std::clamp(delta[p], std::max(-epsilon, -image[p]), std::min(epsilon, 1.0 - image[p]));
  }
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t(words[0]) << 32) | words[1];
}

Tensor as_batch(const Shape& image_shape, std::span<const double> values, bool requires_grad) {
  return Tensor({1, image_shape[0], image_shape[1], image_shape[2]}, std::vector<double>(values.begin(), values.end()),
                requires_grad);
}

double checked(double a, std::size_t index, std::size_t step) {
  if (!std::isfinite(a)) {
    throw Error(ErrorKind::kNonFinite, "craft_poison",
                "alignment loss is not finite for poison index " + std::to_string(index) + " at step " +
                    std::to_string(step));
  }
  return a;
}

void descend(std::span<double> delta, std::span<const double> g, const PoisonCraftParams& params) {
  for (std::size_t p = 0; p < delta.size(); ++p) {
    const double direction = params.signed_updates ? (g[p] > 0.0 ? 1.0 : (g[p] < 0.0 ? -1.0 : 0.0)) : g[p];
    delta[p] -= params.step_size * direction;
  }
}

void craft_one(const Model& surrogate, const PoisonAssembly& init, const Tensor& attacker_grad,
               const PoisonCraftParams& params, std::size_t k, std::vector<double>& delta,
               std::vector<double>& trace) {
  const Dataset& base = init.base;
  const auto image = base.image(init.indices[k]);
  const Tensor clean = as_batch(base.image_shape, image, false);
  trace.clear();
  trace.reserve(params.steps + 1);
  for (std::size_t step = 0; step <= params.steps; ++step) {
    const Tensor d = as_batch(base.image_shape, delta, step < params.steps);
    const Tensor a = poison_alignment(surrogate, add(clean, d), init.target_label, attacker_grad);
    trace.push_back(checked(a.item(), init.indices[k], step));
    if (step == params.steps) break;
    const Tensor g = grad(a, {d})[0];
    descend(delta, g.data(), params);
    project_delta(delta, image, params.epsilon);
  }
}

void craft_batched(const Model& surrogate, const PoisonAssembly& init, const Tensor& attacker_grad,
                   const PoisonCraftParams& params, std::vector<std::vector<double>>& deltas,
                   std::vector<std::vector<double>>& traces) {
  const Dataset& base = init.base;
  const Tensor clean = base.batch(init.indices);
  const std::size_t per = base.image_numel();
  const std::vector<int> labels(init.indices.size(), init.target_label);
  for (auto& t : traces) t.reserve(params.steps + 1);
  for (std::size_t step = 0; step <= params.steps; ++step) {
    std::vector<double> flat;
    flat.reserve(deltas.size() * per);
    for (const auto& d : deltas) flat.insert(flat.end(), d.begin(), d.end());
    const Tensor d(clean.shape(), std::move(flat), step < params.steps);
    const Tensor g = param_grad_vector(surrogate, loss_ce(surrogate.forward(add(clean, d)), labels), true);
    const Tensor a = cosine_alignment(g, attacker_grad);
    const double value = checked(a.item(), init.indices.front(), step);
    for (auto& t : traces) t.push_back(value);
    if (step == params.steps) break;
    const Tensor gd = grad(a, {d})[0];
    for (std::size_t k = 0; k < deltas.size(); ++k) {
      descend(deltas[k], gd.data().subspan(k * per, per), params);
      project_delta(deltas[k], base.image(init.indices[k]), params.epsilon);
    }
  }
}

}  // namespace

std::vector<std::vector<double>> init_poison_deltas(const Dataset& base, std::span<const std::size_t> indices,
                                                    double epsilon, double variance, std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= base.size()) throw Error(ErrorKind::kInvalidArgument, "init_poison_deltas", "index out of range");
    std::mt19937_64 rng(sample_seed(seed, i));
    std::normal_distribution<double> dist(0.0, std::sqrt(variance));
    std::vector<double> d(base.image_numel());
    for (double& v : d) v = variance > 0.0 ? dist(rng) : 0.0;
    project_delta(d, base.image(i), epsilon);
    out.push_back(std::move(d));
  }
  return out;
}

Tensor poison_alignment(const Model& surrogate, const Tensor& poisoned_image, int label,
                        const Tensor& attacker_grad) {
  const std::vector<int> labels(poisoned_image.size(0), label);
  const Tensor g = param_grad_vector(surrogate, loss_ce(surrogate.forward(poisoned_image), labels), true);
  return cosine_alignment(g, attacker_grad);
}

CraftedPoison craft_poison(const Model& surrogate, const PoisonAssembly& init, const Tensor& attacker_grad,
                           const PoisonCraftParams& params) {
  params.validate();
  init.validate();
  if (attacker_grad.numel() != surrogate.param_count()) {
    throw Error(ErrorKind::kShapeMismatch, "craft_poison", "attacker gradient length differs from P");
  }
  if (std::abs(init.epsilon - params.epsilon) > 1e-15) {
    throw Error(ErrorKind::kInvalidArgument, "craft_poison", "assembly and params disagree on epsilon");
  }
  const std::size_t n = init.indices.size();
  std::vector<std::vector<double>> deltas = init.deltas;
  std::vector<std::vector<double>> traces(n);
  for (std::size_t k = 0; k < n; ++k) project_delta(deltas[k], init.base.image(init.indices[k]), params.epsilon);

  if (n > 0 && params.batched) {
    craft_batched(surrogate, init, attacker_grad, params, deltas, traces);
  } else if (n > 0) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
      for (std::size_t k = next++; k < n; k = next++) {
        try {
          craft_one(surrogate, init, attacker_grad, params, k, deltas[k], traces[k]);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    };
    const std::size_t jobs = std::min(params.jobs, n);
    if (jobs <= 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
  }

  CraftedPoison out{init, std::move(traces)};
  out.assembly.deltas = std::move(deltas);
  try {
    out.assembly.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kInternal, "craft_poison", std::string("crafted assembly invalid: ") + e.what());
  }
  return out;
}

}  // namespace sk
