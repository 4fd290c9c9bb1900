#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "sklab/error.hpp"
#include "sklab/poison.hpp"

using namespace sk;
using sk::testing::central_difference;
using sk::testing::random_vector;
using sk::testing::rel_err;

namespace {

const Shape kImage{1, 8, 8};

Dataset small_data(std::uint64_t seed) {
  SynthOptions o;
  o.per_class = 12;
  o.shape = kImage;
  o.seed = seed;
  o.noise_sigma = 0.2;
  return synth_dataset(o);
}

Model small_cnn(std::uint64_t seed) { return Model(cnn_s(4), kImage, 4, seed); }

TriggerSpec small_trigger(std::uint64_t seed) {
  TriggerSpec t = additive_trigger(kImage);
  std::mt19937_64 rng(seed);
  t.delta = random_vector(numel(kImage), rng, -t.epsilon, t.epsilon);
  return t;
}

PoisonAssembly plan(const Dataset& d, int target, std::size_t n, double epsilon, std::uint64_t seed) {
  PoisonAssembly a;
  a.base = d;
  a.target_label = target;
  a.source_label = (target + 1) % 4;
  a.epsilon = epsilon;
  const auto cand = d.indices_of_class(target);
  a.indices.assign(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n));
  a.deltas = init_poison_deltas(d, a.indices, epsilon, 0.01, seed);
  return a;
}

PoisonCraftParams quick(std::size_t steps) {
  PoisonCraftParams p;
  p.steps = steps;
  return p;
}

}  // namespace

TEST_CASE("poison defaults") {
  const PoisonCraftParams p;
  CHECK(p.epsilon == 16.0 / 255.0);
  CHECK(p.step_size == 1.0 / 255.0);
  CHECK(p.steps == 250);
  CHECK(p.attacker_samples == 256);
  CHECK(p.signed_updates);
  CHECK(p.resolve_budget(50000) == 500);
  CHECK(p.resolve_budget(2000) == 20);
  PoisonCraftParams fixed;
  fixed.budget = 7;
  CHECK(fixed.resolve_budget(2000) == 7);
}

TEST_CASE("saturated surrogate gives a vanishing attacker gradient") {
  Model m({"linear", {{LayerKind::kFlatten}, {LayerKind::kLinear, 4}}}, kImage, 4, 0);
  m.set_params({Tensor::zeros({4, 64}), Tensor({4}, {0, 0, 20, 0})});
  const Dataset d = small_data(0);
  const Tensor g = attacker_gradient(m, d.subset(d.indices_of_class(1)), small_trigger(0), 2, 0);
  CHECK(g.numel() == m.param_count());
  CHECK(l2norm(g).item() < 1e-6);
}

TEST_CASE("single-sample attacker gradient equals the per-sample gradient") {
  const Model m = small_cnn(1);
  const Dataset d = small_data(1);
  const Dataset one = d.subset(std::vector<std::size_t>{13});
  const TriggerSpec t = small_trigger(1);
  const Tensor g = attacker_gradient(m, one, t, 3, 0);
  const Tensor x = apply_trigger_batch(one.all_images(), Tensor(t.shape, t.delta), t, {});
  const Tensor ref = param_grad_vector(m, loss_ce(m.forward(x), std::vector<int>{3}), false);
  CHECK(g.to_vector() == ref.to_vector());
  CHECK_THROWS_AS(attacker_gradient(m, one.subset(std::vector<std::size_t>{}), t, 3, 0), Error);
}

TEST_CASE("attacker gradient matches finite differences in theta") {
  const Model m = small_cnn(2);
  const Dataset d = small_data(2);
  const Dataset src = d.subset(d.indices_of_class(0));
  const TriggerSpec t = small_trigger(2);
  const Tensor g = attacker_gradient(m, src, t, 1, 0);
  const Tensor x = apply_trigger_batch(src.all_images(), Tensor(t.shape, t.delta), t, {});
  const std::vector<int> targets(src.size(), 1);
  const auto theta = m.flat_params();
  const testing::ScalarFn f = [&](const std::vector<std::vector<double>>& p) {
    Model probe = m;
    probe.load_flat_params(p[0]);
    NoGradGuard guard;
    return loss_ce(probe.forward(x), targets).item();
  };
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> coord(0, theta.size() - 1);
  for (int k = 0; k < 50; ++k) {
    const std::size_t i = coord(rng);
    const double fd = central_difference(f, {theta}, 0, i);
    CHECK(rel_err(g.at(i), fd) < 1e-4);
  }
}

TEST_CASE("selection takes everything when the budget equals the pool") {
  const Model m = small_cnn(3);
  const Dataset d = small_data(3);
  auto cand = d.indices_of_class(2);
  std::reverse(cand.begin(), cand.end());
  const PoisonSelection s = select_poison_targets(m, d, cand, 2, cand.size());
  CHECK(std::is_sorted(s.indices.begin(), s.indices.end()));
  CHECK(s.indices == d.indices_of_class(2));
  CHECK_THROWS_AS(select_poison_targets(m, d, cand, 2, cand.size() + 1), Error);
  CHECK_THROWS_AS(select_poison_targets(m, d, d.indices_of_class(1), 2, 1), Error);
}

TEST_CASE("selection breaks ties by lower index") {
  const Model m = small_cnn(4);
  Dataset d = small_data(4);
  const auto cand = d.indices_of_class(1);
  // make the last two candidates identical copies of the first
  for (std::size_t k : {cand[cand.size() - 2], cand[cand.size() - 1]}) {
    std::copy(d.image(cand[0]).begin(), d.image(cand[0]).end(), d.mutable_image(k).begin());
  }
  const auto scores = gradient_norms(m, d, cand, 1);
  CHECK(scores[0] == scores[cand.size() - 1]);
  // rank of the duplicated score among all candidates
  std::size_t above = 0;
  for (double s : scores) above += s > scores[0];
  const PoisonSelection s = select_poison_targets(m, d, cand, 1, above + 1);
  CHECK(std::count(s.indices.begin(), s.indices.end(), cand[0]) == 1);
  CHECK(std::count(s.indices.begin(), s.indices.end(), cand[cand.size() - 2]) == 0);
  CHECK(std::count(s.indices.begin(), s.indices.end(), cand[cand.size() - 1]) == 0);
}

TEST_CASE("selected scores dominate the rest") {
  const Model m = small_cnn(5);
  const Dataset d = small_data(5);
  const auto cand = d.indices_of_class(3);
  const auto all = gradient_norms(m, d, cand, 3);
  const PoisonSelection s = select_poison_targets(m, d, cand, 3, 5);
  double lowest_selected = *std::min_element(s.scores.begin(), s.scores.end());
  for (std::size_t k = 0; k < cand.size(); ++k) {
    if (std::find(s.indices.begin(), s.indices.end(), cand[k]) == s.indices.end()) {
      CHECK(all[k] <= lowest_selected);
    }
  }
}

TEST_CASE("alignment gradient matches finite differences through double backward") {
  const Model m = small_cnn(6);
  const Dataset d = small_data(6);
  const Dataset src = d.subset(d.indices_of_class(0));
  const Tensor c = attacker_gradient(m, src, small_trigger(6), 2, 0);
  const std::size_t j = d.indices_of_class(2)[3];
  const std::size_t one[] = {j};
  const Tensor x = d.batch(one);
  std::mt19937_64 rng(7);
  const auto delta0 = random_vector(x.numel(), rng, -0.05, 0.05);
  const Tensor delta(x.shape(), delta0, true);
  const Tensor a = poison_alignment(m, add(x, delta), 2, c);
  const Tensor g = grad(a, {delta})[0];
  const testing::ScalarFn f = [&](const std::vector<std::vector<double>>& p) {
    return poison_alignment(m, add(x, Tensor(x.shape(), p[0])), 2, c).item();
  };
  std::uniform_int_distribution<std::size_t> pixel(0, x.numel() - 1);
  for (int k = 0; k < 25; ++k) {
    const std::size_t i = pixel(rng);
    const double fd = central_difference(f, {delta0}, 0, i);
    CHECK(rel_err(g.at(i), fd, 1e-7) < 1e-3);
  }
}

TEST_CASE("zero step size keeps the initialisation") {
  const Model m = small_cnn(7);
  const Dataset d = small_data(7);
  const Tensor c = attacker_gradient(m, d.subset(d.indices_of_class(1)), small_trigger(7), 0, 0);
  const PoisonAssembly init = plan(d, 0, 3, 16.0 / 255.0, 1);
  PoisonCraftParams p = quick(4);
  p.step_size = 0.0;
  const CraftedPoison out = craft_poison(m, init, c, p);
  CHECK(out.assembly.deltas == init.deltas);
  for (const auto& trace : out.alignment_trace) {
    CHECK(trace.size() == 5);
    for (double a : trace) CHECK(a == trace.front());
  }
}

TEST_CASE("crafting keeps every invariant and lowers alignment") {
  const Model m = small_cnn(8);
  const auto theta = m.flat_params();
  const Dataset d = small_data(8);
  const Tensor c = attacker_gradient(m, d.subset(d.indices_of_class(1)), small_trigger(8), 0, 0);
  const PoisonAssembly init = plan(d, 0, 4, 16.0 / 255.0, 2);
  for (std::size_t steps : {1, 3, 15}) {
    const CraftedPoison out = craft_poison(m, init, c, quick(steps));
    CHECK(out.assembly.base.labels == d.labels);
    CHECK(out.assembly.indices == init.indices);
    for (std::size_t k = 0; k < init.indices.size(); ++k) {
      const auto img = d.image(init.indices[k]);
      for (std::size_t p = 0; p < img.size(); ++p) {
        const double v = out.assembly.deltas[k][p];
        CHECK(std::abs(v) <= 16.0 / 255.0 + 1e-15);
        CHECK((img[p] + v >= -1e-15 && img[p] + v <= 1.0 + 1e-15));
      }
    }
    for (const auto& trace : out.alignment_trace) {
      CHECK(trace.size() == steps + 1);
      for (double a : trace) CHECK((a >= 0.0 && a <= 2.0 + 1e-9));
    }
    if (steps == 15) {
      double first = 0.0, last = 0.0;
      for (const auto& trace : out.alignment_trace) {
        first += trace.front();
        last += trace.back();
      }
      CHECK(last < first);
    }
  }
  CHECK(m.flat_params() == theta);
}

TEST_CASE("parallel crafting agrees bitwise with serial") {
  const Model m = small_cnn(9);
  const Dataset d = small_data(9);
  const Tensor c = attacker_gradient(m, d.subset(d.indices_of_class(0)), small_trigger(9), 3, 0);
  const PoisonAssembly init = plan(d, 3, 5, 16.0 / 255.0, 3);
  PoisonCraftParams serial = quick(4);
  PoisonCraftParams parallel = serial;
  parallel.jobs = 3;
  const CraftedPoison a = craft_poison(m, init, c, serial);
  const CraftedPoison b = craft_poison(m, init, c, parallel);
  CHECK(a.assembly.deltas == b.assembly.deltas);
  CHECK(a.alignment_trace == b.alignment_trace);
}

TEST_CASE("per-sample initialisation depends only on seed and index") {
  const Dataset d = small_data(10);
  const std::vector<std::size_t> ab{1, 2}, b{2};
  const auto both = init_poison_deltas(d, ab, 0.1, 0.01, 5);
  const auto single = init_poison_deltas(d, b, 0.1, 0.01, 5);
  CHECK(both[1] == single[0]);
  CHECK(init_poison_deltas(d, b, 0.1, 0.01, 6)[0] != single[0]);
  for (double v : both[0]) CHECK(std::abs(v) <= 0.1);
}

TEST_CASE("batched and raw-gradient modes") {
  const Model m = small_cnn(11);
  const Dataset d = small_data(11);
  const Tensor c = attacker_gradient(m, d.subset(d.indices_of_class(2)), small_trigger(11), 1, 0);
  const PoisonAssembly init = plan(d, 1, 4, 16.0 / 255.0, 4);
  PoisonCraftParams batched = quick(10);
  batched.batched = true;
  const CraftedPoison out = craft_poison(m, init, c, batched);
  CHECK(out.alignment_trace[0].back() < out.alignment_trace[0].front());
  CHECK(out.alignment_trace[0] == out.alignment_trace[3]);

  PoisonCraftParams raw = quick(3);
  raw.signed_updates = false;
  raw.step_size = 1.0;
  const CraftedPoison r = craft_poison(m, init, c, raw);
  for (const auto& delta : r.assembly.deltas) {
    for (double v : delta) CHECK(std::abs(v) <= 16.0 / 255.0 + 1e-15);
  }
}

TEST_CASE("crafting rejects inconsistent inputs") {
  const Model m = small_cnn(12);
  const Dataset d = small_data(12);
  const Tensor c = attacker_gradient(m, d.subset(d.indices_of_class(2)), small_trigger(12), 1, 0);
  PoisonAssembly init = plan(d, 1, 2, 16.0 / 255.0, 5);
  CHECK_THROWS_AS(craft_poison(m, init, Tensor::zeros({3}), quick(1)), Error);
  PoisonCraftParams other = quick(1);
  other.epsilon = 8.0 / 255.0;
  CHECK_THROWS_AS(craft_poison(m, init, c, other), Error);
  init.indices[0] = d.indices_of_class(0)[0];
  CHECK_THROWS_AS(craft_poison(m, init, c, quick(1)), Error);
}
