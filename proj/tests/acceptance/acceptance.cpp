// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--quick] [--only 1,2,...] [out_dir]
//
// --quick shrinks every experiment so the wiring can be exercised in a few
// minutes; its verdicts are not meaningful.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "fd_oracle.hpp"
#include "json.hpp"
#include "sklab/experiment.hpp"

using namespace sk;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kFirstOrderTol = 1e-4;
constexpr double kSecondOrderTol = 1e-3;
constexpr double kAutodiffSeconds = 120.0;
constexpr std::size_t kAlignmentPairs = 10000;
constexpr double kFoolingMin = 0.70;
constexpr double kSurrogateTrainAccMin = 0.90;
constexpr double kTriggerSeconds = 600.0;
constexpr double kLiftMin = 0.20;
constexpr double kLiftSeconds = 3600.0;
constexpr double kCleanGapMax = 0.02;
constexpr double kBlackBoxLiftMin = 0.10;
constexpr std::size_t kInvariantBatches = 1000;

bool g_quick = false;

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// 1: finite-difference oracles.

using testing::central_difference;
using testing::random_away_from_zero;
using testing::random_vector;

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Primitive {
  std::string name;
  std::vector<Shape> inputs;
  TensorFn fn;
  // Inputs drawn away from zero (kinks, division) when set.
  bool away_from_zero = false;
};

// Normwise relative error of autodiff against central differences of
// sum(fn(x) * w) for a fixed random projection w.
double check_primitive(const Primitive& p, std::mt19937_64& rng) {
  std::vector<std::vector<double>> point;
  for (const auto& s : p.inputs) {
    point.push_back(p.away_from_zero ? random_away_from_zero(numel(s), rng, 0.05) : random_vector(numel(s), rng));
  }
  const auto make = [&](const std::vector<std::vector<double>>& pt, bool rg) {
    std::vector<Tensor> ts;
    for (std::size_t i = 0; i < pt.size(); ++i) ts.emplace_back(p.inputs[i], pt[i], rg);
    return ts;
  };
  const Tensor probe = p.fn(make(point, false));
  const Tensor w(probe.shape(), random_vector(probe.numel(), rng));
  const auto scalar = [&](const std::vector<Tensor>& ts) { return sum(mul(p.fn(ts), w)); };
  const testing::ScalarFn f = [&](const std::vector<std::vector<double>>& pt) {
    NoGradGuard guard;
    return scalar(make(pt, false)).item();
  };
  const auto leaves = make(point, true);
  const auto grads = grad(scalar(leaves), leaves);
  double diff = 0.0, norm_a = 0.0, norm_fd = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t k = 0; k < point[i].size(); ++k) {
      const double a = grads[i].at(k);
      const double fd = central_difference(f, point, i, k);
      diff += (a - fd) * (a - fd);
      norm_a += a * a;
      norm_fd += fd * fd;
    }
  }
  return std::sqrt(diff) / std::max({std::sqrt(norm_a), std::sqrt(norm_fd), 1e-8});
}

std::vector<Primitive> primitives(std::mt19937_64& rng) {
  const std::vector<int> labels{2, 0, 1};
  auto map = std::make_shared<SparseMap>();
  map->in_shape = {6};
  map->out_shape = {4};
  for (std::uint32_t k = 0; k < 9; ++k) {
    map->out_idx.push_back(static_cast<std::uint32_t>(rng() % 4));
    map->in_idx.push_back(static_cast<std::uint32_t>(rng() % 6));
    map->weight.push_back(random_vector(1, rng)[0]);
  }
  const std::shared_ptr<const SparseMap> cmap = map;
  const Conv2dOptions pad1{1, 1}, stride2{2, 0};
  return {
      {"add", {{3, 4}, {4}}, [](const auto& x) { return add(x[0], x[1]); }},
      {"sub", {{3, 1}, {1, 4}}, [](const auto& x) { return sub(x[0], x[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](const auto& x) { return mul(x[0], x[1]); }},
      {"div", {{2, 3}, {3}}, [](const auto& x) { return div(x[0], x[1]); }, true},
      {"neg", {{5}}, [](const auto& x) { return neg(x[0]); }},
      {"scale", {{5}}, [](const auto& x) { return scale(x[0], -2.5); }},
      {"add_scalar", {{5}}, [](const auto& x) { return add_scalar(x[0], 0.3); }},
      {"exp", {{2, 4}}, [](const auto& x) { return exp(x[0]); }},
      {"relu", {{2, 4}}, [](const auto& x) { return relu(x[0]); }, true},
      {"clip", {{3, 3}}, [](const auto& x) { return clip(x[0], -0.5, 0.5); }, true},
      {"reshape", {{2, 6}}, [](const auto& x) { return reshape(x[0], {3, 4}); }},
      {"flatten", {{2, 2, 3}}, [](const auto& x) { return flatten(x[0]); }},
      {"permute", {{2, 3, 4}}, [](const auto& x) { return permute(x[0], {2, 0, 1}); }},
      {"transpose", {{2, 5}}, [](const auto& x) { return transpose(x[0]); }},
      {"expand", {{3, 1}}, [](const auto& x) { return expand(x[0], {2, 3, 4}); }},
      {"sum_to", {{2, 3, 4}}, [](const auto& x) { return sum_to(x[0], {3, 1}); }},
      {"concat_flat", {{3}, {2, 2}}, [](const auto& x) { return concat_flat({x[0], x[1]}); }},
      {"slice_flat", {{7}}, [](const auto& x) { return slice_flat(x[0], 2, 4); }},
      {"embed_flat", {{3}}, [](const auto& x) { return embed_flat(x[0], 2, 7); }},
      {"sparse_apply", {{6}}, [cmap](const auto& x) { return sparse_apply(x[0], cmap); }},
      {"sparse_apply_adjoint", {{4}}, [cmap](const auto& x) { return sparse_apply(x[0], cmap, true); }},
      {"sum", {{3, 2}}, [](const auto& x) { return sum(x[0]); }},
      {"sum_axis", {{3, 4}}, [](const auto& x) { return sum(x[0], 1); }},
      {"mean", {{3, 4}}, [](const auto& x) { return mean(x[0]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](const auto& x) { return matmul(x[0], x[1]); }},
      {"dot", {{6}, {6}}, [](const auto& x) { return dot(x[0], x[1]); }},
      {"l2norm", {{7}}, [](const auto& x) { return l2norm(x[0]); }, true},
      {"logsumexp_rows", {{3, 5}}, [](const auto& x) { return logsumexp_rows(x[0]); }},
      {"unfold", {{2, 2, 4, 4}}, [pad1](const auto& x) { return unfold(x[0], 3, 3, pad1); }},
      {"fold", {{2 * 3 * 3, 2 * 4 * 4}}, [pad1](const auto& x) { return fold(x[0], {2, 2, 4, 4}, 3, 3, pad1); }},
      {"conv2d", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}},
       [pad1](const auto& x) { return conv2d(x[0], x[1], x[2], pad1); }},
      {"conv2d_stride", {{1, 2, 6, 6}, {2, 2, 2, 2}, {2}},
       [stride2](const auto& x) { return conv2d(x[0], x[1], x[2], stride2); }},
      {"max_pool2d", {{2, 2, 4, 4}}, [](const auto& x) { return max_pool2d(x[0], 2, 2); }},
      {"avg_pool2d", {{2, 2, 4, 4}}, [](const auto& x) { return avg_pool2d(x[0], 2, 2); }},
      {"cross_entropy", {{3, 4}}, [labels](const auto& x) { return cross_entropy(x[0], labels); }},
      {"soft_cross_entropy", {{3, 4}},
       [](const auto& x) {
         const Tensor wts({3, 4}, {0.5, 0.5, 0, 0, 0, 0.2, 0.8, 0, 0.25, 0.25, 0.25, 0.25});
         return soft_cross_entropy(x[0], wts);
       }},
      {"cosine_alignment", {{6}, {6}}, [](const auto& x) { return cosine_alignment(x[0], x[1]); }},
  };
}

// d A_j / d delta_j where A_j itself is built from a parameter gradient.
double check_double_backward(std::mt19937_64& rng) {
  const Shape img{1, 8, 8};
  const Model surrogate(cnn_s(4), img, 4, rng());
  const std::vector<double> base = random_vector(64, rng, 0.2, 0.8);
  const Tensor attacker(Shape{surrogate.param_count()}, random_vector(surrogate.param_count(), rng));
  const int label = static_cast<int>(rng() % 4);
  const auto alignment = [&](const std::vector<double>& x, bool rg) {
    return poison_alignment(surrogate, Tensor({1, 1, 8, 8}, x, rg), label, attacker);
  };
  const Tensor leaf({1, 1, 8, 8}, base, true);
  const Tensor a = poison_alignment(surrogate, leaf, label, attacker);
  const Tensor g = grad(a, {leaf})[0];
  const testing::ScalarFn f = [&](const std::vector<std::vector<double>>& pt) {
    return alignment(pt[0], false).item();
  };
  double diff = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t k = 0; k < 64; ++k) {
    const double fd = central_difference(f, {base}, 0, k);
    diff += (g.at(k) - fd) * (g.at(k) - fd);
    na += g.at(k) * g.at(k);
    nf += fd * fd;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nf), 1e-8});
}

Verdict criterion_autodiff() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  const auto prims = primitives(rng);
  double worst = 0.0;
  std::string worst_name;
  const int trials = 5;
  for (int t = 0; t < trials; ++t) {
    for (const auto& p : prims) {
      const double e = check_primitive(p, rng);
      if (e > worst) {
        worst = e;
        worst_name = p.name;
      }
    }
  }
  double worst2 = 0.0;
  for (int t = 0; t < 3; ++t) worst2 = std::max(worst2, check_double_backward(rng));
  const double secs = seconds_since(start);
  std::ostringstream os;
  os << prims.size() << " primitives x " << trials << " trials, worst first-order rel err " << worst << " ("
     << worst_name << "), double-backward rel err " << worst2 << ", " << fmt("%.1fs", secs);
  return {worst < kFirstOrderTol && worst2 < kSecondOrderTol && secs < kAutodiffSeconds, os.str()};
}

// ---------------------------------------------------------------------------
// 2: alignment loss properties.

Verdict criterion_alignment() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(5, 50);
  std::uniform_real_distribution<double> logscale(-1.0, 3.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  double lo = 2.0, hi = 0.0, self_max = 0.0, anti_min = 2.0;
  for (std::size_t t = 0; t < kAlignmentPairs; ++t) {
    const std::size_t n = len(rng);
    std::vector<double> g(n), c(n);
    for (auto& v : g) v = normal(rng);
    for (auto& v : c) v = normal(rng);
    const double sg = std::pow(10.0, logscale(rng)), sc = std::pow(10.0, logscale(rng));
    for (auto& v : g) v *= sg;
    for (auto& v : c) v *= sc;
    const Tensor tg({n}, g), tc({n}, c);
    const double a = cosine_alignment(tg, tc).item();
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    self_max = std::max(self_max, cosine_alignment(tg, tg).item());
    std::vector<double> ng(g);
    for (auto& v : ng) v = -v;
    anti_min = std::min(anti_min, cosine_alignment(tg, Tensor({n}, ng)).item());
  }
  std::ostringstream os;
  os << kAlignmentPairs << " pairs: A in [" << lo << ", " << hi << "], max A(g,g) " << self_max
     << ", min A(g,-g) " << anti_min;
  return {lo >= 0.0 && hi <= 2.0 && self_max < 1e-9 && anti_min > 2.0 - 1e-9, os.str()};
}

// ---------------------------------------------------------------------------
// Experiment-backed criteria.

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.name = "acceptance";
  c.pairs = {{0, 1}, {1, 2}, {2, 3}};
  c.seeds = {0, 1, 2};
  if (g_quick) {
    c.dataset.synth.per_class = 60;
    c.dataset.test_per_class = 20;
    c.surrogate.train.epochs = 4;
    c.trigger.craft.steps = 10;
    c.poison.steps = 10;
    c.poison.budget = 6;
    c.seeds = {0, 1};
  }
  ModelConfig cnn, mlp;
  mlp.arch = "mlp-s";
  if (g_quick) cnn.train.epochs = mlp.train.epochs = 3;
  c.victims = {cnn, mlp};
  return c;
}

struct Runs {
  json report;
  double seconds = 0.0;
  fs::path dir;
};

Runs run(const ExperimentConfig& c, const fs::path& dir) {
  const auto start = std::chrono::steady_clock::now();
  std::fprintf(stderr, "[acceptance] running %s (%s)\n", c.name.c_str(), dir.string().c_str());
  const RunReport rep = run_experiment(c, dir);
  const double secs = seconds_since(start);
  std::fprintf(stderr, "[acceptance] %s: %zu runs, %zu failed, %.0fs\n", c.name.c_str(), rep.runs, rep.failed, secs);
  return {json::parse(rep.json), secs, dir};
}

std::vector<json> select(const json& report, const std::string& variant, const std::string& victim,
                         bool defended = false) {
  std::vector<json> out;
  for (const auto& r : report.at("runs")) {
    if (r.at("variant") != variant || r.at("victim") != victim) continue;
    if (r.at("defense").is_null() == defended) continue;
    out.push_back(r);
  }
  return out;
}

double mean_of(const std::vector<json>& runs, const std::function<double(const json&)>& f) {
  double s = 0.0;
  for (const auto& r : runs) s += f(r);
  return runs.empty() ? std::nan("") : s / static_cast<double>(runs.size());
}

bool all_ok(const std::vector<json>& runs) {
  return !runs.empty() &&
         std::all_of(runs.begin(), runs.end(), [](const json& r) { return r.at("status") == "ok"; });
}

double asr(const json& r) { return r.at("eval").at("asr").get<double>(); }
double clean_acc(const json& r) { return r.at("eval").at("clean_accuracy").get<double>(); }

Verdict criterion_trigger(const Runs& main) {
  const double train_acc = main.report.at("surrogate").at("train_accuracy");
  // One craft per (pair, seed); the cnn-s row carries it.
  const auto crafted = select(main.report, "attack", "cnn-s");
  double fool_first = 0.0, secs_first = 0.0, fool_all = 0.0;
  std::size_t n_first = 0;
  for (const auto& r : crafted) {
    const double f = r.at("trigger").at("surrogate_fooling_rate");
    fool_all += f;
    if (r.at("pair") == json::array({0, 1})) {
      fool_first += f;
      secs_first += r.at("trigger").at("timing").at("seconds").get<double>();
      ++n_first;
    }
  }
  fool_first /= std::max<std::size_t>(n_first, 1);
  fool_all /= std::max<std::size_t>(crafted.size(), 1);
  std::ostringstream os;
  os << "surrogate train acc " << fmt("%.3f", train_acc) << ", fooling rate pair 0->1 over " << n_first
     << " seeds " << fmt("%.3f", fool_first) << " (all pairs " << fmt("%.3f", fool_all) << "), "
     << fmt("%.0fs", secs_first);
  return {all_ok(crafted) && n_first > 0 && train_acc >= kSurrogateTrainAccMin && fool_first >= kFoolingMin &&
              secs_first < kTriggerSeconds,
          os.str()};
}

Verdict lift(const Runs& main, const std::string& victim, double min_lift, bool timed) {
  const auto base = select(main.report, "no_poison", victim);
  const auto pois = select(main.report, "attack", victim);
  const double a0 = mean_of(base, asr), a1 = mean_of(pois, asr);
  std::ostringstream os;
  os << victim << " ASR trigger-only " << fmt("%.3f", a0) << " -> poisoned " << fmt("%.3f", a1) << " (lift "
     << fmt("%+.1f", 100.0 * (a1 - a0)) << " points over " << pois.size() << " runs)";
  bool pass = all_ok(base) && all_ok(pois) && a1 - a0 >= min_lift;
  if (timed) {
    os << ", " << fmt("%.0fs", main.seconds);
    pass = pass && main.seconds < kLiftSeconds;
  }
  return {pass, os.str()};
}

Verdict criterion_clean_gap(const Runs& main) {
  const auto base = select(main.report, "no_poison", "cnn-s");
  const auto pois = select(main.report, "attack", "cnn-s");
  const double c0 = mean_of(base, clean_acc), c1 = mean_of(pois, clean_acc);
  std::ostringstream os;
  os << "cnn-s clean accuracy " << fmt("%.4f", c0) << " clean vs " << fmt("%.4f", c1) << " poisoned (gap "
     << fmt("%.2f", 100.0 * std::abs(c1 - c0)) << " points)";
  return {all_ok(base) && all_ok(pois) && std::abs(c1 - c0) <= kCleanGapMax, os.str()};
}

Verdict criterion_patch(const Runs& patch) {
  const auto opt = select(patch.report, "attack", "cnn-s");
  const auto pre = select(patch.report, "predefined_patch", "cnn-s");
  const double a = mean_of(opt, asr), b = mean_of(pre, asr);
  std::ostringstream os;
  os << "ASR optimized patch " << fmt("%.3f", a) << " vs predefined " << fmt("%.3f", b) << " over " << opt.size()
     << " runs";
  return {all_ok(opt) && all_ok(pre) && a >= b, os.str()};
}

// ---------------------------------------------------------------------------
// 8: independent verifier over exported files only.

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

// Empty string when `poisoned` is a clean-label, budget-respecting edit of `clean`.
std::string verify_poisoned_dir(const fs::path& clean, const fs::path& poisoned) {
  const json mc = read_json(clean / "meta.json"), mp = read_json(poisoned / "meta.json");
  if (mc.at("shape") != mp.at("shape") || mc.at("count") != mp.at("count")) return "meta differs";
  const auto ic = read_bytes(clean / "images.bin"), ip = read_bytes(poisoned / "images.bin");
  const auto lc = read_bytes(clean / "labels.bin"), lp = read_bytes(poisoned / "labels.bin");
  if (lc != lp) return "labels changed";
  if (ic.size() != ip.size()) return "image sizes differ";
  const json manifest = read_json(poisoned / "poison_manifest.json");
  const std::set<std::size_t> indices = manifest.at("indices").get<std::set<std::size_t>>();
  const double eps = manifest.at("epsilon_p").get<double>();
  const int target = manifest.at("target_label").get<int>();
  const std::size_t count = mp.at("count").get<std::size_t>();
  const std::size_t per = ic.size() / count;
  std::set<std::size_t> modified;
  for (std::size_t i = 0; i < count; ++i) {
    bool changed = false;
    for (std::size_t p = 0; p < per; ++p) {
      const int d = std::abs(int(ip[i * per + p]) - int(ic[i * per + p]));
      if (d == 0) continue;
      changed = true;
      // |Δ| <= ε_p on the byte grid
      if (static_cast<double>(d) / 255.0 > eps + 1e-12) return "pixel change exceeds epsilon at image " + std::to_string(i);
    }
    if (changed) modified.insert(i);
  }
  if (modified != indices) {
    return "modified images (" + std::to_string(modified.size()) + ") differ from the manifest (" +
           std::to_string(indices.size()) + ")";
  }
  for (std::size_t i : indices) {
    if (lp.at(i) != target) return "poisoned image not in the target class";
  }
  return "";
}

Verdict criterion_invariants(const std::vector<const Runs*>& runs, const fs::path& clean_dir) {
  std::size_t checked = 0;
  std::vector<std::string> problems;
  for (const Runs* r : runs) {
    for (const auto& run : r->report.at("runs")) {
      if (!run.contains("artifacts") || !run.at("artifacts").contains("poison_manifest")) continue;
      const fs::path dir = (r->dir / run.at("artifacts").at("poison_manifest").at("path").get<std::string>())
                               .parent_path();
      static std::set<fs::path> seen;
      if (!seen.insert(dir).second) continue;
      const std::string err = verify_poisoned_dir(clean_dir, dir);
      const std::size_t n = read_json(dir / "poison_manifest.json").at("indices").size();
      if (!err.empty()) problems.push_back(dir.filename().string() + ": " + err);
      if (n != run.at("budget").get<std::size_t>()) problems.push_back(dir.string() + ": budget mismatch");
      ++checked;
    }
  }
  std::ostringstream os;
  os << checked << " exported poisoned datasets verified byte-exactly";
  if (!problems.empty()) os << "; " << problems.size() << " violations, first: " << problems.front();
  return {checked > 0 && problems.empty(), os.str()};
}

// ---------------------------------------------------------------------------
// 9: defenses.

Verdict criterion_defenses(const ExperimentConfig& base, const fs::path& out, const fs::path& surrogate) {
  std::vector<std::string> notes;
  bool pass = true;
  for (const auto kind : {DefenseKind::kActivationClustering, DefenseKind::kGradientShaping, DefenseKind::kMixup}) {
    ExperimentConfig c = base;
    c.name = "acceptance-defense-" + to_string(kind);
    c.pairs = {{0, 1}};
    c.seeds = {0};
    c.victims = {base.victims.front()};
    c.baselines.no_poison = false;
    c.surrogate.checkpoint = surrogate.string();
    DefenseConfig d;
    d.kind = kind;
    c.defense = d;
    const Runs r = run(c, out / to_string(kind));
    const auto defended = select(r.report, "attack", "cnn-s", true);
    if (!all_ok(defended)) {
      pass = false;
      notes.push_back(to_string(kind) + " failed");
      continue;
    }
    const json& e = defended.front();
    notes.push_back(to_string(kind) + fmt(" ASR %.3f", asr(e)) + fmt(" acc %.3f", clean_acc(e)));
    if (kind == DefenseKind::kActivationClustering) {
      const auto undefended = select(r.report, "attack", "cnn-s");
      const fs::path dir =
          (r.dir / undefended.front().at("artifacts").at("poison_manifest").at("path").get<std::string>())
              .parent_path();
      const auto manifest = read_json(dir / "poison_manifest.json").at("indices").get<std::set<std::size_t>>();
      const auto removed = e.at("removal").at("removed_indices").get<std::vector<std::size_t>>();
      std::size_t hit = 0;
      for (std::size_t i : removed) hit += manifest.count(i);
      const bool reconciled = hit == e.at("removal").at("poison_removed").get<std::size_t>() &&
                              removed.size() - hit == e.at("removal").at("clean_removed").get<std::size_t>() &&
                              manifest.size() == e.at("removal").at("poison_total").get<std::size_t>();
      notes.back() += " removed " + std::to_string(removed.size()) + " (" + std::to_string(hit) + "/" +
                      std::to_string(manifest.size()) + " poison)" + (reconciled ? "" : " NOT RECONCILED");
      pass = pass && reconciled;
    }
  }

  // Randomized invariants.
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> dim(1, 40), rows(2, 12);
  std::uniform_real_distribution<double> clip(0.01, 10.0), logscale(-3.0, 3.0);
  std::size_t clip_bad = 0, mix_bad = 0;
  for (std::size_t t = 0; t < kInvariantBatches; ++t) {
    DefenseConfig d;
    d.kind = DefenseKind::kGradientShaping;
    d.clip_bound = clip(rng);
    d.noise_variance = 0.0;
    auto g = random_vector(dim(rng), rng);
    for (auto& v : g) v *= std::pow(10.0, logscale(rng));
    double norm = 0.0;
    for (double v : shaped_gradient_step(g, d, rng)) norm += v * v;
    if (std::sqrt(norm) > d.clip_bound * (1.0 + 1e-12)) ++clip_bad;

    const std::size_t n = rows(rng), l = 4;
    const Tensor images({n, 1, 3, 3}, random_vector(n * 9, rng, 0.0, 1.0));
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng() % l);
    const MixedBatch mb = mixup_batch(images, one_hot(labels, l), 1.0, rng);
    const double lam = mb.lambda;
    bool ok = lam >= 0.0 && lam <= 1.0;
    for (std::size_t i = 0; i < n && ok; ++i) {
      const std::size_t j = mb.partner[i];
      for (std::size_t p = 0; p < 9; ++p) {
        const double want = lam * images.at(i * 9 + p) + (1.0 - lam) * images.at(j * 9 + p);
        ok = ok && std::abs(mb.images.at(i * 9 + p) - want) < 1e-12;
      }
      double row = 0.0;
      for (std::size_t k = 0; k < l; ++k) {
        const double v = mb.targets.at(i * l + k);
        ok = ok && v >= -1e-15 && v <= 1.0 + 1e-15;
        row += v;
      }
      ok = ok && std::abs(row - 1.0) < 1e-12;
    }
    if (!ok) ++mix_bad;
  }
  notes.push_back(std::to_string(kInvariantBatches) + " batches: clip violations " + std::to_string(clip_bad) +
                  ", mixup violations " + std::to_string(mix_bad));
  pass = pass && clip_bad == 0 && mix_bad == 0;
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {pass, detail};
}

// ---------------------------------------------------------------------------
// 10: determinism.

Verdict criterion_determinism(const fs::path& out) {
  ExperimentConfig c;
  c.name = "acceptance-determinism";
  c.dataset.synth.per_class = 40;
  c.dataset.test_per_class = 20;
  c.surrogate.train.epochs = 3;
  c.victims.front().train.epochs = 2;
  c.pairs = {{0, 1}, {2, 3}};
  c.seeds = {0, 1};
  c.trigger.craft.steps = 20;
  c.poison.steps = 20;
  c.poison.budget = 4;
  c.baselines.predefined_patch = true;
  c.jobs = 2;
  const RunReport a = run_experiment(c, out / "a");
  const RunReport b = run_experiment(c, out / "b");
  const bool same = strip_timing(a.json) == strip_timing(b.json);
  return {same && a.failed == 0, std::to_string(a.runs) + " runs per invocation, reports " +
                                     (same ? "identical" : "DIFFER") + " after removing timing"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = fs::temp_directory_path() / "sk_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--quick") == 0) {
      g_quick = true;
    } else if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    } else {
      out = argv[i];
    }
  }
  const auto wanted = [&](int id) { return only.empty() || only.count(id) > 0; };
  fs::remove_all(out);
  fs::create_directories(out);

  std::map<int, Verdict> verdicts;
  const auto guarded = [&](int id, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    try {
      verdicts[id] = fn();
    } catch (const std::exception& e) {
      verdicts[id] = {false, std::string("error: ") + e.what()};
    }
  };

  guarded(1, criterion_autodiff);
  guarded(2, criterion_alignment);

  const ExperimentConfig desk = desk_config();
  std::optional<Runs> main_run, patch_run;
  const bool need_main = wanted(3) || wanted(4) || wanted(5) || wanted(7) || wanted(8) || wanted(9);
  if (need_main) {
    try {
      main_run = run(desk, out / "main");
    } catch (const std::exception& e) {
      for (int id : {3, 4, 5, 7}) verdicts[id] = {false, std::string("main run error: ") + e.what()};
    }
  }
  fs::path surrogate;
  if (main_run) surrogate = main_run->dir / main_run->report.at("surrogate").at("checkpoint").at("path").get<std::string>();
  if (main_run) {
    guarded(3, [&] { return criterion_trigger(*main_run); });
    guarded(4, [&] { return lift(*main_run, "cnn-s", kLiftMin, true); });
    guarded(5, [&] { return criterion_clean_gap(*main_run); });
    guarded(7, [&] { return lift(*main_run, "mlp-s", kBlackBoxLiftMin, false); });
  }
  guarded(6, [&] {
    ExperimentConfig c = desk;
    c.name = "acceptance-patch";
    c.trigger.mode = TriggerMode::kPatch;
    c.victims = {desk.victims.front()};
    c.baselines.no_poison = false;
    c.baselines.predefined_patch = true;
    if (!surrogate.empty()) c.surrogate.checkpoint = surrogate.string();
    patch_run = run(c, out / "patch");
    return criterion_patch(*patch_run);
  });
  guarded(8, [&] {
    const fs::path clean = out / "clean_train";
    save_dataset(materialize_datasets(desk.dataset).first, clean);
    std::vector<const Runs*> runs;
    if (main_run) runs.push_back(&*main_run);
    if (patch_run) runs.push_back(&*patch_run);
    return criterion_invariants(runs, clean);
  });
  guarded(9, [&] { return criterion_defenses(desk, out / "defense", surrogate); });
  guarded(10, [&] { return criterion_determinism(out / "determinism"); });

  int failed = 0;
  for (int id = 1; id <= 10; ++id) {
    if (!verdicts.count(id)) continue;
    const Verdict& v = verdicts[id];
    std::printf("criterion %2d: %s  %s\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    failed += v.pass ? 0 : 1;
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
