#include "sklab/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "sklab/error.hpp"

namespace sk {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kReportSchema = "sklab.report/1";
constexpr const char* kVersion = "0.1.0";

[[noreturn]] void config_error(const std::string& detail) {
  throw Error(ErrorKind::kInvalidArgument, "config", detail);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      config_error("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

// ---------------------------------------------------------------------------
// Config <-> JSON.

json train_to_json(const TrainParams& p) {
  return {{"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate},
          {"momentum", p.momentum},
          {"lr_decay_milestones", p.lr_decay_milestones},
          {"lr_decay_factor", p.lr_decay_factor},
          {"weight_decay", p.weight_decay},
          {"seed", p.seed},
          {"hflip", p.hflip}};
}

TrainParams train_from_json(const json& j, const std::string& where) {
  check_keys(j, {"epochs", "batch_size", "learning_rate", "momentum", "lr_decay_milestones", "lr_decay_factor",
                 "weight_decay", "seed", "hflip"},
             where);
  TrainParams p;
  read(j, "epochs", p.epochs);
  read(j, "batch_size", p.batch_size);
  read(j, "learning_rate", p.learning_rate);
  read(j, "momentum", p.momentum);
  read(j, "lr_decay_milestones", p.lr_decay_milestones);
  read(j, "lr_decay_factor", p.lr_decay_factor);
  read(j, "weight_decay", p.weight_decay);
  read(j, "seed", p.seed);
  read(j, "hflip", p.hflip);
  return p;
}

json model_to_json(const ModelConfig& m) {
  json j = {{"arch", m.arch}, {"train", train_to_json(m.train)}};
  if (!m.checkpoint.empty()) j["checkpoint"] = m.checkpoint;
  return j;
}

ModelConfig model_from_json(const json& j, const std::string& where) {
  check_keys(j, {"arch", "train", "checkpoint"}, where);
  ModelConfig m;
  read(j, "arch", m.arch);
  read(j, "checkpoint", m.checkpoint);
  if (j.contains("train")) m.train = train_from_json(j.at("train"), where + ".train");
  return m;
}

json defense_to_json(const DefenseConfig& d) {
  return {{"kind", to_string(d.kind)},
          {"clip_bound", d.clip_bound},
          {"noise_variance", d.noise_variance},
          {"mixup_alpha", d.mixup_alpha},
          {"kmeans_k", d.kmeans_k},
          {"kmeans_restarts", d.kmeans_restarts}};
}

DefenseConfig defense_from_json(const json& j) {
  check_keys(j, {"kind", "clip_bound", "noise_variance", "mixup_alpha", "kmeans_k", "kmeans_restarts"}, "defense");
  DefenseConfig d;
  if (j.contains("kind")) d.kind = defense_kind_from_string(j.at("kind").get<std::string>());
  read(j, "clip_bound", d.clip_bound);
  read(j, "noise_variance", d.noise_variance);
  read(j, "mixup_alpha", d.mixup_alpha);
  read(j, "kmeans_k", d.kmeans_k);
  read(j, "kmeans_restarts", d.kmeans_restarts);
  return d;
}

std::string init_name(TriggerInit init) {
  switch (init) {
    case TriggerInit::kNormal: return "normal";
    case TriggerInit::kUniform: return "uniform";
    case TriggerInit::kZeros: return "zeros";
  }
  return "normal";
}

TriggerInit init_from_name(const std::string& name) {
  if (name == "normal") return TriggerInit::kNormal;
  if (name == "uniform") return TriggerInit::kUniform;
  if (name == "zeros") return TriggerInit::kZeros;
  config_error("unknown trigger init '" + name + "'");
}

json dataset_to_json(const DatasetConfig& d) {
  if (d.kind == "path") return {{"kind", d.kind}, {"train", d.train_path}, {"test", d.test_path}};
  return {{"kind", d.kind},
          {"num_classes", d.synth.num_classes},
          {"per_class", d.synth.per_class},
          {"test_per_class", d.test_per_class},
          {"shape", d.synth.shape},
          {"seed", d.synth.seed},
          {"test_seed", d.test_seed},
          {"noise_sigma", d.synth.noise_sigma},
          {"background", d.synth.background},
          {"contrast", d.synth.contrast}};
}

DatasetConfig dataset_from_json(const json& j) {
  check_keys(j, {"kind", "num_classes", "per_class", "test_per_class", "shape", "seed", "test_seed", "noise_sigma",
                 "background", "contrast", "train", "test"},
             "dataset");
  DatasetConfig d;
  read(j, "kind", d.kind);
  read(j, "num_classes", d.synth.num_classes);
  read(j, "per_class", d.synth.per_class);
  read(j, "test_per_class", d.test_per_class);
  read(j, "shape", d.synth.shape);
  read(j, "seed", d.synth.seed);
  read(j, "test_seed", d.test_seed);
  read(j, "noise_sigma", d.synth.noise_sigma);
  read(j, "background", d.synth.background);
  read(j, "contrast", d.synth.contrast);
  read(j, "train", d.train_path);
  read(j, "test", d.test_path);
  return d;
}

json trigger_to_json(const TriggerConfig& t) {
  return {{"mode", to_string(t.mode)},
          {"epsilon", t.epsilon},
          {"patch_size", {t.patch_height, t.patch_width}},
          {"steps", t.craft.steps},
          {"step_size", t.craft.step_size},
          {"init_variance", t.craft.init_variance},
          {"max_samples", t.craft.max_samples},
          {"init", init_name(t.craft.init)},
          {"predefined_path", t.predefined_path},
          {"predefined_seed", t.predefined_seed}};
}

TriggerConfig trigger_from_json(const json& j) {
  check_keys(j, {"mode", "epsilon", "patch_size", "steps", "step_size", "init_variance", "max_samples", "init",
                 "predefined_path", "predefined_seed"},
             "trigger");
  TriggerConfig t;
  if (j.contains("mode")) t.mode = trigger_mode_from_string(j.at("mode").get<std::string>());
  if (t.mode == TriggerMode::kPredefinedPatch) config_error("trigger.mode must be additive or patch");
  read(j, "epsilon", t.epsilon);
  if (j.contains("patch_size")) {
    const auto hw = j.at("patch_size").get<std::vector<std::size_t>>();
    if (hw.size() != 2) config_error("trigger.patch_size must be [h, w]");
    t.patch_height = hw[0];
    t.patch_width = hw[1];
  }
  read(j, "steps", t.craft.steps);
  read(j, "step_size", t.craft.step_size);
  read(j, "init_variance", t.craft.init_variance);
  read(j, "max_samples", t.craft.max_samples);
  if (j.contains("init")) t.craft.init = init_from_name(j.at("init").get<std::string>());
  read(j, "predefined_path", t.predefined_path);
  read(j, "predefined_seed", t.predefined_seed);
  return t;
}

json poison_to_json(const PoisonCraftParams& p) {
  return {{"budget", p.budget},
          {"budget_fraction", p.budget_fraction},
          {"attacker_samples", p.attacker_samples},
          {"steps", p.steps},
          {"step_size", p.step_size},
          {"epsilon", p.epsilon},
          {"init_variance", p.init_variance},
          {"signed", p.signed_updates},
          {"batched", p.batched}};
}

PoisonCraftParams poison_from_json(const json& j) {
  check_keys(j, {"budget", "budget_fraction", "attacker_samples", "steps", "step_size", "epsilon", "init_variance",
                 "signed", "batched"},
             "poison");
  PoisonCraftParams p;
  read(j, "budget", p.budget);
  read(j, "budget_fraction", p.budget_fraction);
  read(j, "attacker_samples", p.attacker_samples);
  read(j, "steps", p.steps);
  read(j, "step_size", p.step_size);
  read(j, "epsilon", p.epsilon);
  read(j, "init_variance", p.init_variance);
  read(j, "signed", p.signed_updates);
  read(j, "batched", p.batched);
  return p;
}

json config_json(const ExperimentConfig& c) {
  json victims = json::array();
  for (const auto& v : c.victims) victims.push_back(model_to_json(v));
  json pairs = json::array();
  for (const auto& [s, t] : c.pairs) pairs.push_back({s, t});
  json j = {{"name", c.name},
            {"dataset", dataset_to_json(c.dataset)},
            {"surrogate", model_to_json(c.surrogate)},
            {"victims", victims},
            {"pairs", pairs},
            {"trigger", trigger_to_json(c.trigger)},
            {"poison", poison_to_json(c.poison)},
            {"seeds", c.seeds},
            {"sweep", {{"budget", c.sweep.budgets}, {"epsilon", c.sweep.epsilons}}},
            {"baselines", {{"no_poison", c.baselines.no_poison}, {"predefined_patch", c.baselines.predefined_patch}}},
            {"save_artifacts", c.save_artifacts}};
  j["defense"] = c.defense ? defense_to_json(*c.defense) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Helpers for the runner.

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

std::uint64_t epsilon_tag(double eps) { return static_cast<std::uint64_t>(std::llround(eps * 255.0 * 1000.0)); }

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), n);
  if (threads <= 1) {
    worker();
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string relative_to(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

json artifact(const fs::path& p, const fs::path& root) {
  return {{"path", relative_to(p, root)}, {"sha256", sha256_file(p)}};
}

json eval_json(const EvalReport& r) {
  return {{"asr", r.asr},
          {"clean_accuracy", r.clean_accuracy},
          {"n_success", r.n_success},
          {"n_total", r.n_total},
          {"n_other_class", r.n_other_class},
          {"n_still_source", r.n_still_source},
          {"confusion", r.confusion}};
}

struct SweepPoint {
  std::size_t budget = 0;
  double epsilon = 0.0;          // poison
  double trigger_epsilon = 0.0;  // additive trigger only
};

struct Unit {
  SweepPoint point;
  std::pair<int, int> pair;
  std::uint64_t seed = 0;
};

std::string run_id(const Unit& u) {
  std::ostringstream os;
  os << "p" << u.pair.first << "-" << u.pair.second << "_s" << u.seed << "_n" << u.point.budget << "_e"
     << std::llround(u.point.epsilon * 255.0 * 1000.0);
  return os.str();
}

std::string mean_std_percent(const json& a) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * a.at("mean").get<double>() << " ± "
     << 100.0 * a.at("std").get<double>();
  return os.str();
}

// Everything one run needs that is shared across runs and read-only.
struct Context {
  const ExperimentConfig& config;
  const Dataset& train;
  const Dataset& test;
  const Model& surrogate;
  const std::vector<std::vector<Model>>& clean_victims;  // [victim][seed index]
  fs::path out_dir;
  bool save = false;
};

TrainParams victim_params(const ModelConfig& v, std::uint64_t seed) {
  TrainParams p = v.train;
  p.seed = derive_seed({v.train.seed, seed});
  return p;
}

struct Crafted {
  TriggerSpec trigger;
  json trigger_info;
};

Crafted make_trigger(const Context& ctx, const Unit& u, const Dataset& src_train, const Dataset& src_test,
                     std::uint64_t eval_seed) {
  const auto& tc = ctx.config.trigger;
  TriggerSpec initial = tc.mode == TriggerMode::kAdditive
                            ? additive_trigger(ctx.train.image_shape, u.point.trigger_epsilon)
                            : patch_trigger(ctx.train.image_shape[0], tc.patch_height, tc.patch_width);
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t seed = derive_seed({u.seed, std::uint64_t(u.pair.first), std::uint64_t(u.pair.second),
                                          epsilon_tag(u.point.epsilon), 1});
  CraftedTrigger t = craft_trigger(ctx.surrogate, src_train, u.pair.first, u.pair.second, initial, tc.craft, seed);
  json info = {{"mode", to_string(t.spec.mode)},
               {"epsilon", t.spec.epsilon},
               {"loss_initial", t.loss_trace.front()},
               {"loss_final", t.loss_trace.back()},
               {"loss_increased", t.loss_trace.back() > t.loss_trace.front()},
               {"timing", {{"seconds", seconds_since(start)}}},
               {"surrogate_fooling_rate",
                targeted_fooling_rate(ctx.surrogate, src_test, u.pair.second, t.spec, eval_seed)}};
  return {std::move(t.spec), std::move(info)};
}

TriggerSpec make_predefined(const ExperimentConfig& config, std::size_t channels) {
  const auto& tc = config.trigger;
  if (!tc.predefined_path.empty()) {
    return predefined_patch(resolve_data_path(tc.predefined_path), tc.patch_height, tc.patch_width, channels);
  }
  return make_predefined_patch(tc.patch_height, tc.patch_width, channels, tc.predefined_seed);
}

// Crafts poison against `trigger`, trains every victim on it and evaluates.
std::vector<json> poisoned_variant(const Context& ctx, const Unit& u, const std::string& variant,
                                   const TriggerSpec& trigger, const json& trigger_info, const Dataset& src_train,
                                   std::uint64_t eval_seed, const fs::path& run_dir) {
  const auto& cfg = ctx.config;
  const int ls = u.pair.first, lt = u.pair.second;
  PoisonCraftParams pp = cfg.poison;
  pp.epsilon = u.point.epsilon;
  pp.budget = u.point.budget;
  pp.jobs = 1;
  const auto base_seed = derive_seed({u.seed, std::uint64_t(ls), std::uint64_t(lt), epsilon_tag(u.point.epsilon),
                                      u.point.budget, variant == "attack" ? 1u : 2u});

  json artifacts = json::object();
  const fs::path dir = run_dir / variant;
  if (ctx.save) {
    fs::create_directories(dir);
    save_trigger(trigger, dir / "trigger.skt");
    artifacts["trigger"] = artifact(dir / "trigger.skt", ctx.out_dir);
  }

  const Tensor c = attacker_gradient(ctx.surrogate, src_train, trigger, lt, derive_seed({base_seed, 2}),
                                     pp.attacker_samples);
  const auto candidates = ctx.train.indices_of_class(lt);
  const PoisonSelection sel = select_poison_targets(ctx.surrogate, ctx.train, candidates, lt, pp.budget);
  PoisonAssembly init;
  init.base = ctx.train;
  init.indices = sel.indices;
  init.epsilon = pp.epsilon;
  init.target_label = lt;
  init.source_label = ls;
  init.seed = derive_seed({base_seed, 3});
  init.deltas = init_poison_deltas(ctx.train, init.indices, pp.epsilon, pp.init_variance, init.seed);
  const CraftedPoison crafted = craft_poison(ctx.surrogate, init, c, pp);
  const Dataset poisoned = quantize(assemble_poisoned(crafted.assembly));
  if (ctx.save) {
    export_poisoned(crafted.assembly, dir / "poisoned");
    artifacts["poisoned_images"] = artifact(dir / "poisoned" / "images.bin", ctx.out_dir);
    artifacts["poison_manifest"] = artifact(dir / "poisoned" / "poison_manifest.json", ctx.out_dir);
  }
  double a0 = 0.0, a1 = 0.0;
  for (const auto& t : crafted.alignment_trace) {
    a0 += t.front();
    a1 += t.back();
  }
  const double n = static_cast<double>(std::max<std::size_t>(crafted.alignment_trace.size(), 1));
  const json poison_info = {{"budget", pp.budget},
                            {"epsilon", pp.epsilon},
                            {"alignment_initial", a0 / n},
                            {"alignment_final", a1 / n},
                            {"selected_score_min", *std::min_element(sel.scores.begin(), sel.scores.end())}};

  std::vector<json> out;
  for (std::size_t v = 0; v < cfg.victims.size(); ++v) {
    const auto& vc = cfg.victims[v];
    const auto start = std::chrono::steady_clock::now();
    json entry = {{"variant", variant}, {"victim", vc.arch}, {"defense", nullptr}};
    try {
      const Architecture arch = architecture_by_name(vc.arch, ctx.train.num_classes());
      const TrainParams params = victim_params(vc, u.seed);
      const TrainResult victim = train(arch, poisoned, params);
      entry["eval"] = eval_json(evaluate(victim.model, ctx.test, trigger, ls, lt, eval_seed));
      entry["final_train_loss"] = victim.loss_curve.back();
      json arts = artifacts;
      if (ctx.save) {
        const fs::path model_path = dir / ("victim_" + vc.arch + ".skmd");
        save_model(victim.model, model_path);
        arts["victim"] = artifact(model_path, ctx.out_dir);
      }
      entry["artifacts"] = arts;
      entry["status"] = "ok";
      entry["timing"] = {{"seconds", seconds_since(start)}};
      out.push_back(entry);

      if (cfg.defense && variant == "attack") {
        const auto dstart = std::chrono::steady_clock::now();
        json d = {{"variant", variant}, {"victim", vc.arch}, {"defense", to_string(cfg.defense->kind)}};
        try {
          if (cfg.defense->kind == DefenseKind::kActivationClustering) {
            const ClusteringResult filtered = activation_clustering_filter(
                victim.model, poisoned, *cfg.defense, derive_seed({base_seed, 4}));
            const TrainResult retrained = train(arch, filtered.filtered, params);
            d["eval"] = eval_json(evaluate(retrained.model, ctx.test, trigger, ls, lt, eval_seed));
            const PoisonRemoval rec = reconcile_removal(filtered.report, sel.indices);
            json per_label = json::array();
            for (const auto& l : filtered.report.per_label) {
              per_label.push_back({{"label", l.label},
                                   {"count", l.count},
                                   {"removed", l.removed},
                                   {"cluster_sizes", l.cluster_sizes},
                                   {"flagged", l.flagged},
                                   {"skipped", l.skipped}});
            }
            d["removal"] = {{"removed_total", filtered.report.removed_indices.size()},
                            {"removed_indices", filtered.report.removed_indices},
                            {"per_label", per_label},
                            {"poison_total", rec.poison_total},
                            {"poison_removed", rec.poison_removed},
                            {"clean_removed", rec.clean_removed},
                            {"fraction_poison_removed", rec.fraction_removed},
                            {"warnings", filtered.report.warnings}};
          } else {
            TrainParams defended = params;
            defended.defense = *cfg.defense;
            const TrainResult m = train(arch, poisoned, defended);
            d["eval"] = eval_json(evaluate(m.model, ctx.test, trigger, ls, lt, eval_seed));
          }
          d["status"] = "ok";
        } catch (const std::exception& e) {
          d["status"] = "failed";
          d["error"] = e.what();
        }
        d["timing"] = {{"seconds", seconds_since(dstart)}};
        out.push_back(d);
      }
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
      entry["timing"] = {{"seconds", seconds_since(start)}};
      out.push_back(entry);
    }
  }
  for (json& e : out) {
    e["trigger"] = trigger_info;
    e["poison"] = poison_info;
  }
  return out;
}

std::vector<json> run_unit(const Context& ctx, const Unit& u, std::size_t seed_index) {
  const auto& cfg = ctx.config;
  const int ls = u.pair.first, lt = u.pair.second;
  const std::uint64_t eval_seed =
      derive_seed({u.seed, std::uint64_t(ls), std::uint64_t(lt), epsilon_tag(u.point.epsilon), 9});
  const Dataset src_train = ctx.train.subset(ctx.train.indices_of_class(ls));
  const Dataset src_test = ctx.test.subset(ctx.test.indices_of_class(ls));
  const fs::path run_dir = ctx.out_dir / "runs" / run_id(u);

  std::vector<json> entries;
  const auto fail_all = [&](const std::string& variant, const std::string& what) {
    for (const auto& v : cfg.victims) {
      entries.push_back({{"variant", variant}, {"victim", v.arch}, {"defense", nullptr}, {"status", "failed"},
                         {"error", what}});
    }
  };

  std::optional<Crafted> crafted;
  try {
    crafted = make_trigger(ctx, u, src_train, src_test, eval_seed);
  } catch (const std::exception& e) {
    if (cfg.baselines.no_poison) fail_all("no_poison", e.what());
    fail_all("attack", e.what());
  }

  if (crafted) {
    if (cfg.baselines.no_poison) {
      for (std::size_t v = 0; v < cfg.victims.size(); ++v) {
        json entry = {{"variant", "no_poison"}, {"victim", cfg.victims[v].arch}, {"defense", nullptr}};
        try {
          entry["eval"] = eval_json(evaluate(ctx.clean_victims[v][seed_index], ctx.test, crafted->trigger, ls, lt,
                                             eval_seed));
          entry["status"] = "ok";
        } catch (const std::exception& e) {
          entry["status"] = "failed";
          entry["error"] = e.what();
        }
        entry["trigger"] = crafted->trigger_info;
        entries.push_back(entry);
      }
    }
    try {
      auto v = poisoned_variant(ctx, u, "attack", crafted->trigger, crafted->trigger_info, src_train,
                                eval_seed, run_dir);
      entries.insert(entries.end(), v.begin(), v.end());
    } catch (const std::exception& e) {
      fail_all("attack", e.what());
    }
  }

  if (cfg.baselines.predefined_patch) {
    try {
      const TriggerSpec patch = make_predefined(cfg, ctx.train.image_shape[0]);
      const json info = {{"mode", to_string(patch.mode)},
                         {"epsilon", patch.epsilon},
                         {"surrogate_fooling_rate",
                          targeted_fooling_rate(ctx.surrogate, src_test, lt, patch, eval_seed)}};
      auto v = poisoned_variant(ctx, u, "predefined_patch", patch, info, src_train, eval_seed, run_dir);
      entries.insert(entries.end(), v.begin(), v.end());
    } catch (const std::exception& e) {
      fail_all("predefined_patch", e.what());
    }
  }

  for (json& e : entries) {
    e["run_id"] = run_id(u);
    e["pair"] = {ls, lt};
    e["seed"] = u.seed;
    e["budget"] = u.point.budget;
    e["epsilon"] = u.point.epsilon;
    e["trigger_epsilon"] = u.point.trigger_epsilon;
    e["black_box"] = e["victim"].get<std::string>() != cfg.surrogate.arch;
  }
  return entries;
}

json aggregates_of(const json& runs) {
  using Key = std::tuple<std::string, std::string, std::string, std::size_t, double>;
  std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : runs) {
    if (r.at("status") != "ok") continue;
    const std::string defense = r.at("defense").is_null() ? "none" : r.at("defense").get<std::string>();
    const Key key{r.at("variant").get<std::string>(), r.at("victim").get<std::string>(), defense,
                  r.at("budget").get<std::size_t>(), r.at("epsilon").get<double>()};
    groups[key].first.push_back(r.at("eval").at("asr").get<double>());
    groups[key].second.push_back(r.at("eval").at("clean_accuracy").get<double>());
  }
  json out = json::array();
  for (const auto& [key, values] : groups) {
    const Aggregate asr = aggregate(values.first);
    const Aggregate acc = aggregate(values.second);
    out.push_back({{"variant", std::get<0>(key)},
                   {"victim", std::get<1>(key)},
                   {"defense", std::get<2>(key)},
                   {"budget", std::get<3>(key)},
                   {"epsilon", std::get<4>(key)},
                   {"runs", asr.count},
                   {"asr", {{"mean", asr.mean}, {"std", asr.std}}},
                   {"clean_accuracy", {{"mean", acc.mean}, {"std", acc.std}}}});
  }
  return out;
}

void strip_timing_in_place(json& j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [key, value] : j.items()) strip_timing_in_place(value);
  } else if (j.is_array()) {
    for (auto& value : j) strip_timing_in_place(value);
  }
}

fs::path surrogate_cache_path(const ExperimentConfig& config, const fs::path& cache_dir) {
  const std::string key_text = dataset_to_json(config.dataset).dump() + model_to_json(config.surrogate).dump();
  const std::string key =
      sha256_hex({reinterpret_cast<const std::uint8_t*>(key_text.data()), key_text.size()}).substr(0, 16);
  return cache_dir / ("surrogate-" + key + ".skmd");
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate(std::size_t num_classes) const {
  if (seeds.empty()) config_error("seeds must not be empty");
  if (victims.empty()) config_error("at least one victim is required");
  if (jobs < 1) config_error("jobs must be >= 1");
  for (const auto& [s, t] : pairs) {
    if (s < 0 || t < 0 || static_cast<std::size_t>(s) >= num_classes || static_cast<std::size_t>(t) >= num_classes) {
      config_error("pair (" + std::to_string(s) + "," + std::to_string(t) + ") references a label >= " +
                   std::to_string(num_classes));
    }
    if (s == t) config_error("pair source and target must differ");
  }
  architecture_by_name(surrogate.arch, num_classes);
  surrogate.train.validate();
  for (const auto& v : victims) {
    architecture_by_name(v.arch, num_classes);
    v.train.validate();
  }
  trigger.craft.validate();
  if (!(trigger.epsilon > 0.0 && trigger.epsilon <= 1.0)) config_error("trigger.epsilon must lie in (0,1]");
  if (trigger.patch_height == 0 || trigger.patch_width == 0) config_error("trigger.patch_size must be positive");
  poison.validate();
  for (double e : sweep.epsilons) {
    if (!(e > 0.0 && e <= 1.0)) config_error("sweep epsilons must lie in (0,1]");
  }
  for (std::size_t b : sweep.budgets) {
    if (b == 0) config_error("sweep budgets must be >= 1");
  }
  if (defense) defense->validate();
}

ExperimentConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    check_keys(j, {"name", "dataset", "surrogate", "victim", "victims", "pairs", "trigger", "poison", "seeds", "sweep",
                   "defense", "baselines", "save_artifacts", "jobs"},
               "config");
    ExperimentConfig c;
    read(j, "name", c.name);
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("surrogate")) c.surrogate = model_from_json(j.at("surrogate"), "surrogate");
    if (j.contains("victim") && j.contains("victims")) config_error("give either victim or victims");
    if (j.contains("victim")) c.victims = {model_from_json(j.at("victim"), "victim")};
    if (j.contains("victims")) {
      c.victims.clear();
      for (const auto& v : j.at("victims")) c.victims.push_back(model_from_json(v, "victims[]"));
    }
    if (j.contains("pairs")) {
      const json& p = j.at("pairs");
      if (!(p.is_string() && p.get<std::string>() == "all")) {
        for (const auto& pair : p) {
          const auto st = pair.get<std::vector<int>>();
          if (st.size() != 2) config_error("pairs entries must be [source, target]");
          c.pairs.emplace_back(st[0], st[1]);
        }
      }
    }
    if (j.contains("trigger")) c.trigger = trigger_from_json(j.at("trigger"));
    if (j.contains("poison")) c.poison = poison_from_json(j.at("poison"));
    read(j, "seeds", c.seeds);
    if (j.contains("sweep")) {
      const json& s = j.at("sweep");
      check_keys(s, {"budget", "epsilon"}, "sweep");
      read(s, "budget", c.sweep.budgets);
      read(s, "epsilon", c.sweep.epsilons);
    }
    if (j.contains("defense") && !j.at("defense").is_null()) c.defense = defense_from_json(j.at("defense"));
    if (j.contains("baselines")) {
      const json& b = j.at("baselines");
      check_keys(b, {"no_poison", "predefined_patch"}, "baselines");
      read(b, "no_poison", c.baselines.no_poison);
      read(b, "predefined_patch", c.baselines.predefined_patch);
    }
    read(j, "save_artifacts", c.save_artifacts);
    read(j, "jobs", c.jobs);
    return c;
  } catch (const json::exception& e) {
    config_error(e.what());
  }
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2); }

TrainParams train_params_from_json(const std::string& text) {
  try {
    return train_from_json(json::parse(text), "train params");
  } catch (const json::exception& e) {
    config_error(e.what());
  }
}

Model obtain_surrogate(const ExperimentConfig& config, const Dataset& train_set, const fs::path& cache_dir) {
  if (!config.surrogate.checkpoint.empty()) {
    Model m = load_model(resolve_data_path(config.surrogate.checkpoint));
    if (m.input_shape() != train_set.image_shape || m.num_classes() != train_set.num_classes()) {
      config_error("surrogate checkpoint does not match the dataset");
    }
    return m;
  }
  const fs::path cached = surrogate_cache_path(config, cache_dir);
  if (fs::exists(cached)) return load_model(cached);
  Model m = train(architecture_by_name(config.surrogate.arch, train_set.num_classes()), train_set,
                  config.surrogate.train)
                .model;
  fs::create_directories(cached.parent_path());
  save_model(m, cached);
  return m;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::kIo, "load_config", "cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str());
}

fs::path resolve_data_path(const std::string& path) {
  fs::path p(path);
  if (p.is_relative()) {
    if (const char* root = std::getenv("SK_DATA_DIR"); root != nullptr && *root != '\0') return fs::path(root) / p;
  }
  return p;
}

std::pair<Dataset, Dataset> materialize_datasets(const DatasetConfig& config) {
  if (config.kind == "synthetic") {
    if (config.synth.seed == config.test_seed) config_error("dataset.seed and dataset.test_seed must differ");
    SynthOptions test = config.synth;
    test.per_class = config.test_per_class;
    test.seed = config.test_seed;
    test.split = Split::kTest;
    SynthOptions train = config.synth;
    train.split = Split::kTrain;
    return {synth_dataset(train), synth_dataset(test)};
  }
  if (config.kind == "path") {
    if (config.train_path.empty() || config.test_path.empty()) config_error("dataset.train and dataset.test required");
    Dataset train = load_dataset(resolve_data_path(config.train_path));
    Dataset test = load_dataset(resolve_data_path(config.test_path));
    if (train.image_shape != test.image_shape || train.class_names != test.class_names) {
      config_error("train and test containers disagree on shape or classes");
    }
    train.split = Split::kTrain;
    test.split = Split::kTest;
    return {std::move(train), std::move(test)};
  }
  config_error("dataset.kind must be synthetic or path");
}

std::vector<std::pair<int, int>> resolve_pairs(const ExperimentConfig& config, std::size_t num_classes) {
  if (!config.pairs.empty()) return config.pairs;
  std::vector<std::pair<int, int>> out;
  for (std::size_t s = 0; s < num_classes; ++s) {
    for (std::size_t t = 0; t < num_classes; ++t) {
      if (s != t) out.emplace_back(static_cast<int>(s), static_cast<int>(t));
    }
  }
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::kInternal, "sha256", "digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "sha256_file", "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  return sha256_hex(bytes);
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(sq / static_cast<double>(values.size()));
  return a;
}

RunReport run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
  const auto started = std::chrono::steady_clock::now();
  const std::string started_utc = utc_now();
  auto [train_set, test_set] = materialize_datasets(config.dataset);
  config.validate(train_set.num_classes());
  train_set.validate();
  test_set.validate();

  const bool save = config.save_artifacts;
  fs::create_directories(out_dir);
  const std::string config_text = config_to_json(config);
  const std::string config_hash =
      sha256_hex({reinterpret_cast<const std::uint8_t*>(config_text.data()), config_text.size()});

  json surrogate_info;
  const auto sur_start = std::chrono::steady_clock::now();
  const Model surrogate_model = obtain_surrogate(config, train_set, out_dir / "cache");
  const Model* surrogate = &surrogate_model;
  if (config.surrogate.checkpoint.empty()) {
    surrogate_info["checkpoint"] = artifact(surrogate_cache_path(config, out_dir / "cache"), out_dir);
  }
  surrogate_info["arch"] = config.surrogate.arch;
  surrogate_info["train_accuracy"] = evaluate_clean(*surrogate, train_set);
  surrogate_info["test_accuracy"] = evaluate_clean(*surrogate, test_set);
  surrogate_info["timing"] = {{"seconds", seconds_since(sur_start)}};

  // Clean victims, shared by every pair for a given seed.
  std::vector<std::vector<Model>> clean(config.victims.size());
  json clean_info = json::array();
  if (config.baselines.no_poison) {
    std::vector<std::optional<Model>> slots(config.victims.size() * config.seeds.size());
    std::vector<std::string> errors(slots.size());
    parallel_for(slots.size(), config.jobs, [&](std::size_t i) {
      const auto& vc = config.victims[i / config.seeds.size()];
      const std::uint64_t seed = config.seeds[i % config.seeds.size()];
      try {
        slots[i] = train(architecture_by_name(vc.arch, train_set.num_classes()), train_set, victim_params(vc, seed))
                       .model;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (!slots[i]) throw Error(ErrorKind::kDivergence, "run_experiment", "clean victim failed: " + errors[i]);
      const auto& vc = config.victims[i / config.seeds.size()];
      const std::uint64_t seed = config.seeds[i % config.seeds.size()];
      json info = {{"victim", vc.arch}, {"seed", seed}, {"clean_accuracy", evaluate_clean(*slots[i], test_set)}};
      if (save) {
        const fs::path p = out_dir / "clean" / ("victim_" + vc.arch + "_s" + std::to_string(seed) + ".skmd");
        fs::create_directories(p.parent_path());
        save_model(*slots[i], p);
        info["checkpoint"] = artifact(p, out_dir);
      }
      clean_info.push_back(info);
      clean[i / config.seeds.size()].push_back(std::move(*slots[i]));
    }
  }

  // Sweep points: the default point, then one-dimensional budget and epsilon sweeps.
  const std::size_t default_budget = config.poison.resolve_budget(train_set.size());
  std::vector<SweepPoint> points;
  const auto add_point = [&](SweepPoint p) {
    for (const auto& q : points) {
      if (q.budget == p.budget && q.epsilon == p.epsilon && q.trigger_epsilon == p.trigger_epsilon) return;
    }
    points.push_back(p);
  };
  if (config.sweep.budgets.empty() && config.sweep.epsilons.empty()) {
    add_point({default_budget, config.poison.epsilon, config.trigger.epsilon});
  }
  for (std::size_t b : config.sweep.budgets) add_point({b, config.poison.epsilon, config.trigger.epsilon});
  for (double e : config.sweep.epsilons) add_point({default_budget, e, e});

  const auto pairs = resolve_pairs(config, train_set.num_classes());
  std::vector<Unit> units;
  std::vector<std::size_t> seed_index;
  for (const auto& point : points) {
    for (const auto& pair : pairs) {
      for (std::size_t s = 0; s < config.seeds.size(); ++s) {
        units.push_back({point, pair, config.seeds[s]});
        seed_index.push_back(s);
      }
    }
  }

  const Context ctx{config, train_set, test_set, *surrogate, clean, out_dir, save};
  std::vector<std::vector<json>> results(units.size());
  parallel_for(units.size(), config.jobs, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    results[i] = run_unit(ctx, units[i], seed_index[i]);
    for (json& e : results[i]) {
      if (!e.contains("timing")) e["timing"] = json::object();
      e["timing"]["unit_seconds"] = seconds_since(start);
    }
  });

  json runs = json::array();
  std::size_t failed = 0;
  for (auto& group : results) {
    for (auto& e : group) {
      if (e.at("status") != "ok") ++failed;
      runs.push_back(std::move(e));
    }
  }
  json pair_list = json::array();
  for (const auto& [s, t] : pairs) pair_list.push_back({s, t});

  json report = {{"schema", kReportSchema},
                 {"name", config.name},
                 {"config", config_json(config)},
                 {"config_sha256", config_hash},
                 {"pairs", pair_list},
                 {"seeds", config.seeds},
                 {"dataset",
                  {{"train_size", train_set.size()},
                   {"test_size", test_set.size()},
                   {"shape", train_set.image_shape},
                   {"classes", train_set.class_names}}},
                 {"surrogate", surrogate_info},
                 {"clean_victims", clean_info},
                 {"runs", runs},
                 {"aggregates", aggregates_of(runs)},
                 {"failed_runs", failed},
                 {"provenance",
                  {{"version", kVersion},
                   {"compiler", __VERSION__},
                   {"timing", {{"started_utc", started_utc}, {"wall_clock_seconds", seconds_since(started)}}}}}};
  RunReport out{report.dump(2) + "\n", runs.size(), failed};
  std::ofstream os(out_dir / "report.json");
  os << out.json;
  if (!os) throw Error(ErrorKind::kIo, "run_experiment", "cannot write report.json");
  return out;
}

std::string strip_timing(const std::string& report_json) {
  json j = json::parse(report_json);
  strip_timing_in_place(j);
  return j.dump(2);
}

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "json") return ReportFormat::kJson;
  if (name == "markdown" || name == "md" || name == "markdown-table") return ReportFormat::kMarkdown;
  throw Error(ErrorKind::kInvalidArgument, "report", "unknown format '" + name + "'");
}

std::string report_render(const std::string& report_json, ReportFormat format) {
  json j;
  try {
    j = json::parse(report_json);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "report", e.what());
  }
  if (!j.contains("runs") || !j.at("runs").is_array() || j.at("runs").empty()) {
    throw Error(ErrorKind::kInvalidArgument, "report", "report has no runs");
  }
  if (format == ReportFormat::kJson) return j.dump(2) + "\n";

  std::ostringstream os;
  os << "# " << j.value("name", std::string("experiment")) << "\n\n";
  if (j.contains("config_sha256")) os << "config sha256: `" << j.at("config_sha256").get<std::string>() << "`\n\n";
  if (j.contains("pairs")) {
    os << "pairs:";
    for (const auto& p : j.at("pairs")) os << " " << p.at(0).get<int>() << "→" << p.at(1).get<int>();
    os << "\n\n";
  }
  const json aggregates = j.contains("aggregates") ? j.at("aggregates") : aggregates_of(j.at("runs"));
  os << "| variant | victim | defense | N | ε (×255) | runs | ASR (%) | clean acc (%) |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& a : aggregates) {
    os << "| " << a.at("variant").get<std::string>() << " | " << a.at("victim").get<std::string>() << " | "
       << a.at("defense").get<std::string>() << " | " << a.at("budget").get<std::size_t>() << " | " << std::fixed
       << std::setprecision(1) << a.at("epsilon").get<double>() * 255.0 << " | " << a.at("runs").get<std::size_t>()
       << " | " << mean_std_percent(a.at("asr")) << " | " << mean_std_percent(a.at("clean_accuracy")) << " |\n";
  }
  std::vector<std::string> failures;
  for (const auto& r : j.at("runs")) {
    if (r.at("status") != "ok") {
      failures.push_back(r.at("run_id").get<std::string>() + " (" + r.at("variant").get<std::string>() +
                         "): " + r.value("error", std::string("unknown error")));
    }
  }
  if (!failures.empty()) {
    os << "\nfailed runs:\n\n";
    for (const auto& f : failures) os << "- " << f << "\n";
  }
  return os.str();
}

}  // namespace sk
