#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sklab/error.hpp"
#include "sklab/experiment.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRunFailure = 2;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string surrogate;
  std::string trigger;
  std::string model;
  std::string data;
  std::string arch = "cnn-s";
  std::string params;
  std::string input;
  std::string format = "markdown";
  std::string kind;
  std::optional<int> source;
  std::optional<int> target;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw sk::Error(sk::ErrorKind::kIo, "cli", "cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw sk::Error(sk::ErrorKind::kInvalidArgument, "cli", what);
}

sk::ExperimentConfig load(const Options& o) {
  sk::ExperimentConfig c = o.config.empty() ? sk::ExperimentConfig{} : sk::load_config(o.config);
  if (o.seed) c.seeds = {*o.seed};
  if (o.jobs) c.jobs = *o.jobs;
  return c;
}

// The pair a single-shot command works on: flags first, else the config's first pair.
std::pair<int, int> pick_pair(const Options& o, const sk::ExperimentConfig& c, std::size_t num_classes) {
  const auto pairs = sk::resolve_pairs(c, num_classes);
  std::pair<int, int> p = pairs.front();
  if (o.source) p.first = *o.source;
  if (o.target) p.second = *o.target;
  require(p.first != p.second, "source and target must differ");
  require(p.first >= 0 && static_cast<std::size_t>(p.first) < num_classes, "source label out of range");
  require(p.second >= 0 && static_cast<std::size_t>(p.second) < num_classes, "target label out of range");
  return p;
}

sk::Model surrogate_for(const Options& o, const sk::ExperimentConfig& c, const sk::Dataset& train) {
  if (!o.surrogate.empty()) return sk::load_model(sk::resolve_data_path(o.surrogate));
  const fs::path cache = o.out.empty() ? fs::path("sk_cache") : fs::path(o.out).parent_path() / "sk_cache";
  return sk::obtain_surrogate(c, train, cache);
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_craft_trigger(const Options& o) {
  require(!o.out.empty(), "--out is required");
  const sk::ExperimentConfig c = load(o);
  const auto [train, test] = sk::materialize_datasets(c.dataset);
  c.validate(train.num_classes());
  const auto [ls, lt] = pick_pair(o, c, train.num_classes());
  const sk::Model surrogate = surrogate_for(o, c, train);
  const sk::TriggerSpec initial = c.trigger.mode == sk::TriggerMode::kAdditive
                                      ? sk::additive_trigger(train.image_shape, c.trigger.epsilon)
                                      : sk::patch_trigger(train.image_shape[0], c.trigger.patch_height,
                                                          c.trigger.patch_width);
  const sk::Dataset src = train.subset(train.indices_of_class(ls));
  const auto crafted = sk::craft_trigger(surrogate, src, ls, lt, initial, c.trigger.craft, c.seeds.front());
  sk::save_trigger(crafted.spec, o.out);
  const sk::Dataset held_out = test.subset(test.indices_of_class(ls));
  emit({{"trigger", o.out},
        {"sha256", sk::sha256_file(o.out)},
        {"source", ls},
        {"target", lt},
        {"loss_initial", crafted.loss_trace.front()},
        {"loss_final", crafted.loss_trace.back()},
        {"surrogate_fooling_rate", sk::targeted_fooling_rate(surrogate, held_out, lt, crafted.spec, 0)}});
  return kExitOk;
}

int cmd_craft_poison(const Options& o) {
  require(!o.out.empty(), "--out is required");
  require(!o.trigger.empty(), "--trigger is required");
  const sk::ExperimentConfig c = load(o);
  const auto [train, test] = sk::materialize_datasets(c.dataset);
  c.validate(train.num_classes());
  const auto [ls, lt] = pick_pair(o, c, train.num_classes());
  const sk::TriggerSpec trigger = sk::load_trigger(o.trigger);
  const sk::Model surrogate = surrogate_for(o, c, train);
  const std::uint64_t seed = c.seeds.front();

  sk::PoisonCraftParams pp = c.poison;
  pp.jobs = c.jobs;
  const sk::Dataset src = train.subset(train.indices_of_class(ls));
  const sk::Tensor grad = sk::attacker_gradient(surrogate, src, trigger, lt, seed, pp.attacker_samples);
  const std::size_t n = pp.resolve_budget(train.size());
  const auto sel = sk::select_poison_targets(surrogate, train, train.indices_of_class(lt), lt, n);
  sk::PoisonAssembly init;
  init.base = train;
  init.indices = sel.indices;
  init.epsilon = pp.epsilon;
  init.target_label = lt;
  init.source_label = ls;
  init.seed = seed;
  init.deltas = sk::init_poison_deltas(train, init.indices, pp.epsilon, pp.init_variance, seed);
  const auto crafted = sk::craft_poison(surrogate, init, grad, pp);
  sk::export_poisoned(crafted.assembly, o.out);
  double a0 = 0.0, a1 = 0.0;
  for (const auto& t : crafted.alignment_trace) {
    a0 += t.front();
    a1 += t.back();
  }
  const double k = static_cast<double>(std::max<std::size_t>(crafted.alignment_trace.size(), 1));
  emit({{"poisoned", o.out},
        {"budget", n},
        {"epsilon", pp.epsilon},
        {"source", ls},
        {"target", lt},
        {"alignment_initial", a0 / k},
        {"alignment_final", a1 / k}});
  return kExitOk;
}

int cmd_train(const Options& o) {
  require(!o.out.empty(), "--out is required");
  require(!o.data.empty(), "--data is required");
  const sk::Dataset data = sk::load_dataset(sk::resolve_data_path(o.data));
  sk::TrainParams p;
  if (!o.params.empty()) {
    const std::string text = fs::exists(o.params) ? slurp(o.params) : o.params;
    p = sk::train_params_from_json(text);
  }
  if (o.seed) p.seed = *o.seed;
  const auto result = sk::train(sk::architecture_by_name(o.arch, data.num_classes()), data, p);
  sk::save_model(result.model, o.out);
  emit({{"model", o.out},
        {"sha256", sk::sha256_file(o.out)},
        {"train_accuracy", sk::evaluate_clean(result.model, data)},
        {"final_loss", result.loss_curve.back()}});
  return kExitOk;
}

int cmd_eval(const Options& o) {
  require(!o.model.empty(), "--model is required");
  require(!o.trigger.empty(), "--trigger is required");
  require(o.source && o.target, "--source and --target are required");
  sk::Dataset test;
  if (!o.data.empty()) {
    test = sk::load_dataset(sk::resolve_data_path(o.data));
  } else {
    test = sk::materialize_datasets(load(o).dataset).second;
  }
  const sk::Model model = sk::load_model(o.model);
  const sk::TriggerSpec trigger = sk::load_trigger(o.trigger);
  require(*o.source >= 0 && static_cast<std::size_t>(*o.source) < test.num_classes(), "source label out of range");
  require(*o.target >= 0 && static_cast<std::size_t>(*o.target) < test.num_classes(), "target label out of range");
  require(*o.source != *o.target, "source and target must differ");
  const auto r = sk::evaluate(model, test, trigger, *o.source, *o.target, o.seed.value_or(0));
  emit({{"asr", r.asr},
        {"clean_accuracy", r.clean_accuracy},
        {"n_success", r.n_success},
        {"n_total", r.n_total},
        {"n_other_class", r.n_other_class},
        {"n_still_source", r.n_still_source},
        {"confusion", r.confusion}});
  return kExitOk;
}

int finish_run(const sk::ExperimentConfig& c, const Options& o) {
  const fs::path out = o.out.empty() ? fs::path("sk_out") : fs::path(o.out);
  const sk::RunReport rep = sk::run_experiment(c, out);
  std::cout << sk::report_render(rep.json, sk::ReportFormat::kMarkdown);
  std::cerr << "report: " << (out / "report.json").string() << " (" << rep.runs << " runs, " << rep.failed
            << " failed)\n";
  return rep.failed == 0 ? kExitOk : kExitRunFailure;
}

int cmd_run(const Options& o) { return finish_run(load(o), o); }

int cmd_defend(const Options& o) {
  sk::ExperimentConfig c = load(o);
  sk::DefenseConfig d = c.defense.value_or(sk::DefenseConfig{});
  d.kind = sk::defense_kind_from_string(o.kind);
  c.defense = d;
  return finish_run(c, o);
}

int cmd_report(const Options& o) {
  require(!o.input.empty(), "--in is required");
  const std::string doc = sk::report_render(slurp(o.input), sk::report_format_from_string(o.format));
  if (o.out.empty()) {
    std::cout << doc;
  } else {
    std::ofstream os(o.out);
    os << doc;
    if (!os) throw sk::Error(sk::ErrorKind::kIo, "report", "cannot write " + o.out);
  }
  return kExitOk;
}

int exit_code_for(sk::ErrorKind kind) {
  switch (kind) {
    case sk::ErrorKind::kInvalidArgument:
    case sk::ErrorKind::kShapeMismatch:
    case sk::ErrorKind::kFormat:
    case sk::ErrorKind::kIo:
      return kExitValidation;
    default:
      return kExitRunFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sk: clean-label backdoor laboratory"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) sub->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output path");
    sub->add_option("--seed", o.seed, "seed override");
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* craft_trigger = app.add_subcommand("craft-trigger", "craft a universal trigger on the surrogate");
  common(craft_trigger, true);
  craft_trigger->add_option("--surrogate", o.surrogate, "surrogate checkpoint (default: train and cache)");
  craft_trigger->add_option("--source", o.source, "source label");
  craft_trigger->add_option("--target", o.target, "target label");

  auto* craft_poison = app.add_subcommand("craft-poison", "craft clean-label poisons for a trigger");
  common(craft_poison, true);
  craft_poison->add_option("--trigger", o.trigger, "trigger file (.skt)")->check(CLI::ExistingFile);
  craft_poison->add_option("--surrogate", o.surrogate, "surrogate checkpoint (default: train and cache)");
  craft_poison->add_option("--source", o.source, "source label");
  craft_poison->add_option("--target", o.target, "target label");

  auto* train = app.add_subcommand("train", "train a model on a dataset container");
  common(train, false);
  train->add_option("--data", o.data, "dataset directory");
  train->add_option("--arch", o.arch, "cnn-s or mlp-s");
  train->add_option("--params", o.params, "training parameters: JSON file or inline JSON");

  auto* eval = app.add_subcommand("eval", "attack success rate and clean accuracy of a model");
  common(eval, true);
  eval->add_option("--model", o.model, "model checkpoint (.skmd)")->check(CLI::ExistingFile);
  eval->add_option("--trigger", o.trigger, "trigger file (.skt)")->check(CLI::ExistingFile);
  eval->add_option("--source", o.source, "source label");
  eval->add_option("--target", o.target, "target label");
  eval->add_option("--data", o.data, "test dataset directory (default: the config's test split)");

  auto* defend = app.add_subcommand("defend", "full pipeline with one defense applied");
  common(defend, true);
  defend->add_option("--kind", o.kind, "ac, dpsgd or mixup")->required();

  auto* run = app.add_subcommand("run", "full pipeline");
  common(run, true);

  auto* report = app.add_subcommand("report", "render a report");
  report->add_option("--in", o.input, "report.json")->check(CLI::ExistingFile);
  report->add_option("--format", o.format, "json or markdown");
  report->add_option("--out", o.out, "output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*craft_trigger) return cmd_craft_trigger(o);
    if (*craft_poison) return cmd_craft_poison(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*defend) return cmd_defend(o);
    if (*run) return cmd_run(o);
    if (*report) return cmd_report(o);
  } catch (const sk::Error& e) {
    std::cerr << "sk: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "sk: " << e.what() << "\n";
    return kExitRunFailure;
  }
  return kExitValidation;
}
