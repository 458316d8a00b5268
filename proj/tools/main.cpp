// Command-line front end: train / eval / gradcheck / params / list-variants.
// All knobs live in a JSON run config; --set overrides individual keys.
// Exit codes: 1 config, 2 dataset, 3 numerical, 4 weights mismatch.

#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "tokenfusion/gradcheck.hpp"
#include "tokenfusion/model.hpp"
#include "tokenfusion/run_config.hpp"
#include "tokenfusion/train.hpp"
#include "tokenfusion/weights_io.hpp"

using namespace tokenfusion;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  bool out_given = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "Run config JSON file (defaults apply if omitted)")
      ->check(CLI::ExistingFile);
  sub->add_option("--set", args.overrides, "Override a config key, e.g. --set model.embed_dim=32")
      ->type_name("KEY=VALUE");
  sub->add_option("--seed", args.seed, "Override the run seed");
  sub->add_option("--out", args.out, "Override the output directory");
}

RunConfig resolve_config(const CLI::App* sub, const CommonArgs& args) {
  RunConfig cfg =
      args.config_path.empty() ? parse_run_config("{}") : load_run_config(args.config_path);
  for (const std::string& assignment : args.overrides) cfg = apply_override(cfg, assignment);
  if (sub->count("--seed")) cfg.seed = args.seed;
  if (sub->count("--out")) cfg.out_dir = args.out;
  cfg.validate();
  return cfg;
}

// One metrics.jsonl line. Wall time is intentionally not serialized so that
// identical config+seed runs produce byte-identical files.
std::string metrics_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["train_acc1"] = m.train_acc1;
  j["val_acc1"] = m.val_acc1;
  j["val_acc5"] = m.val_acc5;
  return j.dump();
}

void write_resolved_config(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  const auto path = std::filesystem::path(cfg.out_dir) / "resolved_config.json";
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << serialize_run_config(cfg);
}

template <typename T>
int run_train(const RunConfig& cfg) {
  write_resolved_config(cfg);
  Dataset data = load_dataset(cfg.dataset);
  FusionModel<T> model(cfg.model, cfg.seed);

  const auto metrics_path = std::filesystem::path(cfg.out_dir) / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw ConfigError("cannot write " + metrics_path.string());

  run_training<T>(model, data, cfg.optim, cfg.augment, cfg.seed, [&](const EpochMetrics& m) {
    metrics << metrics_line(m) << "\n";
    metrics.flush();
    std::printf("epoch %" PRId64 "  train_loss %.6f  train_acc1 %.4f  val_acc1 %.4f  "
                "val_acc5 %.4f  wall_ms %.1f\n",
                m.epoch, m.train_loss, m.train_acc1, m.val_acc1, m.val_acc5, m.wall_ms);
    std::fflush(stdout);
  });

  const auto weights_path = std::filesystem::path(cfg.out_dir) / "weights.bin";
  save_weights(weights_path.string(), model.params());
  std::printf("wrote %s, %s, %s\n", metrics_path.c_str(), weights_path.c_str(),
              (std::filesystem::path(cfg.out_dir) / "resolved_config.json").c_str());
  return 0;
}

template <typename T>
int run_eval(const RunConfig& cfg, const std::string& weights_arg, const std::string& split) {
  const std::string weights_path =
      weights_arg.empty() ? (std::filesystem::path(cfg.out_dir) / "weights.bin").string()
                          : weights_arg;
  Dataset data = load_dataset(cfg.dataset);
  FusionModel<T> model(cfg.model, cfg.seed);
  load_weights(weights_path, model.params());

  const std::vector<Sample>& samples = split == "train" ? data.train : data.val;
  if (samples.empty()) throw DatasetError("eval: split '" + split + "' is empty");
  const SplitMetrics m = evaluate_split(model, samples, cfg.optim.batch_size, cfg.model.image_h);

  std::printf("split %s  samples %zu\n", split.c_str(), samples.size());
  std::printf("acc@1 %.6f\nacc@5 %.6f\nloss %.6f\n", m.acc1, m.acc5, m.loss);
  nlohmann::ordered_json j;
  j["acc1"] = m.acc1;
  j["acc5"] = m.acc5;
  j["loss"] = m.loss;
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int run_gradcheck(const RunConfig& cfg, const std::vector<double>& eps_ladder, double tol,
                  int64_t coords, bool inject, const std::string& dtype) {
  if (dtype == "f32")
    std::fprintf(stderr,
                 "warning: float32 requested, but verification always runs in float64; "
                 "float32 rounding would drown the gradients being checked\n");

  FusionModel<double> model(cfg.model, cfg.seed);

  // Fixed probe batch: standard-normal pixels stand in for normalized images.
  // A single sample keeps the finite-difference evaluations cheap; every
  // parameter is exercised regardless of batch size.
  Rng rng(cfg.seed + 1);
  const int64_t B = 1;
  Tensor<double> img = Tensor<double>::zeros({B, 3, cfg.model.image_h, cfg.model.image_w});
  {
    auto d = img.data();
    for (auto& v : d) v = rng.normal();
  }
  std::vector<int64_t> labels(B);
  for (int64_t b = 0; b < B; ++b) labels[static_cast<size_t>(b)] = b % cfg.model.num_classes;

  const std::function<Tensor<double>()> loss = [&]() {
    return cross_entropy(model.forward(img), labels);
  };

  // Group parameters by their top-level name segment, preserving registration
  // order, so the report reads module by module.
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, Tensor<double>>>>> groups;
  for (const auto& [name, t] : model.params().entries()) {
    const std::string group = name.substr(0, name.find('.'));
    if (groups.empty() || groups.back().first != group) groups.emplace_back(group, decltype(groups)::value_type::second_type{});
    groups.back().second.emplace_back(name, t);
  }

  GradCheckOptions opts;
  opts.tol = tol;
  opts.max_coords_per_tensor = coords;
  opts.seed = cfg.seed;
  opts.injected_grad_scale = inject ? 2.0 : 1.0;
  // Resolution limit of a float64 central difference against an O(1) loss:
  // u*|f| / (2*eps_max*tol) ~ 2.5e-10 for u=2.2e-16, |f|~2.3, eps_max=0.1,
  // tol=1e-5. Coordinates whose analytic and numeric values both sit under
  // 1e-9 (that limit with a safety factor) are unmeasurable by any step size
  // and get reported as consistent with zero rather than pass/fail.
  opts.zero_resolution = 1e-9;

  std::string ladder_str;
  for (double e : eps_ladder) ladder_str += (ladder_str.empty() ? "" : ",") + std::to_string(e);
  std::printf("gradcheck: %s / %s  eps ladder %s  tol %.1e  coords/tensor %" PRId64 "\n",
              to_string(cfg.model.fusion_method), to_string(cfg.model.head_type),
              ladder_str.c_str(), opts.tol, opts.max_coords_per_tensor);
  std::printf("%-16s %8s %14s  %s\n", "group", "coords", "max_rel_err", "status");

  bool all_pass = true;
  double worst = 0.0;
  int64_t total_coords = 0;
  int64_t total_zero = 0;
  GradCheckReport worst_report;
  for (auto& [group, params] : groups) {
    const GradCheckReport r = finite_diff_check_auto<double>(loss, params, opts, eps_ladder);
    std::printf("%-16s %8" PRId64 " %14.3e  %s\n", group.c_str(), r.coords_checked, r.max_rel_err,
                r.pass ? "pass" : "FAIL");
    std::fflush(stdout);
    all_pass = all_pass && r.pass;
    total_coords += r.coords_checked;
    total_zero += r.below_resolution_coords;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_report = r;
    }
  }

  std::printf("gradcheck: %s  (%" PRId64 " coords, max rel err %.3e)\n",
              all_pass ? "PASS" : "FAIL", total_coords, worst);
  if (total_zero > 0)
    std::printf("%" PRId64 " coordinate%s consistent with zero below float64 resolution\n",
                total_zero, total_zero == 1 ? "" : "s");
  if (!all_pass) {
    std::printf("worst: %s[%" PRId64 "]  analytic %.9e  numeric %.9e\n",
                worst_report.worst_param.c_str(), worst_report.worst_coordinate,
                worst_report.worst_analytic, worst_report.worst_numeric);
    return 3;
  }
  return 0;
}

int run_params(const RunConfig& cfg) {
  FusionModel<float> model(cfg.model, cfg.seed);
  const ParamCountReport report = model.count_params();

  std::printf("config: %s / %s  embed_dim %" PRId64 "  patch %" PRId64 "  image %" PRId64
              "x%" PRId64 "\n",
              to_string(cfg.model.fusion_method), to_string(cfg.model.head_type),
              cfg.model.embed_dim, cfg.model.patch_size, cfg.model.image_h, cfg.model.image_w);
  std::printf("%-16s %12s\n", "module", "parameters");
  for (const auto& [module, count] : report.per_module)
    std::printf("%-16s %12" PRId64 "\n", module.c_str(), count);
  std::printf("%-16s %12" PRId64 "  (%.1f M)\n", "total", report.total,
              static_cast<double>(report.total) / 1e6);

  nlohmann::ordered_json j;
  j["total"] = report.total;
  char millions[32];
  std::snprintf(millions, sizeof(millions), "%.1f", static_cast<double>(report.total) / 1e6);
  j["total_millions"] = std::stod(millions);
  nlohmann::ordered_json per;
  for (const auto& [module, count] : report.per_module) per[module] = count;
  j["per_module"] = per;
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int run_list_variants() {
  for (const VariantInfo& v : enumerate_variants()) std::printf("%s\n", v.name.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CNN+ViT token fusion: train, evaluate, and verify fusion classifiers"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string dtype = "f32";
  std::string weights_path;
  std::string split = "val";
  std::vector<double> gc_eps;
  double gc_tol = 1e-5;
  int64_t gc_coords = 2;
  bool inject_grad_bug = false;

  CLI::App* train = app.add_subcommand("train", "Train a model and write metrics + weights");
  add_common(train, args);
  train->add_option("--dtype", dtype, "Float width: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  CLI::App* eval = app.add_subcommand("eval", "Evaluate saved weights on a dataset split");
  add_common(eval, args);
  eval->add_option("--weights", weights_path, "Weights file (default: <out_dir>/weights.bin)");
  eval->add_option("--split", split, "Dataset split to score")
      ->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--dtype", dtype, "Float width: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "Verify analytic gradients against finite differences");
  add_common(gradcheck, args);
  gradcheck->add_option("--eps", gc_eps,
                        "Finite-difference step ladder (repeatable; default 3e-4 1e-3 1e-4 "
                        "1e-5 3e-3 1e-2 3e-2 1e-1)");
  gradcheck->add_option("--tol", gc_tol, "Max relative error allowed");
  gradcheck->add_option("--coords", gc_coords, "Sampled coordinates per parameter tensor");
  gradcheck->add_option("--dtype", dtype, "Float width request (verification runs f64)")
      ->check(CLI::IsMember({"f32", "f64"}));
  gradcheck->add_flag("--inject-grad-bug", inject_grad_bug,
                      "Test fixture: corrupt analytic gradients to prove the checker fails");

  CLI::App* params = app.add_subcommand("params", "Report per-module and total parameter counts");
  add_common(params, args);

  CLI::App* variants = app.add_subcommand("list-variants", "List all architecture variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage problems are config errors
  }

  try {
    if (app.got_subcommand(train)) {
      const RunConfig cfg = resolve_config(train, args);
      return dtype == "f64" ? run_train<double>(cfg) : run_train<float>(cfg);
    }
    if (app.got_subcommand(eval)) {
      const RunConfig cfg = resolve_config(eval, args);
      return dtype == "f64" ? run_eval<double>(cfg, weights_path, split)
                            : run_eval<float>(cfg, weights_path, split);
    }
    if (app.got_subcommand(gradcheck)) {
      const RunConfig cfg = resolve_config(gradcheck, args);
      const bool f32_requested = gradcheck->count("--dtype") && dtype == "f32";
      if (gc_eps.empty()) gc_eps = {3e-4, 1e-3, 1e-4, 1e-5, 3e-3, 1e-2, 3e-2, 1e-1};
      return run_gradcheck(cfg, gc_eps, gc_tol, gc_coords, inject_grad_bug,
                           f32_requested ? "f32" : "f64");
    }
    if (app.got_subcommand(params)) return run_params(resolve_config(params, args));
    if (app.got_subcommand(variants)) return run_list_variants();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DatasetError& e) {
    std::fprintf(stderr, "dataset error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 3;
  } catch (const WeightsMismatchError& e) {
    std::fprintf(stderr, "weights mismatch: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 70;
  }
  return 0;
}
