#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hallucinet/config.hpp"
#include "hallucinet/grad_suite.hpp"

using namespace hallucinet;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kFailed = 1, kConfig = 2, kIo = 3, kDivergence = 4, kMismatch = 5, kMissing = 6 };

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::string scenario;
  std::string baseline;
  std::vector<std::string> checkpoints;
  std::string predictions;
  std::string scene_dir;
  std::vector<std::string> availability;
  int points = 10;
  bool inject_fault = false;
};

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (!o.data.empty()) c.data.manifest = o.data;
  if (o.seed) {
    c.train.seed = *o.seed;
    if (c.data.synthetic) c.data.synthetic->seed = *o.seed;
  }
  if (!o.scenario.empty()) c.eval.scenario = o.scenario;
  if (!o.baseline.empty()) c.eval.baseline = o.baseline;
  scenario_from_string(c.eval.scenario);
  return c;
}

void write_json(const fs::path& path, const json& j) { write_file_bytes(path, j.dump(2) + "\n"); }

DatasetManifest dataset(const RunConfig& c) {
  if (c.data.manifest.empty()) throw ConfigError("no dataset: set data.manifest or pass --data");
  return load_manifest(c.data.manifest);
}

int cmd_gen_data(const Options& o) {
  auto c = resolve(o);
  if (!c.data.synthetic) {
    c.data.synthetic = SyntheticConfig{};
    if (o.seed) c.data.synthetic->seed = *o.seed;
  }
  c.data.synthetic->validate();
  auto ds = generate_synthetic(*c.data.synthetic);
  materialize(ds, o.out);
  write_json(fs::path(o.out) / "synthetic.json", synthetic_config_to_json(*c.data.synthetic));
  std::printf("wrote %zu scenes to %s\n", ds.scenes.size(), o.out.c_str());
  for (const auto& [split, ids] : ds.manifest.splits) std::printf("  %-5s %zu scenes\n", split.c_str(), ids.size());
  return kOk;
}

int cmd_train(const Options& o) {
  auto c = resolve(o);
  const auto m = dataset(c);
  if (c.class_count_from_data) c.model.class_count = m.class_count;
  const fs::path out = o.out;
  fs::create_directories(out);
  write_json(out / "config.json", run_config_to_json(c));

  const auto data = load_training_data(m, c.train.mfb);
  std::ofstream log_file(out / "train_log.jsonl");
  if (!log_file) throw IoError("cannot write " + (out / "train_log.jsonl").string());
  TrainingLog log(&log_file);
  log.event({{"stage", "setup"}, {"mode", to_string(c.train.mode)}, {"class_weights", data.weights.values},
             {"class_frequencies", data.frequencies}});
  auto result = run_protocol<float>(data, c.model, c.train, &log, out);
  write_json(out / "report.json", {{"gamma", result.report.gamma},
                                   {"calibration_terms", LogRecord{"", 0, result.report.calibration.terms}.to_json()["terms"]},
                                   {"hallucinate_start", result.report.hallucinate_start},
                                   {"hallucinate_end", result.report.hallucinate_end},
                                   {"frozen", result.report.frozen},
                                   {"branches", [&] {
                                      std::vector<std::string> r;
                                      for (const auto& [role, _] : result.bundle.branches) r.push_back(role);
                                      return r;
                                    }()}});
  std::printf("trained %s bundle with %zu branches, gamma %.4g; checkpoint %s\n", to_string(c.train.mode).c_str(),
              result.bundle.branches.size(), result.report.gamma, (out / "stage4_joint").string().c_str());
  return kOk;
}

int cmd_eval(const Options& o) {
  auto c = resolve(o);
  const auto m = dataset(c);
  const Scenario scenario = scenario_from_string(c.eval.scenario);
  EvalOptions eo{c.eval.tile, c.eval.scenario1_missing, c.eval.threads};
  Evaluation ev;
  std::vector<ModelBundle<float>> bundles;
  if (!o.predictions.empty()) {
    ev = evaluate_predictions(m, c.eval.split, o.predictions);
  } else {
    if (o.checkpoints.empty()) throw ConfigError("eval needs --checkpoint or --predictions");
    for (const auto& dir : o.checkpoints) bundles.push_back(load_checkpoint<float>(dir));
    const auto& b = c.eval.baseline;
    if (b == "ensemble") {
      if (bundles.size() != 2) throw ConfigError("baseline ensemble needs two --checkpoint directories");
      ev = evaluate(eval_ensemble(bundles[0], bundles[1]), m, c.eval.split, scenario, eo);
    } else if (b == "single" || b == "hallucination" || b == "full") {
      if (bundles.size() != 1) throw ConfigError("baseline " + b + " takes one --checkpoint");
      const bool has_hal = std::any_of(bundles[0].branches.begin(), bundles[0].branches.end(),
                                       [](const auto& kv) { return is_hallucination_role(kv.first); });
      if (b == "hallucination" && !has_hal) throw MismatchError("checkpoint has no hallucination branch");
      if (b == "single" && !bundles[0].optional_modalities.empty()) {
        throw MismatchError("baseline single expects an rgb-only checkpoint");
      }
      ev = evaluate(eval_model(bundles[0]), m, c.eval.split, scenario, eo);
    } else {
      throw ConfigError("baseline must be single, ensemble, hallucination or full");
    }
  }
  ev.report.mode = c.eval.scenario + "/" + (o.predictions.empty() ? c.eval.baseline : "predictions");
  std::printf("%s", report_table(ev.report).c_str());
  if (!o.out.empty()) {
    const fs::path out = o.out;
    fs::create_directories(out);
    auto rep = report_to_json(ev.report);
    json scenes = json::array();
    for (const auto& s : ev.scenes) scenes.push_back({{"id", s.id}, {"routed_inputs", s.routed}});
    rep["scenes"] = scenes;
    rep["checkpoints"] = o.checkpoints;
    write_json(out / "report.json", rep);
    save_confusion(ev.confusion, out / "confusion.mtns");
    write_json(out / "config.json", run_config_to_json(c));
  }
  return kOk;
}

// "name=true|false|1|0"
std::pair<std::string, bool> parse_flag(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("availability flag must look like modality=true: " + s);
  const auto v = s.substr(eq + 1);
  if (v != "true" && v != "false" && v != "1" && v != "0") throw ConfigError("availability value must be true or false: " + s);
  return {s.substr(0, eq), v == "true" || v == "1"};
}

int cmd_infer(const Options& o) {
  auto c = resolve(o);
  if (o.checkpoints.size() != 1) throw ConfigError("infer takes one --checkpoint");
  if (o.scene_dir.empty()) throw ConfigError("infer needs --scene-dir");
  auto bundle = load_checkpoint<float>(o.checkpoints.front());
  const fs::path dir = o.scene_dir;

  // availability: raster presence, then config overrides, then flags
  AvailabilityMask avail;
  for (const auto& m : bundle.optional_modalities) avail.flags[m] = fs::exists(dir / (m + ".mtns"));
  auto overrides = c.eval.availability;
  for (const auto& f : o.availability) overrides.insert_or_assign(parse_flag(f).first, parse_flag(f).second);
  for (const auto& [m, on] : overrides) {
    if (!avail.flags.count(m)) throw MismatchError("checkpoint has no optional modality " + m);
    avail.flags[m] = on;
  }
  const auto roles = select_branches(bundle, avail);
  std::map<std::string, Tensor<float>> rasters;
  for (const auto& mod : routed_inputs(bundle, avail)) {
    const auto file = dir / (mod + ".mtns");
    if (!fs::exists(file)) throw MissingModalityError("modality " + mod + " flagged available but " + file.string() + " is missing");
    auto r = read_tensor_file<float>(file);
    if (r.rank() != 3 || r.dim(0) != bundle.modality_channels.at(mod)) {
      throw MismatchError("raster " + file.string() + " has shape " + shape_str(r.shape()));
    }
    rasters.emplace(mod, std::move(r));
  }
  auto labels = tiled_inference(bundle_scorer(bundle, avail), rasters, bundle.config.downsample_factor(), c.eval.tile);
  const fs::path out = o.out;
  fs::create_directories(out);
  write_tensor_file(out / "class_map.mtns", labels);
  write_json(out / "routing.json", {{"availability", avail.flags}, {"branches", roles}});
  std::printf("class map %zux%zu from branches", labels.dim(0), labels.dim(1));
  for (const auto& r : roles) std::printf(" %s", r.c_str());
  std::printf("\n");
  return kOk;
}

int cmd_grad_check(const Options& o) {
  auto cases = gradient_cases();
  if (o.inject_fault) cases.push_back(corrupted_gradient_case());
  const auto results = run_gradient_suite(cases, o.points);
  bool ok = true;
  std::printf("%-26s %-8s %8s %14s\n", "function", "kind", "points", "max rel err");
  for (const auto& r : results) {
    std::printf("%-26s %-8s %8d %14.3e %s\n", r.name.c_str(), r.kind.c_str(), r.points, r.max_relative_error,
                r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  std::printf("%s\n", ok ? "all gradients agree with central differences" : "gradient check failed");
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hallucination networks for multi-modal segmentation with missing modalities"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* s, bool needs_out) {
    s->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    auto* out = s->add_option("--out", o.out, "output directory");
    if (needs_out) out->required();
    s->add_option("--seed", o.seed, "override the data/training seed");
    s->add_option("--data", o.data, "dataset directory (overrides data.manifest)");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen, true);
  auto* train = app.add_subcommand("train", "run the staged training protocol");
  common(train, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  common(eval, false);
  eval->add_option("--checkpoint", o.checkpoints, "checkpoint directory (twice for --baseline ensemble)");
  eval->add_option("--predictions", o.predictions, "directory of predicted label maps instead of a model");
  eval->add_option("--scenario", o.scenario, "1, 2, 3 or all")->check(CLI::IsMember({"1", "2", "3", "all"}));
  eval->add_option("--baseline", o.baseline, "single, ensemble, hallucination or full")
      ->check(CLI::IsMember({"single", "ensemble", "hallucination", "full"}));
  auto* infer = app.add_subcommand("infer", "tiled inference on one scene");
  common(infer, true);
  infer->add_option("--checkpoint", o.checkpoints, "checkpoint directory")->required();
  infer->add_option("--scene-dir", o.scene_dir, "directory with <modality>.mtns rasters")->required();
  infer->add_option("--available", o.availability, "availability flag, e.g. depth=false");
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every op and loss");
  grad->add_option("--points", o.points, "random points per function");
  grad->add_flag("--inject-fault", o.inject_fault, "add a deliberately wrong gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*infer) return cmd_infer(o);
    if (*grad) return cmd_grad_check(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const MismatchError& e) {
    std::cerr << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const MissingModalityError& e) {
    std::cerr << "missing modality: " << e.what() << "\n";
    return kMissing;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kFailed;
}
