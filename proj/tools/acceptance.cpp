// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "hallucinet/evaluator.hpp"
#include "hallucinet/grad_suite.hpp"
#include "hallucinet/synthetic.hpp"
#include "hallucinet/trainer.hpp"

using namespace hallucinet;

namespace {

// ---------------------------------------------------------------------------
// pinned tolerances and budgets

constexpr double kGradTolerance = 1e-4;
constexpr int kGradPoints = 10;
constexpr double kGradSeconds = 300.0;
constexpr double kRationalTolerance = 1e-12;
constexpr double kIdentityTolerance = 1e-9;
constexpr double kMfbTolerance = 1e-12;
constexpr double kRecomposeTolerance = 1e-6;
constexpr double kGammaTolerance = 0.05;
constexpr double kHallucinationMarginPoints = 1.0;
constexpr double kBenchmarkMinutes = 45.0;

struct BenchmarkSettings {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t pretrain_steps = 600;
  std::size_t joint_steps = 400;
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-3;
  std::size_t patch = 128;
  std::size_t batch = 4;
  std::uint64_t data_seed = 0;
};

struct Line {
  int id;
  std::string title;
  bool pass;
  std::string detail;
};

std::vector<Line> lines;

void report(int id, const std::string& title, bool pass, const std::string& detail) {
  lines.push_back({id, title, pass, detail});
  std::printf("%s criterion %d: %s | %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1-5, 11: property suites

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_suite(gradient_cases(), kGradPoints, kGradTolerance);
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds;
  double worst = 0;
  std::string failed;
  for (const auto& r : results) {
    ok = ok && r.passed && r.points == kGradPoints;
    worst = std::max(worst, r.max_relative_error);
    if (!r.passed) failed += " " + r.name;
  }
  report(1, "gradient suite", ok,
         fmt("%zu cases x %d points, max rel err %.2e (< %.0e), %.1f s%s", results.size(), kGradPoints, worst,
             kGradTolerance, secs, failed.empty() ? "" : (" failed:" + failed).c_str()));
}

void criterion_metrics() {
  auto r = metrics(ConfusionMatrix::from_rows({{3, 1}, {1, 2}}));
  bool ok = std::abs(r.overall_accuracy - 5.0 / 7) <= kRationalTolerance &&
            std::abs(r.mean_class_accuracy - (0.75 + 2.0 / 3) / 2) <= kRationalTolerance &&
            std::abs(r.cls(0).iou - 0.6) <= kRationalTolerance && std::abs(r.cls(1).iou - 0.5) <= kRationalTolerance;
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 2 + rng() % 6;
    ConfusionMatrix n(C);
    for (std::size_t i = 0; i < C; ++i) {
      for (std::size_t j = 0; j < C; ++j) n.at(i, j) = rng() % 1000;
    }
    n.at(0, 0) += 1;
    for (const auto& c : metrics(n).classes) worst = std::max(worst, std::abs(c.f1 - 2 * c.iou / (1 + c.iou)));
  }
  ok = ok && worst <= kIdentityTolerance;
  report(2, "metric oracle", ok,
         fmt("acc %.12f, mean acc %.12f, IoU [%.12f, %.12f], F1/IoU identity max dev %.1e", r.overall_accuracy,
             r.mean_class_accuracy, r.cls(0).iou, r.cls(1).iou, worst));
}

LabelMap brute_force_erosion(const LabelMap& l) {
  const std::size_t H = l.dim(0), W = l.dim(1);
  LabelMap m(l.shape(), std::uint8_t{0});
  for (std::size_t a = 0; a < H * W; ++a) {
    if (l[a] == kIgnoreLabel) m[a] = 1;
    for (std::size_t b = 0; b < H * W && !m[a]; ++b) {
      const long dr = static_cast<long>(a / W) - static_cast<long>(b / W);
      const long dc = static_cast<long>(a % W) - static_cast<long>(b % W);
      if (l[b] != l[a] && dr * dr + dc * dc <= 9) m[a] = 1;
    }
  }
  return m;
}

void criterion_erosion() {
  std::mt19937_64 rng(77);
  int equal = 0;
  for (int trial = 0; trial < 50; ++trial) {
    LabelMap l(Shape{32, 32}, std::uint8_t{0});
    const int blobs = 1 + static_cast<int>(rng() % 8);
    for (int k = 0; k < blobs; ++k) {
      const std::size_t r0 = rng() % 32, c0 = rng() % 32, h = 1 + rng() % 14, w = 1 + rng() % 14;
      const auto cls = static_cast<std::uint8_t>(rng() % 5);
      for (std::size_t r = r0; r < std::min<std::size_t>(32, r0 + h); ++r) {
        for (std::size_t c = c0; c < std::min<std::size_t>(32, c0 + w); ++c) l[r * 32 + c] = cls;
      }
    }
    if (rng() % 4 == 0) l[rng() % 1024] = kIgnoreLabel;
    equal += boundary_eroded_mask(l) == brute_force_erosion(l);
  }
  report(3, "erosion oracle", equal == 50, fmt("%d/50 random 32x32 rasters match the brute-force oracle", equal));
}

void criterion_mfb() {
  auto w = compute_class_weights(std::vector<double>{0.5, 0.3, 0.2});
  bool ok = std::abs(w[0] - 0.6) <= kMfbTolerance && std::abs(w[1] - 1.0) <= kMfbTolerance &&
            std::abs(w[2] - 1.5) <= kMfbTolerance;
  std::mt19937_64 rng(5);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t C = 2 + rng() % 7;
    std::vector<double> f(C);
    double s = 0;
    for (auto& v : f) s += v = 0.01 + std::uniform_real_distribution<double>(0, 1)(rng);
    for (auto& v : f) v /= s;
    auto sorted = f;
    std::sort(sorted.begin(), sorted.end());
    const double med = C % 2 ? sorted[C / 2] : 0.5 * (sorted[C / 2 - 1] + sorted[C / 2]);
    auto wc = compute_class_weights(f);
    for (std::size_t c = 0; c < C; ++c) worst = std::max(worst, std::abs(wc[c] * f[c] - med));
  }
  ok = ok && worst <= kMfbTolerance;
  report(4, "median frequency balancing", ok,
         fmt("w = [%.12g, %.12g, %.12g], max |w_c f_c - median| %.1e over 200 vectors", w[0], w[1], w[2], worst));
}

void criterion_loss_accounting() {
  std::mt19937_64 rng(9);
  bool ok = true;
  double worst = 0;
  std::size_t n_single = 0, n_multi = 0;
  for (int trial = 0; trial < 50; ++trial) {
    for (bool multi : {false, true}) {
      const std::vector<std::string> roles =
          multi ? std::vector<std::string>{"rgb", "ir", "depth", "hal_ir", "hal_depth"}
                : std::vector<std::string>{"rgb", "depth", "hal_depth"};
      auto o = grad_detail::random_outputs(roles, rng);
      const double gamma = std::uniform_real_distribution<double>(0.1, 50)(rng);
      auto loss = composite_loss(multi ? multi_missing_terms() : single_missing_terms(), o.map, o.labels,
                                 ClassWeights{{0.6, 1.0, 1.5}}, gamma);
      // independent recomposition from the logged terms
      double sum = 0;
      for (const auto& [name, v] : loss.breakdown.terms) sum += (loss.breakdown.hallucinate.count(name) ? gamma : 1.0) * v;
      const double total = loss.total.value().item();
      worst = std::max(worst, std::abs(sum - total) / std::max(1e-300, std::abs(total)));
      (multi ? n_multi : n_single) = loss.breakdown.size();
      ok = ok && loss.breakdown.size() == (multi ? 11u : 6u);
    }
  }
  ok = ok && worst <= kRecomposeTolerance;
  report(5, "loss accounting", ok,
         fmt("%zu / %zu terms, max relative recomposition error %.1e", n_single, n_multi, worst));
}

void criterion_round_trips() {
  const auto dir = fs::temp_directory_path() / "hallucinet_acceptance_rt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::mt19937_64 rng(31);
  int identical = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Shape shape(1 + rng() % 4);
    for (auto& d : shape) d = 1 + rng() % 6;
    const auto path = dir / "t.mtns";
    bool same;
    if (trial % 3 == 0) {
      Tensor<std::uint8_t> t(shape);
      for (auto& v : t.values()) v = static_cast<std::uint8_t>(rng());
      write_tensor_file(path, t);
      same = read_tensor_file<std::uint8_t>(path) == t;
    } else {
      Tensor<float> t(shape);
      for (auto& v : t.values()) {
        const auto bits = static_cast<std::uint32_t>(rng());
        std::memcpy(&v, &bits, sizeof v);
        if (!std::isfinite(v)) v = static_cast<float>(bits % 1000) - 500.f;
      }
      write_tensor_file(path, t);
      auto back = read_tensor_file<float>(path);
      same = back.shape() == t.shape() && std::memcmp(back.data(), t.data(), t.size() * sizeof(float)) == 0;
    }
    identical += same;
  }

  // checkpoint save/load gives identical predictions
  BranchConfig model;
  model.blocks = {{6, 1}, {8, 1}, {8, 1}, {12, 1}};
  model.class_count = 4;
  ModelBundle<float> bundle;
  bundle.config = model;
  bundle.optional_modalities = {"depth"};
  bundle.modality_channels = {{"rgb", 3}, {"depth", 1}};
  std::mt19937_64 init(3);
  bundle.branches.emplace("rgb", build_branch<float>(model, 3, "rgb", init));
  bundle.branches.emplace("depth", build_branch<float>(model, 1, "depth", init));
  bundle.branches.emplace("hal_depth", init_hallucination_from(bundle.branch("depth"), 3, init));
  bundle.branch("depth").freeze_through_block(3);
  ModalityInputs<float> in;
  for (auto [m, c] : std::vector<std::pair<std::string, std::size_t>>{{"rgb", 3}, {"depth", 1}}) {
    Tensor<float> t(Shape{2, c, 64, 64});
    for (auto& v : t.values()) v = std::uniform_real_distribution<float>(0, 1)(rng);
    in.emplace(m, t);
  }
  save_checkpoint(bundle, dir / "ckpt", "joint");
  auto loaded = load_checkpoint<float>(dir / "ckpt");
  bool predictions_equal = true;
  for (bool depth : {true, false}) {
    AvailabilityMask a;
    a.flags["depth"] = depth;
    predictions_equal = predictions_equal && predict_proba(bundle, in, a) == predict_proba(loaded, in, a);
  }

  // report regenerated from the persisted confusion matrix
  ConfusionMatrix n(5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) n.at(i, j) = rng() % (1u << 20);
  }
  save_confusion(n, dir / "confusion.mtns");
  auto back = load_confusion(dir / "confusion.mtns");
  const bool report_equal = back == n && report_to_json(metrics(back, {4})) == report_to_json(metrics(n, {4}));

  report(11, "round trips", identical == 100 && predictions_equal && report_equal,
         fmt("tensor files %d/100 bit-exact, checkpoint predictions %s, report regeneration %s", identical,
             predictions_equal ? "identical" : "DIFFER", report_equal ? "exact" : "DIFFERS"));
}

// ---------------------------------------------------------------------------
// 6-10: synthetic benchmark

struct SeedOutcome {
  // criterion 6
  bool frozen_identical = false;
  double gamma_ratio = 0;  // gamma * raw hallucination / (10 * max other)
  double hallucinate_start = 0, hallucinate_end = 0;
  // overall accuracy
  double hal_s1 = 0, hal_all = 0, rgb = 0, ensemble = 0, multi_s3 = 0, full = 0;
  // rare class F1
  double rare_mfb = 0, rare_uniform = 0, rgb_uniform = 0;
};

BranchConfig benchmark_model() {
  BranchConfig m;
  m.blocks = {{8, 2}, {16, 2}, {16, 2}, {32, 2}};
  m.first_conv_stride = 2;
  m.tap_depth = 3;
  m.class_count = 4;
  return m;
}

TrainConfig benchmark_train(const BenchmarkSettings& s, ProtocolKind mode, std::uint64_t seed) {
  TrainConfig t;
  t.mode = mode;
  t.pretrain_steps = s.pretrain_steps;
  t.joint_steps = s.joint_steps;
  t.pretrain_lr = s.pretrain_lr;
  t.finetune_lr = s.finetune_lr;
  t.batch_size = s.batch;
  t.patch.size = s.patch;
  t.seed = seed;
  return t;
}

SeedOutcome run_seed(const BenchmarkSettings& s, std::uint64_t seed, const TrainingData& data,
                     const TrainingData& data_uniform, const DatasetManifest& manifest, std::ostream& log) {
  SeedOutcome o;
  const auto model = benchmark_model();
  const std::size_t rare = 3;
  EvalOptions eo;
  eo.tile = {256, 64};
  auto t0 = std::chrono::steady_clock::now();
  auto stamp = [&](const std::string& what) {
    log << fmt("  seed %llu: %-24s %7.1f s\n", static_cast<unsigned long long>(seed), what.c_str(), seconds_since(t0));
    log.flush();
  };

  PretrainedBranches<float> cache;
  auto single = run_protocol<float>(data, model, benchmark_train(s, ProtocolKind::single, seed), nullptr, {}, &cache);
  stamp("single");
  // 6a: frozen layers against the stage-1 weights
  {
    std::map<std::string, const Tensor<float>*> pre;
    for (auto* p : cache.at("depth").parameters()) pre[p->name] = &p->value();
    o.frozen_identical = !single.report.frozen.empty();
    for (auto* p : single.bundle.branch("depth").parameters()) {
      if (std::find(single.report.frozen.begin(), single.report.frozen.end(), p->name) != single.report.frozen.end()) {
        o.frozen_identical = o.frozen_identical && p->value() == *pre.at(p->name);
      }
    }
  }
  {
    const auto& raw = single.report.calibration;
    o.gamma_ratio = single.report.gamma * raw.hallucinate_sum() / (10.0 * raw.max_other());
    o.hallucinate_start = single.report.hallucinate_start.at("hallucinate");
    o.hallucinate_end = single.report.hallucinate_end.at("hallucinate");
  }
  auto multi = run_protocol<float>(data, model, benchmark_train(s, ProtocolKind::multi, seed), nullptr, {}, &cache);
  stamp("multi");
  auto full = run_protocol<float>(data, model, benchmark_train(s, ProtocolKind::full, seed), nullptr, {}, &cache);
  stamp("full");
  auto rgb = run_protocol<float>(data, model, benchmark_train(s, ProtocolKind::rgb, seed), nullptr, {}, &cache);
  stamp("rgb");
  auto rgb2 = run_protocol<float>(data, model, benchmark_train(s, ProtocolKind::rgb, seed), nullptr, {}, nullptr,
                                  "ensemble/");
  stamp("rgb ensemble member");
  auto rgb_uniform =
      run_protocol<float>(data_uniform, model, benchmark_train(s, ProtocolKind::rgb, seed), nullptr, {}, nullptr,
                          "uniform/");
  stamp("rgb without MFB");

  auto acc = [&](const EvalModel& m, Scenario sc) {
    auto r = evaluate(m, manifest, "test", sc, eo).report;
    std::string per;
    for (const auto& c : r.classes) per += fmt(" %s %.3f/%.3f", c.name.c_str(), c.recall, c.f1);
    log << "    " << r.mode << " recall/F1" << per << "\n";
    return r;
  };
  const auto hal_s1 = acc(eval_model(single.bundle), Scenario::one);
  o.hal_s1 = hal_s1.overall_accuracy;
  o.hal_all = acc(eval_model(single.bundle), Scenario::all).overall_accuracy;
  const auto r = acc(eval_model(rgb.bundle), Scenario::one);
  o.rgb = r.overall_accuracy;
  o.rare_mfb = r.cls(rare).f1;
  o.ensemble = acc(eval_ensemble(rgb.bundle, rgb2.bundle), Scenario::one).overall_accuracy;
  o.multi_s3 = acc(eval_model(multi.bundle), Scenario::three).overall_accuracy;
  o.full = acc(eval_model(full.bundle), Scenario::all).overall_accuracy;
  const auto u = acc(eval_model(rgb_uniform.bundle), Scenario::one);
  o.rare_uniform = u.cls(rare).f1;
  o.rgb_uniform = u.overall_accuracy;
  stamp("evaluation");
  log << fmt("  seed %llu: hal(S1) %.4f hal(all) %.4f rgb %.4f ens %.4f multi(S3) %.4f full %.4f | rare F1 mfb %.4f "
             "uniform %.4f (acc %.4f) | gamma ratio %.4f hal %.4f -> %.4f\n",
             static_cast<unsigned long long>(seed), o.hal_s1, o.hal_all, o.rgb, o.ensemble, o.multi_s3, o.full,
             o.rare_mfb, o.rare_uniform, o.rgb_uniform, o.gamma_ratio, o.hallucinate_start, o.hallucinate_end);
  log.flush();
  return o;
}

void benchmark(const BenchmarkSettings& s) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticConfig sc;
  sc.seed = s.data_seed;
  sc.missing_fraction = {{"depth", 0.5}, {"ir", 0.5}};
  auto ds = generate_synthetic(sc);
  const auto dir = fs::temp_directory_path() / "hallucinet_acceptance_data";
  fs::remove_all(dir);
  materialize(ds, dir);
  const auto manifest = load_manifest(dir);
  const auto data = load_training_data(manifest, true);
  const auto data_uniform = load_training_data(manifest, false);
  std::cerr << "benchmark: " << manifest.split("train").size() << " train scenes, rare class frequency "
            << data.frequencies[3] << "\n";

  std::vector<SeedOutcome> out;
  for (auto seed : s.seeds) out.push_back(run_seed(s, seed, data, data_uniform, manifest, std::cerr));
  const double minutes = seconds_since(t0) / 60.0;

  auto med = [&](double SeedOutcome::*f) {
    std::vector<double> v;
    for (const auto& o : out) v.push_back(o.*f);
    return median(v);
  };
  bool frozen = true;
  double worst_gamma = 0;
  for (const auto& o : out) {
    frozen = frozen && o.frozen_identical;
    worst_gamma = std::max(worst_gamma, std::abs(o.gamma_ratio - 1.0));
  }
  const double h0 = med(&SeedOutcome::hallucinate_start), h1 = med(&SeedOutcome::hallucinate_end);
  report(6, "protocol invariants", frozen && worst_gamma <= kGammaTolerance && h1 < h0,
         fmt("frozen depth layers %s, max |gamma ratio - 1| %.2e (<= %.2f), median hallucinate %.4f -> %.4f",
             frozen ? "bit-identical" : "CHANGED", worst_gamma, kGammaTolerance, h0, h1));

  const double hal = med(&SeedOutcome::hal_s1), ens = med(&SeedOutcome::ensemble), rgb = med(&SeedOutcome::rgb);
  const bool budget = minutes < kBenchmarkMinutes;
  report(7, "scenario 1 ordering", hal > ens && ens >= rgb && 100 * (hal - rgb) >= kHallucinationMarginPoints && budget,
         fmt("median acc hallucination %.2f > ensemble %.2f >= rgb %.2f, margin %.2f pp (>= %.1f), %.1f min (< %.0f)",
             100 * hal, 100 * ens, 100 * rgb, 100 * (hal - rgb), kHallucinationMarginPoints, minutes,
             kBenchmarkMinutes));

  const double all = med(&SeedOutcome::hal_all);
  report(8, "scenario 2 ordering", all >= hal,
         fmt("median acc with depth %.2f >= with hallucinated depth %.2f", 100 * all, 100 * hal));

  const double rm = med(&SeedOutcome::rare_mfb), ru = med(&SeedOutcome::rare_uniform);
  report(9, "MFB effect", rm > ru,
         fmt("median rare-class F1 with MFB %.2f > without %.2f (overall acc %.2f vs %.2f)", 100 * rm, 100 * ru,
             100 * rgb, 100 * med(&SeedOutcome::rgb_uniform)));

  const double full = med(&SeedOutcome::full), multi = med(&SeedOutcome::multi_s3);
  report(10, "scenario 3 ordering", full >= multi && multi > rgb,
         fmt("median acc full %.2f >= hallucination %.2f > rgb %.2f", 100 * full, 100 * multi, 100 * rgb));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hallucinet acceptance suite"};
  BenchmarkSettings s;
  bool benchmark_only = false;
  app.add_option("--seeds", s.seeds, "training seeds for the benchmark");
  app.add_option("--pretrain-steps", s.pretrain_steps);
  app.add_option("--joint-steps", s.joint_steps);
  app.add_option("--finetune-lr", s.finetune_lr);
  app.add_flag("--benchmark-only", benchmark_only, "skip criteria 1-5 and 11");
  CLI11_PARSE(app, argc, argv);

  try {
    if (!benchmark_only) {
      criterion_gradients();
      criterion_metrics();
      criterion_erosion();
      criterion_mfb();
      criterion_loss_accounting();
      criterion_round_trips();
    }
    benchmark(s);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) { return a.id < b.id; });
  std::printf("\nsummary\n");
  int failed = 0;
  for (const auto& l : lines) {
    std::printf("%s criterion %d: %s\n", l.pass ? "PASS" : "FAIL", l.id, l.title.c_str());
    failed += !l.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(lines.size()) - failed, lines.size());
  return failed ? 1 : 0;
}
