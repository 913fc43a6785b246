#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "hallucinet/synthetic.hpp"

using namespace hallucinet;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hallucinet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SyntheticConfig tiny_config(std::uint64_t seed = 1) {
  SyntheticConfig c;
  c.seed = seed;
  c.train_scenes = 2;
  c.val_scenes = 1;
  c.test_scenes = 2;
  c.size = 128;
  return c;
}

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  return d;
}

}  // namespace

TEST(TensorFile, RoundTripFloatAndByte) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g;
  auto dir = temp_dir("tf");
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    for (int k = 0; k < 1 + trial % 4; ++k) s.push_back(1 + rng() % 7);
    Tensor<float> t(s);
    for (auto& v : t.values()) v = g(rng);
    write_tensor_file(dir / "a.mtns", t);
    EXPECT_TRUE(bit_identical(read_tensor_file<float>(dir / "a.mtns"), t));
    LabelMap l(s);
    for (auto& v : l.values()) v = static_cast<std::uint8_t>(rng());
    write_tensor_file(dir / "b.mtns", l);
    EXPECT_EQ(read_tensor_file<std::uint8_t>(dir / "b.mtns"), l);
  }
}

TEST(TensorFile, SpecialFloatsSurvive) {
  Tensor<float> t(Shape{4}, {-0.0f, std::numeric_limits<float>::denorm_min(),
                             std::numeric_limits<float>::infinity(), 1e38f});
  EXPECT_TRUE(bit_identical(decode_tensor<float>(encode_tensor(t)), t));
}

TEST(TensorFile, LayoutAndPayloadLength) {
  Tensor<float> t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  auto bytes = encode_tensor(t);
  const std::size_t header = 4 + 1 + 1 + 1 + 2 * 4;
  EXPECT_EQ(bytes.size() - header, 24u);
  EXPECT_EQ(bytes.substr(0, 4), "MTNS");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 1);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 2);  // little-endian extent 2
  EXPECT_EQ(bytes[8], 0);
  // 1.0f = 0x3f800000 little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[header + 3]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header + 2]), 0x80);
  EXPECT_EQ(bytes.size(), header + 24);
  EXPECT_EQ(encode_tensor(LabelMap(Shape{2, 3})).size(), header + 6);
}

TEST(TensorFile, Errors) {
  auto good = encode_tensor(Tensor<float>(Shape{2, 2}, 1.f));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tensor<float>(bad_magic), FormatError);
  EXPECT_THROW(decode_tensor<float>(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(decode_tensor<float>(good.substr(0, 9)), FormatError);
  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(decode_tensor<float>(bad_version), FormatError);
  EXPECT_THROW(decode_tensor<std::uint8_t>(good), FormatError);
  EXPECT_THROW(read_tensor_file<float>("/nonexistent/x.mtns"), IoError);
}

TEST(PatchGrid, Examples) {
  PatchSpec spec;
  auto g = extract_patch_grid(512, 512, spec);
  EXPECT_EQ(g.size(), 9u);
  std::set<std::size_t> rows;
  for (auto [r, c] : g) rows.insert(r);
  EXPECT_EQ(rows, (std::set<std::size_t>{0, 128, 256}));

  EXPECT_EQ(extract_patch_grid(256, 256, spec),
            (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
  EXPECT_EQ(extract_patch_grid(300, 256, spec),
            (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {44, 0}}));
  EXPECT_THROW(extract_patch_grid(200, 256, spec), ShapeError);
}

TEST(PatchGrid, CoversEveryPixel) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    PatchSpec spec;
    spec.size = 32 * (1 + rng() % 3);
    spec.overlap = (rng() % 10) / 10.0;
    const std::size_t H = spec.size + rng() % 200, W = spec.size + rng() % 200;
    std::vector<char> hit(H * W, 0);
    for (auto [r, c] : extract_patch_grid(H, W, spec)) {
      ASSERT_LE(r + spec.size, H);
      ASSERT_LE(c + spec.size, W);
      for (std::size_t i = r; i < r + spec.size; ++i) {
        for (std::size_t j = c; j < c + spec.size; ++j) hit[i * W + j] = 1;
      }
    }
    EXPECT_TRUE(std::all_of(hit.begin(), hit.end(), [](char h) { return h; }));
  }
}

TEST(PatchSpecValidation, Rejects) {
  PatchSpec s;
  s.size = 100;
  EXPECT_THROW(s.validate(), ConfigError);
  s.size = 64;
  s.overlap = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.overlap = 0.0;
  EXPECT_NO_THROW(s.validate());
}

TEST(Augment, RotationIndexMapping) {
  Tensor<float> g(Shape{1, 3, 3});
  std::iota(g.values().begin(), g.values().end(), 0.f);
  auto rot = dihedral(g, 1);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(rot[c * 3 + (3 - 1 - r)], g[r * 3 + c]);
  }
  EXPECT_EQ(dihedral(g, 0), g);
  EXPECT_EQ(dihedral(dihedral(dihedral(dihedral(g, 1), 1), 1), 1), g);
  EXPECT_EQ(dihedral(dihedral(g, 1), 1), dihedral(g, 2));
  EXPECT_EQ(dihedral(dihedral(g, 4), 4), g);
}

TEST(Augment, EightDistinctTransforms) {
  Tensor<float> g(Shape{4, 4});
  std::iota(g.values().begin(), g.values().end(), 0.f);
  std::set<std::vector<float>> seen;
  for (int id = 0; id < 8; ++id) { auto v = dihedral(g, id).values(); seen.emplace(v.begin(), v.end()); }
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_THROW(dihedral(g, 8), ConfigError);
}

TEST(Augment, NonSquareOnlyFlips) {
  Tensor<float> g(Shape{2, 3});
  EXPECT_NO_THROW(dihedral(g, 4));
  EXPECT_THROW(dihedral(g, 1), ShapeError);
}

TEST(Augment, ModalityLabelCorrespondenceAndFrequencies) {
  // coordinates embedded as values: every modality and the label move together
  const std::size_t p = 8;
  Patch patch;
  patch.labels = LabelMap(Shape{p, p});
  Tensor<float> rgb(Shape{3, p, p}), depth(Shape{1, p, p});
  for (std::size_t i = 0; i < p * p; ++i) {
    patch.labels[i] = static_cast<std::uint8_t>(i % 5);
    for (std::size_t c = 0; c < 3; ++c) rgb[c * p * p + i] = static_cast<float>(i + 1000 * c);
    depth[i] = static_cast<float>(i);
  }
  patch.rasters = {{"rgb", rgb}, {"depth", depth}};
  for (int id = 0; id < 8; ++id) {
    auto out = augment(patch, id);
    for (std::size_t i = 0; i < p * p; ++i) {
      const auto src = static_cast<std::size_t>(out.rasters.at("depth")[i]);
      EXPECT_EQ(out.labels[i], patch.labels[src]);
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(out.rasters.at("rgb")[c * p * p + i], static_cast<float>(src + 1000 * c));
      }
    }
    auto a = label_frequencies({&patch.labels}, 5);
    auto b = label_frequencies({&out.labels}, 5);
    EXPECT_EQ(a, b);
  }
}

TEST(ClassFrequencies, Examples) {
  LabelMap half(Shape{2, 2}, {0, 0, 1, 1});
  EXPECT_EQ(label_frequencies({&half}, 2), (std::vector<double>{0.5, 0.5}));

  LabelMap ignore(Shape{2, 2}, {0, kIgnoreLabel, 1, 1});
  auto f = label_frequencies({&ignore}, 2);
  EXPECT_NEAR(f[0], 1.0 / 3, 1e-12);
  EXPECT_NEAR(f[0] + f[1], 1.0, 1e-9);

  LabelMap block(Shape{100, 100}, std::uint8_t{0});
  for (std::size_t r = 10; r < 20; ++r) {
    for (std::size_t c = 30; c < 40; ++c) block[r * 100 + c] = 2;
  }
  EXPECT_DOUBLE_EQ(label_frequencies({&block}, 3)[2], 0.01);

  LabelMap none(Shape{1, 2}, {kIgnoreLabel, kIgnoreLabel});
  EXPECT_THROW(label_frequencies({&none}, 2), ConfigError);
}

TEST(Manifest, JsonRoundTripAndValidation) {
  auto ds = generate_synthetic(tiny_config());
  auto back = manifest_from_json(manifest_to_json(ds.manifest));
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(ds.manifest));
  auto j = manifest_to_json(ds.manifest);
  j["splits"]["val"].push_back(j["splits"]["train"][0]);
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = manifest_to_json(ds.manifest);
  j["modalities"][0]["name"] = "depth";
  EXPECT_THROW(manifest_from_json(j), ConfigError);
  j = manifest_to_json(ds.manifest);
  j.erase("class_count");
  EXPECT_THROW(manifest_from_json(j), ConfigError);
}

TEST(Synthetic, Deterministic) {
  auto a = generate_synthetic(tiny_config(5));
  auto b = generate_synthetic(tiny_config(5));
  ASSERT_EQ(a.scenes.size(), b.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) {
    EXPECT_EQ(a.scenes[i].labels, b.scenes[i].labels);
    for (const auto& [m, r] : a.scenes[i].rasters) {
      EXPECT_TRUE(bit_identical(r, b.scenes[i].rasters.at(m)));
    }
  }
  auto c = generate_synthetic(tiny_config(6));
  EXPECT_FALSE(a.scenes[0].labels == c.scenes[0].labels);
}

TEST(Synthetic, RareClassFractionOnTarget) {
  for (double target : {0.01, 0.015, 0.02}) {
    auto cfg = tiny_config(7);
    cfg.size = 256;
    cfg.rare_fraction = target;
    auto ds = generate_synthetic(cfg);
    std::vector<const LabelMap*> labels;
    for (const auto& s : ds.scenes) labels.push_back(&s.labels);
    EXPECT_NEAR(label_frequencies(labels, 4)[3], target, 0.005);
    for (const auto* l : labels) EXPECT_NEAR(label_frequencies({l}, 4)[3], target, 0.005);
  }
}

TEST(Synthetic, AmbiguousPairInRgbSeparatedInDepth) {
  auto cfg = tiny_config(9);
  cfg.size = 256;
  auto ds = generate_synthetic(cfg);
  std::vector<double> ground_rgb, roof_rgb;
  double ground_depth_max = 0, roof_depth_min = 1;
  const auto& s = ds.scenes.front();
  const std::size_t HW = s.labels.size();
  for (std::size_t i = 0; i < HW; ++i) {
    const auto y = s.labels[i];
    if (y == 0) {
      ground_rgb.push_back(s.rasters.at("rgb")[i]);
      ground_depth_max = std::max<double>(ground_depth_max, s.rasters.at("depth")[i]);
    } else if (y == 1) {
      roof_rgb.push_back(s.rasters.at("rgb")[i]);
      roof_depth_min = std::min<double>(roof_depth_min, s.rasters.at("depth")[i]);
    }
  }
  ASSERT_GT(roof_rgb.size(), 1000u);
  EXPECT_LT(ks_statistic(ground_rgb, roof_rgb), 0.05);
  EXPECT_LT(ground_depth_max, roof_depth_min);
}

TEST(Synthetic, ValuesNormalizedAndShapes) {
  auto ds = generate_synthetic(tiny_config());
  for (const auto& s : ds.scenes) {
    EXPECT_EQ(s.rasters.at("rgb").shape(), (Shape{3, 128, 128}));
    EXPECT_EQ(s.rasters.at("ir").shape(), (Shape{1, 128, 128}));
    for (const auto& [m, r] : s.rasters) {
      for (float v : r.values()) ASSERT_TRUE(v >= 0.f && v <= 1.f);
    }
  }
  EXPECT_EQ(ds.manifest.optional_modalities(), (std::vector<std::string>{"ir", "depth"}));
}

TEST(Synthetic, AvailabilitySchedule) {
  auto cfg = tiny_config(2);
  cfg.test_scenes = 4;
  cfg.missing_fraction = {{"depth", 0.5}};
  auto ds = generate_synthetic(cfg);
  std::size_t missing = 0;
  for (const auto& id : ds.manifest.split("test")) {
    missing += ds.manifest.availability(id).available("depth") ? 0 : 1;
    EXPECT_TRUE(ds.manifest.availability(id).available("ir"));
  }
  EXPECT_EQ(missing, 2u);
  for (const auto& id : ds.manifest.split("train")) {
    EXPECT_TRUE(ds.manifest.availability(id).available("depth"));
  }
}

TEST(Synthetic, InfeasibleConfigsRejected) {
  auto cfg = tiny_config();
  cfg.rare_fraction = 0.0001;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg = tiny_config();
  cfg.class_count = 3;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg = tiny_config();
  cfg.building_fraction = 0.9;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Synthetic, ExtraClassesAreClutterAndExcluded) {
  auto cfg = tiny_config();
  cfg.class_count = 6;
  auto ds = generate_synthetic(cfg);
  EXPECT_EQ(ds.manifest.excluded_classes, (std::vector<std::size_t>{4, 5}));
  std::vector<const LabelMap*> labels;
  for (const auto& s : ds.scenes) labels.push_back(&s.labels);
  auto f = label_frequencies(labels, 6);
  EXPECT_GT(f[4], 0.0);
  EXPECT_GT(f[5], 0.0);
}

TEST(DatasetFiles, MaterializeLoadAndFrequencies) {
  auto ds = generate_synthetic(tiny_config(4));
  auto dir = temp_dir("ds");
  materialize(ds, dir);
  auto m = load_manifest(dir);
  EXPECT_EQ(manifest_to_json(m), manifest_to_json(ds.manifest));
  auto s = load_scene(m, ds.scenes.front().id);
  EXPECT_EQ(s.labels, ds.scenes.front().labels);
  EXPECT_TRUE(bit_identical(s.rasters.at("depth"), ds.scenes.front().rasters.at("depth")));
  auto f = class_frequencies(m, "train");
  EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 1.0, 1e-9);

  fs::remove(m.scene_dir(ds.scenes.front().id) / "depth.mtns");
  EXPECT_THROW(load_scene(m, ds.scenes.front().id), MissingModalityError);
  EXPECT_THROW(class_frequencies(m, "nope"), ConfigError);
}

TEST(DatasetFiles, GeneratingTwiceGivesIdenticalBytes) {
  auto a = generate_synthetic(tiny_config(8));
  auto b = generate_synthetic(tiny_config(8));
  auto da = temp_dir("gen_a"), db = temp_dir("gen_b");
  materialize(a, da);
  materialize(b, db);
  for (const auto& e : fs::recursive_directory_iterator(da)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), da);
    EXPECT_EQ(read_file_bytes(e.path()), read_file_bytes(db / rel)) << rel;
  }
}

TEST(Sampler, DeterministicBatchesCoverEpoch) {
  auto ds = generate_synthetic(tiny_config(3));
  std::vector<Scene> train(ds.scenes.begin(), ds.scenes.begin() + 2);
  PatchSpec spec;
  spec.size = 64;
  PatchSampler a(&train, spec, {"rgb", "depth"}, 11), b(&train, spec, {"rgb", "depth"}, 11);
  EXPECT_EQ(a.patches_per_epoch(), 2u * 9u);
  for (int k = 0; k < 5; ++k) {
    auto x = a.next(4), y = b.next(4);
    EXPECT_EQ(x.labels, y.labels);
    EXPECT_TRUE(bit_identical(x.inputs.at("rgb"), y.inputs.at("rgb")));
    EXPECT_EQ(x.inputs.at("depth").shape(), (Shape{4, 1, 64, 64}));
  }
}
