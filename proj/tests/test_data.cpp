#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mutr/data.hpp"

using namespace mutr;
using namespace mutr::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mutr_test_" + std::to_string(Rng(std::random_device{}())()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("synthetic masks are non-empty, in bounds, and diameter-calibrated") {
  SynthSpec spec;
  spec.count = 500;
  spec.size = 96;
  spec.mean_diameter = 36.0;
  spec.seed = 7;
  const auto ds = synth_generate(spec);
  REQUIRE(ds.size() == 500);
  double diam_sum = 0.0;
  for (const auto& s : ds) {
    CHECK(s.image.shape() == std::vector<std::int64_t>{3, 96, 96});
    CHECK(s.mask.shape() == std::vector<std::int64_t>{96, 96});
    std::int64_t area = 0;
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) {
      const double v = s.mask.get(i);
      CHECK((v == 0.0 || v == 1.0));
      area += v != 0.0;
    }
    CHECK(area > 0);
    // In bounds: no foreground on the image border.
    for (int i = 0; i < 96; ++i) {
      CHECK(s.mask.get(i) == 0.0);
      CHECK(s.mask.get(95 * 96 + i) == 0.0);
      CHECK(s.mask.get(i * 96) == 0.0);
      CHECK(s.mask.get(i * 96 + 95) == 0.0);
    }
    for (std::int64_t i = 0; i < s.image.numel(); ++i) {
      CHECK(s.image.get(i) >= 0.0);
      CHECK(s.image.get(i) <= 1.0);
    }
    diam_sum += 2.0 * std::sqrt(static_cast<double>(area) / 3.14159265358979);
  }
  const double mean_diam = diam_sum / static_cast<double>(ds.size());
  CHECK(mean_diam > 0.9 * spec.mean_diameter);
  CHECK(mean_diam < 1.1 * spec.mean_diameter);
}

TEST_CASE("synthesis is bitwise deterministic per seed") {
  SynthSpec spec;
  spec.count = 5;
  spec.size = 64;
  spec.mean_diameter = 24.0;
  spec.seed = 42;
  const auto a = synth_generate(spec);
  const auto b = synth_generate(spec);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.same_bits(b[i].image));
    CHECK(a[i].mask.same_bits(b[i].mask));
    CHECK(a[i].id == b[i].id);
  }
  spec.seed = 43;
  const auto c = synth_generate(spec);
  CHECK_FALSE(a[0].image.same_bits(c[0].image));
}

TEST_CASE("pgm quantization mapping and round trips") {
  TempDir tmp;
  const auto path = (tmp.path / "t.pgm").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "P5\n2 2\n255\n";
    const unsigned char bytes[4] = {0, 85, 170, 255};
    f.write(reinterpret_cast<const char*>(bytes), 4);
  }
  Tensor t = load_image(path);
  CHECK(t.shape() == std::vector<std::int64_t>{2, 2});
  CHECK(t.get(0) == 0.0);
  CHECK(std::abs(t.get(1) - 1.0 / 3.0) < 1e-6);
  CHECK(std::abs(t.get(2) - 2.0 / 3.0) < 1e-6);
  CHECK(t.get(3) == 1.0);

  // save(load(file)) reproduces the file bytes exactly.
  const auto path2 = (tmp.path / "t2.pgm").string();
  save_image(path2, t);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  // load(save(x)) equals x after quantization.
  Rng rng(101);
  Tensor img = rand_uniform({3, 5, 4}, DType::kF32, 0.0, 1.0, rng);
  const auto path3 = (tmp.path / "c.ppm").string();
  save_image(path3, img);
  Tensor back = load_image(path3);
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const double q = std::round(img.get(i) * 255.0) / 255.0;
    CHECK(std::abs(back.get(i) - q) < 1e-7);
  }
  // And a second save is bitwise identical.
  const auto path4 = (tmp.path / "c2.ppm").string();
  save_image(path4, back);
  std::ifstream g1(path3, std::ios::binary), g2(path4, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(g1)), {});
  std::string b2((std::istreambuf_iterator<char>(g2)), {});
  CHECK(b1 == b2);
}

TEST_CASE("images round-trip through the portable tensor format too") {
  TempDir tmp;
  Rng rng(103);
  Tensor img = rand_uniform({3, 6, 5}, DType::kF32, 0.0, 1.0, rng);
  const auto path = (tmp.path / "img.mutr").string();
  save_image(path, img);
  Tensor back = load_image(path);
  CHECK(back.same_bits(img));  // lossless, unlike 8-bit PNM
}

TEST_CASE("bad magic and truncated payloads are parse errors") {
  TempDir tmp;
  const auto path = (tmp.path / "bad.pgm").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "P7\n2 2\n255\n....";
  }
  CHECK_THROWS_AS(load_image(path), ParseError);
  const auto path2 = (tmp.path / "cut.pgm").string();
  {
    std::ofstream f(path2, std::ios::binary);
    f << "P5\n4 4\n255\n";
    f << "abc";  // 3 of 16 payload bytes
  }
  CHECK_THROWS_AS(load_image(path2), ParseError);
  const auto path3 = (tmp.path / "maxval.pgm").string();
  {
    std::ofstream f(path3, std::ios::binary);
    f << "P5\n1 1\n65535\n..";
  }
  CHECK_THROWS_AS(load_image(path3), ParseError);
}

TEST_CASE("dataset directory round-trip") {
  TempDir tmp;
  SynthSpec spec;
  spec.count = 4;
  spec.size = 32;
  spec.mean_diameter = 12.0;
  const auto ds = synth_generate(spec);
  const auto dir = (tmp.path / "ds").string();
  save_dataset(dir, ds);
  CHECK(fs::exists(fs::path(dir) / "index.txt"));
  const auto back = load_dataset(dir);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back[i].id == ds[i].id);
    CHECK(back[i].mask.same_bits(ds[i].mask));
    // Images round-trip through 8-bit quantization.
    for (std::int64_t e = 0; e < ds[i].image.numel(); ++e) {
      CHECK(std::abs(back[i].image.get(e) - ds[i].image.get(e)) <= 0.5 / 255.0 + 1e-7);
    }
  }
  CHECK_THROWS_AS(load_dataset((tmp.path / "nope").string()), InputError);
}

TEST_CASE("resize: identity at same size, labels stay binary, constants persist") {
  SynthSpec spec;
  spec.count = 1;
  spec.size = 48;
  spec.mean_diameter = 20.0;
  auto s = synth_generate(spec)[0];
  auto same = resize_sample(s, 48);
  CHECK(max_abs_diff(same.image, s.image) < 1e-7);
  CHECK(same.mask.same_bits(s.mask));

  auto up = resize_sample(s, 64);
  CHECK(up.image.shape() == std::vector<std::int64_t>{3, 64, 64});
  for (std::int64_t i = 0; i < up.mask.numel(); ++i) {
    const double v = up.mask.get(i);
    CHECK((v == 0.0 || v == 1.0));
  }

  SegmentationSample flat;
  flat.id = "flat";
  flat.image = Tensor::full({3, 32, 32}, DType::kF32, 0.6);
  flat.mask = Tensor::zeros({32, 32}, DType::kF32);
  auto rflat = resize_sample(flat, 80);
  for (std::int64_t i = 0; i < rflat.image.numel(); ++i) {
    CHECK(rflat.image.get(i) == doctest::Approx(0.6).epsilon(1e-6));
  }
  CHECK_THROWS_AS(resize_sample(s, 50), InputError);
}

TEST_CASE("split is exact, disjoint, exhaustive and seed-deterministic") {
  SynthSpec spec;
  spec.count = 10;
  spec.size = 32;
  spec.mean_diameter = 12.0;
  const auto ds = synth_generate(spec);
  auto [train, val] = split(ds, 0.7, 5);
  CHECK(train.size() == 7);
  CHECK(val.size() == 3);
  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : val) ids.insert(s.id);
  CHECK(ids.size() == 10);  // disjoint and exhaustive

  auto [train2, val2] = split(ds, 0.7, 5);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(train[i].id == train2[i].id);
  auto [train3, val3] = split(ds, 0.7, 6);
  bool differs = false;
  for (std::size_t i = 0; i < train.size(); ++i) {
    differs = differs || train[i].id != train3[i].id;
  }
  CHECK(differs);
  CHECK_THROWS_AS(split(ds, 1.5, 0), ConfigError);
}
