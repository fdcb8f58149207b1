#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <numeric>
#include <set>

#include "cropdoc/errors.hpp"
#include "cropdoc/hsi.hpp"
#include "cropdoc/synthetic.hpp"
#include "support.hpp"

using namespace cropdoc;

namespace {

HsiCube ramp_cube(std::size_t h, std::size_t w, std::size_t b) {
  std::vector<double> wl(b);
  for (std::size_t i = 0; i < b; ++i) wl[i] = 450.0 + 4.0 * static_cast<double>(i);
  std::vector<float> values(h * w * b);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(i % 97) / 96.0f;
  return HsiCube(h, w, wl, values);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

// Rewrites the one-line JSON header of a cube or label file.
std::string edit_header(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  const std::size_t start = bytes.find('\n') + 1;
  const std::size_t end = bytes.find('\n', start);
  auto header = nlohmann::json::parse(bytes.substr(start, end - start));
  edit(header);
  return bytes.substr(0, start) + header.dump() + bytes.substr(end);
}

}  // namespace

TEST_CASE("cube invariants") {
  CHECK_THROWS_AS(HsiCube(1, 1, {500, 400}, {0.1f, 0.2f}), ArgumentError);
  CHECK_THROWS_AS(HsiCube(1, 1, {400, 500}, {0.1f, 1.5f}), ArgumentError);
  CHECK_THROWS_AS(HsiCube(1, 2, {400, 500}, {0.1f, 0.2f}), ArgumentError);
  LabelMap labels(2, 2, {0, 1, kUnlabeled, 3});
  CHECK(labels.labeled_count() == 3);
  CHECK(labels.histogram(4) == std::vector<std::size_t>{1, 1, 0, 1});
  CHECK_THROWS_AS(labels.validate(3), ArgumentError);
}

TEST_CASE("cube and label file round trip") {
  const auto dir = testing::scratch_dir("hsi_io");
  const HsiCube cube = ramp_cube(5, 7, 6);
  write_cube(cube, dir / "c.hsic");
  CHECK(read_cube(dir / "c.hsic") == cube);

  LabelMap labels(5, 7);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 7; ++c) {
      if ((r + c) % 5) labels.set(r, c, static_cast<std::uint8_t>((r * 7 + c) % 4));
    }
  }
  write_labels(labels, dir / "l.hsil");
  CHECK(read_labels(dir / "l.hsil") == labels);
}

TEST_CASE("cube format errors") {
  const auto dir = testing::scratch_dir("hsi_io_err");
  write_cube(ramp_cube(3, 3, 4), dir / "ok.hsic");
  const std::string bytes = slurp(dir / "ok.hsic");

  spit(dir / "magic.hsic", "HSIX" + bytes.substr(4));
  CHECK_THROWS_AS(read_cube(dir / "magic.hsic"), FormatError);
  spit(dir / "trunc.hsic", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_cube(dir / "trunc.hsic"), FormatError);
  spit(dir / "header.hsic", bytes.substr(0, 12));
  CHECK_THROWS_AS(read_cube(dir / "header.hsic"), FormatError);
  spit(dir / "bands.hsic", edit_header(bytes, [](auto& h) { h["bands"] = 5; }));
  CHECK_THROWS_AS(read_cube(dir / "bands.hsic"), FormatError);
  spit(dir / "order.hsic", edit_header(bytes, [](auto& h) { h["wavelengths"] = {450.0, 460.0, 455.0, 470.0}; }));
  CHECK_THROWS_AS(read_cube(dir / "order.hsic"), FormatError);
  spit(dir / "version.hsic", edit_header(bytes, [](auto& h) { h["version"] = 7; }));
  CHECK_THROWS_AS(read_cube(dir / "version.hsic"), FormatError);
  CHECK_THROWS_AS(read_cube(dir / "absent.hsic"), FormatError);
  // A label file is not a cube.
  write_labels(LabelMap(3, 3, 0), dir / "l.hsil");
  CHECK_THROWS_AS(read_cube(dir / "l.hsil"), FormatError);
  CHECK_THROWS_AS(read_labels(dir / "ok.hsic"), FormatError);
}

TEST_CASE("mirror padding") {
  CHECK(mirror_index(-1, 5) == 1);
  CHECK(mirror_index(-2, 5) == 2);
  CHECK(mirror_index(5, 5) == 3);
  CHECK(mirror_index(6, 5) == 2);
  CHECK(mirror_index(2, 5) == 2);

  // 3x3x1 cube holding 0.1..0.9 row-major.
  std::vector<float> v(9);
  for (int i = 0; i < 9; ++i) v[i] = static_cast<float>(i + 1) / 10.0f;
  const HsiCube cube(3, 3, {500.0}, v);
  const Tensor corner = extract_patch(cube, 0, 0, 3);
  // Rows and columns {-1, 0, 1} reflect to {1, 0, 1}.
  const std::vector<float> expect{0.5f, 0.4f, 0.5f, 0.2f, 0.1f, 0.2f, 0.5f, 0.4f, 0.5f};
  for (std::size_t i = 0; i < 9; ++i) CHECK(corner[i] == static_cast<double>(expect[i]));
  const Tensor far = extract_patch(cube, 2, 2, 3);
  const std::vector<float> expect_far{0.5f, 0.6f, 0.5f, 0.8f, 0.9f, 0.8f, 0.5f, 0.6f, 0.5f};
  for (std::size_t i = 0; i < 9; ++i) CHECK(far[i] == static_cast<double>(expect_far[i]));
}

TEST_CASE("patch extraction") {
  const HsiCube cube = ramp_cube(5, 5, 3);
  const LabelMap all(5, 5, kSoil);
  const auto patches = extract_patches(cube, all, 3);
  CHECK(patches.size() == 25);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    CHECK(patches[i].row == i / 5);
    CHECK(patches[i].col == i % 5);
    CHECK(patches[i].data.shape() == Shape{3, 3, 3});
    for (std::size_t b = 0; b < 3; ++b) {
      CHECK(patches[i].data[(1 * 3 + 1) * 3 + b] == static_cast<double>(cube.at(i / 5, i % 5, b)));
    }
  }
  CHECK_THROWS_AS(extract_patches(cube, all, 4), ConfigError);
  CHECK_THROWS_AS(extract_patches(cube, all, 7), DimensionError);
  CHECK_THROWS_AS(extract_patches(cube, LabelMap(4, 5, 0), 3), DimensionError);

  // Sparse labels: one patch per labeled pixel, center label reproduces the map.
  Rng rng(4);
  LabelMap sparse(5, 5);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      if (rng.uniform() < 0.6) sparse.set(r, c, static_cast<std::uint8_t>(rng.below(4)));
    }
  }
  const auto some = extract_patches(cube, sparse, 5);
  CHECK(some.size() == sparse.labeled_count());
  LabelMap rebuilt(5, 5);
  for (const Patch& p : some) rebuilt.set(p.row, p.col, static_cast<std::uint8_t>(p.label));
  CHECK(rebuilt == sparse);

  const auto samples = labeled_samples(sparse);
  const Tensor batch = assemble_batch(cube, samples, 5);
  CHECK(batch.dim(0) == samples.size());
  for (std::size_t n = 0; n < samples.size(); ++n) {
    CHECK(std::equal(some[n].data.data().begin(), some[n].data.data().end(),
                     batch.data().begin() + static_cast<std::ptrdiff_t>(n * 75)));
  }
}

TEST_CASE("rotate90") {
  Tensor p({1, 3, 3, 1});
  std::iota(p.data().begin(), p.data().end(), 0.0);
  const Tensor r = rotate90(p);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{2, 5, 8, 1, 4, 7, 0, 3, 6});
  Rng rng(9);
  const Tensor x = testing::random_tensor({2, 5, 5, 3}, rng);
  CHECK(rotate90(rotate90(rotate90(rotate90(x)))).data()[17] == x.data()[17]);
  const Tensor back = rotate90(rotate90(rotate90(rotate90(x))));
  CHECK(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
  CHECK_THROWS_AS(rotate90(Tensor({3, 4, 2})), DimensionError);
}

TEST_CASE("split_dataset") {
  SUBCASE("1000 items into five folds of 200") {
    std::vector<std::size_t> labels(1000);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 4;
    const auto folds = split_dataset(labels, SplitScheme::kfold(5), 11);
    REQUIRE(folds.size() == 5);
    std::set<std::size_t> seen;
    for (const auto& f : folds) {
      CHECK(f.size() == 200);
      for (std::size_t i : f) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == 1000);
    CHECK(split_dataset(labels, SplitScheme::kfold(5), 11) == folds);
    CHECK(split_dataset(labels, SplitScheme::kfold(5), 12) != folds);
  }
  SUBCASE("stratified to within one item on a 4-class set of 40") {
    // Unequal classes: 16, 12, 8, 4.
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < 4; ++c) labels.insert(labels.end(), 16 - 4 * c, c);
    const auto folds = split_dataset(labels, SplitScheme::kfold(5), 3);
    for (const auto& f : folds) {
      std::vector<double> count(4, 0.0);
      for (std::size_t i : f) count[labels[i]] += 1.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double expected = (16.0 - 4.0 * static_cast<double>(c)) / 5.0;
        CHECK(std::abs(count[c] - expected) <= 1.0);
      }
    }
  }
  SUBCASE("holdout") {
    std::vector<std::size_t> labels(100);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 60 ? 0 : 1;
    const auto parts = split_dataset(labels, SplitScheme::holdout(0.25), 5);
    REQUIRE(parts.size() == 2);
    CHECK(parts[1].size() == 25);  // 15 + 10
    CHECK(parts[0].size() + parts[1].size() == 100);
    std::size_t held0 = 0;
    for (std::size_t i : parts[1]) held0 += labels[i] == 0;
    CHECK(held0 == 15);
  }
  SUBCASE("errors") {
    const std::vector<std::size_t> few{0, 1, 2};
    CHECK_THROWS_AS(split_dataset(few, SplitScheme::kfold(5), 1), ArgumentError);
    CHECK_THROWS_AS(split_dataset(few, SplitScheme::kfold(1), 1), ArgumentError);
    CHECK_THROWS_AS(split_dataset(few, SplitScheme::holdout(1.0), 1), ArgumentError);
    CHECK_THROWS_AS(split_dataset(few, SplitScheme::holdout(0.0), 1), ArgumentError);
  }
}

TEST_CASE("synthetic scenes") {
  SyntheticSceneSpec spec;
  spec.height = 32;
  spec.width = 40;
  spec.bands = 20;

  SUBCASE("noise-free pixels equal their prototype") {
    spec.sigma = 0.0;
    const Scene s = generate_scene(spec, 5);
    const auto protos = default_prototypes(spec.wavelengths());
    for (std::size_t r = 0; r < spec.height; ++r) {
      for (std::size_t c = 0; c < spec.width; ++c) {
        const auto px = s.cube.pixel(r, c);
        const auto& proto = protos[s.labels.at(r, c)];
        for (std::size_t b = 0; b < spec.bands; ++b) CHECK(px[b] == static_cast<float>(proto[b]));
      }
    }
  }
  SUBCASE("nearest prototype separates noise-free scenes") {
    spec.sigma = 0.0;
    const Scene s = generate_scene(spec, 6);
    const auto protos = default_prototypes(spec.wavelengths());
    std::size_t correct = 0;
    for (std::size_t r = 0; r < spec.height; ++r) {
      for (std::size_t c = 0; c < spec.width; ++c) {
        const auto px = s.cube.pixel(r, c);
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t k = 0; k < protos.size(); ++k) {
          double dist = 0;
          for (std::size_t b = 0; b < spec.bands; ++b) dist += (px[b] - protos[k][b]) * (px[b] - protos[k][b]);
          if (dist < best_d) best_d = dist, best = k;
        }
        correct += best == s.labels.at(r, c);
      }
    }
    CHECK(correct == spec.height * spec.width);
  }
  SUBCASE("deterministic in the seed") {
    const Scene a = generate_scene(spec, 77), b = generate_scene(spec, 77), c = generate_scene(spec, 78);
    CHECK(a.cube == b.cube);
    CHECK(a.labels == b.labels);
    CHECK_FALSE(a.cube == c.cube);
    for (float v : a.cube.reflectance()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  SUBCASE("bad prototypes and specs") {
    spec.prototypes = default_prototypes(spec.wavelengths());
    spec.prototypes[2][3] = 1.2;
    CHECK_THROWS_AS(generate_scene(spec, 1), ConfigError);
    spec.prototypes.pop_back();
    CHECK_THROWS_AS(generate_scene(spec, 1), ConfigError);
    SyntheticSceneSpec neg;
    neg.sigma = -0.1;
    CHECK_THROWS_AS(neg.validate(), ConfigError);
    SyntheticSceneSpec frac;
    frac.crop_fraction = 1.5;
    CHECK_THROWS_AS(frac.validate(), ConfigError);
  }
}

TEST_CASE("synthetic class histogram matches the layout expectation") {
  SyntheticSceneSpec spec;
  spec.height = spec.width = 256;
  spec.bands = 4;
  spec.wavelength_min = 500;
  spec.wavelength_max = 800;
  const auto expected = expected_class_fractions(spec);
  CHECK(std::accumulate(expected.begin(), expected.end(), 0.0) == doctest::Approx(1.0));
  std::vector<double> mean(4, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto hist = generate_scene(spec, 1000 + seed).labels.histogram(4);
    for (std::size_t c = 0; c < 4; ++c) mean[c] += static_cast<double>(hist[c]) / (256.0 * 256.0) / 20.0;
  }
  for (std::size_t c = 0; c < 4; ++c) {
    INFO("class " << c << " observed " << mean[c] << " expected " << expected[c]);
    CHECK(std::abs(mean[c] - expected[c]) <= 0.1 * expected[c]);
  }
}

TEST_CASE("normal quantile and fields") {
  CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963985).epsilon(1e-8));
  CHECK(normal_quantile(0.025) == doctest::Approx(-1.959963985).epsilon(1e-8));
  const auto f = gaussian_field(128, 128, 3.0, 1);
  double m = 0, v = 0;
  for (double x : f) m += x;
  m /= static_cast<double>(f.size());
  for (double x : f) v += (x - m) * (x - m);
  v /= static_cast<double>(f.size());
  CHECK(std::abs(m) < 0.2);
  CHECK(std::abs(v - 1.0) < 0.25);
  CHECK(gaussian_field(16, 16, 3.0, 1) == gaussian_field(16, 16, 3.0, 1));
}

TEST_CASE("scene spec from key-values") {
  const KeyValues kv = KeyValues::parse("height = 12\nwidth=10\nbands=6\nsigma=0\n");
  const SyntheticSceneSpec spec = read_scene_spec(kv);
  CHECK(spec.height == 12);
  CHECK(spec.width == 10);
  CHECK(spec.bands == 6);
  CHECK(spec.sigma == 0.0);
  const auto wl = spec.wavelengths();
  CHECK(wl.front() == 450.0);
  CHECK(wl.back() == 950.0);
}
