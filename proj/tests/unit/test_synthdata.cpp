#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <set>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "icam/errors.hpp"
#include "icam/synthdata.hpp"
#include "icam/tensor_io.hpp"
#include "icam/util.hpp"

using namespace icam;
using namespace icam::synth;

namespace {

ContentFactors lower_bound_content(const PhantomConfig& cfg) {
  ContentFactors c;
  c.semi_axis_major = cfg.min_semi_axis();
  c.semi_axis_minor = cfg.min_semi_axis();
  c.rotation = 0.0;
  c.base_intensity = 0.5;
  c.texture_seed = 99;
  return c;
}

// Sizes of the 8-connected components of a mask.
std::vector<int> component_sizes(const Mask& m) {
  std::vector<std::uint8_t> seen(m.data.size(), 0);
  std::vector<int> sizes;
  for (std::int64_t r = 0; r < m.height; ++r) {
    for (std::int64_t c = 0; c < m.width; ++c) {
      if (!m.at(r, c) || seen[static_cast<std::size_t>(r * m.width + c)]) continue;
      int size = 0;
      std::queue<std::pair<std::int64_t, std::int64_t>> q;
      q.emplace(r, c);
      seen[static_cast<std::size_t>(r * m.width + c)] = 1;
      while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop();
        ++size;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const auto ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
            const auto k = static_cast<std::size_t>(ny * m.width + nx);
            if (m.at(ny, nx) && !seen[k]) {
              seen[k] = 1;
              q.emplace(ny, nx);
            }
          }
        }
      }
      sizes.push_back(size);
    }
  }
  return sizes;
}

// Independent rasterisation of the inner ellipse at scale s.
Mask ellipse_mask(const ContentFactors& c, double s, const PhantomConfig& cfg) {
  Mask m(cfg.height, cfg.width);
  const double a = c.semi_axis_major * s, b = c.semi_axis_minor * s;
  for (std::int64_t r = 0; r < cfg.height; ++r) {
    for (std::int64_t col = 0; col < cfg.width; ++col) {
      const double dx = col + 0.5 - cfg.width / 2.0, dy = r + 0.5 - cfg.height / 2.0;
      const double u = dx * std::cos(c.rotation) + dy * std::sin(c.rotation);
      const double v = -dx * std::sin(c.rotation) + dy * std::cos(c.rotation);
      m.at(r, col) = u * u / (a * a) + v * v / (b * b) <= 1.0;
    }
  }
  return m;
}

int dark_pixels(const Image& img, const Mask& region) {
  int n = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i) n += region.data[i] && img.data[i] < 0.2f;
  return n;
}

// Band width measured along the positive major axis of an unrotated phantom.
int band_width_on_axis(const Image& img, const ContentFactors& c, const PhantomConfig& cfg) {
  const std::int64_t row = cfg.height / 2;
  const float threshold = static_cast<float>(c.base_intensity + 0.5 * cfg.cortex_contrast);
  int n = 0;
  for (std::int64_t col = cfg.width / 2; col < cfg.width; ++col) n += img.at(row, col) > threshold;
  return n;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("render is deterministic in (content, t)") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(1);
    const auto c = sample_content(rng, cfg);
    CHECK(render_phantom(c, 0.0, cfg) == render_phantom(c, 0.0, cfg));
  }

  TEST_CASE("phenotype outside [0,1] is a domain error") {
    const ContentFactors c = lower_bound_content(PhantomConfig{});
    CHECK_THROWS_AS(render_phantom(c, -0.01), DomainError);
    CHECK_THROWS_AS(render_phantom(c, 1.01), DomainError);
    CHECK_THROWS_AS(render_phantom(c, std::nan("")), DomainError);
    CHECK_THROWS_AS(make_pair_with_gt(c, 0.5, 2.0), DomainError);
  }

  TEST_CASE("older phantoms have more ventricle pixels") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(3);
    for (int k = 0; k < 10; ++k) {
      const auto c = sample_content(rng, cfg);
      const auto inner = ellipse_mask(c, cfg.ventricle_scale_old, cfg);
      CHECK(dark_pixels(render_phantom(c, 0.9, cfg), inner) > dark_pixels(render_phantom(c, 0.1, cfg), inner));
    }
  }

  TEST_CASE("band thickness at t = 0.5 with axes at the lower bound") {
    const PhantomConfig cfg;
    const auto c = lower_bound_content(cfg);
    const int width = band_width_on_axis(render_phantom(c, 0.5, cfg), c, cfg);
    CHECK(std::abs(width - cfg.band_thickness_mid()) <= 1.0);
  }

  TEST_CASE("ventricle area non-decreasing and band thickness non-increasing in t") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(5);
    for (int k = 0; k < 50; ++k) {
      auto c = sample_content(rng, cfg);
      int prev_vent = -1;
      double prev_band = 1e9;
      for (int i = 0; i <= 10; ++i) {
        const auto reg = render_regions(c, i / 10.0, cfg);
        const int vent = std::accumulate(reg.ventricle.data.begin(), reg.ventricle.data.end(), 0);
        CHECK(vent >= prev_vent);
        prev_vent = vent;
        const double band = cfg.band_thickness(i / 10.0);
        CHECK(band <= prev_band);
        prev_band = band;
      }
      // Measured on the image as well, for the unrotated variant.
      c.rotation = 0.0;
      int prev_width = 1 << 30;
      for (int i = 0; i <= 10; ++i) {
        const int w = band_width_on_axis(render_phantom(c, i / 10.0, cfg), c, cfg);
        CHECK(w <= prev_width);
        prev_width = w;
      }
    }
  }

  TEST_CASE("speckle is fixed by the texture seed") {
    const PhantomConfig cfg;
    auto c = lower_bound_content(cfg);
    const auto a = render_phantom(c, 0.3, cfg);
    c.texture_seed = 100;
    CHECK_FALSE(render_phantom(c, 0.3, cfg) == a);
    // White matter pixels common to both t values keep their speckle.
    const auto b = render_phantom(lower_bound_content(cfg), 0.6, cfg);
    const auto ra = render_regions(lower_bound_content(cfg), 0.3, cfg);
    const auto rb = render_regions(lower_bound_content(cfg), 0.6, cfg);
    int shared = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      if (ra.tissue.data[i] && !ra.band.data[i] && !ra.ventricle.data[i] && !rb.band.data[i] && !rb.ventricle.data[i]) {
        CHECK(a.data[i] == b.data[i]);
        ++shared;
      }
    }
    CHECK(shared > 100);
  }

  TEST_CASE("content sampling respects the factor ranges") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(8);
    for (int k = 0; k < 200; ++k) {
      const auto c = sample_content(rng, cfg);
      CHECK_NOTHROW(validate_content(c, cfg));
      CHECK(c.semi_axis_major >= 16.0);
      CHECK(c.semi_axis_major <= 64.0 / 2.5);
    }
    ContentFactors bad = lower_bound_content(cfg);
    bad.rotation = 1.0;
    CHECK_THROWS_AS(validate_content(bad, cfg), DomainError);
  }

  TEST_CASE("zero lesions leave the image unchanged") {
    const PhantomConfig cfg;
    const auto c = lower_bound_content(cfg);
    const auto img = render_phantom(c, 0.7, cfg);
    const auto tissue = render_regions(c, 0.7, cfg).tissue;
    const auto out = add_punctate_lesions(img, tissue, 0, 2.0, 1);
    CHECK(out.image == img);
    CHECK(std::accumulate(out.lesion_mask.data.begin(), out.lesion_mask.data.end(), 0) == 0);
  }

  TEST_CASE("three lesions of radius 2 form three components of 9 to 16 pixels") {
    const PhantomConfig cfg;
    const auto c = lower_bound_content(cfg);
    const auto img = render_phantom(c, 0.7, cfg);
    const auto tissue = render_regions(c, 0.7, cfg).tissue;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto out = add_punctate_lesions(img, tissue, 3, 2.0, seed);
      const auto sizes = component_sizes(out.lesion_mask);
      REQUIRE(sizes.size() == 3);
      for (int s : sizes) {
        CHECK(s >= 9);
        CHECK(s <= 16);
      }
      for (std::size_t i = 0; i < img.data.size(); ++i) {
        if (out.lesion_mask.data[i]) {
          CHECK(tissue.data[i]);
          CHECK(out.image.data[i] == doctest::Approx(0.95));
        } else {
          CHECK(out.image.data[i] == img.data[i]);
        }
      }
    }
  }

  TEST_CASE("impossible lesion counts raise a placement error") {
    Image img(64, 64, 0.5f);
    Mask tissue(64, 64, 1);
    CHECK_THROWS_AS(add_punctate_lesions(img, tissue, 10000, 2.0, 0), PlacementError);
    CHECK_THROWS_AS(add_punctate_lesions(img, tissue, -1, 2.0, 0), ContractError);
    CHECK_THROWS_AS(add_punctate_lesions(img, tissue, 1, 0.5, 0), ContractError);
  }

  TEST_CASE("gt_diff is the exact pixelwise difference of the two renderings") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(13);
    const auto c = sample_content(rng, cfg);
    const auto same = make_pair_with_gt(c, 0.4, 0.4, cfg);
    CHECK(std::all_of(same.gt_diff.data.begin(), same.gt_diff.data.end(), [](float v) { return v == 0.0f; }));

    const auto s = make_pair_with_gt(c, 0.2, 0.8, cfg);
    const auto src = render_phantom(c, 0.2, cfg), ref = render_phantom(c, 0.8, cfg);
    const auto reg = render_regions(c, 0.2, cfg);
    double total = 0.0, inside = 0.0, band_sum = 0.0;
    int band_n = 0;
    for (std::size_t i = 0; i < src.data.size(); ++i) {
      CHECK(s.gt_diff.data[i] == ref.data[i] - src.data[i]);
      if (!s.tissue_mask.data[i]) CHECK(s.gt_diff.data[i] == 0.0f);
      const double a = std::abs(s.gt_diff.data[i]);
      total += a;
      if (reg.band_envelope.data[i] || reg.ventricle_envelope.data[i]) inside += a;
      if (reg.band.data[i]) {
        band_sum += s.gt_diff.data[i];
        ++band_n;
      }
    }
    CHECK(total > 0.0);
    CHECK(inside >= 0.9 * total);
    CHECK(band_sum / band_n < 0.0);
  }

  TEST_CASE("gt_diff is antisymmetric in its phenotypes") {
    const PhantomConfig cfg;
    std::mt19937_64 rng(21);
    for (int k = 0; k < 20; ++k) {
      const auto c = sample_content(rng, cfg);
      const auto a = make_pair_with_gt(c, 0.15, 0.85, cfg), b = make_pair_with_gt(c, 0.85, 0.15, cfg);
      for (std::size_t i = 0; i < a.gt_diff.data.size(); ++i) CHECK(a.gt_diff.data[i] == -b.gt_diff.data[i]);
    }
  }

  TEST_CASE("generated samples satisfy the record invariants") {
    auto cfg = testing::small_dataset(200);
    cfg.lesion_probability = 1.0;
    for (std::int64_t i = 0; i < cfg.n_samples; ++i) {
      const auto s = generate_sample(cfg, 4, i);
      CHECK(s.class_label == (s.phenotype > 0.5 ? 1 : 0));
      for (std::size_t p = 0; p < s.image.data.size(); ++p) {
        CHECK(s.image.data[p] >= 0.0f);
        CHECK(s.image.data[p] <= 1.0f);
        if (!s.tissue_mask.data[p]) CHECK(s.gt_diff.data[p] == 0.0f);
        if (s.lesion_mask.data[p]) CHECK(s.tissue_mask.data[p]);
      }
      if (s.class_label == 0) CHECK(std::accumulate(s.lesion_mask.data.begin(), s.lesion_mask.data.end(), 0) == 0);
    }
  }

  TEST_CASE("phenotype histogram stays within 3 sigma of uniform") {
    auto cfg = testing::small_dataset(10000);
    std::array<int, 10> bins{};
    for (std::int64_t i = 0; i < cfg.n_samples; ++i) {
      const double t = generate_sample(cfg, 77, i).phenotype;
      ++bins[static_cast<std::size_t>(std::min(9, static_cast<int>(t * 10.0)))];
    }
    const double sigma = std::sqrt(10000 * 0.1 * 0.9);
    for (int b : bins) CHECK(std::abs(b - 1000) <= 3.0 * sigma);
  }

  TEST_CASE("same seed gives byte-identical datasets") {
    testing::TempDir dir;
    auto cfg = testing::small_dataset(100);
    const auto a = generate_dataset(cfg, 7, dir / "a");
    cfg.threads = 3;
    const auto b = generate_dataset(cfg, 7, dir / "b");
    CHECK(directory_hash(dir / "a") == directory_hash(dir / "b"));
    const auto c = generate_dataset(cfg, 8, dir / "c");
    CHECK(directory_hash(dir / "a") != directory_hash(dir / "c"));
    CHECK(a.generator_config_hash == b.generator_config_hash);
  }

  TEST_CASE("split sizes follow the fractions and the manifest round-trips") {
    testing::TempDir dir;
    auto cfg = testing::small_dataset(1000);
    cfg.threads = 2;
    const auto m = generate_dataset(cfg, 1, dir.path());
    CHECK(m.count(Split::train) == 800);
    CHECK(m.count(Split::val) == 100);
    CHECK(m.count(Split::test) == 100);
    const auto back = read_manifest(dir.path());
    REQUIRE(back.records.size() == 1000);
    std::set<std::string> ids;
    int ones = 0;
    for (std::size_t i = 0; i < back.records.size(); ++i) {
      const auto& r = back.records[i];
      ids.insert(r.id);
      ones += r.class_label;
      CHECK(r.split == m.records[i].split);
      CHECK(std::filesystem::exists(dir.path() / r.image_path));
      CHECK(std::filesystem::exists(dir.path() / r.mask_path));
      CHECK(std::filesystem::exists(dir.path() / r.gt_diff_path));
    }
    CHECK(ids.size() == 1000);
    CHECK(std::abs(ones - 500) <= 50);
    CHECK(back.generator_config_hash == m.generator_config_hash);
  }

  TEST_CASE("unwritable output directory is an I/O error") {
    testing::TempDir dir;
    std::ofstream(dir / "file") << "x";
    CHECK_THROWS_AS(generate_dataset(testing::small_dataset(4), 1, dir / "file" / "sub"), IoError);
  }

  TEST_CASE("dataset config rejects unknown keys and bad fractions") {
    nlohmann::json j = DatasetConfig{};
    CHECK(j.get<DatasetConfig>().n_samples == DatasetConfig{}.n_samples);
    j["bogus"] = 1;
    CHECK_THROWS_AS(j.get<DatasetConfig>(), ConfigError);
    DatasetConfig bad;
    bad.train_fraction = 0.9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}
