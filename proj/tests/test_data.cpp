#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>

#include "mindvis/binio.hpp"
#include "mindvis/data.hpp"
#include "mindvis/errors.hpp"

using namespace mindvis;
using namespace mindvis::data;

namespace {

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

FmriSample sample(std::vector<double> v) {
  FmriSample s;
  s.voxels = std::move(v);
  return s;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / (std::string("mindvis_") + name)).string();
}

}  // namespace

TEST_CASE("wrap_pad") {
  CHECK(wrap_pad({1, 2, 3}, 5) == std::vector<double>{1, 2, 3, 1, 2});
  CHECK(wrap_pad({7}, 3) == std::vector<double>{7, 7, 7});
  const std::vector<double> x{4, 5, 6, 7};
  CHECK(wrap_pad(x, 4) == x);
  CHECK_THROWS_AS(wrap_pad(x, 3), InvalidArgument);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(1, 20)));
    for (double& e : v) e = rng.normal();
    const auto padded = wrap_pad(v, v.size() + static_cast<std::size_t>(rng.uniform_int(0, 40)));
    CHECK(std::vector<double>(padded.begin(), padded.begin() + static_cast<long>(v.size())) == v);
  }
}

TEST_CASE("pad_to_patch_boundary") {
  CHECK(pad_to_patch_boundary(std::vector<double>(10, 1.0), 4).size() == 12);
  CHECK(pad_to_patch_boundary(std::vector<double>(12, 1.0), 4).size() == 12);
  CHECK(pad_to_patch_boundary(std::vector<double>(4500, 1.0), 16).size() == 4512);
  std::vector<double> v{1, 2, 3, 4, 5};
  CHECK(pad_to_patch_boundary(v, 4) == std::vector<double>{1, 2, 3, 4, 5, 1, 2, 3});
  CHECK_THROWS_AS(pad_to_patch_boundary(v, 0), InvalidArgument);
}

TEST_CASE("normalisation") {
  const NormStats s = fit_norm_stats({sample({0, 2}), sample({2, 0})});
  CHECK(s.mean == doctest::Approx(1.0));
  CHECK(s.std == doctest::Approx(1.0));
  CHECK(apply_norm(sample({0, 2}), s).voxels == std::vector<double>{-1, 1});
  CHECK(apply_norm(sample({2, 0}), s).voxels == std::vector<double>{1, -1});

  CHECK_THROWS_AS(fit_norm_stats({sample({3, 3}), sample({3, 3})}), InvalidArgument);
  CHECK_THROWS_AS(fit_norm_stats({sample({3, 1})}), InvalidArgument);

  Rng rng(11);
  std::vector<FmriSample> train;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(20, 40)));
    for (double& e : v) e = 3.0 + 2.5 * rng.normal();
    train.push_back(sample(v));
  }
  const NormStats st = fit_norm_stats(train);
  std::vector<FmriSample> normed;
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& t : train) {
    normed.push_back(apply_norm(t, st));
    for (double v : normed.back().voxels) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / n;
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) < 1e-6);

  const NormStats again = fit_norm_stats(normed);
  CHECK(std::abs(again.mean) < 1e-6);
  CHECK(std::abs(again.std - 1.0) < 1e-6);
  for (const auto& x : normed) {
    const auto y = apply_norm(x, again);
    for (std::size_t i = 0; i < x.voxels.size(); ++i) CHECK(std::abs(y.voxels[i] - x.voxels[i]) < 1e-6);
  }
}

TEST_CASE("random_sparsify zeroes an exact count of distinct positions") {
  Rng rng(5);
  std::vector<double> ones(10, 1.0);
  const auto out = random_sparsify(ones, 0.2, rng);
  CHECK(std::count(out.begin(), out.end(), 0.0) == 2);
  CHECK(random_sparsify(ones, 0.0, rng) == ones);
  CHECK_THROWS_AS(random_sparsify(ones, 1.0, rng), InvalidArgument);
  CHECK_THROWS_AS(random_sparsify(ones, -0.1, rng), InvalidArgument);

  for (int len : {1, 3, 7, 10, 33, 100, 257}) {
    for (double f : {0.0, 0.05, 0.1, 0.2, 0.29, 0.5, 0.75, 0.99}) {
      std::vector<double> v(static_cast<std::size_t>(len));
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + static_cast<double>(i);
      const auto s = random_sparsify(v, f, rng);
      // Independent count: integer arithmetic on hundredths.
      const long expected = std::lround(f * 100) * len / 100;
      CHECK(std::count(s.begin(), s.end(), 0.0) == expected);
      for (std::size_t i = 0; i < v.size(); ++i) CHECK((s[i] == 0.0 || s[i] == v[i]));
    }
  }

  std::vector<int> hits(100, 0);
  std::vector<double> v(100, 1.0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    const auto s = random_sparsify(v, 0.2, rng);
    for (int i = 0; i < 100; ++i) hits[static_cast<std::size_t>(i)] += s[static_cast<std::size_t>(i)] == 0.0;
  }
  for (int h : hits) CHECK(std::abs(static_cast<double>(h) / draws - 0.2) <= 0.02);
}

TEST_CASE("random crop") {
  Image img = render_class(3, 32);
  Rng rng(1);
  CHECK(random_crop_image(img, 0.0, rng) == img);
  for (int i = 0; i < 500; ++i) {
    const CropWindow w = sample_crop_window(32, 32, 0.2, rng);
    CHECK(w.height >= 26);
    CHECK(w.height <= 32);
    CHECK(w.width >= 26);
    CHECK(w.width <= 32);
    CHECK(w.y0 >= 0);
    CHECK(w.x0 >= 0);
    CHECK(w.y0 + w.height <= 32);
    CHECK(w.x0 + w.width <= 32);
  }
  Rng a(9), b(9);
  const Image ca = random_crop_image(img, 0.2, a);
  CHECK(ca == random_crop_image(img, 0.2, b));
  CHECK(ca.height == 32);
  CHECK(ca.width == 32);
  for (double p : ca.pixels) CHECK((p >= 0.0 && p <= 1.0));
  CHECK_THROWS_AS(random_crop_image(img, 1.0, a), InvalidArgument);
}

TEST_CASE("synthetic generator") {
  SynthSpec spec;
  spec.class_count = 10;
  spec.samples_per_class = 20;
  spec.voxel_count = 256;
  spec.image_size = 32;
  spec.snr = 4;
  spec.seed = 1;
  const auto a = generate_synthetic_dataset(spec);
  CHECK(a == generate_synthetic_dataset(spec));
  CHECK(a.train.size() + a.test.size() == 200);
  CHECK(a.test.size() == 40);

  SUBCASE("class means correlate with templates") {
    const auto templates = class_templates(spec);
    for (int c = 0; c < 10; ++c) {
      std::vector<double> m(256, 0.0);
      int n = 0;
      for (const auto* split : {&a.train, &a.test})
        for (const auto& p : *split)
          if (p.class_id == c) {
            for (std::size_t i = 0; i < m.size(); ++i) m[i] += p.fmri.voxels[i];
            ++n;
          }
      for (double& v : m) v /= n;
      CHECK(corr(m, templates[static_cast<std::size_t>(c)]) > 0.9);
    }
  }

  SUBCASE("infinite snr removes the noise") {
    SynthSpec s = spec;
    s.snr = std::numeric_limits<double>::infinity();
    const auto d = generate_synthetic_dataset(s);
    CHECK(d.train[0].fmri.voxels == d.train[1].fmri.voxels);
  }

  SUBCASE("images are distinct per class and in range") {
    std::set<std::vector<double>> seen;
    for (int c = 0; c < kMaxRenderableClasses; ++c) {
      const Image im = render_class(c, 32);
      for (double p : im.pixels) CHECK((p >= 0.0 && p <= 1.0));
      seen.insert(im.pixels);
    }
    CHECK(seen.size() == static_cast<std::size_t>(kMaxRenderableClasses));
  }

  SUBCASE("invalid specs") {
    SynthSpec s = spec;
    s.class_count = kMaxRenderableClasses + 1;
    CHECK_THROWS_AS(generate_synthetic_dataset(s), InvalidArgument);
    s = spec;
    s.snr = 0;
    CHECK_THROWS_AS(generate_synthetic_dataset(s), InvalidArgument);
    s = spec;
    s.samples_per_class = 0;
    CHECK_THROWS_AS(generate_synthetic_dataset(s), InvalidArgument);
  }
}

TEST_CASE("class separability at snr 2") {
  SynthSpec spec;
  spec.snr = 2;
  spec.seed = 4;
  const auto templates = class_templates(spec);
  std::vector<double> inter;
  for (std::size_t i = 0; i < templates.size(); ++i)
    for (std::size_t j = i + 1; j < templates.size(); ++j) inter.push_back(corr(templates[i], templates[j]));
  const auto d = generate_synthetic_dataset(spec);
  std::vector<double> intra;
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t j = i + 1; j < d.train.size(); ++j)
      if (d.train[i].class_id == d.train[j].class_id) intra.push_back(corr(d.train[i].fmri.voxels, d.train[j].fmri.voxels));
  auto mean_sd = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / (v.size() - 1))};
  };
  const auto [mi, si] = mean_sd(inter);
  const auto [ma, sa] = mean_sd(intra);
  const double se = std::sqrt(si * si / inter.size() + sa * sa / intra.size());
  CHECK(ma - mi > 3.0 * se);
}

TEST_CASE("unpaired corpus and prepared signals") {
  SynthSpec spec;
  spec.class_count = 4;
  spec.samples_per_class = 10;
  spec.voxel_count = 100;
  spec.unpaired_per_class = 6;
  spec.unpaired_subjects = 3;
  const auto d = generate_synthetic_dataset(spec);
  CHECK(d.unpaired.size() == 24);
  std::set<std::size_t> lengths;
  for (const auto& s : d.unpaired) lengths.insert(s.voxels.size());
  CHECK(lengths == std::set<std::size_t>{80, 90, 100});

  const auto wrap = prepare_signals(d, 16, PadStrategy::Wrap);
  CHECK(wrap.length == 112);
  CHECK(wrap.primary_patch.size() == 7);
  for (const auto* g : {&wrap.train, &wrap.test, &wrap.unpaired})
    for (const auto& v : *g) CHECK(v.size() == 112);
  const auto& raw = d.unpaired[2].voxels;
  REQUIRE(raw.size() == 80);
  const auto& prepped = wrap.unpaired[2];
  for (std::size_t i = 0; i < 112; ++i) {
    CHECK(prepped[i] == doctest::Approx((raw[i % 80] - d.norm_stats.mean) / d.norm_stats.std));
  }
  const auto cut = prepare_signals(d, 16, PadStrategy::Cut);
  CHECK(cut.length == 80);
  const auto cons = prepare_signals(d, 16, PadStrategy::Constant);
  CHECK(cons.length == 112);
  CHECK(cons.unpaired[2][100] == 0.0);
  // 40% of 100 voxels: patches 0 and 1 fully inside, patch 2 has 8 of 16.
  CHECK(wrap.primary_patch == std::vector<int>{1, 1, 0, 0, 0, 0, 0});
}

TEST_CASE("dataset file round trip and errors") {
  SynthSpec spec;
  spec.class_count = 3;
  spec.samples_per_class = 5;
  spec.voxel_count = 40;
  spec.image_size = 8;
  spec.unpaired_per_class = 2;
  spec.unpaired_subjects = 2;
  const auto d = generate_synthetic_dataset(spec);
  const std::string path = temp_path("roundtrip.mvds");
  save_dataset(d, path);
  CHECK(load_dataset(path) == d);

  auto bytes = encode_dataset(d);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_dataset(bad), FormatError);
  auto ver = bytes;
  ver[4] = 99;
  CHECK_THROWS_AS(decode_dataset(ver), VersionError);
  CHECK_THROWS_AS(decode_dataset({}), TruncatedError);
  auto cut = bytes;
  cut.resize(bytes.size() - 7);
  CHECK_THROWS_AS(decode_dataset(cut), TruncatedError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_dataset(extra), FormatError);

  const std::string empty = temp_path("empty.mvds");
  binio::write_file(empty, {});
  CHECK_THROWS_AS(load_dataset(empty), TruncatedError);
  CHECK_THROWS_AS(load_dataset(temp_path("does_not_exist.mvds")), MissingArtifact);
  std::remove(path.c_str());
  std::remove(empty.c_str());
}
