#include "mindvis/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mindvis/binio.hpp"
#include "mindvis/errors.hpp"

namespace mindvis::data {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

// Kept out of line: GCC 11 at -O3 folds the float round trip away.
[[gnu::noinline]] double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// floor(ratio * n) with slack for products like 0.29 * 100 = 28.999999...
std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s), q = v * (1.0 - f * s), t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

bool inside_shape(int shape, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0: return r < 0.6;
    case 1: return std::max(std::abs(u), std::abs(v)) < 0.5;
    case 2: return v <= 0.5 && v >= -0.6 && std::abs(u) <= 0.6 * (v + 0.6) / 1.1;
    case 3: return std::abs(u) + std::abs(v) < 0.65;
    case 4: return (std::abs(u) < 0.2 && std::abs(v) < 0.65) || (std::abs(v) < 0.2 && std::abs(u) < 0.65);
    case 5: return r > 0.35 && r < 0.65;
    case 6: return std::abs(v) < 0.22 && std::abs(u) < 0.75;
    default: return std::abs(u) < 0.22 && std::abs(v) < 0.75;
  }
}

std::vector<double> normalize_values(const std::vector<double>& v, const NormStats& s) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - s.mean) / s.std;
  return out;
}

void put_sample(binio::Writer& w, const FmriSample& s, const Image* image) {
  w.put<std::uint32_t>(s.subject_id);
  w.put<std::int32_t>(s.class_id.value_or(-1));
  w.put<std::int32_t>(s.image_id.value_or(-1));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.voxels.size()));
  for (double v : s.voxels) w.put<float>(static_cast<float>(v));
  w.put<std::uint8_t>(image ? 1 : 0);
  if (image) {
    for (double v : image->pixels) w.put<float>(static_cast<float>(v));
  }
}

FmriSample get_sample(binio::Reader& r, int image_size, std::optional<Image>& image) {
  FmriSample s;
  s.subject_id = r.get<std::uint32_t>();
  const auto cls = r.get<std::int32_t>();
  const auto img = r.get<std::int32_t>();
  if (cls >= 0) s.class_id = cls;
  if (img >= 0) s.image_id = img;
  const auto n = r.get<std::uint32_t>();
  if (n == 0) throw FormatError("dataset record with zero voxels");
  if (static_cast<std::size_t>(n) * 4 > r.remaining()) throw TruncatedError("dataset: voxel array runs past end of file");
  s.voxels.resize(n);
  for (auto& v : s.voxels) v = static_cast<double>(r.get<float>());
  const auto has_image = r.get<std::uint8_t>();
  if (has_image > 1) throw FormatError("dataset: invalid image flag");
  if (has_image) {
    Image im(image_size, image_size);
    for (auto& v : im.pixels) v = static_cast<double>(r.get<float>());
    image = std::move(im);
  } else {
    image.reset();
  }
  return s;
}

}  // namespace

PadStrategy parse_pad_strategy(const std::string& s) {
  if (s == "wrap") return PadStrategy::Wrap;
  if (s == "constant") return PadStrategy::Constant;
  if (s == "cut") return PadStrategy::Cut;
  throw ConfigError("unknown pad strategy '" + s + "' (expected wrap, constant or cut)");
}

std::string to_string(PadStrategy s) {
  switch (s) {
    case PadStrategy::Wrap: return "wrap";
    case PadStrategy::Constant: return "constant";
    default: return "cut";
  }
}

std::vector<std::vector<double>> class_templates(const SynthSpec& spec) {
  Rng rng = Rng::derive(spec.seed, {0x7e3a1a7e});
  std::vector<std::vector<double>> out;
  for (int c = 0; c < spec.class_count; ++c) {
    std::vector<double> t(static_cast<std::size_t>(spec.voxel_count), 0.0);
    for (int b = 0; b < spec.blobs_per_class; ++b) {
      const double centre = rng.uniform(0.0, spec.voxel_count);
      const double width = rng.uniform(1.5, 4.0);
      const double amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5);
      for (int v = 0; v < spec.voxel_count; ++v) {
        const double d = (v - centre) / width;
        t[static_cast<std::size_t>(v)] += amp * std::exp(-0.5 * d * d);
      }
    }
    double ss = 0.0;
    for (double v : t) ss += v * v;
    const double rms = std::sqrt(ss / spec.voxel_count);
    for (double& v : t) v /= rms;
    out.push_back(std::move(t));
  }
  return out;
}

Image render_class(int class_id, int size) {
  if (class_id < 0 || class_id >= kMaxRenderableClasses) {
    throw InvalidArgument("class " + std::to_string(class_id) + " has no distinct render");
  }
  const int shape = class_id % 8;
  const int hue = (class_id / 8 + 3 * class_id) % 8;
  const auto rgb = hsv_to_rgb(hue / 8.0, 0.85, 0.9);
  constexpr int ss = 4;
  Image img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double u = ((x + (sx + 0.5) / ss) / size) * 2.0 - 1.0;
          const double v = ((y + (sy + 0.5) / ss) / size) * 2.0 - 1.0;
          if (inside_shape(shape, u, v)) ++hits;
        }
      const double a = static_cast<double>(hits) / (ss * ss);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = to_f32(a * rgb[static_cast<std::size_t>(c)] + (1.0 - a) * 0.5);
    }
  return img;
}

PairedDataset generate_synthetic_dataset(const SynthSpec& spec) {
  if (spec.class_count < 1 || spec.samples_per_class < 1 || spec.voxel_count < 1 || spec.image_size < 1) {
    throw InvalidArgument("synthetic spec counts must be >= 1");
  }
  if (!(spec.snr > 0.0)) throw InvalidArgument("synthetic spec snr must be > 0");
  if (spec.class_count > kMaxRenderableClasses) {
    throw InvalidArgument("class_count " + std::to_string(spec.class_count) + " exceeds the " +
                          std::to_string(kMaxRenderableClasses) + " distinguishable renders");
  }
  if (spec.test_fraction < 0.0 || spec.test_fraction >= 1.0) throw InvalidArgument("test_fraction must be in [0, 1)");
  if (spec.unpaired_subjects < 1 || spec.unpaired_subjects > 9) throw InvalidArgument("unpaired_subjects must be in [1, 9]");

  const auto templates = class_templates(spec);
  std::vector<Image> renders;
  for (int c = 0; c < spec.class_count; ++c) renders.push_back(render_class(c, spec.image_size));

  const double noise = std::isinf(spec.snr) ? 0.0 : 1.0 / spec.snr;
  Rng rng = Rng::derive(spec.seed, {0x5a31e5});
  const int n_test = static_cast<int>(std::lround(spec.test_fraction * spec.samples_per_class));

  PairedDataset ds;
  ds.class_count = spec.class_count;
  ds.image_size = spec.image_size;
  ds.primary_voxels = static_cast<int>(std::lround(spec.primary_fraction * spec.voxel_count));
  for (int c = 0; c < spec.class_count; ++c) {
    const auto& tmpl = templates[static_cast<std::size_t>(c)];
    for (int i = 0; i < spec.samples_per_class; ++i) {
      PairedSample ps;
      ps.class_id = c;
      ps.image = renders[static_cast<std::size_t>(c)];
      ps.fmri.class_id = c;
      ps.fmri.image_id = c;
      ps.fmri.subject_id = 0;
      ps.fmri.voxels.resize(tmpl.size());
      for (std::size_t v = 0; v < tmpl.size(); ++v) ps.fmri.voxels[v] = to_f32(tmpl[v] + noise * rng.normal());
      (i < spec.samples_per_class - n_test ? ds.train : ds.test).push_back(std::move(ps));
    }
  }
  for (int c = 0; c < spec.class_count; ++c) {
    const auto& tmpl = templates[static_cast<std::size_t>(c)];
    for (int i = 0; i < spec.unpaired_per_class; ++i) {
      FmriSample s;
      s.subject_id = static_cast<std::uint32_t>(1 + i % spec.unpaired_subjects);
      const double keep = 1.0 - 0.1 * (i % spec.unpaired_subjects);
      const auto len = static_cast<std::size_t>(std::max(1L, std::lround(keep * spec.voxel_count)));
      s.voxels.resize(len);
      for (std::size_t v = 0; v < len; ++v) s.voxels[v] = to_f32(tmpl[v] + noise * rng.normal());
      ds.unpaired.push_back(std::move(s));
    }
  }
  std::vector<FmriSample> train_fmri;
  for (const auto& p : ds.train) train_fmri.push_back(p.fmri);
  ds.norm_stats = fit_norm_stats(train_fmri);
  return ds;
}

std::vector<double> wrap_pad(const std::vector<double>& voxels, std::size_t target_len) {
  if (voxels.empty()) throw InvalidArgument("wrap_pad: empty input");
  if (target_len < voxels.size()) {
    throw InvalidArgument("wrap_pad: target length " + std::to_string(target_len) + " shorter than input " +
                          std::to_string(voxels.size()));
  }
  std::vector<double> out(target_len);
  for (std::size_t i = 0; i < target_len; ++i) out[i] = voxels[i % voxels.size()];
  return out;
}

std::vector<double> pad_to_patch_boundary(const std::vector<double>& voxels, int patch_size) {
  if (patch_size < 1) throw InvalidArgument("pad_to_patch_boundary: patch_size must be >= 1");
  const std::size_t p = static_cast<std::size_t>(patch_size);
  const std::size_t target = (voxels.size() + p - 1) / p * p;
  return wrap_pad(voxels, target);
}

NormStats fit_norm_stats(const std::vector<FmriSample>& train) {
  if (train.size() < 2) throw InvalidArgument("fit_norm_stats: need at least 2 training samples");
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : train) {
    for (double v : s.voxels) total += v;
    n += s.voxels.size();
  }
  const double mu = total / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& s : train)
    for (double v : s.voxels) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 1e-12 * (1.0 + std::abs(mu)))) {
    throw InvalidArgument("fit_norm_stats: training data is constant (degenerate standard deviation)");
  }
  return {mu, sd};
}

FmriSample apply_norm(const FmriSample& sample, const NormStats& stats) {
  if (!(stats.std > 0.0)) throw InvalidArgument("apply_norm: std must be > 0");
  FmriSample out = sample;
  out.voxels = normalize_values(sample.voxels, stats);
  return out;
}

std::vector<double> random_sparsify(const std::vector<double>& voxels, double fraction, Rng& rng) {
  if (fraction < 0.0 || fraction >= 1.0) throw InvalidArgument("random_sparsify: fraction must be in [0, 1)");
  std::vector<double> out = voxels;
  const std::size_t k = floor_count(fraction, voxels.size());
  for (int idx : rng.sample_without_replacement(static_cast<int>(voxels.size()), static_cast<int>(k))) {
    out[static_cast<std::size_t>(idx)] = 0.0;
  }
  return out;
}

CropWindow sample_crop_window(int height, int width, double crop_ratio, Rng& rng) {
  if (crop_ratio < 0.0 || crop_ratio >= 1.0) throw InvalidArgument("crop ratio must be in [0, 1)");
  auto side = [&](int full) {
    const int lo = std::min(full, static_cast<int>(std::ceil((1.0 - crop_ratio) * full - 1e-9)));
    return rng.uniform_int(lo, full);
  };
  auto offset = [&](int full, int s) {
    const int slack = full - s;
    if (slack == 0) return 0;
    // Centre plus a jitter of at most half the slack either way.
    const double centre = slack / 2.0;
    const double o = centre + rng.uniform(-0.5, 0.5) * centre;
    return std::clamp(static_cast<int>(std::lround(o)), 0, slack);
  };
  CropWindow w;
  w.height = side(height);
  w.width = side(width);
  w.y0 = offset(height, w.height);
  w.x0 = offset(width, w.width);
  return w;
}

Image random_crop_image(const Image& image, double crop_ratio, Rng& rng) {
  const CropWindow w = sample_crop_window(image.height, image.width, crop_ratio, rng);
  if (w.height == image.height && w.width == image.width) return image;
  return crop_resize(image, w.y0, w.x0, w.height, w.width, image.height, image.width);
}

PreparedSignals prepare_signals(const PairedDataset& dataset, int patch_size, PadStrategy pad) {
  if (patch_size < 1) throw InvalidArgument("patch_size must be >= 1");
  PreparedSignals out;
  out.patch_size = patch_size;
  const NormStats& st = dataset.norm_stats;
  for (const auto& p : dataset.train) out.train.push_back(normalize_values(p.fmri.voxels, st));
  for (const auto& p : dataset.test) out.test.push_back(normalize_values(p.fmri.voxels, st));
  for (const auto& s : dataset.unpaired) out.unpaired.push_back(normalize_values(s.voxels, st));

  std::size_t max_len = 0, min_len = SIZE_MAX;
  for (auto* group : {&out.train, &out.test, &out.unpaired})
    for (const auto& v : *group) {
      max_len = std::max(max_len, v.size());
      min_len = std::min(min_len, v.size());
    }
  if (max_len == 0) throw InvalidArgument("prepare_signals: dataset has no signals");

  const auto p = static_cast<std::size_t>(patch_size);
  std::size_t target = 0;
  if (pad == PadStrategy::Cut) {
    target = std::max(p, min_len / p * p);
  } else {
    target = (max_len + p - 1) / p * p;
  }
  for (auto* group : {&out.train, &out.test, &out.unpaired})
    for (auto& v : *group) {
      if (pad == PadStrategy::Cut) {
        v = v.size() >= target ? std::vector<double>(v.begin(), v.begin() + static_cast<long>(target)) : wrap_pad(v, target);
      } else if (pad == PadStrategy::Wrap) {
        v = wrap_pad(v, target);
      } else {
        v.resize(target, 0.0);
      }
    }
  out.length = static_cast<int>(target);
  const int n_patches = out.length / patch_size;
  for (int i = 0; i < n_patches; ++i) {
    int inside = 0;
    for (int k = 0; k < patch_size; ++k) inside += (i * patch_size + k) < dataset.primary_voxels ? 1 : 0;
    out.primary_patch.push_back(2 * inside > patch_size ? 1 : 0);
  }
  return out;
}

std::vector<unsigned char> encode_dataset(const PairedDataset& ds) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.class_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.image_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.primary_voxels));
  w.put<double>(ds.norm_stats.mean);
  w.put<double>(ds.norm_stats.std);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.train.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.test.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.unpaired.size()));
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& p : *split) {
      FmriSample s = p.fmri;
      s.class_id = p.class_id;
      put_sample(w, s, &p.image);
    }
  }
  for (const auto& s : ds.unpaired) put_sample(w, s, nullptr);
  return w.buffer();
}

PairedDataset decode_dataset(std::vector<unsigned char> bytes) {
  binio::Reader r(std::move(bytes), "dataset");
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("dataset: bad magic (not an MVDS file)");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    throw VersionError("dataset: version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kVersion) + ")");
  }
  PairedDataset ds;
  ds.class_count = static_cast<int>(r.get<std::uint32_t>());
  ds.image_size = static_cast<int>(r.get<std::uint32_t>());
  ds.primary_voxels = static_cast<int>(r.get<std::uint32_t>());
  ds.norm_stats.mean = r.get<double>();
  ds.norm_stats.std = r.get<double>();
  const auto n_train = r.get<std::uint32_t>();
  const auto n_test = r.get<std::uint32_t>();
  const auto n_unpaired = r.get<std::uint32_t>();
  auto read_paired = [&](std::vector<PairedSample>& out, std::uint32_t n) {
    for (std::uint32_t i = 0; i < n; ++i) {
      std::optional<Image> img;
      PairedSample p;
      p.fmri = get_sample(r, ds.image_size, img);
      if (!img || !p.fmri.class_id) throw FormatError("dataset: paired record without image or class");
      p.image = std::move(*img);
      p.class_id = *p.fmri.class_id;
      out.push_back(std::move(p));
    }
  };
  read_paired(ds.train, n_train);
  read_paired(ds.test, n_test);
  for (std::uint32_t i = 0; i < n_unpaired; ++i) {
    std::optional<Image> img;
    ds.unpaired.push_back(get_sample(r, ds.image_size, img));
  }
  if (r.remaining() != 0) throw FormatError("dataset: trailing bytes after last record");
  return ds;
}

void save_dataset(const PairedDataset& dataset, const std::string& path) {
  binio::write_file(path, encode_dataset(dataset));
}

PairedDataset load_dataset(const std::string& path) { return decode_dataset(binio::read_file(path)); }

void export_csv(const PairedDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "split,subject_id,class_id,image_id,voxel_len,voxels\n";
  auto row = [&](const char* split, const FmriSample& s) {
    out << split << ',' << s.subject_id << ',' << s.class_id.value_or(-1) << ',' << s.image_id.value_or(-1) << ','
        << s.voxels.size() << ',';
    for (std::size_t i = 0; i < s.voxels.size(); ++i) out << (i ? " " : "") << s.voxels[i];
    out << '\n';
  };
  for (const auto& p : ds.train) row("train", p.fmri);
  for (const auto& p : ds.test) row("test", p.fmri);
  for (const auto& s : ds.unpaired) row("unpaired", s);
}

}  // namespace mindvis::data
