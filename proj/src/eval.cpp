#include "mindvis/eval.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "mindvis/data.hpp"
#include "mindvis/errors.hpp"
#include "mindvis/optim.hpp"

namespace mindvis::eval {

int argmax(const std::vector<double>& p) {
  if (p.empty()) throw InvalidArgument("argmax of an empty vector");
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

namespace {

std::vector<double> softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (double& v : p) v /= s;
  return p;
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw ShapeError("fid: feature vectors differ in length");
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

// ---- Oracles ----

TemplateOracle::TemplateOracle(int classes, int image_size, double temperature) : temperature_(temperature) {
  if (classes < 1 || classes > data::kMaxRenderableClasses) throw InvalidArgument("template oracle: bad class count");
  if (temperature <= 0.0) throw InvalidArgument("template oracle: temperature must be > 0");
  for (int c = 0; c < classes; ++c) templates_.push_back(data::render_class(c, image_size));
}

std::vector<double> TemplateOracle::features(const Image& image) const {
  std::vector<double> d;
  for (const Image& t : templates_) d.push_back(pixel_mse(image, t));
  return d;
}

std::vector<double> TemplateOracle::probabilities(const Image& image) const {
  std::vector<double> z = features(image);
  for (double& v : z) v = -v / temperature_;
  return softmax(z);
}

ConvOracle::ConvOracle(const ConvOracleConfig& cfg) : cfg_(cfg) {
  if (cfg.classes < 2 || cfg.classes > data::kMaxRenderableClasses) throw ConfigError("conv oracle: bad class count");
  if (cfg.image_size % 8 != 0) throw ConfigError("conv oracle: image size must be a multiple of 8");
  Rng rng(cfg.seed);
  const int w = cfg.width, s = cfg.image_size / 8;
  c1_ = nn::Conv2d::make(store_, "oracle.conv1", 3, w, 3, 2, 1, rng);
  c2_ = nn::Conv2d::make(store_, "oracle.conv2", w, 2 * w, 3, 2, 1, rng);
  fc_ = nn::Linear::make(store_, "oracle.fc", 2 * w * s * s, cfg.feature_dim, rng);
  head_ = nn::Linear::make(store_, "oracle.head", cfg.feature_dim, cfg.classes, rng);
}

Var ConvOracle::trunk(Tape& tape, const Image& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size) {
    throw ShapeError("conv oracle: expected " + std::to_string(cfg_.image_size) + "px images");
  }
  Var x = tape.constant(image_to_tensor(image));
  Var h = avg_pool2(relu(c2_(tape, relu(c1_(tape, x)))));
  const int n = static_cast<int>(h.value().size());
  return relu(fc_(tape, reshape(h, {1, n})));
}

Var ConvOracle::logits(Tape& tape, const Image& image) const { return head_(tape, trunk(tape, image)); }

Image ConvOracle::augment(const Image& image, Rng& rng) const {
  Image im = data::random_crop_image(image, cfg_.crop_ratio, rng);
  const double contrast = rng.uniform(0.6, 1.0);
  const double sd = rng.uniform(0.0, cfg_.noise);
  for (double& v : im.pixels) v = std::clamp(0.5 + (v - 0.5) * contrast + sd * rng.normal(), 0.0, 1.0);
  return im;
}

double ConvOracle::train() {
  OptimizerConfig oc;
  oc.peak_lr = cfg_.lr;
  oc.weight_decay = 1e-4;
  oc.warmup_epochs = 0;
  oc.max_epochs = 1;
  oc.grad_clip_norm = 5.0;
  AdamW opt({&store_}, oc);
  LrSchedule lr(cfg_.lr, std::max(1, cfg_.steps / 20), cfg_.steps);
  std::vector<Image> renders;
  for (int c = 0; c < cfg_.classes; ++c) renders.push_back(data::render_class(c, cfg_.image_size));
  double last = 0.0;
  for (int step = 0; step < cfg_.steps; ++step) {
    store_.zero_grad();
    double total = 0.0;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      Rng rng = Rng::derive(cfg_.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
      const int c = rng.uniform_int(0, cfg_.classes - 1);
      Tape tape;
      Var l = cross_entropy(logits(tape, augment(renders[static_cast<std::size_t>(c)], rng)), c);
      total += l.value()[0];
      tape.backward(scale(l, 1.0 / cfg_.batch_size));
    }
    clip_grad_norm({&store_}, oc.grad_clip_norm);
    opt.step(lr.at(step));
    last = total / cfg_.batch_size;
  }
  return last;
}

double ConvOracle::validation_accuracy(int per_class, std::uint64_t seed) const {
  int hit = 0;
  for (int c = 0; c < cfg_.classes; ++c) {
    const Image r = data::render_class(c, cfg_.image_size);
    for (int i = 0; i < per_class; ++i) {
      Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
      hit += argmax(probabilities(augment(r, rng))) == c;
    }
  }
  return static_cast<double>(hit) / (per_class * cfg_.classes);
}

std::vector<double> ConvOracle::probabilities(const Image& image) const {
  Tape tape;
  return softmax(logits(tape, image).value().to_vector());
}

std::vector<double> ConvOracle::features(const Image& image) const {
  Tape tape;
  return trunk(tape, image).value().to_vector();
}

void ConvOracle::save(Checkpoint& ckpt) const {
  put_params(ckpt, store_);
  ckpt.meta["oracle"] = {{"classes", cfg_.classes}, {"image_size", cfg_.image_size}, {"width", cfg_.width},
                         {"feature_dim", cfg_.feature_dim}};
}

void ConvOracle::load(const Checkpoint& ckpt) {
  const auto& m = ckpt.meta.at("oracle");
  if (m.at("classes").get<int>() != cfg_.classes || m.at("image_size").get<int>() != cfg_.image_size) {
    throw ConfigError("conv oracle: checkpoint was trained for another class count or image size");
  }
  get_params(ckpt, store_);
}

// ---- Identification ----

bool nway_trial(const std::vector<double>& gen_probs, int true_class, int n, int k, Rng& rng) {
  const int c = static_cast<int>(gen_probs.size());
  if (n < 1 || n > c) throw InvalidArgument("n-way: n=" + std::to_string(n) + " outside [1, " + std::to_string(c) + "]");
  if (k < 1 || k > n) throw InvalidArgument("n-way: k must be in [1, n]");
  if (true_class < 0 || true_class >= c) throw InvalidArgument("n-way: class out of range");
  std::vector<int> cand = rng.sample_without_replacement(c - 1, n - 1);
  for (int& v : cand) v += v >= true_class;
  cand.push_back(true_class);
  std::sort(cand.begin(), cand.end(), [&](int a, int b) {
    const double pa = gen_probs[static_cast<std::size_t>(a)], pb = gen_probs[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  const auto pos = std::find(cand.begin(), cand.end(), true_class) - cand.begin();
  return pos < k;
}

double nway_topk_accuracy_probs(const std::vector<std::vector<double>>& gen_probs,
                                const std::vector<std::vector<double>>& gt_probs, int n, int k, int trials, Rng& rng) {
  if (gen_probs.size() != gt_probs.size() || gen_probs.empty()) throw InvalidArgument("n-way: need matching pairs");
  if (trials < 1) throw InvalidArgument("n-way: trials must be >= 1");
  long hit = 0;
  for (std::size_t i = 0; i < gen_probs.size(); ++i) {
    const int y = argmax(gt_probs[i]);
    for (int t = 0; t < trials; ++t) hit += nway_trial(gen_probs[i], y, n, k, rng);
  }
  return static_cast<double>(hit) / (static_cast<double>(trials) * static_cast<double>(gen_probs.size()));
}

double nway_topk_accuracy(const std::vector<Image>& generated, const std::vector<Image>& ground_truth,
                          const ClassifierOracle& oracle, int n, int k, int trials, Rng& rng) {
  if (n > oracle.classes()) throw InvalidArgument("n-way: n exceeds the oracle's class count");
  std::vector<std::vector<double>> g, t;
  for (const Image& im : generated) g.push_back(oracle.probabilities(im));
  for (const Image& im : ground_truth) t.push_back(oracle.probabilities(im));
  return nway_topk_accuracy_probs(g, t, n, k, trials, rng);
}

// ---- Frechet distance ----

double fid(const std::vector<std::vector<double>>& features_real, const std::vector<std::vector<double>>& features_gen) {
  if (features_real.size() < 2 || features_gen.size() < 2) throw InvalidArgument("fid: need >= 2 feature vectors per side");
  if (features_real.front().size() != features_gen.front().size()) throw ShapeError("fid: feature dimensions differ");
  const Eigen::MatrixXd a = to_matrix(features_real), b = to_matrix(features_gen);
  const Eigen::RowVectorXd mu1 = a.colwise().mean(), mu2 = b.colwise().mean();
  const Eigen::MatrixXd ca = a.rowwise() - mu1, cb = b.rowwise() - mu2;
  const Eigen::MatrixXd c1 = ca.transpose() * ca / static_cast<double>(a.rows() - 1);
  const Eigen::MatrixXd c2 = cb.transpose() * cb / static_cast<double>(b.rows() - 1);
  const Eigen::MatrixXd s1 = psd_sqrt(c1);
  const Eigen::MatrixXd mid = s1 * c2 * s1;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

double pixel_mse(const Image& generated, const Image& ground_truth) {
  if (generated.height != ground_truth.height || generated.width != ground_truth.width ||
      generated.pixels.size() != ground_truth.pixels.size() || generated.pixels.empty()) {
    throw ShapeError("pixel_mse: image shapes differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < generated.pixels.size(); ++i) {
    const double d = generated.pixels[i] - ground_truth.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(generated.pixels.size());
}

// ---- Consistency ----

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Consistency sampling_consistency_labels(const std::vector<std::vector<int>>& labels) {
  if (labels.empty()) throw InvalidArgument("sampling consistency: no inputs");
  Consistency out;
  for (const auto& row : labels) {
    if (row.size() < 2) throw InvalidArgument("sampling consistency: need >= 2 samplings per input");
    long agree = 0, pairs = 0;
    for (std::size_t a = 0; a < row.size(); ++a)
      for (std::size_t b = a + 1; b < row.size(); ++b, ++pairs) agree += row[a] == row[b];
    out.per_input.push_back(static_cast<double>(agree) / static_cast<double>(pairs));
  }
  out.mean = mean_of(out.per_input);
  out.std = stddev_of(out.per_input);
  return out;
}

Consistency sampling_consistency(const std::vector<std::vector<Image>>& samples_per_input,
                                 const ClassifierOracle& oracle) {
  std::vector<std::vector<int>> labels;
  for (const auto& row : samples_per_input) {
    std::vector<int> l;
    for (const Image& im : row) l.push_back(argmax(oracle.probabilities(im)));
    labels.push_back(std::move(l));
  }
  return sampling_consistency_labels(labels);
}

double cross_input_agreement(const std::vector<std::vector<int>>& labels) {
  if (labels.size() < 2) throw InvalidArgument("cross-input agreement: need >= 2 inputs");
  long agree = 0, pairs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      for (int a : labels[i])
        for (int b : labels[j]) {
          agree += a == b;
          ++pairs;
        }
  return static_cast<double>(agree) / static_cast<double>(pairs);
}

// ---- t-tests ----

namespace {

TTest finish(double t, double df) {
  TTest r;
  r.t = t;
  r.df = df;
  if (std::isinf(t)) {
    r.p_two_sided = 0.0;
    r.p_greater = t > 0 ? 0.0 : 1.0;
    return r;
  }
  if (std::isnan(t)) return r;
  boost::math::students_t dist(df);
  r.p_greater = boost::math::cdf(boost::math::complement(dist, t));
  r.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return r;
}

}  // namespace

TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("paired t-test: need >= 2 matched pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double m = mean_of(d), s = stddev_of(d);
  const double n = static_cast<double>(d.size());
  const double t = s == 0.0 ? (m == 0.0 ? std::nan("") : std::copysign(INFINITY, m)) : m / (s / std::sqrt(n));
  return finish(t, n - 1.0);
}

TTest welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw InvalidArgument("welch t-test: need >= 2 values per group");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = std::pow(stddev_of(a), 2) / na, vb = std::pow(stddev_of(b), 2) / nb;
  const double diff = mean_of(a) - mean_of(b);
  const double se = std::sqrt(va + vb);
  if (se == 0.0) return finish(diff == 0.0 ? std::nan("") : std::copysign(INFINITY, diff), na + nb - 2.0);
  const double df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  return finish(diff / se, df);
}

// ---- Reports ----

void MetricReport::validate() const {
  if (trials < 1) throw InvalidArgument("metric report: trials must be >= 1");
  if (!(success_rate >= 0.0 && success_rate <= 1.0)) throw InvalidArgument("metric report: success rate outside [0, 1]");
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = {{"n", n},      {"k", k},     {"trials", trials}, {"seed", seed}, {"success_rate", success_rate},
                      {"fid", fid}, {"mse", mse}, {"samplings", samplings}};
  if (samplings >= 2) {
    j["consistency"] = {{"mean", consistency_mean}, {"std", consistency_std}};
  } else {
    j["consistency"] = nullptr;
  }
  return j;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string metric_csv(const std::vector<MetricReport>& rows) {
  std::ostringstream os;
  os << "n,k,trials,value,seed\n";
  for (const auto& r : rows) {
    os << r.n << ',' << r.k << ',' << r.trials << ',' << format_double(r.success_rate) << ',' << r.seed << '\n';
  }
  return os.str();
}

}  // namespace mindvis::eval
