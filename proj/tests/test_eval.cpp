#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "mindvis/data.hpp"
#include "mindvis/errors.hpp"
#include "mindvis/eval.hpp"

using namespace mindvis;
using namespace mindvis::eval;

namespace {

std::vector<double> random_probs(int c, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(c));
  double s = 0;
  for (double& v : p) s += v = rng.uniform();
  for (double& v : p) v /= s;
  return p;
}

// Independent twin of one identification trial: same candidate draw, but the
// rank is a count of candidates that beat the true class.
bool brute_trial(const std::vector<double>& p, int y, int n, int k, Rng& rng) {
  const int c = static_cast<int>(p.size());
  std::vector<int> others;
  for (int j = 0; j < c; ++j)
    if (j != y) others.push_back(j);
  const std::vector<int> pick = rng.sample_without_replacement(c - 1, n - 1);
  int better = 0;
  for (int i : pick) {
    const int j = others[static_cast<std::size_t>(i)];
    if (p[static_cast<std::size_t>(j)] > p[static_cast<std::size_t>(y)] ||
        (p[static_cast<std::size_t>(j)] == p[static_cast<std::size_t>(y)] && j < y)) {
      ++better;
    }
  }
  return better < k;
}

// Lookup oracle keyed by the first pixel: class id encoded as value / 100.
class LookupOracle : public ClassifierOracle {
 public:
  explicit LookupOracle(int c) : c_(c) {}
  int classes() const override { return c_; }
  std::vector<double> probabilities(const Image& im) const override {
    std::vector<double> p(static_cast<std::size_t>(c_), 0.0);
    p[static_cast<std::size_t>(std::lround(im.pixels[0] * 100))] = 1.0;
    return p;
  }
  std::vector<double> features(const Image& im) const override { return {im.pixels[0], im.pixels[1]}; }

 private:
  int c_;
};

Image coded(int cls, double extra = 0.0) {
  Image im(2, 2, 0.5);
  im.pixels[0] = cls / 100.0;
  im.pixels[1] = extra;
  return im;
}

std::vector<std::vector<double>> gaussian_rows(int n, const std::vector<double>& mean, const Eigen::MatrixXd& chol,
                                               Rng& rng) {
  const int d = static_cast<int>(mean.size());
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(d);
    for (int j = 0; j < d; ++j) z(j) = rng.normal();
    const Eigen::VectorXd x = chol * z;
    std::vector<double> r(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) r[static_cast<std::size_t>(j)] = mean[static_cast<std::size_t>(j)] + x(j);
    rows.push_back(r);
  }
  return rows;
}

// Frechet distance through the general (non-symmetric) eigenvalues of C1 C2.
double fid_oracle(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  auto stats = [](const std::vector<std::vector<double>>& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const int n = static_cast<int>(x.size()), d = static_cast<int>(x[0].size());
    mu = Eigen::VectorXd::Zero(d);
    for (const auto& r : x)
      for (int j = 0; j < d; ++j) mu(j) += r[static_cast<std::size_t>(j)] / n;
    cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& r : x)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) cov(i, j) += (r[static_cast<std::size_t>(i)] - mu(i)) * (r[static_cast<std::size_t>(j)] - mu(j)) / (n - 1);
  };
  Eigen::VectorXd m1, m2;
  Eigen::MatrixXd c1, c2;
  stats(a, m1, c1);
  stats(b, m2, c2);
  Eigen::EigenSolver<Eigen::MatrixXd> es(c1 * c2);
  double tr = 0;
  for (int i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(0.0, es.eigenvalues()(i).real()));
  return (m1 - m2).squaredNorm() + c1.trace() + c2.trace() - 2 * tr;
}

}  // namespace

TEST_CASE("n-way identification matches a brute-force twin") {
  Rng gen(1);
  for (int inst = 0; inst < 100; ++inst) {
    const int c = gen.uniform_int(2, 12);
    const int n = gen.uniform_int(1, c), k = gen.uniform_int(1, n);
    std::vector<double> p = random_probs(c, gen);
    if (inst % 5 == 0) p[static_cast<std::size_t>(gen.uniform_int(0, c - 1))] = p[0];  // ties
    const int y = gen.uniform_int(0, c - 1);
    Rng a(inst), b(inst);
    for (int t = 0; t < 20; ++t) CHECK(nway_trial(p, y, n, k, a) == brute_trial(p, y, n, k, b));
  }
}

TEST_CASE("n-way identification properties") {
  const LookupOracle oracle(10);
  std::vector<Image> imgs;
  for (int i = 0; i < 30; ++i) imgs.push_back(coded(i % 10));
  for (int n : {1, 2, 5, 10})
    for (int k = 1; k <= n; ++k) {
      Rng rng(n * 10 + k);
      CHECK(nway_topk_accuracy(imgs, imgs, oracle, n, k, 20, rng) == 1.0);
    }
  std::vector<Image> wrong;
  for (int i = 0; i < 30; ++i) wrong.push_back(coded((i + 1) % 10));
  Rng r1(3);
  CHECK(nway_topk_accuracy(wrong, imgs, oracle, 1, 1, 10, r1) == 1.0);
  Rng r2(3);
  CHECK(nway_topk_accuracy(wrong, imgs, oracle, 10, 10, 10, r2) == 1.0);

  Rng bad(0);
  CHECK_THROWS_AS(nway_topk_accuracy(imgs, imgs, oracle, 11, 1, 10, bad), InvalidArgument);
  CHECK_THROWS_AS(nway_trial({0.5, 0.5}, 0, 2, 3, bad), InvalidArgument);
  CHECK_THROWS_AS(nway_topk_accuracy(imgs, imgs, oracle, 2, 1, 0, bad), InvalidArgument);

  // Top-k nesting: with a shared seed stream success never drops as k grows.
  Rng g(5);
  std::vector<std::vector<double>> gp, tp;
  for (int i = 0; i < 200; ++i) {
    gp.push_back(random_probs(20, g));
    tp.push_back(random_probs(20, g));
  }
  double prev = 0.0;
  for (int k = 1; k <= 10; ++k) {
    Rng r(77);
    const double acc = nway_topk_accuracy_probs(gp, tp, 10, k, 5, r);
    CHECK(acc >= prev);
    prev = acc;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("random oracle gives chance-level identification") {
  for (int n : {2, 10, 50}) {
    Rng g(n);
    std::vector<std::vector<double>> gp, tp;
    for (int i = 0; i < 10000; ++i) {
      gp.push_back(random_probs(50, g));
      tp.push_back(random_probs(50, g));
    }
    Rng r(n + 1);
    const double acc = nway_topk_accuracy_probs(gp, tp, n, 1, 1, r);
    const double p = 1.0 / n, sigma = std::sqrt(p * (1 - p) / 10000);
    MESSAGE("n=" << n << " acc " << acc << " chance " << p);
    CHECK(std::abs(acc - p) <= 3 * sigma);
  }
}

TEST_CASE("fid") {
  Rng rng(2);
  Eigen::MatrixXd chol(3, 3);
  chol << 1.0, 0, 0, 0.3, 0.8, 0, -0.2, 0.1, 0.5;
  const auto a = gaussian_rows(50, {0, 0, 0}, chol, rng);
  CHECK(std::abs(fid(a, a)) < 1e-6);

  SUBCASE("matches an eigenvalue oracle on random instances") {
    Rng g(9);
    for (int inst = 0; inst < 100; ++inst) {
      const int d = g.uniform_int(1, 5);
      Eigen::MatrixXd l = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j <= i; ++j) l(i, j) = g.normal();
      std::vector<double> mu(static_cast<std::size_t>(d));
      for (double& v : mu) v = g.normal();
      const auto x = gaussian_rows(g.uniform_int(d + 2, 30), std::vector<double>(static_cast<std::size_t>(d), 0.0), l, g);
      const auto y = gaussian_rows(g.uniform_int(d + 2, 30), mu, Eigen::MatrixXd::Identity(d, d), g);
      const double f = fid(x, y), o = fid_oracle(x, y);
      CHECK(std::abs(f - o) <= 1e-8 * std::max(1.0, std::abs(o)));
      CHECK(std::abs(fid(y, x) - f) <= 1e-8 * std::max(1.0, f));
      CHECK(f >= 0.0);
    }
  }

  SUBCASE("point masses give the squared mean distance") {
    const std::vector<std::vector<double>> p{{1, 2}, {1, 2}, {1, 2}}, q{{4, -2}, {4, -2}};
    CHECK(fid(p, q) == 25.0);
  }

  SUBCASE("equal-covariance Gaussians differ by the squared mean shift") {
    Rng g(11);
    const std::vector<double> d{1.0, -0.5, 0.25};
    const double expect = 1.0 + 0.25 + 0.0625;
    const auto x = gaussian_rows(10000, {0, 0, 0}, chol, g);
    const auto y = gaussian_rows(10000, d, chol, g);
    const double f = fid(x, y);
    MESSAGE("fid " << f << " analytic " << expect);
    CHECK(std::abs(f - expect) <= 0.05 * expect);
  }

  CHECK_THROWS_AS(fid({{1.0}}, {{1.0}, {2.0}}), InvalidArgument);
  CHECK_THROWS_AS(fid({{1.0}, {2.0}}, {{1.0, 2.0}, {2.0, 1.0}}), ShapeError);
}

TEST_CASE("pixel mse") {
  const Image z(4, 4, 0.0), o(4, 4, 1.0);
  CHECK(pixel_mse(z, z) == 0.0);
  CHECK(pixel_mse(z, o) == 1.0);
  Rng rng(3);
  for (int inst = 0; inst < 100; ++inst) {
    const int h = rng.uniform_int(1, 9), w = rng.uniform_int(1, 9);
    Image a(h, w), b(h, w);
    for (double& v : a.pixels) v = rng.uniform();
    for (double& v : b.pixels) v = rng.uniform();
    double s = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) s += (a.at(y, x, c) - b.at(y, x, c)) * (a.at(y, x, c) - b.at(y, x, c));
    CHECK(std::abs(pixel_mse(a, b) - s / (h * w * 3)) < 1e-12);
  }
  CHECK_THROWS_AS(pixel_mse(Image(2, 2), Image(2, 3)), ShapeError);
}

TEST_CASE("sampling consistency") {
  const LookupOracle oracle(10);
  std::vector<std::vector<Image>> same(4, std::vector<Image>(5));
  for (int i = 0; i < 4; ++i)
    for (auto& im : same[static_cast<std::size_t>(i)]) im = coded(i);
  const Consistency c = sampling_consistency(same, oracle);
  CHECK(c.mean == 1.0);
  CHECK(c.std == 0.0);
  CHECK(cross_input_agreement({{0, 0}, {1, 1}, {2, 2}}) == 0.0);
  const Consistency half = sampling_consistency_labels({{0, 0, 1, 1}, {2, 2, 2, 2}});
  CHECK(half.per_input[0] == doctest::Approx(2.0 / 6.0));
  CHECK(half.per_input[1] == 1.0);
  CHECK_THROWS_AS(sampling_consistency_labels({{1}}), InvalidArgument);

  Rng rng(4);
  const int classes = 10;
  std::vector<std::vector<int>> labels(2000, std::vector<int>(5));
  for (auto& row : labels)
    for (int& v : row) v = rng.uniform_int(0, classes - 1);
  const Consistency r = sampling_consistency_labels(labels);
  // Each input's 10 pair indicators are dependent, so use the spread across
  // inputs for the standard error.
  const double se = r.std / std::sqrt(2000.0);
  MESSAGE("random agreement " << r.mean << " +- " << se);
  CHECK(std::abs(r.mean - 0.1) <= 3 * se);
}

TEST_CASE("template oracle") {
  const TemplateOracle o(10, 16);
  for (int c = 0; c < 10; ++c) {
    const auto p = o.probabilities(data::render_class(c, 16));
    double s = 0;
    for (double v : p) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
    CHECK(argmax(p) == c);
  }
}

TEST_CASE("conv oracle learns the renders") {
  ConvOracleConfig cfg;
  cfg.classes = 6;
  cfg.image_size = 16;
  cfg.steps = 400;
  ConvOracle o(cfg);
  o.train();
  const double acc = o.validation_accuracy(10, 123);
  MESSAGE("validation accuracy " << acc);
  CHECK(acc >= 0.9);
  const auto p = o.probabilities(data::render_class(2, 16));
  double s = 0;
  for (double v : p) s += v;
  CHECK(std::abs(s - 1.0) < 1e-6);
  CHECK(o.features(data::render_class(2, 16)).size() == static_cast<std::size_t>(cfg.feature_dim));
  Checkpoint ck;
  o.save(ck);
  ConvOracle other(cfg);
  other.load(ck);
  CHECK(other.probabilities(data::render_class(3, 16)) == o.probabilities(data::render_class(3, 16)));
  ConvOracleConfig wrong = cfg;
  wrong.classes = 5;
  ConvOracle w(wrong);
  CHECK_THROWS_AS(w.load(ck), ConfigError);
}

TEST_CASE("t-tests") {
  // Reference values from the textbook formulas.
  const std::vector<double> a{5.1, 4.9, 5.6, 5.8, 6.0, 5.5}, b{4.8, 4.7, 5.0, 5.2, 5.9, 5.1};
  const TTest p = paired_t_test(a, b);
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) d.push_back(a[i] - b[i]);
  const double md = mean_of(d), sd = stddev_of(d);
  CHECK(p.t == doctest::Approx(md / (sd / std::sqrt(6.0))));
  CHECK(p.df == 5.0);
  CHECK(p.p_two_sided == doctest::Approx(2 * p.p_greater));
  CHECK(p.p_greater < 0.01);
  const TTest w = welch_t_test(a, b);
  CHECK(w.t > 0);
  CHECK(w.df < 10.0);
  CHECK(w.df > 5.0);
  CHECK(welch_t_test({1, 2, 3}, {1, 2, 3}).p_two_sided == doctest::Approx(1.0));
  CHECK(paired_t_test({1, 2}, {0, 1}).p_greater == 0.0);
  CHECK_THROWS_AS(paired_t_test({1}, {1}), InvalidArgument);
}

TEST_CASE("metric report") {
  MetricReport r{10, 1, 1000, 7, 0.35, 12.5, 0.02, 5, 0.8, 0.1};
  CHECK_NOTHROW(r.validate());
  CHECK(r.to_json()["success_rate"] == 0.35);
  CHECK(r.to_json()["consistency"]["mean"] == 0.8);
  r.samplings = 1;
  CHECK(r.to_json()["consistency"].is_null());
  CHECK(metric_csv({r}) == "n,k,trials,value,seed\n10,1,1000,0.35,7\n");
  r.success_rate = 1.5;
  CHECK_THROWS_AS(r.validate(), InvalidArgument);
}
