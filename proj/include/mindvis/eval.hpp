#pragma once

// Evaluation: n-way top-k identification against a classifier oracle,
// Frechet distance between Gaussian feature fits, pixel MSE, sampling
// consistency, and the t-tests used to compare runs.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mindvis/autograd.hpp"
#include "mindvis/checkpoint.hpp"
#include "mindvis/image.hpp"
#include "mindvis/nn.hpp"
#include "mindvis/rng.hpp"

namespace mindvis::eval {

class ClassifierOracle {
 public:
  virtual ~ClassifierOracle() = default;
  virtual int classes() const = 0;
  // Probability vector over classes(); nonnegative, sums to 1.
  virtual std::vector<double> probabilities(const Image& image) const = 0;
  // Feature vector used for the Frechet distance.
  virtual std::vector<double> features(const Image& image) const = 0;
};

// Lowest index among the maxima.
int argmax(const std::vector<double>& p);

// Softmax over negative pixel MSE to each class render.
class TemplateOracle : public ClassifierOracle {
 public:
  TemplateOracle(int classes, int image_size, double temperature = 0.01);
  int classes() const override { return static_cast<int>(templates_.size()); }
  std::vector<double> probabilities(const Image& image) const override;
  // Per-class MSE.
  std::vector<double> features(const Image& image) const override;

 private:
  std::vector<Image> templates_;
  double temperature_;
};

struct ConvOracleConfig {
  int classes = 10;
  int image_size = 32;
  int width = 8;
  int feature_dim = 32;
  int steps = 1500;
  int batch_size = 8;
  double lr = 3e-3;
  double crop_ratio = 0.2;
  double noise = 0.1;
  std::uint64_t seed = 7;
};

// Small convolutional classifier trained on augmented class renders. Its
// penultimate activations are the FID features.
class ConvOracle : public ClassifierOracle {
 public:
  explicit ConvOracle(const ConvOracleConfig& cfg);
  ConvOracle(const ConvOracle&) = delete;
  ConvOracle& operator=(const ConvOracle&) = delete;

  // Returns the final training loss.
  double train();
  // Top-1 accuracy on freshly augmented renders.
  double validation_accuracy(int per_class, std::uint64_t seed) const;

  int classes() const override { return cfg_.classes; }
  std::vector<double> probabilities(const Image& image) const override;
  std::vector<double> features(const Image& image) const override;

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
  const ConvOracleConfig& config() const { return cfg_; }

 private:
  Var trunk(Tape& tape, const Image& image) const;
  Var logits(Tape& tape, const Image& image) const;
  Image augment(const Image& image, Rng& rng) const;

  ConvOracleConfig cfg_;
  ParamStore store_;
  nn::Conv2d c1_, c2_;
  nn::Linear fc_, head_;
};

// One Algorithm-style identification trial on probability vectors: the
// ground-truth class y = argmax(gt), n - 1 distinct other classes drawn
// uniformly, success when y ranks within the top k of gen among the n
// candidates (ties broken by class index).
bool nway_trial(const std::vector<double>& gen_probs, int true_class, int n, int k, Rng& rng);

// `trials` trials per (generated, ground truth) pair; mean success rate.
double nway_topk_accuracy_probs(const std::vector<std::vector<double>>& gen_probs,
                                const std::vector<std::vector<double>>& gt_probs, int n, int k, int trials, Rng& rng);
double nway_topk_accuracy(const std::vector<Image>& generated, const std::vector<Image>& ground_truth,
                          const ClassifierOracle& oracle, int n, int k, int trials, Rng& rng);

// Rows are feature vectors.
double fid(const std::vector<std::vector<double>>& features_real, const std::vector<std::vector<double>>& features_gen);

double pixel_mse(const Image& generated, const Image& ground_truth);

struct Consistency {
  double mean = 0.0;
  double std = 0.0;  // across inputs, n - 1 denominator
  std::vector<double> per_input;
};

// labels[i][s]: oracle top-1 class of sampling s for input i.
Consistency sampling_consistency_labels(const std::vector<std::vector<int>>& labels);
Consistency sampling_consistency(const std::vector<std::vector<Image>>& samples_per_input,
                                 const ClassifierOracle& oracle);
// Agreement rate over pairs of samplings taken from different inputs.
double cross_input_agreement(const std::vector<std::vector<int>>& labels);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
  double p_greater = 1.0;  // alternative: mean(a) > mean(b)
};

TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);
TTest welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

double mean_of(const std::vector<double>& v);
double stddev_of(const std::vector<double>& v);  // n - 1 denominator

struct MetricReport {
  int n = 0;
  int k = 0;
  int trials = 0;
  std::uint64_t seed = 0;
  double success_rate = 0.0;
  double fid = 0.0;
  double mse = 0.0;
  // Samplings per input behind the consistency figures; below 2 they are
  // reported as null.
  int samplings = 0;
  double consistency_mean = 0.0;
  double consistency_std = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
};

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

// CSV rows "n,k,trials,value,seed" under a header.
std::string metric_csv(const std::vector<MetricReport>& rows);

}  // namespace mindvis::eval
