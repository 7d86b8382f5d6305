#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace mindvis {

// Deterministic random stream. Distributions are constructed per draw so no
// hidden state lives outside the engine; state() therefore captures everything
// needed to resume a run bit-exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Independent stream derived from a base seed and stream coordinates such
  // as (epoch, sample index).
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

  double uniform();
  double uniform(double lo, double hi);
  double normal();
  // Inclusive range.
  int uniform_int(int lo, int hi);
  std::uint64_t next_u64() { return engine_(); }

  void shuffle(std::vector<int>& v);
  std::vector<int> permutation(int n);
  // k distinct indices from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k);

  std::string state() const;
  void set_state(const std::string& s);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mindvis
