#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace rfadv {

enum class Purpose : std::uint32_t {
  weights = 1,
  beta = 2,
  train_x = 3,
  train_noise = 4,
  test_x = 5,
  test_noise = 6,
  pgd = 7,
  aux = 8,
};

/// Independent random stream keyed by (seed, trial, purpose, index). Streams
/// with different keys do not depend on the order in which they are created.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t trial, Purpose purpose, std::uint64_t index = 0);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  void fill_normal(std::span<double> out);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace rfadv
