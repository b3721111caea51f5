#include "rfadv/rng.hpp"

namespace rfadv {

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t trial, Purpose purpose,
                           std::uint64_t index) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed),  hi(seed),  lo(trial), hi(trial), static_cast<std::uint32_t>(purpose),
                    lo(index), hi(index)};
  engine_.seed(seq);
}

void RandomStream::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal_(engine_);
}

}  // namespace rfadv
