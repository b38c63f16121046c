#include "mdgd/rng.hpp"

#include <cmath>
#include <numbers>

namespace mdgd {

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(std::uint64_t salt) const {
  Rng mixer(seed_ ^ (salt * 0xD1B54A32D192ED03ULL), 0);
  return Rng(mixer.next_u64(), 0);
}

}  // namespace mdgd
