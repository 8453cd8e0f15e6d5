#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "imd/core/error.hpp"
#include "imd/core/tensor.hpp"

namespace imd::diffusion {

/// Cumulative signal coefficients alpha_bar[t] for t = 0..T, with alpha_bar[0] = 1.
struct NoiseSchedule {
  std::vector<double> alpha_bar;

  int total_steps() const { return static_cast<int>(alpha_bar.size()) - 1; }
  double operator[](int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
};

/// Linear beta schedule from beta_min to beta_max over T steps.
inline NoiseSchedule make_schedule(int T = 1000, double beta_min = 1e-4, double beta_max = 0.02) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1)) throw ConfigError("need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double beta = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * (t - 1) / (T - 1);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
  }
  return s;
}

/// Forward noising z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps with seeded standard-normal eps.
template <class T>
Tensor<T> add_noise(const Tensor<T>& z0, int t, const NoiseSchedule& schedule, std::uint64_t seed) {
  if (t < 0 || t > schedule.total_steps())
    throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.total_steps()) + "]");
  if (t == 0) return z0;
  const double signal = std::sqrt(schedule[t]);
  const double noise = std::sqrt(1.0 - schedule[t]);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> out = z0;
  for (auto& v : out.data) v = static_cast<T>(signal * static_cast<double>(v) + noise * normal(rng));
  return out;
}

}  // namespace imd::diffusion
