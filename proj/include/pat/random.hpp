#pragma once

#include <cstdint>
#include <random>

#include "pat/tensor.hpp"

namespace pat {

using Rng = std::mt19937_64;

/// Fills `t` with Normal(0, stddev^2) samples. Samples are drawn in double
/// precision so f32 and f64 models built from one seed hold the same values
/// up to rounding.
template <class T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : t.data()) x = static_cast<T>(dist(rng));
}

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
  Tensor<T> t(std::move(shape));
  fill_normal(t, stddev, rng);
  t.set_requires_grad(requires_grad);
  return t;
}

template <class T>
void fill_uniform(Tensor<T>& t, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : t.data()) x = static_cast<T>(dist(rng));
}

}  // namespace pat
