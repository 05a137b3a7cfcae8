#pragma once

#include <cmath>

#include "grab/numcore.hpp"
#include "grab/rng.hpp"

namespace grab {

template <typename T>
num::Mat<T> xavier_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  num::Mat<T> m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

template <typename T>
num::Mat<T> zeros(Eigen::Index r, Eigen::Index c) {
  return num::Mat<T>::Zero(r, c);
}

template <typename T>
num::Mat<T> ones(Eigen::Index r, Eigen::Index c) {
  return num::Mat<T>::Ones(r, c);
}

}  // namespace grab
