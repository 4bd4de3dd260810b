#pragma once

#include <vector>

#include "cclm/rng.hpp"
#include "cclm/tensor.hpp"

namespace testutil {

template <class S>
cclm::TensorT<S> make_normal(cclm::Rng& rng, cclm::Shape shape, double scale = 1.0) {
  std::vector<S> v(static_cast<size_t>(cclm::shape_numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal() * scale);
  return cclm::TensorT<S>::from(std::move(shape), std::move(v));
}

template <class S>
cclm::TensorT<S> make_uniform(cclm::Rng& rng, cclm::Shape shape, double lo, double hi) {
  std::vector<S> v(static_cast<size_t>(cclm::shape_numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return cclm::TensorT<S>::from(std::move(shape), std::move(v));
}

}  // namespace testutil
