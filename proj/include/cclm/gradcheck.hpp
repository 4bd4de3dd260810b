#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cclm/rng.hpp"
#include "cclm/tensor.hpp"

namespace cclm {

struct FdIssue {
  int input = 0;
  int64_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  bool ok = true;
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::vector<FdIssue> worst;  // up to 8 entries, largest relative error first
  std::string note;
};

template <class S>
using FdBuild = std::function<TensorT<S>(TapeT<S>&, const std::vector<TensorT<S>>&)>;

// Central finite differences against the recorded backward pass. `build`
// receives leaves registered on a fresh tape and returns a scalar loss.
// Relative error per coordinate is |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-6). With `sampler` set and sample_fraction < 1, a random
// subset of coordinates is checked (at least one per input).
template <class S>
FdReport finite_diff_check(const FdBuild<S>& build, const std::vector<TensorT<S>>& inputs, S eps,
                           double tol, Rng* sampler = nullptr, double sample_fraction = 1.0) {
  std::vector<Shape> shapes;
  std::vector<std::vector<S>> base;
  shapes.reserve(inputs.size());
  base.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!in.defined()) throw std::runtime_error("finite_diff_check: undefined input");
    shapes.push_back(in.shape);
    base.push_back(*in.data);
  }

  auto eval = [&](const std::vector<std::vector<S>>& values) -> S {
    TapeT<S> tape;
    std::vector<TensorT<S>> leaves;
    leaves.reserve(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
      leaves.push_back(tape.leaf(TensorT<S>::from(shapes[i], values[i])));
    }
    TensorT<S> loss = build(tape, leaves);
    if (loss.numel() != 1) {
      throw std::runtime_error("finite_diff_check: loss must be scalar, got " + shape_str(loss.shape));
    }
    return loss.value();
  };

  FdReport report;
  const S f0 = eval(base);
  const S f0_again = eval(base);
  if (!(f0 == f0_again)) {
    report.ok = false;
    report.note = "forward pass is not deterministic";
    return report;
  }

  TapeT<S> tape;
  std::vector<TensorT<S>> leaves;
  leaves.reserve(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i) {
    leaves.push_back(tape.leaf(TensorT<S>::from(shapes[i], base[i])));
  }
  TensorT<S> loss = build(tape, leaves);
  GradMapT<S> grads;
  if (loss.node >= 0) grads = tape.backward(loss);

  std::vector<std::vector<S>> work = base;
  std::vector<FdIssue> all;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const int64_t n = static_cast<int64_t>(base[i].size());
    std::vector<int64_t> coords;
    if (sampler && sample_fraction < 1.0) {
      for (int64_t j = 0; j < n; ++j) {
        if (sampler->uniform() < sample_fraction) coords.push_back(j);
      }
      if (coords.empty()) coords.push_back(static_cast<int64_t>(sampler->below(static_cast<uint64_t>(n))));
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) coords[static_cast<size_t>(j)] = j;
    }
    const bool has_grad = loss.node >= 0 && grads.contains(leaves[i].node);
    const std::vector<S>* gvec = has_grad ? grads.at(leaves[i].node).data.get() : nullptr;
    for (int64_t j : coords) {
      const S saved = work[i][static_cast<size_t>(j)];
      work[i][static_cast<size_t>(j)] = saved + eps;
      const double f_plus = static_cast<double>(eval(work));
      work[i][static_cast<size_t>(j)] = saved - eps;
      const double f_minus = static_cast<double>(eval(work));
      work[i][static_cast<size_t>(j)] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(eps));
      const double analytic = gvec ? static_cast<double>((*gvec)[static_cast<size_t>(j)]) : 0.0;
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      ++report.coords_checked;
      report.max_rel_err = std::max(report.max_rel_err, rel);
      if (rel >= tol) {
        report.ok = false;
        all.push_back({static_cast<int>(i), j, analytic, numeric, rel});
      }
    }
  }
  std::sort(all.begin(), all.end(), [](const FdIssue& a, const FdIssue& b) { return a.rel_err > b.rel_err; });
  if (all.size() > 8) all.resize(8);
  report.worst = std::move(all);
  return report;
}

}  // namespace cclm
