#pragma once

#include <string>
#include <vector>

#include "cclm/gradcheck.hpp"
#include "cclm/model.hpp"

namespace cclm {

struct GradCheckResult {
  std::string name;
  FdReport report;
};

// Finite-difference sweep over every tape primitive on fixed seeded inputs,
// double precision, full coordinate coverage. One entry per op.
std::vector<GradCheckResult> primitive_grad_checks();

// Finite differences through the whole training objective: one cross-modal
// and one cross-lingual 2-pair batch with fixed negatives, every parameter a
// leaf. sample_fraction picks the checked coordinate subset (>=1 per tensor).
GradCheckResult total_loss_grad_check(const CclmConfig& cfg, double sample_fraction,
                                      uint64_t seed);

}  // namespace cclm
