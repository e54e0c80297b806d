#pragma once

#include <cstdint>
#include <span>

#include "msae/matrix.hpp"

namespace msae {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamHyper&, const AdamHyper&) = default;
};

// Moment estimates for one parameter block.
struct AdamState {
  Matrix m;
  Matrix v;
  std::uint64_t t = 0;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(std::size_t rows, std::size_t cols, AdamHyper h)
      : m(rows, cols), v(rows, cols), hyper(h) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// Bias-corrected Adam update of `param` in place; increments state.t.
void adam_step(Matrix& param, const Matrix& grad, AdamState& state);

double global_l2_norm(std::span<const Matrix> grads);

// Rescales every gradient by max_norm / global_norm when the global L2 norm
// over all blocks exceeds max_norm. Returns the norm measured before clipping.
double clip_grad_norm(std::span<Matrix> grads, double max_norm);

}  // namespace msae
