#include "msae/optim.hpp"

#include <cmath>

#include "msae/error.hpp"

namespace msae {

void adam_step(Matrix& param, const Matrix& grad, AdamState& state) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
      state.m.rows() != param.rows() || state.m.cols() != param.cols() ||
      state.v.rows() != param.rows() || state.v.cols() != param.cols()) {
    throw ShapeError("adam_step: parameter, gradient and moment shapes differ");
  }
  const AdamHyper& h = state.hyper;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);

  auto p = param.values();
  auto g = grad.values();
  auto m = state.m.values();
  auto v = state.v.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    p[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

double global_l2_norm(std::span<const Matrix> grads) {
  double s = 0.0;
  for (const auto& g : grads) s += sum_squares(g);
  return std::sqrt(s);
}

double clip_grad_norm(std::span<Matrix> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw RangeError("clip_grad_norm: max_norm must be positive");
  const double norm = global_l2_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace msae
