#include "msae/linalg.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "msae/error.hpp"

namespace msae {

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

Matrix cosine_sim_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("cosine_sim_matrix: vector lengths differ (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()) + ")");
  }
  std::vector<double> na(a.rows()), nb(b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) na[i] = l2_norm(a.row(i));
  for (std::size_t j = 0; j < b.rows(); ++j) nb[j] = l2_norm(b.row(j));
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      if (na[i] == 0.0 || nb[j] == 0.0) continue;
      out(i, j) = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
    }
  }
  return out;
}

std::vector<std::size_t> hungarian_match(const Matrix& cost) {
  const std::size_t n = cost.rows();
  const std::size_t m = cost.cols();
  if (n > m) throw ShapeError("hungarian_match: more rows than columns");
  if (!cost.all_finite()) throw NumericError("hungarian_match: non-finite cost");
  if (n == 0) return {};

  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr std::size_t kNone = 0;
  // 1-based indexing; row/column 0 is the virtual source of each augmentation.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> row_of_col(m + 1, kNone), way(m + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = row_of_col[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != kNone);
    do {
      const std::size_t j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= m; ++j) {
    if (row_of_col[j] != kNone) assignment[row_of_col[j] - 1] = j - 1;
  }
  return assignment;
}

double assignment_cost(const Matrix& cost, const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) total += cost(i, assignment[i]);
  return total;
}

Matrix finite_diff_grad(const ScalarFn& loss, const Matrix& params, double h) {
  if (!(h > 0.0)) throw RangeError("finite_diff_grad: step must be positive");
  Matrix grad(params.rows(), params.cols());
  Matrix probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params.values()[i];
    probe.values()[i] = orig + h;
    const double up = loss(probe);
    probe.values()[i] = orig - h;
    const double down = loss(probe);
    probe.values()[i] = orig;
    grad.values()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& x : m.values()) x = rng.normal();
  return m;
}

void orthonormalize_rows(Matrix& m) {
  if (m.rows() > m.cols()) throw ShapeError("orthonormalize_rows: more rows than columns");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (std::size_t k = 0; k < i; ++k) {
      auto rk = m.row(k);
      const double proj = dot(ri, rk);
      for (std::size_t c = 0; c < m.cols(); ++c) ri[c] -= proj * rk[c];
    }
    const double norm = l2_norm(ri);
    if (norm < 1e-10) throw NumericError("orthonormalize_rows: rank deficient input");
    for (auto& x : ri) x /= norm;
  }
}

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    const double norm = l2_norm(r);
    if (norm == 0.0) continue;
    for (auto& x : r) x /= norm;
  }
}

}  // namespace msae
