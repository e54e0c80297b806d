#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "msae/matrix.hpp"
#include "msae/rng.hpp"

namespace msae {

// out(i, j) = cos(a.row(i), b.row(j)); a zero-norm row gives similarity 0.
Matrix cosine_sim_matrix(const Matrix& a, const Matrix& b);

double cosine(std::span<const double> a, std::span<const double> b);

// Minimum-cost injective assignment of the rows of an n x m cost matrix
// (n <= m) to columns. result[i] is the column assigned to row i.
//
// Shortest augmenting path with dual potentials, O(n^2 m). Columns are
// scanned in ascending order with strict comparisons, so whenever several
// columns tie the lowest index wins.
std::vector<std::size_t> hungarian_match(const Matrix& cost);

double assignment_cost(const Matrix& cost, const std::vector<std::size_t>& assignment);

using ScalarFn = std::function<double(const Matrix&)>;

// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every entry.
Matrix finite_diff_grad(const ScalarFn& loss, const Matrix& params, double h = 1e-5);

// rows x cols matrix of Gaussian entries.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng);

// Orthonormalizes the rows of `m` in place (modified Gram-Schmidt, i.e. the
// Q factor of a QR decomposition of m^T). Requires rows <= cols and full rank.
void orthonormalize_rows(Matrix& m);

// Scales each nonzero row to unit L2 norm.
void normalize_rows(Matrix& m);

}  // namespace msae
