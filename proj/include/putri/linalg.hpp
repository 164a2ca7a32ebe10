#pragma once

#include <vector>

#include "putri/matrix.hpp"

namespace putri {

// a (n x k) times b (k x m). 64-bit accumulation per output entry, inner
// loop in fixed index order; the OpenMP split over output rows is
// bit-identical to matmul_serial.
Matrix matmul(const Matrix& a, const Matrix& b);

// Plain triple loop, no OpenMP. Reference for tests and the benchmark.
Matrix matmul_serial(const Matrix& a, const Matrix& b);

// result[j] = sum_i x[i,j]^2, accumulated in 64-bit.
std::vector<double> column_sq_norms(const Matrix& x);

// ||a - b||_F^2 in 64-bit.
double frob_sq_diff(const Matrix& a, const Matrix& b);

struct SolveStats {
    int escalations = 0;     // extra factorization attempts beyond the first
    double final_ridge = 0;  // ridge that produced the returned factor
};

// Solves (xp^T xp + ridge I) W = xp^T target by dense Cholesky in 64-bit
// and returns W as (xp.cols x target.cols) float storage.
//
// If the factorization fails, the ridge escalates geometrically (x10)
// starting from max(ridge, 1e-8 * mean Gram diagonal), up to 6 escalations,
// then throws SingularSystemError carrying the last ridge tried.
Matrix solve_normal_equations(const Matrix& xp, const Matrix& target, double ridge,
                              SolveStats* stats = nullptr);

}  // namespace putri
