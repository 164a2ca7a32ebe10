#include "putri/linalg.hpp"

#include <cmath>
#include <string>

#include "putri/parallel.hpp"

namespace putri {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void check_mul_shapes(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a) + " * " + shape_str(b));
    }
}

// Per-entry accumulation runs in ascending p order regardless of the loop
// nest, so the blocked form below is bit-identical to the naive triple loop.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& out, int64_t i,
                       std::vector<double>& acc) {
    const int64_t k = a.cols(), m = b.cols();
    const float* arow = a.row_ptr(i);
    acc.assign(static_cast<size_t>(m), 0.0);
    for (int64_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const float* brow = b.row_ptr(p);
        for (int64_t j = 0; j < m; ++j) {
            acc[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
        }
    }
    float* orow = out.row_ptr(i);
    for (int64_t j = 0; j < m; ++j) orow[j] = static_cast<float>(acc[static_cast<size_t>(j)]);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a, b);
    Matrix out(a.rows(), b.cols());
    const int64_t n = a.rows();
    const bool par = parallel_enabled() && n * b.cols() * a.cols() >= 16384;
#pragma omp parallel if (par)
    {
        std::vector<double> acc;
#pragma omp for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            matmul_row(a, b, out, i, acc);
        }
    }
    return out;
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    check_mul_shapes(a, b);
    Matrix out(a.rows(), b.cols());
    std::vector<double> acc;
    for (int64_t i = 0; i < a.rows(); ++i) {
        matmul_row(a, b, out, i, acc);
    }
    return out;
}

std::vector<double> column_sq_norms(const Matrix& x) {
    std::vector<double> norms(static_cast<size_t>(x.cols()), 0.0);
    const int64_t n = x.rows(), m = x.cols();
    const bool par = parallel_enabled() && n * m >= 16384;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const double v = x.at(i, j);
            acc += v * v;
        }
        norms[static_cast<size_t>(j)] = acc;
    }
    return norms;
}

double frob_sq_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("frob_sq_diff shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    return acc;
}

namespace {

// In-place lower Cholesky of g (n x n, row-major doubles). Returns false on
// a non-positive or non-finite pivot.
bool cholesky(std::vector<double>& g, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double acc = g[i * n + j];
            for (int64_t p = 0; p < j; ++p) acc -= g[i * n + p] * g[j * n + p];
            if (i == j) {
                if (!(acc > 0.0) || !std::isfinite(acc)) return false;
                g[i * n + i] = std::sqrt(acc);
            } else {
                g[i * n + j] = acc / g[j * n + j];
            }
        }
    }
    return true;
}

}  // namespace

Matrix solve_normal_equations(const Matrix& xp, const Matrix& target, double ridge,
                              SolveStats* stats) {
    if (xp.rows() != target.rows()) {
        throw ShapeError("solve_normal_equations row mismatch: " + shape_str(xp) + " vs " +
                         shape_str(target));
    }
    if (ridge < 0.0) throw Error("ridge must be >= 0");

    const int64_t n = xp.rows(), p = xp.cols(), m = target.cols();

    // Gram = xp^T xp and rhs = xp^T target, both in 64-bit.
    std::vector<double> gram(static_cast<size_t>(p * p), 0.0);
    std::vector<double> rhs(static_cast<size_t>(p * m), 0.0);
    const bool par = parallel_enabled() && n * p >= 16384;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < p; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < n; ++r) {
                acc += static_cast<double>(xp.at(r, i)) * static_cast<double>(xp.at(r, j));
            }
            gram[i * p + j] = acc;
            gram[j * p + i] = acc;
        }
        for (int64_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < n; ++r) {
                acc += static_cast<double>(xp.at(r, i)) * static_cast<double>(target.at(r, j));
            }
            rhs[i * m + j] = acc;
        }
    }

    double mean_diag = 0.0;
    for (int64_t i = 0; i < p; ++i) mean_diag += gram[i * p + i];
    mean_diag = p > 0 ? mean_diag / static_cast<double>(p) : 0.0;

    const int max_escalations = 6;
    double current = ridge;
    std::vector<double> chol;
    bool ok = false;
    int escalations = 0;
    for (int attempt = 0; attempt <= max_escalations; ++attempt) {
        chol = gram;
        for (int64_t i = 0; i < p; ++i) chol[i * p + i] += current;
        if (cholesky(chol, p)) {
            ok = true;
            break;
        }
        ++escalations;
        if (attempt == 0) {
            current = std::max(ridge, 1e-8 * mean_diag);
            if (current == 0.0) current = 1e-12;  // all-zero Gram diagonal
        } else {
            current *= 10.0;
        }
    }
    if (!ok) {
        throw SingularSystemError(
            "normal equations singular after ridge escalation (final ridge " +
                format_g6(current) + ")",
            current);
    }
    if (stats) {
        stats->escalations = escalations;
        stats->final_ridge = current;
    }

    // Solve L L^T w = rhs column-wise.
    Matrix out(p, m);
    std::vector<double> y(static_cast<size_t>(p));
    for (int64_t j = 0; j < m; ++j) {
        for (int64_t i = 0; i < p; ++i) {
            double acc = rhs[i * m + j];
            for (int64_t q = 0; q < i; ++q) acc -= chol[i * p + q] * y[q];
            y[i] = acc / chol[i * p + i];
        }
        for (int64_t i = p - 1; i >= 0; --i) {
            double acc = y[i];
            for (int64_t q = i + 1; q < p; ++q) acc -= chol[q * p + i] * y[q];
            y[i] = acc / chol[i * p + i];
            out.at(i, j) = static_cast<float>(y[i]);
        }
    }
    out.require_finite("normal-equation solution");
    return out;
}

}  // namespace putri
