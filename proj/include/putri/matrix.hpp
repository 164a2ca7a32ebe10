#pragma once

#include <cstdint>
#include <vector>

#include "putri/common.hpp"

namespace putri {

// Dense row-major matrix. Storage is 32-bit float; every reduction that
// consumes it (matmul, Gram matrices, softmax, Cholesky) accumulates in
// 64-bit.
class Matrix {
  public:
    Matrix() = default;
    Matrix(int64_t rows, int64_t cols)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), 0.0f) {}
    Matrix(int64_t rows, int64_t cols, std::vector<float> data);

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t size() const { return rows_ * cols_; }
    bool empty() const { return rows_ == 0 || cols_ == 0; }

    float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
    float at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }

    float* row_ptr(int64_t r) { return data_.data() + r * cols_; }
    const float* row_ptr(int64_t r) const { return data_.data() + r * cols_; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    const std::vector<float>& storage() const { return data_; }

    bool all_finite() const;
    // Throws FormatError naming `what` if any entry is NaN/Inf.
    void require_finite(const char* what) const;

    // Columns picked by ascending index list; order preserved.
    Matrix select_columns(const std::vector<int>& cols) const;
    // Rows picked by ascending index list; order preserved.
    Matrix select_rows(const std::vector<int>& rows) const;
    // Drops the half-open column range [begin, end).
    Matrix drop_column_range(int64_t begin, int64_t end) const;
    Matrix drop_row_range(int64_t begin, int64_t end) const;

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

  private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<float> data_;
};

}  // namespace putri
