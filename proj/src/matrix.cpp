#include "putri/matrix.hpp"

#include <cmath>
#include <string>

namespace putri {

Matrix::Matrix(int64_t rows, int64_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

bool Matrix::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Matrix::require_finite(const char* what) const {
    if (!all_finite()) {
        throw FormatError(std::string("non-finite entries in ") + what);
    }
}

Matrix Matrix::select_columns(const std::vector<int>& cols) const {
    Matrix out(rows_, static_cast<int64_t>(cols.size()));
    for (int64_t r = 0; r < rows_; ++r) {
        const float* src = row_ptr(r);
        float* dst = out.row_ptr(r);
        for (size_t j = 0; j < cols.size(); ++j) dst[j] = src[cols[j]];
    }
    return out;
}

Matrix Matrix::select_rows(const std::vector<int>& rows) const {
    Matrix out(static_cast<int64_t>(rows.size()), cols_);
    for (size_t i = 0; i < rows.size(); ++i) {
        const float* src = row_ptr(rows[i]);
        float* dst = out.row_ptr(static_cast<int64_t>(i));
        for (int64_t j = 0; j < cols_; ++j) dst[j] = src[j];
    }
    return out;
}

Matrix Matrix::drop_column_range(int64_t begin, int64_t end) const {
    Matrix out(rows_, cols_ - (end - begin));
    for (int64_t r = 0; r < rows_; ++r) {
        const float* src = row_ptr(r);
        float* dst = out.row_ptr(r);
        int64_t k = 0;
        for (int64_t j = 0; j < begin; ++j) dst[k++] = src[j];
        for (int64_t j = end; j < cols_; ++j) dst[k++] = src[j];
    }
    return out;
}

Matrix Matrix::drop_row_range(int64_t begin, int64_t end) const {
    Matrix out(rows_ - (end - begin), cols_);
    int64_t k = 0;
    for (int64_t r = 0; r < rows_; ++r) {
        if (r >= begin && r < end) continue;
        const float* src = row_ptr(r);
        float* dst = out.row_ptr(k++);
        for (int64_t j = 0; j < cols_; ++j) dst[j] = src[j];
    }
    return out;
}

}  // namespace putri
