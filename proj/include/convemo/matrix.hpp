#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace convemo {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major matrix of doubles. Immutable by convention once built:
// ops return new values instead of mutating arguments.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ShapeError("negative matrix dimension");
    }
    Matrix(int rows, int cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != static_cast<size_t>(rows) * cols)
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = static_cast<int>(init.size());
        cols_ = rows_ ? static_cast<int>(init.begin()->size()) : 0;
        data_.reserve(static_cast<size_t>(rows_) * cols_);
        for (const auto& row : init) {
            if (static_cast<int>(row.size()) != cols_)
                throw ShapeError("ragged initializer list");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix column(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Matrix(n, 1, std::move(v));
    }
    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](double x) { return std::isfinite(x); });
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " * " + b.shape_str());
    Matrix c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j)
                c.at(i, j) += aik * b.at(k, j);
        }
    return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "add");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "sub");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "hadamard");
    Matrix c = a;
    for (size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

inline Matrix scale(const Matrix& m, double c) {
    Matrix r = m;
    for (size_t i = 0; i < r.size(); ++i) r[i] *= c;
    return r;
}

inline Matrix tanh_ew(const Matrix& m) {
    Matrix r = m;
    for (size_t i = 0; i < r.size(); ++i) r[i] = std::tanh(r[i]);
    return r;
}

inline double sigmoid(double x) {
    // Branch avoids exp overflow on large negative input.
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Matrix sigmoid_ew(const Matrix& m) {
    Matrix r = m;
    for (size_t i = 0; i < r.size(); ++i) r[i] = sigmoid(r[i]);
    return r;
}

inline Matrix transpose(const Matrix& m) {
    Matrix r(m.cols(), m.rows());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j)
            r.at(j, i) = m.at(i, j);
    return r;
}

// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& m) {
    Matrix r = m;
    for (int i = 0; i < m.rows(); ++i) {
        double mx = r.at(i, 0);
        for (int j = 1; j < m.cols(); ++j) mx = std::max(mx, r.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < m.cols(); ++j) {
            r.at(i, j) = std::exp(r.at(i, j) - mx);
            sum += r.at(i, j);
        }
        for (int j = 0; j < m.cols(); ++j) r.at(i, j) /= sum;
    }
    return r;
}

inline Matrix concat_cols(const std::vector<Matrix>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty list");
    int total = 0;
    for (const auto& p : parts) {
        if (p.rows() != parts[0].rows())
            throw ShapeError("concat_cols: row mismatch " + p.shape_str() +
                             " vs " + parts[0].shape_str());
        total += p.cols();
    }
    Matrix r(parts[0].rows(), total);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < p.cols(); ++j)
                r.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    return r;
}

inline Matrix concat_rows(const std::vector<Matrix>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty list");
    int total = 0;
    for (const auto& p : parts) {
        if (p.cols() != parts[0].cols())
            throw ShapeError("concat_rows: col mismatch " + p.shape_str() +
                             " vs " + parts[0].shape_str());
        total += p.rows();
    }
    Matrix r(total, parts[0].cols());
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < p.cols(); ++j)
                r.at(off + i, j) = p.at(i, j);
        off += p.rows();
    }
    return r;
}

inline Matrix slice_cols(const Matrix& m, int begin, int end) {
    if (begin < 0 || end > m.cols() || begin > end)
        throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + m.shape_str());
    Matrix r(m.rows(), end - begin);
    for (int i = 0; i < m.rows(); ++i)
        for (int j = begin; j < end; ++j)
            r.at(i, j - begin) = m.at(i, j);
    return r;
}

inline Matrix slice_rows(const Matrix& m, int begin, int end) {
    if (begin < 0 || end > m.rows() || begin > end)
        throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + m.shape_str());
    Matrix r(end - begin, m.cols());
    for (int i = begin; i < end; ++i)
        for (int j = 0; j < m.cols(); ++j)
            r.at(i - begin, j) = m.at(i, j);
    return r;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "max_abs_diff");
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

}  // namespace convemo
