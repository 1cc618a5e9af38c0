#include "mpot/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpot {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
            double* orow = &out.data[static_cast<size_t>(i) * out.cols];
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    Matrix out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

bool all_finite(const Matrix& a) {
    return std::all_of(a.data.begin(), a.data.end(),
                       [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

double logsumexp(const double* x, int n, int stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, x[static_cast<size_t>(i) * stride]);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(x[static_cast<size_t>(i) * stride] - mx);
    return mx + std::log(s);
}

Matrix random_normal(int rows, int cols, Rng& rng, double stddev) {
    Matrix out(rows, cols);
    for (auto& v : out.data) v = rng.normal(0.0, stddev);
    return out;
}

Matrix random_uniform(int rows, int cols, Rng& rng, double lo, double hi) {
    Matrix out(rows, cols);
    for (auto& v : out.data) v = rng.uniform(lo, hi);
    return out;
}

}  // namespace mpot
