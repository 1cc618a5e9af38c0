#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace mpot {

// Dense row-major matrix of doubles. Everything in this project is small
// enough that we never need anything fancier.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);

bool all_finite(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Shift-by-max log(sum(exp)). Shared by the plain and taped Sinkhorn
// updates so both routes produce identical forward values.
double logsumexp(const double* x, int n, int stride);

// Thin deterministic RNG wrapper; every random draw in the project goes
// through one of these with an explicit seed.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(eng_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(eng_);
    }
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(eng_);
    }
    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

Matrix random_normal(int rows, int cols, Rng& rng, double stddev = 1.0);
Matrix random_uniform(int rows, int cols, Rng& rng, double lo, double hi);

}  // namespace mpot
