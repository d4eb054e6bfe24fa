#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace piattn {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EmptyNeighborhoodError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    void fill(double v);
    bool all_finite() const;
    std::string shape_str() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

// All products accumulate over the inner index in ascending order so results
// are bit-identical across runs.
Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Adds a 1 x cols bias row to every row of m.
void add_row_bias(Matrix& m, const Matrix& bias);
// Column sums as a 1 x cols matrix.
Matrix column_sums(const Matrix& m);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);

// Masked softmax over one row. Invalid entries receive exactly zero and never
// enter the exponent sum. Throws EmptyNeighborhoodError when nothing is valid.
std::vector<double> softmax_row(std::span<const double> logits, std::span<const bool> valid);
std::vector<double> softmax_row(std::span<const double> logits);

double gelu(double x);
double gelu_grad(double x);
double sigmoid(double x);

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormRow {
    std::vector<double> out;
    std::vector<double> xhat;
    double rstd = 0.0;
};

LayerNormRow layer_norm(std::span<const double> row, std::span<const double> gain,
                        std::span<const double> bias, double eps = kLayerNormEps);

// Central-difference gradient check. Returns the largest
// |numeric - analytic| / (|analytic| + 1e-8) over all coordinates.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_numeric = 0.0;
    double worst_analytic = 0.0;
};

using ScalarFn = std::function<double(std::span<const double>)>;

// two_point: (f(x+h) - f(x-h)) / 2h.
// four_point: Richardson combination (4 D(h) - D(2h)) / 3 of two central
// differences; truncation error O(h^4), so larger steps keep roundoff small.
enum class Stencil { two_point, four_point };

GradCheckResult grad_check(const ScalarFn& f, std::span<const double> point,
                           std::span<const double> analytic, double h = 1e-5,
                           Stencil stencil = Stencil::two_point);

// Seeded generator. The bit stream is std::mt19937_64 (fully specified by the
// standard); uniform doubles take the top 53 bits and normals use Box-Muller,
// so draws do not depend on the standard library's distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    // [0, 1)
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // [0, n)
    std::size_t below(std::size_t n);
    bool bernoulli(double p) { return uniform() < p; }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);
    Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace piattn
