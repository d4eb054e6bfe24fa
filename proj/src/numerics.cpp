#include "piattn/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <memory>

namespace piattn {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged rows in Matrix::from_rows");
        std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) throw NumericError(std::string(what) + ": non-finite result");
}

}  // namespace

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ (" + a.shape_str() + " x " + b.shape_str() + ")");
    }
    Matrix c(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t nc = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* out = c.row(i).data();
        const double* arow = a.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < nc; ++j) out[j] += aik * brow[j];
        }
    }
    require_finite(c, "matmul");
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: row counts differ (" + a.shape_str() + "^T x " + b.shape_str() + ")");
    }
    Matrix c(a.cols(), b.cols());
    const std::size_t nc = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* arow = a.row(k).data();
        const double* brow = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* out = c.row(i).data();
            for (std::size_t j = 0; j < nc; ++j) out[j] += aki * brow[j];
        }
    }
    require_finite(c, "matmul_tn");
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: column counts differ (" + a.shape_str() + " x " + b.shape_str() + "^T)");
    }
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    }
    require_finite(c, "matmul_nt");
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != m.cols()) {
        throw ShapeError("add_row_bias: bias " + bias.shape_str() + " for matrix " + m.shape_str());
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) r[j] += bias(0, j);
    }
}

Matrix column_sums(const Matrix& m) {
    Matrix s(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) s(0, j) += r[j];
    }
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<double> softmax_row(std::span<const double> logits, std::span<const bool> valid) {
    if (logits.size() != valid.size()) throw ShapeError("softmax_row: mask length mismatch");
    double mx = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (!valid[j]) continue;
        if (!any || logits[j] > mx) mx = logits[j];
        any = true;
    }
    if (!any) throw EmptyNeighborhoodError("empty neighborhood");
    std::vector<double> p(logits.size(), 0.0);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (!valid[j]) continue;
        p[j] = std::exp(logits[j] - mx);
        sum += p[j];
    }
    for (std::size_t j = 0; j < logits.size(); ++j) p[j] /= sum;
    return p;
}

std::vector<double> softmax_row(std::span<const double> logits) {
    // std::vector<bool> is not contiguous, so spans need a plain bool array.
    std::unique_ptr<bool[]> valid(new bool[logits.size()]);
    std::fill(valid.get(), valid.get() + logits.size(), true);
    return softmax_row(logits, std::span<const bool>(valid.get(), logits.size()));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    return cdf + x * pdf;
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

LayerNormRow layer_norm(std::span<const double> row, std::span<const double> gain,
                        std::span<const double> bias, double eps) {
    const std::size_t d = row.size();
    if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias width mismatch");
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    LayerNormRow r;
    r.rstd = 1.0 / std::sqrt(var + eps);
    r.xhat.resize(d);
    r.out.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        r.xhat[j] = (row[j] - mean) * r.rstd;
        r.out[j] = r.xhat[j] * gain[j] + bias[j];
    }
    return r;
}

GradCheckResult grad_check(const ScalarFn& f, std::span<const double> point,
                           std::span<const double> analytic, double h, Stencil stencil) {
    if (point.size() != analytic.size()) throw ShapeError("grad_check: gradient length mismatch");
    if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-3]");
    std::vector<double> x(point.begin(), point.end());
    GradCheckResult res;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        auto central = [&](double step) {
            x[i] = orig + step;
            const double fp = f(x);
            x[i] = orig - step;
            const double fm = f(x);
            x[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("grad_check: non-finite function value near coordinate " + std::to_string(i));
            }
            return (fp - fm) / (2.0 * step);
        };
        const double d1 = central(h);
        const double numeric = stencil == Stencil::two_point ? d1 : (4.0 * d1 - central(2.0 * h)) / 3.0;
        const double rel = std::abs(numeric - analytic[i]) / (std::abs(analytic[i]) + 1e-8);
        if (i == 0 || rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
            res.worst_numeric = numeric;
            res.worst_analytic = analytic[i];
        }
    }
    return res;
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return static_cast<std::size_t>(v % n);
}

Matrix Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = stddev * normal();
    return m;
}

Matrix Rng::uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = uniform(lo, hi);
    return m;
}

}  // namespace piattn
