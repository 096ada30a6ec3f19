#include "ppd/numerics.hpp"

#include "ppd/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ppd {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix & m) {
    return ConstMap(m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

MutMap view(Matrix & m) {
    return MutMap(m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
}

std::string dims(const Matrix & m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Shape:
        case ErrorKind::Infeasible:
        case ErrorKind::Profile:
            return 2;
        case ErrorKind::Data:
        case ErrorKind::Format:
            return 3;
        case ErrorKind::Domain:
        case ErrorKind::Capacity:
        case ErrorKind::Numeric:
            return 4;
    }
    return 1;
}

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<float>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto & r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("ragged matrix literal");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0f;
    }
    return m;
}

Matrix Matrix::row_vector(std::span<const float> values) {
    return Matrix(1, values.size(), std::vector<float>(values.begin(), values.end()));
}

void Matrix::fill(float value) {
    std::fill(data_.begin(), data_.end(), value);
}

void Matrix::append_rows(const Matrix & other) {
    if (other.rows_ == 0) {
        return;
    }
    if (rows_ == 0 && cols_ == 0) {
        cols_ = other.cols_;
    }
    if (other.cols_ != cols_) {
        throw ShapeError("append_rows: column mismatch " + dims(*this) + " vs " + dims(other));
    }
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
}

void Matrix::resize_rows(std::size_t rows) {
    rows_ = rows;
    data_.resize(rows * cols_);
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix & a, const Matrix & b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + dims(a) + " x " + dims(b));
    }
    // Row-by-row accumulation in a fixed order: an output row depends only on
    // its own input row, bit for bit, whatever the batch size.
    Matrix out(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    const std::size_t width = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        float * __restrict o = out.row(i).data();
        const float * ar = a.row(i).data();
        for (std::size_t k = 0; k < inner; ++k) {
            const float s = ar[k];
            const float * __restrict br = b.row(k).data();
            for (std::size_t j = 0; j < width; ++j) {
                o[j] += s * br[j];
            }
        }
    }
    return out;
}

Matrix matmul_bt(const Matrix & a, const Matrix & b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_bt: " + dims(a) + " x " + dims(b) + "^T");
    }
    Matrix out(a.rows(), b.rows());
    if (out.size() == 0 || a.cols() == 0) {
        return out;
    }
    view(out).noalias() = view(a) * view(b).transpose();
    return out;
}

Matrix matmul_at(const Matrix & a, const Matrix & b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_at: " + dims(a) + "^T x " + dims(b));
    }
    Matrix out(a.cols(), b.cols());
    if (out.size() == 0 || a.rows() == 0) {
        return out;
    }
    view(out).noalias() = view(a).transpose() * view(b);
    return out;
}

Matrix transpose(const Matrix & a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(c, r) = a(r, c);
        }
    }
    return out;
}

Matrix masked_softmax_rows(const Matrix & logits, const Matrix & additive_mask) {
    if (logits.rows() != additive_mask.rows() || logits.cols() != additive_mask.cols()) {
        throw ShapeError("masked_softmax_rows: logits " + dims(logits) + " vs mask " + dims(additive_mask));
    }
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto x = logits.row(r);
        auto mask = additive_mask.row(r);
        float max_v = -std::numeric_limits<float>::infinity();
        bool any_open = false;
        for (std::size_t c = 0; c < x.size(); ++c) {
            if (mask[c] > kMaskBlockedThreshold) {
                any_open = true;
                max_v = std::max(max_v, x[c] + mask[c]);
            }
        }
        if (!any_open) {
            throw DomainError("masked_softmax_rows: row " + std::to_string(r) + " is fully masked");
        }
        double denom = 0.0;
        auto y = out.row(r);
        for (std::size_t c = 0; c < x.size(); ++c) {
            if (mask[c] > kMaskBlockedThreshold) {
                const float e = std::exp(x[c] + mask[c] - max_v);
                y[c] = e;
                denom += e;
            } else {
                y[c] = 0.0f;
            }
        }
        const double inv = 1.0 / denom;
        for (auto & v : y) {
            v = static_cast<float>(v * inv);
        }
    }
    return out;
}

std::vector<float> softmax(std::span<const float> logits) {
    std::vector<float> out(logits.size());
    if (logits.empty()) {
        return out;
    }
    const float max_v = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_v);
        denom += out[i];
    }
    const double inv = 1.0 / denom;
    for (auto & v : out) {
        v = static_cast<float>(v * inv);
    }
    return out;
}

std::vector<float> log_softmax(std::span<const float> logits) {
    std::vector<float> out(logits.size());
    if (logits.empty()) {
        return out;
    }
    const float max_v = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (float v : logits) {
        denom += std::exp(static_cast<double>(v - max_v));
    }
    const double log_z = std::log(denom) + max_v;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = static_cast<float>(logits[i] - log_z);
    }
    return out;
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                              float eps) {
    if (gain.size() != x.size() || bias.size() != x.size()) {
        throw ShapeError("layer_norm: length mismatch");
    }
    if (x.empty()) {
        return {};
    }
    double mean = 0.0;
    for (float v : x) {
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (float v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(x.size());
    const double denom = std::sqrt(var + eps);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        // A zero-variance row normalizes to zero rather than 0/0.
        const double centered = x[i] - mean;
        const double normed = denom > 0.0 ? centered / denom : 0.0;
        out[i] = static_cast<float>(normed * gain[i] + bias[i]);
    }
    return out;
}

double kl_divergence(std::span<const float> p, std::span<const float> q) {
    if (p.size() != q.size()) {
        throw ShapeError("kl_divergence: length mismatch");
    }
    double sum_p = 0.0;
    double sum_q = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sum_p += p[i];
        sum_q += q[i];
    }
    if (std::abs(sum_p - 1.0) > 1e-5 || std::abs(sum_q - 1.0) > 1e-5) {
        throw DomainError("kl_divergence: inputs must sum to 1");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0f) {
            continue;
        }
        if (q[i] <= 0.0f) {
            throw DomainError("kl_divergence: q is zero where p is positive (index " + std::to_string(i) + ")");
        }
        kl += static_cast<double>(p[i]) * std::log(static_cast<double>(p[i]) / static_cast<double>(q[i]));
    }
    return std::max(kl, 0.0);
}

double entropy(std::span<const float> p) {
    double h = 0.0;
    for (float v : p) {
        if (v > 0.0f) {
            h -= static_cast<double>(v) * std::log(static_cast<double>(v));
        }
    }
    return h;
}

float gelu(float x) {
    // tanh approximation
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    const float inner = k * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(inner));
}

float gelu_grad(float x) {
    constexpr float k = 0.7978845608028654f;
    const float x2 = x * x;
    const float inner = k * (x + 0.044715f * x2 * x);
    const float t = std::tanh(inner);
    const float sech2 = 1.0f - t * t;
    return 0.5f * (1.0f + t) + 0.5f * x * sech2 * k * (1.0f + 3.0f * 0.044715f * x2);
}

std::size_t argmax(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i) {
        if (row[i] > row[best]) {
            best = i;
        }
    }
    return best;
}

} // namespace ppd
