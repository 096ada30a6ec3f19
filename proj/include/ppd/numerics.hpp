#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace ppd {

// Additive bias standing in for -inf in attention masks.
inline constexpr float kMaskBlocked = -1e9f;

// Anything at or below this is treated as a blocked mask entry.
inline constexpr float kMaskBlockedThreshold = -1e8f;

// Dense row-major float matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
    Matrix(std::initializer_list<std::initializer_list<float>> rows);

    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::span<const float> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float & operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float> & storage() const noexcept { return data_; }

    void fill(float value);
    // Appends the rows of `other` (same column count) below this matrix.
    void append_rows(const Matrix & other);
    void resize_rows(std::size_t rows);

    bool all_finite() const;

    friend bool operator==(const Matrix &, const Matrix &) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

Matrix matmul(const Matrix & a, const Matrix & b);
// a * b^T
Matrix matmul_bt(const Matrix & a, const Matrix & b);
// a^T * b
Matrix matmul_at(const Matrix & a, const Matrix & b);
Matrix transpose(const Matrix & a);

// Row-wise softmax of (logits + mask). A row whose entries are all blocked is
// rejected; blocked entries come out exactly zero.
Matrix masked_softmax_rows(const Matrix & logits, const Matrix & additive_mask);

std::vector<float> softmax(std::span<const float> logits);
std::vector<float> log_softmax(std::span<const float> logits);

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gain,
                              std::span<const float> bias, float eps);

// Sum p ln(p/q) with the 0 ln 0 = 0 convention.
double kl_divergence(std::span<const float> p, std::span<const float> q);

// Shannon entropy in nats.
double entropy(std::span<const float> p);

float gelu(float x);
float gelu_grad(float x);

// Argmax with ties resolved toward the smallest index.
std::size_t argmax(std::span<const float> row);

} // namespace ppd
