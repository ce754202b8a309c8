#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gatenorm {

/// Dense row-major matrix of 32-bit reals.
///
/// A default-constructed tensor is the empty 0x0 placeholder; every other
/// constructor requires positive extents.
class Tensor2D {
public:
    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols);
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Tensor2D identity(std::size_t n);
    static Tensor2D from_rows(std::initializer_list<std::initializer_list<float>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    /// Move the storage out, leaving the empty tensor.
    std::vector<float> release() noexcept {
        rows_ = cols_ = 0;
        return std::move(data_);
    }

    std::string shape_string() const;

    bool operator==(const Tensor2D&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

using Vector = std::vector<float>;

enum class NormKind { layer_norm, rms_norm };
enum class ActivationKind { gelu, silu };

/// Per-position attendability flags for row_softmax. Entry (i, j) true means
/// row i may place weight on column j.
class SupportMask {
public:
    SupportMask(std::size_t rows, std::size_t cols, bool allowed = true);
    static SupportMask causal(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool allowed(std::size_t r, std::size_t c) const noexcept { return bits_[r * cols_ + c] != 0; }
    void set(std::size_t r, std::size_t c, bool allowed) noexcept { bits_[r * cols_ + c] = allowed ? 1 : 0; }
    std::size_t support(std::size_t r) const noexcept;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<std::uint8_t> bits_;
};

// Matrix products.
//
// Every output element is accumulated in float32 over the inner index in
// strictly ascending order, c_ij = ((a_i0 b_0j + a_i1 b_1j) + a_i2 b_2j) + ...,
// with fused multiply-add where the target supports it. The blocking only
// changes which elements are computed together, never the order of the
// additions into one element, so results are bitwise reproducible on a given
// build.

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b);
/// a · bᵀ without the caller materializing the transpose.
Tensor2D matmul_transposed(const Tensor2D& a, const Tensor2D& b);
Tensor2D transpose(const Tensor2D& a);

/// Multiply-accumulate count of matmul(a, b) for the given shapes.
inline std::uint64_t matmul_macs(std::size_t m, std::size_t k, std::size_t n) {
    return static_cast<std::uint64_t>(m) * k * n;
}

/// sqrt(sum of squares), accumulated in double in row-major order.
double frobenius_norm(const Tensor2D& a);

/// Numerically stabilized softmax of every row. Masked entries are exactly 0.
/// Throws ContractError when a row has no allowed position.
Tensor2D row_softmax(const Tensor2D& logits, const SupportMask* mask = nullptr);

/// In-place softmax over row[0, support); entries at and beyond `support` are
/// set to 0. This is the causal-attention fast path.
void softmax_prefix(std::span<float> row, std::size_t support);

Vector rms_norm(std::span<const float> x, std::span<const float> gain, float eps);
Vector layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias, float eps);

/// GELU uses the tanh approximation
///   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
float gelu(float x);
/// x * sigmoid(x)
float silu(float x);
Vector activation(std::span<const float> x, ActivationKind kind);
void activation_inplace(Tensor2D& x, ActivationKind kind);

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> x);

/// aᵀb / (|a| |b|), clamped to [-1, 1]. Zero-norm input is a ContractError.
double cosine(std::span<const float> a, std::span<const float> b);

Vector column_mean(const Tensor2D& rows);
/// Subtract the column-wise mean row from every row.
Tensor2D mean_center(const Tensor2D& rows);

Tensor2D add(const Tensor2D& a, const Tensor2D& b);
void add_inplace(Tensor2D& a, const Tensor2D& b);
Tensor2D scaled(const Tensor2D& a, float s);
bool all_finite(const Tensor2D& a);

}  // namespace gatenorm
