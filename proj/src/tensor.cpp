#include "gatenorm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include <fmt/core.h>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

#include "gatenorm/error.hpp"

namespace gatenorm {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {
    if (rows == 0 || cols == 0) {
        throw ContractError(fmt::format("tensor extents must be positive, got {}x{}", rows, cols));
    }
}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
        throw ContractError(fmt::format("tensor extents must be positive, got {}x{}", rows, cols));
    }
    if (data_.size() != rows * cols) {
        throw ContractError(fmt::format("tensor {}x{} needs {} values, got {}", rows, cols, rows * cols, data_.size()));
    }
}

Tensor2D Tensor2D::identity(std::size_t n) {
    Tensor2D t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
    return t;
}

Tensor2D Tensor2D::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ContractError("ragged row list");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2D(r, c, std::move(data));
}

std::string Tensor2D::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

SupportMask::SupportMask(std::size_t rows, std::size_t cols, bool allowed)
    : rows_(rows), cols_(cols), bits_(rows * cols, allowed ? 1 : 0) {}

SupportMask SupportMask::causal(std::size_t n) {
    SupportMask m(n, n, false);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
}

std::size_t SupportMask::support(std::size_t r) const noexcept {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
    return n;
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

namespace {

typedef float vec16 __attribute__((vector_size(64)));
typedef float vec16u __attribute__((vector_size(64), aligned(4)));

constexpr std::size_t kLanes = 16;
constexpr std::size_t kTileRows = 6;
constexpr std::size_t kTileCols = 4 * kLanes;
constexpr std::size_t kDepthBlock = 256;
constexpr std::size_t kRowBlock = 8 * kTileRows;
constexpr std::size_t kColBlock = 1024;

inline vec16 load16(const float* p) { return *reinterpret_cast<const vec16u*>(p); }
inline void store16(float* p, vec16 v) { *reinterpret_cast<vec16u*>(p) = v; }

inline vec16 broadcast16(const float* p) {
#ifdef __AVX512F__
    return reinterpret_cast<vec16>(_mm512_broadcastss_ps(_mm_load_ss(p)));
#else
    return vec16{} + *p;
#endif
}

// One kTileRows x kTileCols tile of C. `a` is packed row-interleaved
// (a[p * kTileRows + r]), `b` is packed as kc rows of kTileCols.
// When `accumulate` the running sums are resumed from C, which keeps the
// per-element order strictly sequential across depth blocks.
void tile_kernel(const float* a, const float* b, std::size_t kc, float* c, std::size_t ldc, bool accumulate) {
    vec16 acc[kTileRows][4];
#pragma GCC unroll 6
    for (std::size_t r = 0; r < kTileRows; ++r) {
#pragma GCC unroll 4
        for (std::size_t v = 0; v < 4; ++v) acc[r][v] = accumulate ? load16(c + r * ldc + v * kLanes) : vec16{};
    }
    for (std::size_t p = 0; p < kc; ++p) {
        const float* bp = b + p * kTileCols;
        const vec16 b0 = load16(bp), b1 = load16(bp + 16), b2 = load16(bp + 32), b3 = load16(bp + 48);
#pragma GCC unroll 6
        for (std::size_t r = 0; r < kTileRows; ++r) {
            const vec16 av = broadcast16(a + p * kTileRows + r);
            acc[r][0] = acc[r][0] + av * b0;
            acc[r][1] = acc[r][1] + av * b1;
            acc[r][2] = acc[r][2] + av * b2;
            acc[r][3] = acc[r][3] + av * b3;
        }
    }
#pragma GCC unroll 6
    for (std::size_t r = 0; r < kTileRows; ++r) {
#pragma GCC unroll 4
        for (std::size_t v = 0; v < 4; ++v) store16(c + r * ldc + v * kLanes, acc[r][v]);
    }
}

// C (m x n) = A (m x k) * op(B), op(B) = B (k x n) or Bᵀ with B (n x k).
// For each packed strip of B, every kTileRows-row panel of the current
// kRowBlock x kc block of packed A is applied in turn.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool b_transposed) {
    std::vector<float> bpack(kDepthBlock * kColBlock);
    std::vector<float> apack(kRowBlock * kDepthBlock);
    float edge[kTileRows * kTileCols];

    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t kc = std::min(kDepthBlock, k - p0);
        const bool accumulate = p0 != 0;
        for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
            const std::size_t nc = std::min(kColBlock, n - j0);
            // Pack op(B)[p0:p0+kc, j0:j0+nc] into zero-padded strips of kTileCols.
            for (std::size_t js = 0; js < nc; js += kTileCols) {
                float* strip = bpack.data() + js * kc;
                const std::size_t w = std::min(kTileCols, nc - js);
                for (std::size_t p = 0; p < kc; ++p) {
                    float* dst = strip + p * kTileCols;
                    if (!b_transposed) {
                        std::memcpy(dst, b + (p0 + p) * n + j0 + js, w * sizeof(float));
                    } else {
                        for (std::size_t j = 0; j < w; ++j) dst[j] = b[(j0 + js + j) * k + p0 + p];
                    }
                    std::fill(dst + w, dst + kTileCols, 0.0f);
                }
            }
            for (std::size_t i0 = 0; i0 < m; i0 += kRowBlock) {
                const std::size_t mc = std::min(kRowBlock, m - i0);
                // Pack A[i0:i0+mc, p0:p0+kc] as zero-padded row-interleaved panels.
                for (std::size_t ir = 0; ir < mc; ir += kTileRows) {
                    const std::size_t h = std::min(kTileRows, mc - ir);
                    float* panel = apack.data() + ir * kc;
                    for (std::size_t r = 0; r < kTileRows; ++r) {
                        const float* src = r < h ? a + (i0 + ir + r) * k + p0 : nullptr;
                        for (std::size_t p = 0; p < kc; ++p) panel[p * kTileRows + r] = src ? src[p] : 0.0f;
                    }
                }
                for (std::size_t js = 0; js < nc; js += kTileCols) {
                    const std::size_t w = std::min(kTileCols, nc - js);
                    const float* strip = bpack.data() + js * kc;
                    for (std::size_t ir = 0; ir < mc; ir += kTileRows) {
                        const std::size_t h = std::min(kTileRows, mc - ir);
                        const float* panel = apack.data() + ir * kc;
                        float* cblock = c + (i0 + ir) * n + j0 + js;
                        if (h == kTileRows && w == kTileCols) {
                            tile_kernel(panel, strip, kc, cblock, n, accumulate);
                            continue;
                        }
                        std::fill(std::begin(edge), std::end(edge), 0.0f);
                        if (accumulate) {
                            for (std::size_t r = 0; r < h; ++r) std::memcpy(edge + r * kTileCols, cblock + r * n, w * sizeof(float));
                        }
                        tile_kernel(panel, strip, kc, edge, kTileCols, accumulate);
                        for (std::size_t r = 0; r < h; ++r) std::memcpy(cblock + r * n, edge + r * kTileCols, w * sizeof(float));
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
    if (a.empty() || b.empty() || a.cols() != b.rows()) {
        throw ContractError(fmt::format("matmul shape mismatch: {} x {}", a.shape_string(), b.shape_string()));
    }
    Tensor2D c(a.rows(), b.cols());
    gemm(a.values().data(), b.values().data(), c.values().data(), a.rows(), a.cols(), b.cols(), false);
    return c;
}

Tensor2D matmul_transposed(const Tensor2D& a, const Tensor2D& b) {
    if (a.empty() || b.empty() || a.cols() != b.cols()) {
        throw ContractError(fmt::format("matmul_transposed shape mismatch: {} x ({})ᵀ", a.shape_string(), b.shape_string()));
    }
    Tensor2D c(a.rows(), b.rows());
    gemm(a.values().data(), b.values().data(), c.values().data(), a.rows(), a.cols(), b.rows(), true);
    return c;
}

Tensor2D transpose(const Tensor2D& a) {
    if (a.empty()) return {};
    Tensor2D t(a.cols(), a.rows());
    constexpr std::size_t kBlock = 32;
    for (std::size_t i0 = 0; i0 < a.rows(); i0 += kBlock) {
        for (std::size_t j0 = 0; j0 < a.cols(); j0 += kBlock) {
            const std::size_t i1 = std::min(i0 + kBlock, a.rows());
            const std::size_t j1 = std::min(j0 + kBlock, a.cols());
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
        }
    }
    return t;
}

double frobenius_norm(const Tensor2D& a) {
    double sum = 0.0;
    for (const float v : a.values()) sum += static_cast<double>(v) * v;
    return std::sqrt(sum);
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace {

// Softmax over the positions where allowed(j) holds; the rest become 0.
template <typename Allowed>
void softmax_row(std::span<float> row, Allowed allowed) {
    float max = -std::numeric_limits<float>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (allowed(j)) {
            max = std::max(max, row[j]);
            any = true;
        }
    }
    if (!any) throw ContractError("softmax row has an empty support");
    double sum = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (allowed(j)) {
            row[j] = std::exp(row[j] - max);
            sum += row[j];
        } else {
            row[j] = 0.0f;
        }
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (allowed(j)) row[j] = static_cast<float>(row[j] * inv);
    }
}

}  // namespace

Tensor2D row_softmax(const Tensor2D& logits, const SupportMask* mask) {
    if (mask != nullptr && (mask->rows() != logits.rows() || mask->cols() != logits.cols())) {
        throw ContractError(fmt::format("softmax mask {}x{} does not match logits {}", mask->rows(), mask->cols(),
                                        logits.shape_string()));
    }
    Tensor2D out = logits;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        if (mask == nullptr) {
            softmax_row(out.row(i), [](std::size_t) { return true; });
        } else {
            softmax_row(out.row(i), [&](std::size_t j) { return mask->allowed(i, j); });
        }
    }
    return out;
}

void softmax_prefix(std::span<float> row, std::size_t support) {
    if (support == 0 || support > row.size()) {
        throw ContractError(fmt::format("softmax support {} invalid for row of {}", support, row.size()));
    }
    softmax_row(row, [support](std::size_t j) { return j < support; });
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

Vector rms_norm(std::span<const float> x, std::span<const float> gain, float eps) {
    if (x.size() != gain.size() || x.empty()) {
        throw ContractError(fmt::format("rms_norm length mismatch: x={} gain={}", x.size(), gain.size()));
    }
    double ss = 0.0;
    for (const float v : x) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * inv) * gain[i];
    return out;
}

Vector layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias, float eps) {
    if (x.size() != gain.size() || x.size() != bias.size() || x.empty()) {
        throw ContractError(fmt::format("layer_norm length mismatch: x={} gain={} bias={}", x.size(), gain.size(),
                                        bias.size()));
    }
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (const float v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (const float v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>((x[i] - mean) * inv) * gain[i] + bias[i];
    return out;
}

float gelu(float x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    constexpr float kCubic = 0.044715f;
    return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + kCubic * x * x * x)));
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

Vector activation(std::span<const float> x, ActivationKind kind) {
    Vector out(x.begin(), x.end());
    for (float& v : out) v = kind == ActivationKind::gelu ? gelu(v) : silu(v);
    return out;
}

void activation_inplace(Tensor2D& x, ActivationKind kind) {
    for (float& v : x.values()) v = kind == ActivationKind::gelu ? gelu(v) : silu(v);
}

// ---------------------------------------------------------------------------
// Vector geometry
// ---------------------------------------------------------------------------

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ContractError(fmt::format("dot length mismatch: {} vs {}", a.size(), b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

double l2_norm(std::span<const float> x) {
    double s = 0.0;
    for (const float v : x) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw ContractError(fmt::format("cosine length mismatch: {} vs {}", a.size(), b.size()));
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw ContractError("cosine of a zero-norm vector is undefined");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

Vector column_mean(const Tensor2D& rows) {
    std::vector<double> acc(rows.cols(), 0.0);
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        const auto r = rows.row(i);
        for (std::size_t j = 0; j < rows.cols(); ++j) acc[j] += r[j];
    }
    Vector mean(rows.cols());
    for (std::size_t j = 0; j < rows.cols(); ++j) mean[j] = static_cast<float>(acc[j] / static_cast<double>(rows.rows()));
    return mean;
}

Tensor2D mean_center(const Tensor2D& rows) {
    if (rows.empty()) return {};
    const Vector mean = column_mean(rows);
    Tensor2D out = rows;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < out.cols(); ++j) r[j] -= mean[j];
    }
    return out;
}

Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
    Tensor2D out = a;
    add_inplace(out, b);
    return out;
}

void add_inplace(Tensor2D& a, const Tensor2D& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractError(fmt::format("add shape mismatch: {} + {}", a.shape_string(), b.shape_string()));
    }
    auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

Tensor2D scaled(const Tensor2D& a, float s) {
    Tensor2D out = a;
    for (float& v : out.values()) v *= s;
    return out;
}

bool all_finite(const Tensor2D& a) {
    return std::all_of(a.values().begin(), a.values().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace gatenorm
