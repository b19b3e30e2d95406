#pragma once

// Internal dense kernels shared by the convolution primitives.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace gpunet::detail {

// C(MxN) += A(MxK) * B(KxN), all row-major with explicit leading dimensions.
//
// Every C element accumulates its K products strictly in increasing k order
// on top of the value already in C. Convolution relies on this for its fixed
// summation order, so no k-splitting or reassociation may be introduced here.
// Vector lanes always hold distinct C elements.

typedef float VecF __attribute__((vector_size(64)));
typedef double VecD __attribute__((vector_size(64)));

template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
    using type = VecF;
};
template <>
struct VecOf<double> {
    using type = VecD;
};
template <typename T>
using Vec = typename VecOf<T>::type;

template <typename T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

template <typename T>
inline Vec<T> load_vec(const T* p)
{
    Vec<T> v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

template <typename T>
inline void store_vec(T* p, const Vec<T>& v)
{
    std::memcpy(p, &v, sizeof(v));
}

template <typename T, std::size_t MR, std::size_t NV>
inline void gemm_tile(std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C, std::size_t ldc)
{
    constexpr std::size_t L = kLanes<T>;
    Vec<T> acc[MR][NV];
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t v = 0; v < NV; ++v)
            acc[r][v] = load_vec(C + r * ldc + v * L);
    for (std::size_t k = 0; k < K; ++k) {
        Vec<T> b[NV];
        for (std::size_t v = 0; v < NV; ++v)
            b[v] = load_vec(B + k * ldb + v * L);
        for (std::size_t r = 0; r < MR; ++r) {
            const T a = A[r * lda + k];
            for (std::size_t v = 0; v < NV; ++v)
                acc[r][v] += a * b[v];
        }
    }
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t v = 0; v < NV; ++v)
            store_vec(C + r * ldc + v * L, acc[r][v]);
}

template <typename T, std::size_t NV>
inline void gemm_panel(std::size_t M, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C,
                       std::size_t ldc)
{
    constexpr std::size_t MR = 6;
    std::size_t i = 0;
    for (; i + MR <= M; i += MR)
        gemm_tile<T, MR, NV>(K, A + i * lda, lda, B, ldb, C + i * ldc, ldc);
    const T* a = A + i * lda;
    T* c = C + i * ldc;
    switch (M - i) {
    case 5: gemm_tile<T, 5, NV>(K, a, lda, B, ldb, c, ldc); break;
    case 4: gemm_tile<T, 4, NV>(K, a, lda, B, ldb, c, ldc); break;
    case 3: gemm_tile<T, 3, NV>(K, a, lda, B, ldb, c, ldc); break;
    case 2: gemm_tile<T, 2, NV>(K, a, lda, B, ldb, c, ldc); break;
    case 1: gemm_tile<T, 1, NV>(K, a, lda, B, ldb, c, ldc); break;
    default: break;
    }
}

template <typename T>
inline void gemm_tile_edge(std::size_t mr, std::size_t nr, std::size_t K, const T* A, std::size_t lda, const T* B,
                           std::size_t ldb, T* C, std::size_t ldc)
{
    for (std::size_t r = 0; r < mr; ++r) {
        for (std::size_t c = 0; c < nr; ++c) {
            T acc = C[r * ldc + c];
            for (std::size_t k = 0; k < K; ++k)
                acc += A[r * lda + k] * B[k * ldb + c];
            C[r * ldc + c] = acc;
        }
    }
}

template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* A, std::size_t lda, const T* B, std::size_t ldb,
              T* C, std::size_t ldc)
{
    constexpr std::size_t L = kLanes<T>;
    std::size_t j = 0;
    for (; j + 2 * L <= N; j += 2 * L)
        gemm_panel<T, 2>(M, K, A, lda, B + j, ldb, C + j, ldc);
    for (; j + L <= N; j += L)
        gemm_panel<T, 1>(M, K, A, lda, B + j, ldb, C + j, ldc);
    if (j < N)
        gemm_tile_edge(M, N - j, K, A, lda, B + j, ldb, C + j, ldc);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst)
{
    constexpr std::size_t B = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += B)
        for (std::size_t c0 = 0; c0 < cols; c0 += B)
            for (std::size_t r = r0; r < std::min(rows, r0 + B); ++r)
                for (std::size_t c = c0; c < std::min(cols, c0 + B); ++c)
                    dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
    std::size_t channels, height, width;  // input plane stack
    std::size_t kernel, stride, padding, dilation;
    std::size_t out_h, out_w;

    std::size_t patch() const { return channels * kernel * kernel; }
    std::size_t pixels() const { return out_h * out_w; }
};

// Output positions o in [0, out) whose input coordinate o*stride + offset lies
// in [0, in).
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, long long offset, std::size_t& lo,
                        std::size_t& hi)
{
    const long long s = static_cast<long long>(stride);
    long long l = 0;
    if (offset < 0)
        l = (-offset + s - 1) / s;
    long long h = 0;
    if (static_cast<long long>(in) > offset)
        h = (static_cast<long long>(in) - offset + s - 1) / s;
    h = std::min<long long>(h, static_cast<long long>(out));
    l = std::min<long long>(l, h);
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
}

// col rows are ordered (channel, kernel row, kernel column); columns are output
// pixels in row-major order. Out-of-bounds taps are written as zero.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col)
{
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* xc = x + c * g.height * g.width;
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            const long long off_h = static_cast<long long>(kh * g.dilation) - static_cast<long long>(g.padding);
            std::size_t oh_lo, oh_hi;
            valid_range(g.out_h, g.height, g.stride, off_h, oh_lo, oh_hi);
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const long long off_w = static_cast<long long>(kw * g.dilation) - static_cast<long long>(g.padding);
                std::size_t ow_lo, ow_hi;
                valid_range(g.out_w, g.width, g.stride, off_w, ow_lo, ow_hi);
                T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * P;
                std::fill(row, row + oh_lo * g.out_w, T(0));
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    T* dst = row + oh * g.out_w;
                    const T* src = xc + static_cast<std::size_t>(static_cast<long long>(oh * g.stride) + off_h) * g.width;
                    std::fill(dst, dst + ow_lo, T(0));
                    if (g.stride == 1) {
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                            dst[ow] = src[static_cast<long long>(ow) + off_w];
                    } else {
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                            dst[ow] = src[static_cast<long long>(ow * g.stride) + off_w];
                    }
                    std::fill(dst + ow_hi, dst + g.out_w, T(0));
                }
                std::fill(row + oh_hi * g.out_w, row + P, T(0));
            }
        }
    }
}

// Adjoint of im2col: scatters-adds col back onto x.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x)
{
    const std::size_t P = g.pixels();
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* xc = x + c * g.height * g.width;
        for (std::size_t kh = 0; kh < g.kernel; ++kh) {
            const long long off_h = static_cast<long long>(kh * g.dilation) - static_cast<long long>(g.padding);
            std::size_t oh_lo, oh_hi;
            valid_range(g.out_h, g.height, g.stride, off_h, oh_lo, oh_hi);
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const long long off_w = static_cast<long long>(kw * g.dilation) - static_cast<long long>(g.padding);
                std::size_t ow_lo, ow_hi;
                valid_range(g.out_w, g.width, g.stride, off_w, ow_lo, ow_hi);
                const T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * P;
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                    const T* src = row + oh * g.out_w;
                    T* dst = xc + static_cast<std::size_t>(static_cast<long long>(oh * g.stride) + off_h) * g.width;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                        dst[static_cast<long long>(ow * g.stride) + off_w] += src[ow];
                }
            }
        }
    }
}

}  // namespace gpunet::detail
