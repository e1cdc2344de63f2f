#include "scma/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

// Threading is ours; Eigen only supplies the block GEMM.
#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace scma::kernels {
namespace {

using Index = std::int64_t;

// Matmuls are cut into fixed row blocks that Eigen multiplies. The block
// grid depends only on the shapes, never on the thread count, so serial and
// parallel callers run identical arithmetic.
constexpr std::size_t kRowBlock = 32;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t block_count(std::size_t rows) { return (rows + kRowBlock - 1) / kRowBlock; }

inline void matmul_block(const double* a, const double* b, double* c, std::size_t blk, std::size_t m,
                         std::size_t k, std::size_t n) {
    const std::size_t i0 = blk * kRowBlock, rows = std::min(kRowBlock, m - i0);
    const auto ei = static_cast<Eigen::Index>(rows);
    MutMap(c + i0 * n, ei, static_cast<Eigen::Index>(n)).noalias() =
        ConstMap(a + i0 * k, ei, static_cast<Eigen::Index>(k)) *
        ConstMap(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
}

inline void matmul_grad_a_block(const double* gc, const double* b, double* ga, std::size_t blk, std::size_t m,
                                std::size_t k, std::size_t n) {
    const std::size_t i0 = blk * kRowBlock, rows = std::min(kRowBlock, m - i0);
    const auto ei = static_cast<Eigen::Index>(rows);
    MutMap(ga + i0 * k, ei, static_cast<Eigen::Index>(k)).noalias() +=
        ConstMap(gc + i0 * n, ei, static_cast<Eigen::Index>(n)) *
        ConstMap(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n)).transpose();
}

// Rows of gb, i.e. columns of a.
inline void matmul_grad_b_block(const double* a, const double* gc, double* gb, std::size_t blk, std::size_t m,
                                std::size_t k, std::size_t n) {
    const std::size_t p0 = blk * kRowBlock, rows = std::min(kRowBlock, k - p0);
    const auto ep = static_cast<Eigen::Index>(rows);
    const ConstMap am(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    MutMap(gb + p0 * n, ep, static_cast<Eigen::Index>(n)).noalias() +=
        am.middleCols(static_cast<Eigen::Index>(p0), ep).transpose() *
        ConstMap(gc, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
}

// Convolutions lower to GEMM through im2col: per image, a [Cin*K*K, H'*W']
// patch matrix. Work is split per image (forward, grad_x) or per block of
// output channels (grad_w), again independent of the thread count.

inline void im2col(const double* xp, double* cols, const ConvDims& d) {
    const std::size_t oh_n = d.out_height(), ow_n = d.out_width(), k = d.kernel;
    const auto pad = static_cast<Index>(d.padding);
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
        const double* plane = xp + ci * d.height * d.width;
        for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
                double* row = cols + ((ci * k + kh) * k + kw) * oh_n * ow_n;
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const Index ih = static_cast<Index>(oh + kh) - pad;
                    double* out = row + oh * ow_n;
                    if (ih < 0 || ih >= static_cast<Index>(d.height)) {
                        std::fill(out, out + ow_n, 0.0);
                        continue;
                    }
                    for (std::size_t ow = 0; ow < ow_n; ++ow) {
                        const Index iw = static_cast<Index>(ow + kw) - pad;
                        out[ow] = (iw < 0 || iw >= static_cast<Index>(d.width))
                                      ? 0.0
                                      : plane[ih * static_cast<Index>(d.width) + iw];
                    }
                }
            }
    }
}

inline void col2im_add(const double* cols, double* gxp, const ConvDims& d) {
    const std::size_t oh_n = d.out_height(), ow_n = d.out_width(), k = d.kernel;
    const auto pad = static_cast<Index>(d.padding);
    for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
        double* plane = gxp + ci * d.height * d.width;
        for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
                const double* row = cols + ((ci * k + kh) * k + kw) * oh_n * ow_n;
                for (std::size_t oh = 0; oh < oh_n; ++oh) {
                    const Index ih = static_cast<Index>(oh + kh) - pad;
                    if (ih < 0 || ih >= static_cast<Index>(d.height)) continue;
                    for (std::size_t ow = 0; ow < ow_n; ++ow) {
                        const Index iw = static_cast<Index>(ow + kw) - pad;
                        if (iw >= 0 && iw < static_cast<Index>(d.width))
                            plane[ih * static_cast<Index>(d.width) + iw] += row[oh * ow_n + ow];
                    }
                }
            }
    }
}

inline Eigen::Index patch_rows(const ConvDims& d) {
    return static_cast<Eigen::Index>(d.in_channels * d.kernel * d.kernel);
}
inline Eigen::Index patch_cols(const ConvDims& d) { return static_cast<Eigen::Index>(d.out_height() * d.out_width()); }

inline void conv_image(const double* x, const double* w, double* y, const ConvDims& d, std::size_t nb,
                       std::vector<double>& cols) {
    const Eigen::Index r = patch_rows(d), c = patch_cols(d), co = static_cast<Eigen::Index>(d.out_channels);
    cols.resize(static_cast<std::size_t>(r * c));
    im2col(x + nb * d.in_channels * d.height * d.width, cols.data(), d);
    MutMap(y + nb * d.out_channels * static_cast<std::size_t>(c), co, c).noalias() =
        ConstMap(w, co, r) * ConstMap(cols.data(), r, c);
}

inline void conv_grad_x_image(const double* gy, const double* w, double* gx, const ConvDims& d, std::size_t nb,
                              std::vector<double>& cols) {
    const Eigen::Index r = patch_rows(d), c = patch_cols(d), co = static_cast<Eigen::Index>(d.out_channels);
    cols.resize(static_cast<std::size_t>(r * c));
    MutMap(cols.data(), r, c).noalias() =
        ConstMap(w, co, r).transpose() * ConstMap(gy + nb * d.out_channels * static_cast<std::size_t>(c), co, c);
    col2im_add(cols.data(), gx + nb * d.in_channels * d.height * d.width, d);
}

inline void conv_grad_w_block(const double* x, const double* gy, double* gw, const ConvDims& d, std::size_t blk,
                              std::vector<double>& cols) {
    const Eigen::Index r = patch_rows(d), c = patch_cols(d);
    const std::size_t o0 = blk * kRowBlock, rows = std::min(kRowBlock, d.out_channels - o0);
    const auto eo = static_cast<Eigen::Index>(rows);
    cols.resize(static_cast<std::size_t>(r * c));
    MutMap gwb(gw + o0 * static_cast<std::size_t>(r), eo, r);
    for (std::size_t nb = 0; nb < d.batch; ++nb) {
        im2col(x + nb * d.in_channels * d.height * d.width, cols.data(), d);
        const double* gyb = gy + (nb * d.out_channels + o0) * static_cast<std::size_t>(c);
        gwb.noalias() += ConstMap(gyb, eo, c) * ConstMap(cols.data(), r, c).transpose();
    }
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t blk = 0; blk < block_count(m); ++blk) matmul_block(a.data(), b.data(), c.data(), blk, m, k, n);
}

void matmul_grad_a(std::span<const double> gc, std::span<const double> b, std::span<double> ga,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t blk = 0; blk < block_count(m); ++blk)
        matmul_grad_a_block(gc.data(), b.data(), ga.data(), blk, m, k, n);
}

void matmul_grad_b(std::span<const double> a, std::span<const double> gc, std::span<double> gb,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t blk = 0; blk < block_count(k); ++blk)
        matmul_grad_b_block(a.data(), gc.data(), gb.data(), blk, m, k, n);
}

void conv2d(std::span<const double> x, std::span<const double> w, std::span<double> y,
            const ConvDims& d) {
    std::vector<double> cols;
    for (std::size_t nb = 0; nb < d.batch; ++nb) conv_image(x.data(), w.data(), y.data(), d, nb, cols);
}

void conv2d_grad_x(std::span<const double> gy, std::span<const double> w, std::span<double> gx,
                   const ConvDims& d) {
    std::vector<double> cols;
    for (std::size_t nb = 0; nb < d.batch; ++nb) conv_grad_x_image(gy.data(), w.data(), gx.data(), d, nb, cols);
}

void conv2d_grad_w(std::span<const double> x, std::span<const double> gy, std::span<double> gw,
                   const ConvDims& d) {
    std::vector<double> cols;
    for (std::size_t blk = 0; blk < block_count(d.out_channels); ++blk)
        conv_grad_w_block(x.data(), gy.data(), gw.data(), d, blk, cols);
}

}  // namespace serial

// Parallel versions: each thread owns disjoint output blocks/planes and walks
// the reduction axis in the serial order, so results match the reference bit
// for bit.

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    const auto blocks = static_cast<Index>(block_count(m));
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 32768)
    for (Index blk = 0; blk < blocks; ++blk)
        matmul_block(a.data(), b.data(), c.data(), static_cast<std::size_t>(blk), m, k, n);
}

void matmul_grad_a(std::span<const double> gc, std::span<const double> b, std::span<double> ga,
                   std::size_t m, std::size_t k, std::size_t n) {
    const auto blocks = static_cast<Index>(block_count(m));
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 32768)
    for (Index blk = 0; blk < blocks; ++blk)
        matmul_grad_a_block(gc.data(), b.data(), ga.data(), static_cast<std::size_t>(blk), m, k, n);
}

void matmul_grad_b(std::span<const double> a, std::span<const double> gc, std::span<double> gb,
                   std::size_t m, std::size_t k, std::size_t n) {
    const auto blocks = static_cast<Index>(block_count(k));
#pragma omp parallel for schedule(static) if (blocks > 1 && m * k * n > 32768)
    for (Index blk = 0; blk < blocks; ++blk)
        matmul_grad_b_block(a.data(), gc.data(), gb.data(), static_cast<std::size_t>(blk), m, k, n);
}

void conv2d(std::span<const double> x, std::span<const double> w, std::span<double> y,
            const ConvDims& d) {
    const auto images = static_cast<Index>(d.batch);
#pragma omp parallel if (images > 1)
    {
        std::vector<double> cols;
#pragma omp for schedule(static)
        for (Index nb = 0; nb < images; ++nb)
            conv_image(x.data(), w.data(), y.data(), d, static_cast<std::size_t>(nb), cols);
    }
}

void conv2d_grad_x(std::span<const double> gy, std::span<const double> w, std::span<double> gx,
                   const ConvDims& d) {
    const auto images = static_cast<Index>(d.batch);
#pragma omp parallel if (images > 1)
    {
        std::vector<double> cols;
#pragma omp for schedule(static)
        for (Index nb = 0; nb < images; ++nb)
            conv_grad_x_image(gy.data(), w.data(), gx.data(), d, static_cast<std::size_t>(nb), cols);
    }
}

void conv2d_grad_w(std::span<const double> x, std::span<const double> gy, std::span<double> gw,
                   const ConvDims& d) {
    const auto blocks = static_cast<Index>(block_count(d.out_channels));
#pragma omp parallel if (blocks > 1)
    {
        std::vector<double> cols;
#pragma omp for schedule(static)
        for (Index blk = 0; blk < blocks; ++blk)
            conv_grad_w_block(x.data(), gy.data(), gw.data(), d, static_cast<std::size_t>(blk), cols);
    }
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace scma::kernels
