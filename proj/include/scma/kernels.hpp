#pragma once

// Raw dense kernels over row-major double buffers.
//
// Every data-parallel kernel comes in two flavours: a serial reference in
// `scma::kernels::serial` and an OpenMP version in `scma::kernels`. Both
// share the same inner blocks, so for a fixed build they return
// bit-identical results; the tests and the benchmark compare them directly.

#include <cstddef>
#include <span>

namespace scma::kernels {

struct ConvDims {
    std::size_t batch = 0;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t kernel = 1;
    std::size_t padding = 0;

    std::size_t out_height() const { return height + 2 * padding - kernel + 1; }
    std::size_t out_width() const { return width + 2 * padding - kernel + 1; }
};

namespace serial {

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
// ga[m,k] += gc[m,n] * b^T
void matmul_grad_a(std::span<const double> gc, std::span<const double> b, std::span<double> ga,
                   std::size_t m, std::size_t k, std::size_t n);
// gb[k,n] += a^T * gc[m,n]
void matmul_grad_b(std::span<const double> a, std::span<const double> gc, std::span<double> gb,
                   std::size_t m, std::size_t k, std::size_t n);

// NCHW input, [Cout, Cin, K, K] weight, stride 1, zero padding.
void conv2d(std::span<const double> x, std::span<const double> w, std::span<double> y,
            const ConvDims& d);
void conv2d_grad_x(std::span<const double> gy, std::span<const double> w, std::span<double> gx,
                   const ConvDims& d);
void conv2d_grad_w(std::span<const double> x, std::span<const double> gy, std::span<double> gw,
                   const ConvDims& d);

}  // namespace serial

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_grad_a(std::span<const double> gc, std::span<const double> b, std::span<double> ga,
                   std::size_t m, std::size_t k, std::size_t n);
void matmul_grad_b(std::span<const double> a, std::span<const double> gc, std::span<double> gb,
                   std::size_t m, std::size_t k, std::size_t n);

void conv2d(std::span<const double> x, std::span<const double> w, std::span<double> y,
            const ConvDims& d);
void conv2d_grad_x(std::span<const double> gy, std::span<const double> w, std::span<double> gx,
                   const ConvDims& d);
void conv2d_grad_w(std::span<const double> x, std::span<const double> gy, std::span<double> gw,
                   const ConvDims& d);

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace scma::kernels
