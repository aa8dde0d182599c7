#ifndef GCO_KERNELS_HPP
#define GCO_KERNELS_HPP

// Dense compute kernels. Every kernel comes in two flavours:
//   gco::kern — OpenMP-parallel, used by the autograd layer
//   gco::ref  — serial, loop-order identical, kept as the test oracle
//
// Parallelisation is owner-computes: each output element is produced by
// exactly one thread and inner reductions run serially in a fixed order,
// so kern and ref produce bit-identical results for any thread count.

#include <cmath>
#include <cstring>

#include "gco/tensor.hpp"

namespace gco {

struct ConvDims {
    int ic, ih, iw;   // input
    int oc, kh, kw;   // filters
    int stride = 1;
    int pad = 0;
    int oh = 0, ow = 0;

    static ConvDims make(int ic, int ih, int iw, int oc, int kh, int kw, int stride, int pad) {
        ConvDims d{ic, ih, iw, oc, kh, kw, stride, pad, 0, 0};
        d.oh = (ih + 2 * pad - kh) / stride + 1;
        d.ow = (iw + 2 * pad - kw) / stride + 1;
        if (d.oh <= 0 || d.ow <= 0) throw ValidationError("conv2d: output dims are empty");
        return d;
    }
};

namespace detail {

template <typename T>
inline void conv2d_fwd_row(const T* x, const T* w, T acc_bias, T* yrow,
                           const ConvDims& d, int oy) {
    const int s = d.stride, p = d.pad;
    for (int ox = 0; ox < d.ow; ox++) yrow[ox] = acc_bias;
    for (int ic = 0; ic < d.ic; ic++) {
        const T* xc = x + static_cast<size_t>(ic) * d.ih * d.iw;
        for (int ky = 0; ky < d.kh; ky++) {
            int iy = oy * s + ky - p;
            if (iy < 0 || iy >= d.ih) continue;
            const T* xr = xc + static_cast<size_t>(iy) * d.iw;
            for (int kx = 0; kx < d.kw; kx++) {
                T wv = w[(static_cast<size_t>(ic) * d.kh + ky) * d.kw + kx];
                // valid ox range so that 0 <= ox*s + kx - p < iw
                int lo = 0, hi = d.ow;
                while (lo < hi && lo * s + kx - p < 0) lo++;
                int last = (d.iw - 1 - kx + p) / s;
                if (last + 1 < hi) hi = last + 1;
                const T* xs = xr + (static_cast<int64_t>(lo) * s + kx - p);
                if (s == 1) {
                    for (int ox = lo; ox < hi; ox++) yrow[ox] += wv * xs[ox - lo];
                } else {
                    for (int ox = lo; ox < hi; ox++) yrow[ox] += wv * xs[static_cast<int64_t>(ox - lo) * s];
                }
            }
        }
    }
}

template <typename T>
inline void conv2d_bwd_input_row(const T* w, const T* gy, T* gxrow,
                                 const ConvDims& d, int ic, int iy) {
    const int s = d.stride, p = d.pad;
    std::memset(gxrow, 0, sizeof(T) * d.iw);
    for (int oc = 0; oc < d.oc; oc++) {
        const T* gyc = gy + static_cast<size_t>(oc) * d.oh * d.ow;
        const T* wc  = w + (static_cast<size_t>(oc) * d.ic + ic) * d.kh * d.kw;
        for (int ky = 0; ky < d.kh; ky++) {
            int num = iy + p - ky;
            if (num < 0 || num % s != 0) continue;
            int oy = num / s;
            if (oy >= d.oh) continue;
            const T* gyr = gyc + static_cast<size_t>(oy) * d.ow;
            for (int kx = 0; kx < d.kw; kx++) {
                T wv = wc[static_cast<size_t>(ky) * d.kw + kx];
                int lo = 0, hi = d.ow;
                while (lo < hi && lo * s + kx - p < 0) lo++;
                int last = (d.iw - 1 - kx + p) / s;
                if (last + 1 < hi) hi = last + 1;
                for (int ox = lo; ox < hi; ox++) gxrow[ox * s + kx - p] += wv * gyr[ox];
            }
        }
    }
}

template <typename T>
inline void conv2d_bwd_params_oc(const T* x, const T* gy, T* gw, T* gb,
                                 const ConvDims& d, int oc) {
    const int s = d.stride, p = d.pad;
    const T* gyc = gy + static_cast<size_t>(oc) * d.oh * d.ow;
    if (gb) {
        double acc = 0.0;
        for (int i = 0; i < d.oh * d.ow; i++) acc += static_cast<double>(gyc[i]);
        gb[oc] += static_cast<T>(acc);
    }
    for (int ic = 0; ic < d.ic; ic++) {
        const T* xc = x + static_cast<size_t>(ic) * d.ih * d.iw;
        for (int ky = 0; ky < d.kh; ky++) {
            for (int kx = 0; kx < d.kw; kx++) {
                double acc = 0.0;
                for (int oy = 0; oy < d.oh; oy++) {
                    int iy = oy * s + ky - p;
                    if (iy < 0 || iy >= d.ih) continue;
                    const T* xr  = xc + static_cast<size_t>(iy) * d.iw;
                    const T* gyr = gyc + static_cast<size_t>(oy) * d.ow;
                    int lo = 0, hi = d.ow;
                    while (lo < hi && lo * s + kx - p < 0) lo++;
                    int last = (d.iw - 1 - kx + p) / s;
                    if (last + 1 < hi) hi = last + 1;
                    for (int ox = lo; ox < hi; ox++)
                        acc += static_cast<double>(xr[ox * s + kx - p]) * static_cast<double>(gyr[ox]);
                }
                gw[((static_cast<size_t>(oc) * d.ic + ic) * d.kh + ky) * d.kw + kx] += static_cast<T>(acc);
            }
        }
    }
}

} // namespace detail

namespace ref {

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* b, T* y, const ConvDims& d) {
    for (int oc = 0; oc < d.oc; oc++)
        for (int oy = 0; oy < d.oh; oy++)
            detail::conv2d_fwd_row(x, w + static_cast<size_t>(oc) * d.ic * d.kh * d.kw,
                                   b ? b[oc] : T(0),
                                   y + (static_cast<size_t>(oc) * d.oh + oy) * d.ow, d, oy);
}

template <typename T>
void conv2d_bwd_input(const T* w, const T* gy, T* gx, const ConvDims& d) {
    for (int ic = 0; ic < d.ic; ic++)
        for (int iy = 0; iy < d.ih; iy++)
            detail::conv2d_bwd_input_row(w, gy, gx + (static_cast<size_t>(ic) * d.ih + iy) * d.iw,
                                         d, ic, iy);
}

template <typename T>
void conv2d_bwd_params(const T* x, const T* gy, T* gw, T* gb, const ConvDims& d) {
    for (int oc = 0; oc < d.oc; oc++) detail::conv2d_bwd_params_oc(x, gy, gw, gb, d, oc);
}

// y[l,:] = x[l,:] @ W + b, W is (din, dout) row-major
template <typename T>
void linear_fwd(const T* x, const T* w, const T* b, T* y, int n, int din, int dout) {
    for (int l = 0; l < n; l++) {
        T* yr = y + static_cast<size_t>(l) * dout;
        if (b) std::memcpy(yr, b, sizeof(T) * dout);
        else std::memset(yr, 0, sizeof(T) * dout);
        const T* xr = x + static_cast<size_t>(l) * din;
        for (int i = 0; i < din; i++) {
            T xv = xr[i];
            const T* wr = w + static_cast<size_t>(i) * dout;
            for (int j = 0; j < dout; j++) yr[j] += xv * wr[j];
        }
    }
}

} // namespace ref

namespace kern {

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* b, T* y, const ConvDims& d) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int oc = 0; oc < d.oc; oc++)
        for (int oy = 0; oy < d.oh; oy++)
            detail::conv2d_fwd_row(x, w + static_cast<size_t>(oc) * d.ic * d.kh * d.kw,
                                   b ? b[oc] : T(0),
                                   y + (static_cast<size_t>(oc) * d.oh + oy) * d.ow, d, oy);
}

template <typename T>
void conv2d_bwd_input(const T* w, const T* gy, T* gx, const ConvDims& d) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int ic = 0; ic < d.ic; ic++)
        for (int iy = 0; iy < d.ih; iy++)
            detail::conv2d_bwd_input_row(w, gy, gx + (static_cast<size_t>(ic) * d.ih + iy) * d.iw,
                                         d, ic, iy);
}

template <typename T>
void conv2d_bwd_params(const T* x, const T* gy, T* gw, T* gb, const ConvDims& d) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < d.oc; oc++) detail::conv2d_bwd_params_oc(x, gy, gw, gb, d, oc);
}

template <typename T>
void linear_fwd(const T* x, const T* w, const T* b, T* y, int n, int din, int dout) {
#pragma omp parallel for schedule(static)
    for (int l = 0; l < n; l++)
        ref::linear_fwd(x + static_cast<size_t>(l) * din, w, b, y + static_cast<size_t>(l) * dout,
                        1, din, dout);
}

} // namespace kern

} // namespace gco

#endif
