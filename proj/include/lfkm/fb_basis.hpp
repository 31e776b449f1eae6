#pragma once

#include "lfkm/tensor.hpp"

namespace lfkm::fb_basis {

// First r Fourier-Bessel disk modes sampled on the k x k grid, returned as a
// k x k x r volume with each slice scaled to unit Frobenius norm.
//
// Construction: cell centers sit at (idx - (k-1)/2) / ((k+1)/2), so the unit
// disk extends half a cell beyond the outermost centers; radius is clipped at
// 1 where corners exceed the disk (k >= 7). Modes are J_m(lambda_{m,q} * rho)
// times cos(m*theta) / sin(m*theta), walked in ascending order of the Bessel
// root lambda_{m,q}, cosine before sine. Slices that sample to (numerically)
// zero or are linearly dependent on already-picked slices on this grid are
// skipped so the returned slices always have Gram rank r.
Tensor generate_fb_bases(int k, int r);

// kernel[a,b,ci,co] = sum_rho bases[a,b,rho] * coeffs[rho,ci,co]
Tensor compose_kernel(const Tensor& bases, const Tensor& coeffs);
void compose_kernel_backward(Tensor& bases, Tensor& coeffs, const Tensor& grad_kernel);

// q-th positive root of J_m (q >= 1), bisection to ~1e-12.
double bessel_j_root(int m, int q);

}  // namespace lfkm::fb_basis
