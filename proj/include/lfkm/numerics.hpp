#pragma once

#include <cstdint>
#include <vector>

#include "lfkm/tensor.hpp"

namespace lfkm::numerics {

// Worker count for the parallel loops in conv/upsample/norm. Every output (or
// gradient) element is produced by exactly one thread with a fixed in-element
// accumulation order, so results are bit-identical for any thread count.
void set_num_threads(int n);
int num_threads();

// Dilated same-padding cross-correlation plus bias.
// input C_in x H x W, kernel k x k x C_in x C_out (k odd), bias C_out.
// Each output element accumulates bias first, then taps in ascending
// (ci, ky, kx) order; out-of-range taps read zero.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int dilation);

// Accumulates into input.grad / kernel.grad / bias.grad for the tensors whose
// requires_grad is set.
void conv2d_backward(Tensor& input, Tensor& kernel, Tensor& bias, const Tensor& grad_out,
                     int dilation);

// 2x bicubic upsample (a = -0.5), C x H x W -> C x 2H x 2W, H,W >= 2.
// Output sample xo interpolates the input at coordinate xo/2: even outputs
// copy input samples, odd ones apply the half-sample stencil
// [-1, 9, 9, -1]/16 with edge replication. Separable, rows then columns.
Tensor upsample_bicubic_2x(const Tensor& input);
void upsample_bicubic_2x_backward(Tensor& input, const Tensor& grad_out);

struct BatchNormCache {
  std::vector<double> mean, inv_std;
};

// Per-channel normalization over H x W using the current pass statistics
// (biased variance); no running averages anywhere.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchNormCache* cache = nullptr);
void batch_norm_backward(Tensor& input, Tensor& gamma, Tensor& beta, const Tensor& grad_out,
                         const BatchNormCache& cache);

enum class Act { Gelu, Sigmoid, SoftmaxChannels };

// Gelu is the exact erf form x*Phi(x). SoftmaxChannels normalizes over axis 0
// of a C x H x W tensor at each spatial site.
Tensor activation(const Tensor& input, Act kind);
// Needs the forward input (Gelu) and output (Sigmoid/Softmax); accumulates
// into input.grad.
void activation_backward(Tensor& input, const Tensor& output, const Tensor& grad_out, Act kind);

double mse(const Tensor& pred, const Tensor& target);
// d(mse)/d(pred) scaled by upstream, accumulated into pred.grad.
void mse_backward(Tensor& pred, const Tensor& target, double upstream);

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;
};

struct AdamHyper {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected update from param.grad; denominator is sqrt(vhat)+eps.
void adam_step(Tensor& param, AdamState& state, const AdamHyper& hp);
void adam_step(const std::vector<Tensor*>& params, std::vector<AdamState>& states,
               const AdamHyper& hp);

}  // namespace lfkm::numerics
