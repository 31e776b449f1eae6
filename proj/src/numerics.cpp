#include "lfkm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lfkm::numerics {

namespace {

int g_threads = 0;  // 0 = library default

inline int worker_count() {
#ifdef _OPENMP
  return g_threads > 0 ? g_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

void check_conv_shapes(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                       int dilation) {
  if (input.ndim() != 3) throw Error("conv2d: input must be C_in x H x W, got " + shape_string(input.shape()));
  if (kernel.ndim() != 4) throw Error("conv2d: kernel must be k x k x C_in x C_out, got " + shape_string(kernel.shape()));
  if (bias.ndim() != 1) throw Error("conv2d: bias must be 1-D");
  const int k = kernel.extent(0);
  if (kernel.extent(1) != k) throw Error("conv2d: kernel window must be square");
  if (k % 2 == 0) throw Error("conv2d: kernel size must be odd for same padding");
  if (dilation < 1) throw Error("conv2d: dilation must be >= 1");
  if (kernel.extent(2) != input.extent(0))
    throw Error("conv2d: kernel C_in " + std::to_string(kernel.extent(2)) +
                " does not match input channels " + std::to_string(input.extent(0)));
  if (bias.extent(0) != kernel.extent(3))
    throw Error("conv2d: bias length does not match kernel C_out");
}

}  // namespace

void set_num_threads(int n) { g_threads = n; }

int num_threads() { return worker_count(); }

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int dilation) {
  check_conv_shapes(input, kernel, bias, dilation);
  const int cin = input.extent(0), H = input.extent(1), W = input.extent(2);
  const int k = kernel.extent(0), cout = kernel.extent(3);
  const int half = (k - 1) / 2;

  Tensor out({cout, H, W});
  const double* in = input.data();
  const double* kd = kernel.data();
  double* od = out.data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
  for (int co = 0; co < cout; ++co) {
    double* plane = od + static_cast<std::size_t>(co) * H * W;
    const double b = bias[co];
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) plane[i] = b;
    for (int ci = 0; ci < cin; ++ci) {
      const double* iplane = in + static_cast<std::size_t>(ci) * H * W;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = (ky - half) * dilation;
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        for (int kx = 0; kx < k; ++kx) {
          const int dx = (kx - half) * dilation;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          const double w = kd[((static_cast<std::size_t>(ky) * k + kx) * cin + ci) * cout + co];
          if (w == 0.0) continue;
          for (int y = y0; y < y1; ++y) {
            double* orow = plane + static_cast<std::size_t>(y) * W;
            const double* irow = iplane + static_cast<std::size_t>(y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) orow[x] += w * irow[x];
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(Tensor& input, Tensor& kernel, Tensor& bias, const Tensor& grad_out,
                     int dilation) {
  check_conv_shapes(input, kernel, bias, dilation);
  const int cin = input.extent(0), H = input.extent(1), W = input.extent(2);
  const int k = kernel.extent(0), cout = kernel.extent(3);
  const int half = (k - 1) / 2;
  if (grad_out.ndim() != 3 || grad_out.extent(0) != cout || grad_out.extent(1) != H ||
      grad_out.extent(2) != W)
    throw Error("conv2d_backward: grad_out shape mismatch");

  const double* in = input.data();
  const double* kd = kernel.data();
  const double* go = grad_out.data();

  if (bias.requires_grad) {
    bias.ensure_grad();
    for (int co = 0; co < cout; ++co) {
      const double* plane = go + static_cast<std::size_t>(co) * H * W;
      double acc = 0.0;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) acc += plane[i];
      bias.grad[co] += acc;
    }
  }

  if (kernel.requires_grad) {
    kernel.ensure_grad();
    double* kg = kernel.grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
    for (int co = 0; co < cout; ++co) {
      const double* gplane = go + static_cast<std::size_t>(co) * H * W;
      for (int ci = 0; ci < cin; ++ci) {
        const double* iplane = in + static_cast<std::size_t>(ci) * H * W;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = (ky - half) * dilation;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = (kx - half) * dilation;
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            double acc = 0.0;
            for (int y = y0; y < y1; ++y) {
              const double* grow = gplane + static_cast<std::size_t>(y) * W;
              const double* irow = iplane + static_cast<std::size_t>(y + dy) * W + dx;
              for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            }
            kg[((static_cast<std::size_t>(ky) * k + kx) * cin + ci) * cout + co] += acc;
          }
        }
      }
    }
  }

  if (input.requires_grad) {
    input.ensure_grad();
    double* ig = input.grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
    for (int ci = 0; ci < cin; ++ci) {
      double* iplane = ig + static_cast<std::size_t>(ci) * H * W;
      for (int co = 0; co < cout; ++co) {
        const double* gplane = go + static_cast<std::size_t>(co) * H * W;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = (ky - half) * dilation;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = (kx - half) * dilation;
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            const double w = kd[((static_cast<std::size_t>(ky) * k + kx) * cin + ci) * cout + co];
            if (w == 0.0) continue;
            for (int y = y0; y < y1; ++y) {
              const double* grow = gplane + static_cast<std::size_t>(y) * W;
              double* irow = iplane + static_cast<std::size_t>(y + dy) * W + dx;
              for (int x = x0; x < x1; ++x) irow[x] += w * grow[x];
            }
          }
        }
      }
    }
  }
}

namespace {

// half-sample bicubic stencil for a = -0.5 at taps floor-1 .. floor+2
constexpr double kB0 = -1.0 / 16.0, kB1 = 9.0 / 16.0, kB2 = 9.0 / 16.0, kB3 = -1.0 / 16.0;

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

void check_upsample_shapes(const Tensor& input) {
  if (input.ndim() != 3)
    throw Error("upsample_bicubic_2x: input must be C x H x W, got " + shape_string(input.shape()));
  if (input.extent(1) < 2 || input.extent(2) < 2)
    throw Error("upsample_bicubic_2x: input too small, needs H,W >= 2");
}

}  // namespace

Tensor upsample_bicubic_2x(const Tensor& input) {
  check_upsample_shapes(input);
  const int C = input.extent(0), H = input.extent(1), W = input.extent(2);
  const int H2 = 2 * H, W2 = 2 * W;
  Tensor out({C, H2, W2});

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
  for (int c = 0; c < C; ++c) {
    const double* ip = input.data() + static_cast<std::size_t>(c) * H * W;
    double* op = out.data() + static_cast<std::size_t>(c) * H2 * W2;
    std::vector<double> rows(static_cast<std::size_t>(H) * W2);  // widened rows
    for (int y = 0; y < H; ++y) {
      const double* irow = ip + static_cast<std::size_t>(y) * W;
      double* rrow = rows.data() + static_cast<std::size_t>(y) * W2;
      for (int x = 0; x < W; ++x) {
        rrow[2 * x] = irow[x];
        const int xm1 = clampi(x - 1, 0, W - 1), xp1 = clampi(x + 1, 0, W - 1),
                  xp2 = clampi(x + 2, 0, W - 1);
        rrow[2 * x + 1] = kB0 * irow[xm1] + kB1 * irow[x] + kB2 * irow[xp1] + kB3 * irow[xp2];
      }
    }
    for (int y = 0; y < H; ++y) {
      const int ym1 = clampi(y - 1, 0, H - 1), yp1 = clampi(y + 1, 0, H - 1),
                yp2 = clampi(y + 2, 0, H - 1);
      const double* r0 = rows.data() + static_cast<std::size_t>(ym1) * W2;
      const double* r1 = rows.data() + static_cast<std::size_t>(y) * W2;
      const double* r2 = rows.data() + static_cast<std::size_t>(yp1) * W2;
      const double* r3 = rows.data() + static_cast<std::size_t>(yp2) * W2;
      double* even = op + static_cast<std::size_t>(2 * y) * W2;
      double* odd = op + static_cast<std::size_t>(2 * y + 1) * W2;
      for (int x = 0; x < W2; ++x) {
        even[x] = r1[x];
        odd[x] = kB0 * r0[x] + kB1 * r1[x] + kB2 * r2[x] + kB3 * r3[x];
      }
    }
  }
  return out;
}

void upsample_bicubic_2x_backward(Tensor& input, const Tensor& grad_out) {
  check_upsample_shapes(input);
  if (!input.requires_grad) return;
  const int C = input.extent(0), H = input.extent(1), W = input.extent(2);
  const int H2 = 2 * H, W2 = 2 * W;
  if (grad_out.ndim() != 3 || grad_out.extent(0) != C || grad_out.extent(1) != H2 ||
      grad_out.extent(2) != W2)
    throw Error("upsample_bicubic_2x_backward: grad_out shape mismatch");
  input.ensure_grad();

  // exact transpose of the separable forward map: columns first, then rows
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
  for (int c = 0; c < C; ++c) {
    const double* gp = grad_out.data() + static_cast<std::size_t>(c) * H2 * W2;
    double* ig = input.grad.data() + static_cast<std::size_t>(c) * H * W;
    std::vector<double> rows(static_cast<std::size_t>(H) * W2, 0.0);
    for (int y = 0; y < H; ++y) {
      const int ym1 = clampi(y - 1, 0, H - 1), yp1 = clampi(y + 1, 0, H - 1),
                yp2 = clampi(y + 2, 0, H - 1);
      const double* even = gp + static_cast<std::size_t>(2 * y) * W2;
      const double* odd = gp + static_cast<std::size_t>(2 * y + 1) * W2;
      double* r0 = rows.data() + static_cast<std::size_t>(ym1) * W2;
      double* r1 = rows.data() + static_cast<std::size_t>(y) * W2;
      double* r2 = rows.data() + static_cast<std::size_t>(yp1) * W2;
      double* r3 = rows.data() + static_cast<std::size_t>(yp2) * W2;
      for (int x = 0; x < W2; ++x) {
        r1[x] += even[x];
        r0[x] += kB0 * odd[x];
        r1[x] += kB1 * odd[x];
        r2[x] += kB2 * odd[x];
        r3[x] += kB3 * odd[x];
      }
    }
    for (int y = 0; y < H; ++y) {
      const double* rrow = rows.data() + static_cast<std::size_t>(y) * W2;
      double* irow = ig + static_cast<std::size_t>(y) * W;
      for (int x = 0; x < W; ++x) {
        irow[x] += rrow[2 * x];
        const int xm1 = clampi(x - 1, 0, W - 1), xp1 = clampi(x + 1, 0, W - 1),
                  xp2 = clampi(x + 2, 0, W - 1);
        const double g = rrow[2 * x + 1];
        irow[xm1] += kB0 * g;
        irow[x] += kB1 * g;
        irow[xp1] += kB2 * g;
        irow[xp2] += kB3 * g;
      }
    }
  }
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchNormCache* cache) {
  if (input.ndim() != 3) throw Error("batch_norm: input must be C x H x W");
  const int C = input.extent(0);
  const std::int64_t N = static_cast<std::int64_t>(input.extent(1)) * input.extent(2);
  if (gamma.ndim() != 1 || gamma.extent(0) != C || beta.ndim() != 1 || beta.extent(0) != C)
    throw Error("batch_norm: affine parameters must have one value per channel");
  if (eps <= 0) throw Error("batch_norm: eps must be positive");

  Tensor out(input.shape());
  if (cache) {
    cache->mean.assign(static_cast<std::size_t>(C), 0.0);
    cache->inv_std.assign(static_cast<std::size_t>(C), 0.0);
  }

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
  for (int c = 0; c < C; ++c) {
    const double* ip = input.data() + static_cast<std::size_t>(c) * N;
    double* op = out.data() + static_cast<std::size_t>(c) * N;
    double mean = 0.0;
    for (std::int64_t i = 0; i < N; ++i) mean += ip[i];
    mean /= static_cast<double>(N);
    double var = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
      const double d = ip[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(N);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    const double g = gamma[c], b = beta[c];
    for (std::int64_t i = 0; i < N; ++i) op[i] = g * (ip[i] - mean) * inv_std + b;
    if (cache) {
      cache->mean[static_cast<std::size_t>(c)] = mean;
      cache->inv_std[static_cast<std::size_t>(c)] = inv_std;
    }
  }
  return out;
}

void batch_norm_backward(Tensor& input, Tensor& gamma, Tensor& beta, const Tensor& grad_out,
                         const BatchNormCache& cache) {
  const int C = input.extent(0);
  const std::int64_t N = static_cast<std::int64_t>(input.extent(1)) * input.extent(2);
  if (!grad_out.same_shape(input)) throw Error("batch_norm_backward: grad_out shape mismatch");
  if (cache.mean.size() != static_cast<std::size_t>(C))
    throw Error("batch_norm_backward: stale cache");

  if (gamma.requires_grad) gamma.ensure_grad();
  if (beta.requires_grad) beta.ensure_grad();
  if (input.requires_grad) input.ensure_grad();

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
  for (int c = 0; c < C; ++c) {
    const double* ip = input.data() + static_cast<std::size_t>(c) * N;
    const double* gp = grad_out.data() + static_cast<std::size_t>(c) * N;
    const double mean = cache.mean[static_cast<std::size_t>(c)];
    const double inv_std = cache.inv_std[static_cast<std::size_t>(c)];
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
      sum_g += gp[i];
      sum_gx += gp[i] * (ip[i] - mean) * inv_std;
    }
    if (gamma.requires_grad) gamma.grad[c] += sum_gx;
    if (beta.requires_grad) beta.grad[c] += sum_g;
    if (input.requires_grad) {
      double* ig = input.grad.data() + static_cast<std::size_t>(c) * N;
      const double g = gamma[c];
      const double inv_n = 1.0 / static_cast<double>(N);
      for (std::int64_t i = 0; i < N; ++i) {
        const double xhat = (ip[i] - mean) * inv_std;
        ig[i] += g * inv_std * (gp[i] - sum_g * inv_n - xhat * sum_gx * inv_n);
      }
    }
  }
}

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

inline double gelu_fwd(double x) { return x * 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
  const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
inline double sigmoid_fwd(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Tensor activation(const Tensor& input, Act kind) {
  Tensor out(input.shape());
  const double* ip = input.data();
  double* op = out.data();
  const std::int64_t n = input.size();
  switch (kind) {
    case Act::Gelu:
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
      for (std::int64_t i = 0; i < n; ++i) op[i] = gelu_fwd(ip[i]);
      break;
    case Act::Sigmoid:
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
      for (std::int64_t i = 0; i < n; ++i) op[i] = sigmoid_fwd(ip[i]);
      break;
    case Act::SoftmaxChannels: {
      if (input.ndim() != 3) throw Error("softmax: input must be C x H x W");
      const int C = input.extent(0);
      const std::int64_t HW = static_cast<std::int64_t>(input.extent(1)) * input.extent(2);
      for (std::int64_t i = 0; i < HW; ++i) {
        double mx = ip[i];
        for (int c = 1; c < C; ++c) mx = std::max(mx, ip[c * HW + i]);
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(ip[c * HW + i] - mx);
        for (int c = 0; c < C; ++c) op[c * HW + i] = std::exp(ip[c * HW + i] - mx) / z;
      }
      break;
    }
  }
  return out;
}

void activation_backward(Tensor& input, const Tensor& output, const Tensor& grad_out, Act kind) {
  if (!input.requires_grad) return;
  if (!grad_out.same_shape(input) || !output.same_shape(input))
    throw Error("activation_backward: shape mismatch");
  input.ensure_grad();
  const double* ip = input.data();
  const double* op = output.data();
  const double* gp = grad_out.data();
  double* ig = input.grad.data();
  const std::int64_t n = input.size();
  switch (kind) {
    case Act::Gelu:
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(worker_count())
#endif
      for (std::int64_t i = 0; i < n; ++i) ig[i] += gp[i] * gelu_grad(ip[i]);
      break;
    case Act::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) ig[i] += gp[i] * op[i] * (1.0 - op[i]);
      break;
    case Act::SoftmaxChannels: {
      const int C = input.extent(0);
      const std::int64_t HW = static_cast<std::int64_t>(input.extent(1)) * input.extent(2);
      for (std::int64_t i = 0; i < HW; ++i) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += gp[c * HW + i] * op[c * HW + i];
        for (int c = 0; c < C; ++c) ig[c * HW + i] += op[c * HW + i] * (gp[c * HW + i] - dot);
      }
      break;
    }
  }
}

double mse(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw Error("mse: shape mismatch between prediction and target");
  const std::int64_t n = pred.size();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(n);
}

void mse_backward(Tensor& pred, const Tensor& target, double upstream) {
  if (!pred.requires_grad) return;
  if (!pred.same_shape(target)) throw Error("mse_backward: shape mismatch");
  pred.ensure_grad();
  const std::int64_t n = pred.size();
  const double s = 2.0 * upstream / static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i) pred.grad[i] += s * (pred[i] - target[i]);
}

void adam_step(Tensor& param, AdamState& state, const AdamHyper& hp) {
  if (param.grad.size() != static_cast<std::size_t>(param.size()))
    throw Error("adam_step: parameter has no gradient");
  const std::size_t n = param.grad.size();
  if (state.m.size() != n) {
    if (!state.m.empty()) throw Error("adam_step: state size mismatch");
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  double* p = param.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = param.grad[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

void adam_step(const std::vector<Tensor*>& params, std::vector<AdamState>& states,
               const AdamHyper& hp) {
  if (params.size() != states.size()) throw Error("adam_step: params/states length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) adam_step(*params[i], states[i], hp);
}

}  // namespace lfkm::numerics
