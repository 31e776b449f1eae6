#include "lfkm/model.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "lfkm/fb_basis.hpp"
#include "lfkm/rng.hpp"

namespace lfkm::model {

namespace {

constexpr double kBnEps = 1e-5;

Tensor take_grad(Tensor& t) {
  Tensor g(t.shape(), std::move(t.grad));
  t.grad.clear();
  t.requires_grad = false;
  return g;
}

// copies grad_kernel[:, :, :, o0 : o0+width] out as a value tensor
Tensor slice_out_channels(const std::vector<int>& kshape, const std::vector<double>& kgrad, int o0,
                          int width) {
  const int k = kshape[0], cin = kshape[2], cout = kshape[3];
  Tensor part({k, k, cin, width});
  for (int ab = 0; ab < k * k; ++ab)
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = kgrad.data() + (static_cast<std::size_t>(ab) * cin + ci) * cout + o0;
      double* dst = part.data() + (static_cast<std::size_t>(ab) * cin + ci) * width;
      for (int o = 0; o < width; ++o) dst[o] = src[o];
    }
  return part;
}

void write_in_channels(Tensor& kernel, const Tensor& part, int o0) {
  const int k = kernel.extent(0), cin = kernel.extent(2), cout = kernel.extent(3);
  const int width = part.extent(3);
  for (int ab = 0; ab < k * k; ++ab)
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = part.data() + (static_cast<std::size_t>(ab) * cin + ci) * width;
      double* dst = kernel.data() + (static_cast<std::size_t>(ab) * cin + ci) * cout + o0;
      for (int o = 0; o < width; ++o) dst[o] = src[o];
    }
}

void accumulate_dense_grad(Tensor& dense, const Tensor& part) {
  if (!dense.requires_grad) return;
  dense.ensure_grad();
  for (std::int64_t i = 0; i < part.size(); ++i) dense.grad[static_cast<std::size_t>(i)] += part[i];
}

}  // namespace

void NetworkConfig::validate() const {
  if (c_m < 1) throw Error("config: c_m must be >= 1");
  if (allocate_modulators && (c_m < 2 || c_m % 2 != 0))
    throw Error("config: c_m must be even and >= 2 when modulators are allocated directionally");
  if (c_d < 1) throw Error("config: c_d must be >= 1");
  if (c_m > 65535 || c_d > 65535) throw Error("config: channel counts exceed the format's u16 range");
  if (decompose_kernels && (r < 1 || r > kKernelSize * kKernelSize))
    throw Error("config: r must be in [1, 9], got " + std::to_string(r));
  if (n < 1 || n > 65536) throw Error("config: centroid count n must be in [1, 65536]");
  if (U < 1 || V < 1 || U > 255 || V > 255) throw Error("config: U, V must be in [1, 255]");
  if (X < 1 || Y < 1 || X > 65535 || Y > 65535)
    throw Error("config: X, Y must be in [1, 65535]");
}

std::vector<ParamRef> bank_params(KernelBank& bank) {
  const NetworkConfig& c = bank.config;
  std::vector<ParamRef> out;
  if (c.decompose_kernels) out.push_back({&bank.bases, ParamRole::Bases, -1, -1});
  for (int i = 0; i < kLayers; ++i) {
    LayerParams& L = bank.layers[static_cast<std::size_t>(i)];
    out.push_back({&L.desc, ParamRole::Desc, i, -1});
    if (c.allocate_modulators) {
      for (int u = 0; u < c.U; ++u) out.push_back({&L.mod_u[static_cast<std::size_t>(u)], ParamRole::ModU, i, u});
      for (int v = 0; v < c.V; ++v) out.push_back({&L.mod_v[static_cast<std::size_t>(v)], ParamRole::ModV, i, v});
      for (int u = 0; u < c.U; ++u) out.push_back({&L.bias_u[static_cast<std::size_t>(u)], ParamRole::BiasU, i, u});
      for (int v = 0; v < c.V; ++v) out.push_back({&L.bias_v[static_cast<std::size_t>(v)], ParamRole::BiasV, i, v});
    } else {
      for (int uv = 0; uv < c.U * c.V; ++uv)
        out.push_back({&L.mod_uv[static_cast<std::size_t>(uv)], ParamRole::ModUV, i, uv});
      for (int uv = 0; uv < c.U * c.V; ++uv)
        out.push_back({&L.bias_uv[static_cast<std::size_t>(uv)], ParamRole::BiasUV, i, uv});
    }
    out.push_back({&L.gamma, ParamRole::Gamma, i, -1});
    out.push_back({&L.beta, ParamRole::Beta, i, -1});
  }
  out.push_back({&bank.decoder_kernel, ParamRole::DecoderKernel, -1, -1});
  out.push_back({&bank.decoder_bias, ParamRole::DecoderBias, -1, -1});
  return out;
}

KernelBank init_bank(const NetworkConfig& config) {
  config.validate();
  KernelBank bank;
  bank.config = config;
  const int c = config.channels(), k = kKernelSize;

  if (config.decompose_kernels) bank.bases = fb_basis::generate_fb_bases(k, config.r);

  const int half = config.c_m / 2;
  for (int i = 0; i < kLayers; ++i) {
    LayerParams& L = bank.layers[static_cast<std::size_t>(i)];
    const auto coeff_shape = [&](int cout) {
      return config.decompose_kernels ? std::vector<int>{config.r, c, cout}
                                      : std::vector<int>{k, k, c, cout};
    };
    L.desc = Tensor(coeff_shape(config.c_d));
    if (config.allocate_modulators) {
      L.mod_u.assign(static_cast<std::size_t>(config.U), Tensor(coeff_shape(half)));
      L.mod_v.assign(static_cast<std::size_t>(config.V), Tensor(coeff_shape(half)));
      L.bias_u.assign(static_cast<std::size_t>(config.U), Tensor({c}));
      L.bias_v.assign(static_cast<std::size_t>(config.V), Tensor({c}));
    } else {
      L.mod_uv.assign(static_cast<std::size_t>(config.U * config.V), Tensor(coeff_shape(config.c_m)));
      L.bias_uv.assign(static_cast<std::size_t>(config.U * config.V), Tensor({c}));
    }
    L.gamma = Tensor::full({c}, 1.0);
    L.beta = Tensor({c});
  }
  const int kd = config.decoder_k();
  bank.decoder_kernel = Tensor({kd, kd, c, 3});
  bank.decoder_bias = Tensor({3});

  // fan-in-scaled uniform draws in canonical parameter order
  SplitMix64 stream(mix_seed(config.seed, 1));
  const double coeff_bound =
      config.decompose_kernels ? std::sqrt(3.0 / (config.r * c)) : std::sqrt(3.0 / (k * k * c));
  const double decoder_bound = std::sqrt(3.0 / (kd * kd * c));
  for (const ParamRef& p : bank_params(bank)) {
    switch (p.role) {
      case ParamRole::Desc:
      case ParamRole::ModU:
      case ParamRole::ModV:
      case ParamRole::ModUV:
        for (std::int64_t j = 0; j < p.tensor->size(); ++j)
          (*p.tensor)[j] = stream.next_uniform(-coeff_bound, coeff_bound);
        break;
      case ParamRole::DecoderKernel:
        for (std::int64_t j = 0; j < p.tensor->size(); ++j)
          (*p.tensor)[j] = stream.next_uniform(-decoder_bound, decoder_bound);
        break;
      default:
        break;  // bases from the FB construction; biases zero; gamma/beta identity
    }
  }
  return bank;
}

Tensor make_noise(const NetworkConfig& config) {
  config.validate();
  Tensor noise({config.channels(), config.noise_h(), config.noise_w()});
  SplitMix64 stream(config.seed);
  for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = stream.next_double();
  return noise;
}

AssembledLayer assemble_layer_kernel(const KernelBank& bank, int layer, int u, int v) {
  const NetworkConfig& c = bank.config;
  if (layer < 0 || layer >= kLayers) throw Error("assemble_layer_kernel: layer out of range");
  if (u < 0 || u >= c.U || v < 0 || v >= c.V)
    throw Error("assemble_layer_kernel: view (" + std::to_string(u) + "," + std::to_string(v) +
                ") outside " + std::to_string(c.U) + "x" + std::to_string(c.V) + " grid");
  const LayerParams& L = bank.layers[static_cast<std::size_t>(layer)];
  const int ch = c.channels(), k = kKernelSize;

  AssembledLayer out;
  out.kernel = Tensor({k, k, ch, ch});
  const auto materialize = [&](const Tensor& coeffs) {
    return c.decompose_kernels ? fb_basis::compose_kernel(bank.bases, coeffs) : coeffs;
  };
  write_in_channels(out.kernel, materialize(L.desc), 0);
  if (c.allocate_modulators) {
    const int half = c.c_m / 2;
    write_in_channels(out.kernel, materialize(L.mod_u[static_cast<std::size_t>(u)]), c.c_d);
    write_in_channels(out.kernel, materialize(L.mod_v[static_cast<std::size_t>(v)]), c.c_d + half);
    out.bias = Tensor({ch});
    const Tensor& bu = L.bias_u[static_cast<std::size_t>(u)];
    const Tensor& bv = L.bias_v[static_cast<std::size_t>(v)];
    for (int i = 0; i < ch; ++i) out.bias[i] = bu[i] + bv[i];
  } else {
    write_in_channels(out.kernel, materialize(L.mod_uv[static_cast<std::size_t>(u * c.V + v)]), c.c_d);
    out.bias = L.bias_uv[static_cast<std::size_t>(u * c.V + v)];
    out.bias.requires_grad = false;  // value copy only; grads flow via backward()
    out.bias.grad.clear();
  }
  return out;
}

namespace {

Tensor crop_spatial(Tensor&& full, int X, int Y) {
  const int C = full.extent(0), H = full.extent(1), W = full.extent(2);
  if (H == X && W == Y) return std::move(full);
  Tensor out({C, X, Y});
  for (int ch = 0; ch < C; ++ch)
    for (int y = 0; y < X; ++y) {
      const double* src = full.data() + (static_cast<std::size_t>(ch) * H + y) * W;
      double* dst = out.data() + (static_cast<std::size_t>(ch) * X + y) * Y;
      for (int x = 0; x < Y; ++x) dst[x] = src[x];
    }
  return out;
}

numerics::Act output_act(const NetworkConfig& c) {
  return c.output_activation == OutputAct::Sigmoid ? numerics::Act::Sigmoid
                                                   : numerics::Act::SoftmaxChannels;
}

using numerics::activation;
using numerics::Act;
using numerics::batch_norm;
using numerics::conv2d;
using numerics::upsample_bicubic_2x;

}  // namespace

Tensor forward(const KernelBank& bank, const Tensor& noise, int u, int v) {
  const NetworkConfig& c = bank.config;
  Tensor x = noise;
  for (int i = 0; i < kLayers; ++i) {
    const AssembledLayer a = assemble_layer_kernel(bank, i, u, v);
    const LayerParams& L = bank.layers[static_cast<std::size_t>(i)];
    x = conv2d(x, a.kernel, a.bias, kDilation[static_cast<std::size_t>(i)]);
    if (i + 1 < kLayers) x = upsample_bicubic_2x(x);
    x = batch_norm(x, L.gamma, L.beta, kBnEps);
    x = activation(x, Act::Gelu);
  }
  x = conv2d(x, bank.decoder_kernel, bank.decoder_bias, 1);
  x = activation(x, output_act(c));
  return crop_spatial(std::move(x), c.X, c.Y);
}

Tensor forward(const KernelBank& bank, const Tensor& noise, int u, int v, ForwardTrace& trace) {
  const NetworkConfig& c = bank.config;
  trace.u = u;
  trace.v = v;
  const Tensor* x = &noise;
  for (int i = 0; i < kLayers; ++i) {
    const auto s = static_cast<std::size_t>(i);
    trace.assembled[s] = assemble_layer_kernel(bank, i, u, v);
    const LayerParams& L = bank.layers[s];
    trace.conv_out[s] = conv2d(*x, trace.assembled[s].kernel, trace.assembled[s].bias,
                               kDilation[s]);
    const Tensor* pre_bn = &trace.conv_out[s];
    if (i + 1 < kLayers) {
      trace.bn_in[s] = upsample_bicubic_2x(trace.conv_out[s]);
      pre_bn = &trace.bn_in[s];
    }
    trace.bn_out[s] = batch_norm(*pre_bn, L.gamma, L.beta, kBnEps, &trace.bn_cache[s]);
    trace.act_out[s] = activation(trace.bn_out[s], Act::Gelu);
    x = &trace.act_out[s];
  }
  trace.decoder_out = conv2d(*x, bank.decoder_kernel, bank.decoder_bias, 1);
  trace.output_full = activation(trace.decoder_out, output_act(c));
  Tensor full = trace.output_full;
  return crop_spatial(std::move(full), c.X, c.Y);
}

void backward(KernelBank& bank, const Tensor& noise, ForwardTrace& trace, const Tensor& grad_out) {
  const NetworkConfig& c = bank.config;
  const int H = trace.output_full.extent(1), W = trace.output_full.extent(2);
  if (grad_out.ndim() != 3 || grad_out.extent(0) != 3 || grad_out.extent(1) != c.X ||
      grad_out.extent(2) != c.Y)
    throw Error("backward: grad_out must be 3 x X x Y");

  Tensor g({3, H, W});
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < c.X; ++y) {
      const double* src = grad_out.data() + (static_cast<std::size_t>(ch) * c.X + y) * c.Y;
      double* dst = g.data() + (static_cast<std::size_t>(ch) * H + y) * W;
      for (int x = 0; x < c.Y; ++x) dst[x] = src[x];
    }

  trace.decoder_out.requires_grad = true;
  numerics::activation_backward(trace.decoder_out, trace.output_full, g, output_act(c));
  g = take_grad(trace.decoder_out);

  trace.act_out[kLayers - 1].requires_grad = true;
  numerics::conv2d_backward(trace.act_out[kLayers - 1], bank.decoder_kernel, bank.decoder_bias, g,
                            1);
  g = take_grad(trace.act_out[kLayers - 1]);

  for (int i = kLayers - 1; i >= 0; --i) {
    const auto s = static_cast<std::size_t>(i);
    LayerParams& L = bank.layers[s];

    trace.bn_out[s].requires_grad = true;
    numerics::activation_backward(trace.bn_out[s], trace.act_out[s], g, Act::Gelu);
    g = take_grad(trace.bn_out[s]);

    Tensor& pre_bn = (i + 1 < kLayers) ? trace.bn_in[s] : trace.conv_out[s];
    pre_bn.requires_grad = true;
    numerics::batch_norm_backward(pre_bn, L.gamma, L.beta, g, trace.bn_cache[s]);
    g = take_grad(pre_bn);

    if (i + 1 < kLayers) {
      trace.conv_out[s].requires_grad = true;
      numerics::upsample_bicubic_2x_backward(trace.conv_out[s], g);
      g = take_grad(trace.conv_out[s]);
    }

    // the input of layer 0 is the noise volume, which takes no gradient
    Tensor& conv_in = i > 0 ? trace.act_out[s - 1] : const_cast<Tensor&>(noise);
    if (i > 0) conv_in.requires_grad = true;
    trace.assembled[s].kernel.requires_grad = true;
    trace.assembled[s].bias.requires_grad = true;
    numerics::conv2d_backward(conv_in, trace.assembled[s].kernel, trace.assembled[s].bias, g,
                              kDilation[s]);
    if (i > 0) g = take_grad(trace.act_out[s - 1]);

    // split the assembled-kernel gradient back into bank parameters
    const std::vector<double>& kg = trace.assembled[s].kernel.grad;
    const std::vector<int>& kshape = trace.assembled[s].kernel.shape();
    const auto scatter = [&](Tensor& coeffs, int o0, int width) {
      Tensor part = slice_out_channels(kshape, kg, o0, width);
      if (c.decompose_kernels) {
        fb_basis::compose_kernel_backward(bank.bases, coeffs, part);
      } else {
        accumulate_dense_grad(coeffs, part);
      }
    };
    scatter(L.desc, 0, c.c_d);
    Tensor bias_grad(trace.assembled[s].bias.shape(), std::move(trace.assembled[s].bias.grad));
    if (c.allocate_modulators) {
      const int half = c.c_m / 2;
      scatter(L.mod_u[static_cast<std::size_t>(trace.u)], c.c_d, half);
      scatter(L.mod_v[static_cast<std::size_t>(trace.v)], c.c_d + half, half);
      Tensor& bu = L.bias_u[static_cast<std::size_t>(trace.u)];
      Tensor& bv = L.bias_v[static_cast<std::size_t>(trace.v)];
      if (bu.requires_grad) {
        bu.ensure_grad();
        for (std::int64_t j = 0; j < bias_grad.size(); ++j) bu.grad[static_cast<std::size_t>(j)] += bias_grad[j];
      }
      if (bv.requires_grad) {
        bv.ensure_grad();
        for (std::int64_t j = 0; j < bias_grad.size(); ++j) bv.grad[static_cast<std::size_t>(j)] += bias_grad[j];
      }
    } else {
      const auto uv = static_cast<std::size_t>(trace.u * c.V + trace.v);
      scatter(L.mod_uv[uv], c.c_d, c.c_m);
      Tensor& buv = L.bias_uv[uv];
      if (buv.requires_grad) {
        buv.ensure_grad();
        for (std::int64_t j = 0; j < bias_grad.size(); ++j) buv.grad[static_cast<std::size_t>(j)] += bias_grad[j];
      }
    }
  }
}

ParamCount param_count(const NetworkConfig& config) {
  config.validate();
  const std::int64_t c = config.channels(), k = kKernelSize;
  const std::int64_t slice = config.decompose_kernels ? config.r * c : k * k * c;

  ParamCount out;
  if (config.decompose_kernels) out.total += k * k * config.r;
  for (int i = 0; i < kLayers; ++i) {
    out.total += slice * config.c_d;  // descriptor
    std::int64_t mods, mod_biases;
    if (config.allocate_modulators) {
      mods = static_cast<std::int64_t>(config.U + config.V) * slice * (config.c_m / 2);
      mod_biases = static_cast<std::int64_t>(config.U + config.V) * c;
    } else {
      mods = static_cast<std::int64_t>(config.U) * config.V * slice * config.c_m;
      mod_biases = static_cast<std::int64_t>(config.U) * config.V * c;
    }
    out.total += mods + mod_biases + 2 * c;  // + batch-norm affines
    out.modulator_values += mods + mod_biases;
  }
  const std::int64_t kd = config.decoder_k();
  out.total += kd * kd * c * 3 + 3;
  out.modulator_share = static_cast<double>(out.modulator_values) / static_cast<double>(out.total);
  return out;
}

std::int64_t estimate_per_view_params(int l, int k, int c_in, int U, int V, int c_m, int c_d) {
  return static_cast<std::int64_t>(l) * k * k * c_in *
         (static_cast<std::int64_t>(U) * V * c_m + c_d);
}

std::int64_t estimate_allocated_params(int l, int k, int c_in, int U, int V, int c_m, int c_d) {
  return static_cast<std::int64_t>(l) * k * k * c_in *
         (static_cast<std::int64_t>(U + V) / 2 * c_m + c_d);
}

std::int64_t modulator_coefficient_count(const NetworkConfig& config, bool allocated) {
  const std::int64_t c = config.channels();
  const std::int64_t slice = config.decompose_kernels ? config.r * c
                                                      : static_cast<std::int64_t>(kKernelSize) * kKernelSize * c;
  if (allocated)
    return static_cast<std::int64_t>(kLayers) * (config.U + config.V) * slice * (config.c_m / 2);
  return static_cast<std::int64_t>(kLayers) * config.U * config.V * slice * config.c_m;
}

int match_c_d(NetworkConfig config, std::int64_t target_total) {
  int best = 1;
  std::int64_t best_gap = -1;
  for (int cd = 1; cd <= 4096; ++cd) {
    config.c_d = cd;
    const std::int64_t total = param_count(config).total;
    const std::int64_t gap = total > target_total ? total - target_total : target_total - total;
    if (best_gap < 0 || gap < best_gap) {
      best = cd;
      best_gap = gap;
    }
    if (total > target_total && gap > best_gap) break;  // counts grow with c_d
  }
  return best;
}

}  // namespace lfkm::model
