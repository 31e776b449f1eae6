#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lfkm/numerics.hpp"
#include "lfkm/tensor.hpp"

namespace lfkm::model {

enum class OutputAct : std::uint8_t { Sigmoid = 0, Softmax = 1 };

constexpr int kLayers = 5;      // modulated backbone layers
constexpr int kKernelSize = 3;  // backbone window

struct NetworkConfig {
  int c_m = 2;
  int c_d = 48;
  int r = 6;
  int n = 256;
  int U = 9, V = 9;
  int X = 0, Y = 0;  // spatial extents, rows x columns
  OutputAct output_activation = OutputAct::Sigmoid;
  bool allocate_modulators = true;  // directional u/v halves vs one set per view
  bool decompose_kernels = true;    // coefficient volumes over shared bases vs dense kernels
  bool decoder_k3 = false;          // decoder window 1x1 by default, 3x3 when set
  std::uint64_t seed = 0;

  int channels() const { return c_m + c_d; }
  int decoder_k() const { return decoder_k3 ? 3 : 1; }
  int noise_h() const { return (X + 15) / 16; }
  int noise_w() const { return (Y + 15) / 16; }
  void validate() const;  // throws Error on unusable settings
};

// backbone dilations; every layer but the last is followed by a 2x upsample
constexpr std::array<int, kLayers> kDilation = {1, 2, 2, 2, 1};

struct LayerParams {
  Tensor desc;                 // r x c x c_d (or 3 x 3 x c x c_d dense)
  std::vector<Tensor> mod_u;   // U tensors, r x c x c_m/2, allocated form
  std::vector<Tensor> mod_v;   // V tensors
  std::vector<Tensor> mod_uv;  // U*V tensors, r x c x c_m, per-view form
  std::vector<Tensor> bias_u;  // U tensors of c values
  std::vector<Tensor> bias_v;
  std::vector<Tensor> bias_uv;
  Tensor gamma, beta;  // batch-norm affines, c values each
};

struct KernelBank {
  NetworkConfig config;
  Tensor bases;  // 3 x 3 x r, shared by all layers; empty when not decomposing
  std::array<LayerParams, kLayers> layers;
  Tensor decoder_kernel;  // kd x kd x c x 3
  Tensor decoder_bias;    // 3
};

enum class ParamRole {
  Bases,
  Desc,
  ModU,
  ModV,
  ModUV,
  BiasU,
  BiasV,
  BiasUV,
  Gamma,
  Beta,
  DecoderKernel,
  DecoderBias,
};

struct ParamRef {
  Tensor* tensor;
  ParamRole role;
  int layer;  // -1 for bases/decoder
  int index;  // u, v, or u*V+v; -1 otherwise
};

// Canonical enumeration order (also the serialization order): bases; per layer
// desc, mod slices in ascending angular index, bias slices, gamma, beta;
// decoder kernel, decoder bias.
std::vector<ParamRef> bank_params(KernelBank& bank);

// Deterministic init: fb bases, fan-in-scaled uniform coefficients/kernels
// drawn in canonical order from a stream derived from config.seed, zero
// biases, identity batch-norm affines.
KernelBank init_bank(const NetworkConfig& config);

// Uniform [0,1) noise volume c x ceil(X/16) x ceil(Y/16), regenerated from
// config.seed alone.
Tensor make_noise(const NetworkConfig& config);

struct AssembledLayer {
  Tensor kernel;  // 3 x 3 x c x c, descriptor block then u-half then v-half
  Tensor bias;    // c
};

AssembledLayer assemble_layer_kernel(const KernelBank& bank, int layer, int u, int v);

struct ForwardTrace {
  std::array<AssembledLayer, kLayers> assembled;
  std::array<Tensor, kLayers> conv_in;    // layer inputs
  std::array<Tensor, kLayers> conv_out;   // pre-upsample
  std::array<Tensor, kLayers> bn_in;      // post-upsample (== conv_out for layer 5)
  std::array<Tensor, kLayers> bn_out;     // pre-activation
  std::array<Tensor, kLayers> act_out;    // layer outputs
  std::array<numerics::BatchNormCache, kLayers> bn_cache;
  Tensor decoder_out;  // pre output activation
  Tensor output_full;  // post activation, before crop
  int u = 0, v = 0;
};

// Renders the (u,v) sub-aperture view, 3 x X x Y in (0,1).
Tensor forward(const KernelBank& bank, const Tensor& noise, int u, int v);
Tensor forward(const KernelBank& bank, const Tensor& noise, int u, int v, ForwardTrace& trace);

// Reverse pass for the traced render; accumulates into the .grad buffers of
// every bank tensor with requires_grad set.
void backward(KernelBank& bank, const Tensor& noise, ForwardTrace& trace, const Tensor& grad_out);

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t modulator_values = 0;  // modulator coefficients/kernels + their biases
  double modulator_share = 0.0;
};

ParamCount param_count(const NetworkConfig& config);

// Closed-form estimates of backbone kernel parameters,
// l * k^2 * C_in * (U*V*c_m + c_d) per-view and
// l * k^2 * C_in * ((U+V)/2*c_m + c_d) once modulators are allocated
// directionally.
std::int64_t estimate_per_view_params(int l, int k, int c_in, int U, int V, int c_m, int c_d);
std::int64_t estimate_allocated_params(int l, int k, int c_in, int U, int V, int c_m, int c_d);

// Modulator coefficient count under each allocation flag, for reduction-factor
// checks.
std::int64_t modulator_coefficient_count(const NetworkConfig& config, bool allocated);

// The c_d that brings config's total parameter count closest to target
// (everything else fixed); ties go to the smaller width.
int match_c_d(NetworkConfig config, std::int64_t target_total);

}  // namespace lfkm::model
