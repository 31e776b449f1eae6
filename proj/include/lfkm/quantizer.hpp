#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "lfkm/lightfield_io.hpp"
#include "lfkm/model.hpp"
#include "lfkm/trainer.hpp"

namespace lfkm::quantizer {

struct Codebook {
  std::vector<double> centroids;  // ascending, padded to the requested size
  std::vector<std::uint32_t> assignments;
};

// 1-D k-means: k-means++ seeding, Lloyd updates until the largest centroid
// movement drops below 1e-8 or 100 iterations pass. Empty clusters are
// reseeded to the value farthest from its assigned centroid. When the input
// has at most n distinct values the codebook is exact and no RNG is consumed.
Codebook kmeans_fit(const std::vector<double>& values, int n, std::uint64_t seed);

struct Affine16 {
  float lo = 0.0f;
  float hi = 0.0f;
  std::vector<std::uint16_t> codes;
};

Affine16 affine16_encode(const std::vector<double>& values);
std::vector<double> affine16_decode(const Affine16& q);

struct QuantizedLayer {
  std::vector<float> centroids;
  std::vector<std::uint32_t> indices;
};

struct QuantizedModel {
  model::NetworkConfig config;
  bool raw = false;
  std::vector<float> raw_values;  // only when raw
  std::array<QuantizedLayer, model::kLayers> layers;
  Affine16 bases;    // empty when kernels are not decomposed
  Affine16 decoder;  // kernel values then biases
};

struct QuantizeResult {
  model::KernelBank bank;  // pinned to the exact values a decoder reconstructs
  QuantizedModel qm;
  std::array<double, model::kLayers> layer_mse_before{};  // right after snapping
  std::array<double, model::kLayers> layer_mse_after{};   // after the fine-tune epoch
};

// Layer-by-layer codebook quantization with straight-through centroid
// fine-tuning (assignments frozen, bases frozen), then 16-bit affine
// quantization of the basis and decoder tensors.
QuantizeResult quantize_model(model::KernelBank bank, const lightfield_io::LightField& lf,
                              const trainer::TrainSchedule& schedule);

// Untrained path: every parameter stored as raw 32-bit floats.
QuantizedModel raw_model(const model::KernelBank& bank);

// Reconstruct a render-ready bank from a deserialized model.
model::KernelBank bank_from_model(const QuantizedModel& qm);

// Values pooled for one layer's codebook, in stream order.
std::vector<double> layer_values(const model::KernelBank& bank, int layer);
void set_layer_values(model::KernelBank& bank, int layer, const std::vector<double>& values);
std::size_t layer_value_count(const model::NetworkConfig& config);

}  // namespace lfkm::quantizer
