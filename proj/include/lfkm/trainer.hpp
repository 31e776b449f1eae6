#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lfkm/lightfield_io.hpp"
#include "lfkm/model.hpp"
#include "lfkm/rng.hpp"

namespace lfkm::trainer {

using lightfield_io::LightField;

struct TrainSchedule {
  int epochs = 12;
  int uses_per_sai = 500;        // expected uses of each SAI per epoch
  int batch = 5;                 // SAIs per iteration
  int quant_uses_per_sai = 200;  // per quantization fine-tune epoch
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool verbose = false;

  void validate() const;
};

struct ViewIndex {
  int u = 0, v = 0;
  bool operator==(const ViewIndex&) const = default;
};

// count independent uniform draws over the grid, u drawn before v.
std::vector<ViewIndex> sample_batch(SplitMix64& rng, int U, int V, int count);

struct TrainReport {
  std::vector<double> loss;        // per iteration
  std::vector<double> epoch_psnr;  // mean view PSNR at each epoch boundary
  std::vector<double> epoch_seconds;

  void write_tsv(const std::string& path) const;
};

struct EvalResult {
  std::vector<double> view_psnr;  // u-major
  double mean = 0.0;
  double variance = 0.0;  // population variance over views
};

EvalResult evaluate(const model::KernelBank& bank, const LightField& lf);

struct FreezeMask {
  bool modulators_u = false;  // u-direction modulator kernels and biases
  bool modulators_v = false;  // (either flag freezes per-view modulators too)
};

class Trainer {
 public:
  explicit Trainer(const model::NetworkConfig& config) : bank_(model::init_bank(config)) {}
  explicit Trainer(model::KernelBank bank) : bank_(std::move(bank)) {}

  void set_freeze(const FreezeMask& mask) { freeze_ = mask; }

  TrainReport run(const TrainSchedule& schedule, const LightField& lf);
  TrainReport run(const TrainSchedule& schedule, const LightField& lf,
                  const std::vector<ViewIndex>& subset);

  model::KernelBank& bank() { return bank_; }
  const model::KernelBank& bank() const { return bank_; }

 private:
  model::KernelBank bank_;
  FreezeMask freeze_;
};

// init + fit in one call
std::pair<model::KernelBank, TrainReport> train(const model::NetworkConfig& config,
                                                const TrainSchedule& schedule,
                                                const LightField& lf);

}  // namespace lfkm::trainer
