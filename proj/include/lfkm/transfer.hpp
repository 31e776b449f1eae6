#pragma once

#include <string>
#include <vector>

#include "lfkm/lightfield_io.hpp"
#include "lfkm/model.hpp"
#include "lfkm/trainer.hpp"

namespace lfkm::transfer {

using trainer::ViewIndex;

// Deterministic retraining subsets on a U x V grid (U, V >= 5):
// S5 center + corners, S9 3x3 uniform grid, S13 S9 + the four points halfway
// between center and edge midpoints, S25 5x5 uniform grid. Returned u-major.
std::vector<ViewIndex> pattern(const std::string& name, int U, int V);

struct TransferReport {
  std::vector<double> view_psnr;       // u-major
  std::vector<std::uint8_t> involved;  // 1 when both the row and column appear in the subset
  double mean_involved = 0.0;
  double mean_uninvolved = 0.0;
  double mean = 0.0;
  int involved_count = 0;

  void write_csv(const std::string& path, int U, int V) const;
};

struct TransferResult {
  model::KernelBank bank;
  TransferReport report;
};

// Freezes every modulator kernel and bias at the pretrained bytes, retrains
// descriptors, bases, batch-norm affines and the decoder on the subset views
// of the target, then renders and scores the full grid.
TransferResult transfer(const model::KernelBank& pretrained,
                        const lightfield_io::LightField& target,
                        const std::vector<ViewIndex>& subset,
                        const trainer::TrainSchedule& schedule);

}  // namespace lfkm::transfer
