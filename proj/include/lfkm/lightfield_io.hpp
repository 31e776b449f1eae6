#pragma once

#include <string>
#include <vector>

#include "lfkm/tensor.hpp"

namespace lfkm::lightfield_io {

// U x V grid of sub-aperture views, each 3 x X x Y with values in [0,1].
struct LightField {
  int U = 0, V = 0, X = 0, Y = 0;
  std::vector<Tensor> views;  // u-major

  const Tensor& view(int u, int v) const;
  Tensor& view(int u, int v);
};

// Directory of view_{uu}_{vv}.png files, zero-based row-major indices.
LightField load_lightfield(const std::string& dir);
void save_lightfield(const LightField& lf, const std::string& dir);

// 10*log10(1/mse) for unit-range images, capped at 99 dB.
double psnr(const Tensor& a, const Tensor& b);

// Per-pixel mean absolute error over all views and channels, X x Y.
Tensor error_map(const LightField& decoded, const LightField& reference);
// Exports a map scaled x10 and clamped to [0,1] as 8-bit grayscale.
void save_error_map(const Tensor& map, const std::string& path);

// kind: "gradient" (view-independent smooth ramp) or "checkerboard-parallax"
// (smooth textured plane shifted disparity*(u-u_center) horizontally and
// disparity*(v-v_center) vertically per view).
LightField make_synthetic_lf(const std::string& kind, int X, int Y, int U, int V,
                             double disparity);

Tensor load_png(const std::string& path);            // 3 x H x W in [0,1]
void save_png(const Tensor& image, const std::string& path);  // writes via temp + rename

}  // namespace lfkm::lightfield_io
