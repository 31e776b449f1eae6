#include "lfkm/lightfield_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <utility>

#include "lfkm/numerics.hpp"

namespace lfkm::lightfield_io {

namespace fs = std::filesystem;

const Tensor& LightField::view(int u, int v) const {
  if (u < 0 || u >= U || v < 0 || v >= V) throw Error("light field view index out of range");
  return views[static_cast<std::size_t>(u) * V + v];
}

Tensor& LightField::view(int u, int v) {
  if (u < 0 || u >= U || v < 0 || v >= V) throw Error("light field view index out of range");
  return views[static_cast<std::size_t>(u) * V + v];
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string view_name(int u, int v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "view_%02d_%02d.png", u, v);
  return buf;
}

}  // namespace

Tensor load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("failed to decode png " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  // normalize everything to 8-bit RGB
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_expand(png);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int H = static_cast<int>(png_get_image_height(png, info));
  const int W = static_cast<int>(png_get_image_width(png, info));
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(W) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("unexpected png layout in " + path);
  }

  std::vector<png_byte> raw(static_cast<std::size_t>(H) * W * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(H));
  for (int y = 0; y < H; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + static_cast<std::size_t>(y) * W * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int ch = 0; ch < 3; ++ch)
        out.at(ch, y, x) = raw[(static_cast<std::size_t>(y) * W + x) * 3 + ch] / 255.0;
  return out;
}

namespace {

void write_png_bytes(const std::vector<png_byte>& raw, int H, int W, int channels,
                     const std::string& path) {
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    FilePtr fp(std::fopen(tmp.string().c_str(), "wb"));
    if (!fp) throw Error("cannot write " + tmp.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
      png_destroy_write_struct(&png, nullptr);
      throw Error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw Error("failed to encode png " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(H));
    for (int y = 0; y < H; ++y)
      rows[static_cast<std::size_t>(y)] =
          const_cast<png_bytep>(raw.data() + static_cast<std::size_t>(y) * W * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  fs::rename(tmp, target);
}

png_byte quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<png_byte>(std::lround(c * 255.0));
}

}  // namespace

void save_png(const Tensor& image, const std::string& path) {
  if (image.ndim() != 3 || image.extent(0) != 3) throw Error("save_png: image must be 3 x H x W");
  const int H = image.extent(1), W = image.extent(2);
  std::vector<png_byte> raw(static_cast<std::size_t>(H) * W * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int ch = 0; ch < 3; ++ch)
        raw[(static_cast<std::size_t>(y) * W + x) * 3 + ch] = quantize8(image.at(ch, y, x));
  write_png_bytes(raw, H, W, 3, path);
}

LightField load_lightfield(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir);
  int max_u = -1, max_v = -1;
  std::map<std::pair<int, int>, fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    int u, v;
    char tail;
    const std::string name = entry.path().filename().string();
    if (std::sscanf(name.c_str(), "view_%d_%d.pn%c", &u, &v, &tail) == 3 && tail == 'g' &&
        name == view_name(u, v)) {
      found[{u, v}] = entry.path();
      max_u = std::max(max_u, u);
      max_v = std::max(max_v, v);
    }
  }
  if (found.empty()) throw Error("no view_UU_VV.png files in " + dir);

  LightField lf;
  lf.U = max_u + 1;
  lf.V = max_v + 1;
  for (int u = 0; u < lf.U; ++u)
    for (int v = 0; v < lf.V; ++v) {
      const auto it = found.find({u, v});
      if (it == found.end())
        throw Error("missing view (" + std::to_string(u) + "," + std::to_string(v) + ") in " + dir);
      Tensor img = load_png(it->second.string());
      if (lf.views.empty()) {
        lf.X = img.extent(1);
        lf.Y = img.extent(2);
      } else if (img.extent(1) != lf.X || img.extent(2) != lf.Y) {
        throw Error("view (" + std::to_string(u) + "," + std::to_string(v) +
                    ") has mismatched size");
      }
      lf.views.push_back(std::move(img));
    }
  return lf;
}

void save_lightfield(const LightField& lf, const std::string& dir) {
  fs::create_directories(dir);
  for (int u = 0; u < lf.U; ++u)
    for (int v = 0; v < lf.V; ++v)
      save_png(lf.view(u, v), (fs::path(dir) / view_name(u, v)).string());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = numerics::mse(a, b);
  if (m <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

Tensor error_map(const LightField& decoded, const LightField& reference) {
  if (decoded.U != reference.U || decoded.V != reference.V || decoded.X != reference.X ||
      decoded.Y != reference.Y)
    throw Error("error_map: light field geometry mismatch");
  Tensor map({decoded.X, decoded.Y});
  const double norm = 1.0 / (3.0 * decoded.U * decoded.V);
  for (std::size_t i = 0; i < decoded.views.size(); ++i) {
    const Tensor& d = decoded.views[i];
    const Tensor& r = reference.views[i];
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < decoded.X; ++y)
        for (int x = 0; x < decoded.Y; ++x)
          map.at(y, x) += norm * std::abs(d.at(ch, y, x) - r.at(ch, y, x));
  }
  return map;
}

void save_error_map(const Tensor& map, const std::string& path) {
  if (map.ndim() != 2) throw Error("save_error_map: map must be X x Y");
  const int H = map.extent(0), W = map.extent(1);
  std::vector<png_byte> raw(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      raw[static_cast<std::size_t>(y) * W + x] = quantize8(map.at(y, x) * 10.0);
  write_png_bytes(raw, H, W, 1, path);
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// smooth checker texture; every channel is a pure function of the shifted
// plane coordinates so per-view parallax is an exact translation
void checker_rgb(double xs, double ys, double period, double* rgb) {
  const double sharp = 2.5;
  const double a = std::sin(2.0 * kPi * xs / period);
  const double b = std::sin(2.0 * kPi * ys / period);
  const double a2 = std::sin(2.0 * kPi * xs / period + 1.3);
  const double b2 = std::sin(2.0 * kPi * ys / period + 0.7);
  const double t = std::tanh(sharp);
  rgb[0] = 0.5 + 0.30 * std::tanh(sharp * a * b) / t;
  rgb[1] = 0.5 + 0.30 * std::tanh(sharp * a2 * b2) / t;
  rgb[2] = 0.5 + 0.25 * std::sin(2.0 * kPi * (xs + ys) / (1.7 * period));
}

}  // namespace

LightField make_synthetic_lf(const std::string& kind, int X, int Y, int U, int V,
                             double disparity) {
  if (X < 1 || Y < 1 || U < 1 || V < 1) throw Error("make_synthetic_lf: extents must be positive");
  LightField lf;
  lf.U = U;
  lf.V = V;
  lf.X = X;
  lf.Y = Y;

  if (kind == "gradient") {
    Tensor img({3, X, Y});
    const double dx = X > 1 ? 1.0 / (X - 1) : 0.0;
    const double dy = Y > 1 ? 1.0 / (Y - 1) : 0.0;
    for (int y = 0; y < X; ++y)
      for (int x = 0; x < Y; ++x) {
        img.at(0, y, x) = 0.15 + 0.7 * y * dx;
        img.at(1, y, x) = 0.15 + 0.7 * x * dy;
        img.at(2, y, x) = 0.15 + 0.35 * (y * dx + x * dy);
      }
    lf.views.assign(static_cast<std::size_t>(U) * V, img);
    return lf;
  }

  if (kind == "checkerboard-parallax") {
    const double uc = 0.5 * (U - 1), vc = 0.5 * (V - 1);
    const double period = 16.0;
    for (int u = 0; u < U; ++u)
      for (int v = 0; v < V; ++v) {
        Tensor img({3, X, Y});
        const double row_shift = disparity * (v - vc);  // vertical from v
        const double col_shift = disparity * (u - uc);  // horizontal from u
        for (int y = 0; y < X; ++y)
          for (int x = 0; x < Y; ++x) {
            double rgb[3];
            checker_rgb(y + row_shift, x + col_shift, period, rgb);
            img.at(0, y, x) = rgb[0];
            img.at(1, y, x) = rgb[1];
            img.at(2, y, x) = rgb[2];
          }
        lf.views.push_back(std::move(img));
      }
    return lf;
  }

  throw Error("make_synthetic_lf: unknown kind '" + kind +
              "' (expected gradient or checkerboard-parallax)");
}

}  // namespace lfkm::lightfield_io
