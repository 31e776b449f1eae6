#include "lfkm/fb_basis.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace lfkm::fb_basis {

namespace {

double bessel_j(int m, double x) { return std::cyl_bessel_j(static_cast<double>(m), x); }

struct Mode {
  double lambda;
  int m;
  int q;
};

// roots of J_m found by scanning for sign changes, then bisecting
std::vector<double> bessel_roots(int m, int count) {
  std::vector<double> roots;
  const double step = 0.05;
  double x_prev = step;
  double f_prev = bessel_j(m, x_prev);
  while (static_cast<int>(roots.size()) < count) {
    const double x = x_prev + step;
    const double f = bessel_j(m, x);
    if ((f_prev < 0.0) != (f < 0.0) || f == 0.0) {
      double lo = x_prev, hi = x;
      double flo = f_prev;
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = bessel_j(m, mid);
        if ((flo < 0.0) != (fm < 0.0)) {
          hi = mid;
        } else {
          lo = mid;
          flo = fm;
        }
        if (hi - lo < 1e-13) break;
      }
      roots.push_back(0.5 * (lo + hi));
    }
    x_prev = x;
    f_prev = f;
    if (x_prev > 1e4) throw Error("bessel_j_root: scan failed to converge");
  }
  return roots;
}

}  // namespace

double bessel_j_root(int m, int q) {
  if (m < 0 || q < 1) throw Error("bessel_j_root: need m >= 0, q >= 1");
  return bessel_roots(m, q)[static_cast<std::size_t>(q - 1)];
}

Tensor generate_fb_bases(int k, int r) {
  if (k < 1 || k % 2 == 0) throw Error("generate_fb_bases: k must be odd and >= 1");
  if (r < 1 || r > k * k)
    throw Error("generate_fb_bases: r must be in [1, k^2], got " + std::to_string(r));

  // enough (m, q) candidates to cover r slices even after skips
  const int max_m = 2 * r + 6, max_q = r + 3;
  std::vector<Mode> modes;
  for (int m = 0; m <= max_m; ++m) {
    const auto roots = bessel_roots(m, max_q);
    for (int q = 1; q <= max_q; ++q)
      modes.push_back({roots[static_cast<std::size_t>(q - 1)], m, q});
  }
  std::sort(modes.begin(), modes.end(), [](const Mode& a, const Mode& b) {
    if (a.lambda != b.lambda) return a.lambda < b.lambda;
    return a.m < b.m;
  });

  const int cells = k * k;
  std::vector<double> rho(static_cast<std::size_t>(cells)), theta(static_cast<std::size_t>(cells));
  const double disk = 0.5 * (k + 1);
  for (int a = 0; a < k; ++a) {
    for (int b = 0; b < k; ++b) {
      const double x = (a - 0.5 * (k - 1)) / disk;
      const double y = (b - 0.5 * (k - 1)) / disk;
      rho[static_cast<std::size_t>(a * k + b)] = std::min(1.0, std::hypot(x, y));
      theta[static_cast<std::size_t>(a * k + b)] = std::atan2(y, x);
    }
  }

  std::vector<std::vector<double>> picked;         // unit-norm slices
  std::vector<std::vector<double>> orthogonalized; // Gram-Schmidt copies for the rank guard
  std::vector<double> slice(static_cast<std::size_t>(cells));
  for (const Mode& mode : modes) {
    const int variants = mode.m == 0 ? 1 : 2;
    for (int variant = 0; variant < variants; ++variant) {
      for (int i = 0; i < cells; ++i) {
        const double radial = bessel_j(mode.m, mode.lambda * rho[static_cast<std::size_t>(i)]);
        const double ang = variant == 0 ? std::cos(mode.m * theta[static_cast<std::size_t>(i)])
                                        : std::sin(mode.m * theta[static_cast<std::size_t>(i)]);
        slice[static_cast<std::size_t>(i)] = radial * ang;
      }
      double norm = 0.0;
      for (double v : slice) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-9) continue;  // mode vanishes on this grid

      std::vector<double> unit(slice);
      for (auto& v : unit) v /= norm;
      std::vector<double> resid(unit);
      for (const auto& b : orthogonalized) {
        double dot = 0.0;
        for (int i = 0; i < cells; ++i) dot += resid[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
        for (int i = 0; i < cells; ++i) resid[static_cast<std::size_t>(i)] -= dot * b[static_cast<std::size_t>(i)];
      }
      double rnorm = 0.0;
      for (double v : resid) rnorm += v * v;
      rnorm = std::sqrt(rnorm);
      if (rnorm < 1e-7) continue;  // dependent on this grid

      for (auto& v : resid) v /= rnorm;
      orthogonalized.push_back(std::move(resid));
      picked.push_back(std::move(unit));
      if (static_cast<int>(picked.size()) == r) {
        Tensor out({k, k, r});
        for (int i = 0; i < cells; ++i)
          for (int j = 0; j < r; ++j)
            out[static_cast<std::int64_t>(i) * r + j] =
                picked[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
        return out;
      }
    }
  }
  throw Error("generate_fb_bases: mode family exhausted before reaching rank r");
}

Tensor compose_kernel(const Tensor& bases, const Tensor& coeffs) {
  if (bases.ndim() != 3 || bases.extent(0) != bases.extent(1))
    throw Error("compose_kernel: bases must be k x k x r");
  if (coeffs.ndim() != 3) throw Error("compose_kernel: coeffs must be r x C_in x C_out");
  const int k = bases.extent(0), r = bases.extent(2);
  if (coeffs.extent(0) != r)
    throw Error("compose_kernel: coeff rank " + std::to_string(coeffs.extent(0)) +
                " does not match basis rank " + std::to_string(r));
  const int cin = coeffs.extent(1), cout = coeffs.extent(2);

  Tensor out({k, k, cin, cout});
  const std::int64_t plane = static_cast<std::int64_t>(cin) * cout;
  for (int ab = 0; ab < k * k; ++ab) {
    double* op = out.data() + ab * plane;
    for (int rho = 0; rho < r; ++rho) {
      const double b = bases[static_cast<std::int64_t>(ab) * r + rho];
      const double* cp = coeffs.data() + static_cast<std::int64_t>(rho) * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[i] += b * cp[i];
    }
  }
  return out;
}

void compose_kernel_backward(Tensor& bases, Tensor& coeffs, const Tensor& grad_kernel) {
  const int k = bases.extent(0), r = bases.extent(2);
  const int cin = coeffs.extent(1), cout = coeffs.extent(2);
  if (grad_kernel.ndim() != 4 || grad_kernel.extent(0) != k || grad_kernel.extent(1) != k ||
      grad_kernel.extent(2) != cin || grad_kernel.extent(3) != cout)
    throw Error("compose_kernel_backward: grad_kernel shape mismatch");
  const std::int64_t plane = static_cast<std::int64_t>(cin) * cout;

  if (coeffs.requires_grad) {
    coeffs.ensure_grad();
    for (int ab = 0; ab < k * k; ++ab) {
      const double* gp = grad_kernel.data() + ab * plane;
      for (int rho = 0; rho < r; ++rho) {
        const double b = bases[static_cast<std::int64_t>(ab) * r + rho];
        double* cg = coeffs.grad.data() + static_cast<std::int64_t>(rho) * plane;
        for (std::int64_t i = 0; i < plane; ++i) cg[i] += b * gp[i];
      }
    }
  }
  if (bases.requires_grad) {
    bases.ensure_grad();
    for (int ab = 0; ab < k * k; ++ab) {
      const double* gp = grad_kernel.data() + ab * plane;
      for (int rho = 0; rho < r; ++rho) {
        const double* cp = coeffs.data() + static_cast<std::int64_t>(rho) * plane;
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += cp[i] * gp[i];
        bases.grad[static_cast<std::size_t>(ab) * r + rho] += acc;
      }
    }
  }
}

}  // namespace lfkm::fb_basis
