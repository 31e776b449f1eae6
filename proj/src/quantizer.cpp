#include "lfkm/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "lfkm/error.hpp"
#include "lfkm/numerics.hpp"
#include "lfkm/rng.hpp"

namespace lfkm::quantizer {

namespace {

using model::KernelBank;
using model::ParamRef;
using model::ParamRole;

bool role_in_layer_pool(ParamRole role) {
  switch (role) {
    case ParamRole::Desc:
    case ParamRole::ModU:
    case ParamRole::ModV:
    case ParamRole::ModUV:
    case ParamRole::BiasU:
    case ParamRole::BiasV:
    case ParamRole::BiasUV:
    case ParamRole::Gamma:
    case ParamRole::Beta:
      return true;
    default:
      return false;
  }
}

std::vector<Tensor*> layer_tensor_list(KernelBank& bank, int layer) {
  std::vector<Tensor*> out;
  for (auto& ref : model::bank_params(bank))
    if (ref.layer == layer && role_in_layer_pool(ref.role)) out.push_back(ref.tensor);
  return out;
}

double mean_view_mse(const KernelBank& bank, const lightfield_io::LightField& lf,
                     const Tensor& noise) {
  double sum = 0.0;
  for (int u = 0; u < lf.U; ++u)
    for (int v = 0; v < lf.V; ++v)
      sum += numerics::mse(model::forward(bank, noise, u, v), lf.view(u, v));
  return sum / static_cast<double>(lf.U * lf.V);
}

void write_snapped(KernelBank& bank, int layer, const std::vector<double>& centroids,
                   const std::vector<std::uint32_t>& assignments) {
  std::size_t off = 0;
  for (Tensor* t : layer_tensor_list(bank, layer)) {
    const std::int64_t n = t->size();
    for (std::int64_t i = 0; i < n; ++i)
      (*t)[i] = centroids[assignments[off + static_cast<std::size_t>(i)]];
    off += static_cast<std::size_t>(n);
  }
  if (off != assignments.size()) throw Error("quantize: layer value count mismatch");
}

}  // namespace

Codebook kmeans_fit(const std::vector<double>& values, int n, std::uint64_t seed) {
  if (values.empty()) throw Error("kmeans: empty input");
  if (n < 1) throw Error("kmeans: centroid count must be positive");
  for (double v : values)
    if (!std::isfinite(v)) throw Error("kmeans: non-finite input value");

  const std::size_t N = values.size();
  Codebook cb;
  cb.assignments.resize(N);

  std::vector<double> distinct(values);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  if (distinct.size() <= static_cast<std::size_t>(n)) {
    cb.centroids = distinct;
    cb.centroids.resize(static_cast<std::size_t>(n), distinct.back());
    for (std::size_t i = 0; i < N; ++i) {
      auto it = std::lower_bound(distinct.begin(), distinct.end(), values[i]);
      cb.assignments[i] = static_cast<std::uint32_t>(it - distinct.begin());
    }
    return cb;
  }

  SplitMix64 rng(seed);
  const std::size_t k = static_cast<std::size_t>(n);
  std::vector<double> centroids;
  centroids.reserve(k);
  centroids.push_back(values[rng.next_below(static_cast<std::uint32_t>(N))]);
  std::vector<double> dist2(N);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (double c : centroids) {
        const double d = values[i] - c;
        best = std::min(best, d * d);
      }
      dist2[i] = best;
      total += best;
    }
    double x = rng.next_double() * total;
    std::size_t pick = N - 1;
    for (std::size_t i = 0; i < N; ++i) {
      x -= dist2[i];
      if (x <= 0.0) {
        pick = i;
        break;
      }
    }
    centroids.push_back(values[pick]);
  }
  std::sort(centroids.begin(), centroids.end());

  std::vector<double> sums(k), prev(k);
  std::vector<std::size_t> counts(k);
  std::vector<double> mids(k - 1);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t j = 0; j + 1 < k; ++j) mids[j] = 0.5 * (centroids[j] + centroids[j + 1]);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), std::size_t{0});
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t j = static_cast<std::size_t>(
          std::upper_bound(mids.begin(), mids.end(), values[i]) - mids.begin());
      cb.assignments[i] = static_cast<std::uint32_t>(j);
      sums[j] += values[i];
      counts[j] += 1;
    }
    prev = centroids;
    for (std::size_t j = 0; j < k; ++j)
      if (counts[j] > 0) centroids[j] = sums[j] / static_cast<double>(counts[j]);
    // empty clusters move to the point farthest from its current centroid
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) continue;
      double worst = -1.0;
      std::size_t pick = 0;
      for (std::size_t i = 0; i < N; ++i) {
        const double d = std::abs(values[i] - centroids[cb.assignments[i]]);
        if (d > worst) {
          worst = d;
          pick = i;
        }
      }
      centroids[j] = values[pick];
    }
    std::sort(centroids.begin(), centroids.end());
    double movement = 0.0;
    for (std::size_t j = 0; j < k; ++j) movement = std::max(movement, std::abs(centroids[j] - prev[j]));
    if (movement < 1e-8) break;
  }

  for (std::size_t j = 0; j + 1 < k; ++j) mids[j] = 0.5 * (centroids[j] + centroids[j + 1]);
  for (std::size_t i = 0; i < N; ++i)
    cb.assignments[i] = static_cast<std::uint32_t>(
        std::upper_bound(mids.begin(), mids.end(), values[i]) - mids.begin());
  cb.centroids = std::move(centroids);
  return cb;
}

Affine16 affine16_encode(const std::vector<double>& values) {
  if (values.empty()) throw Error("affine16: empty input");
  double lo = values[0], hi = values[0];
  for (double v : values) {
    if (!std::isfinite(v)) throw Error("affine16: non-finite input value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Affine16 q;
  q.lo = static_cast<float>(lo);
  q.hi = static_cast<float>(hi);
  q.codes.resize(values.size());
  const double dlo = static_cast<double>(q.lo);
  const double span = static_cast<double>(q.hi) - dlo;
  if (span <= 0.0) {
    std::fill(q.codes.begin(), q.codes.end(), std::uint16_t{0});
    return q;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double t = (values[i] - dlo) / span * 65535.0;
    const long code = std::lround(std::min(std::max(t, 0.0), 65535.0));
    q.codes[i] = static_cast<std::uint16_t>(code);
  }
  return q;
}

std::vector<double> affine16_decode(const Affine16& q) {
  if (!std::isfinite(q.lo) || !std::isfinite(q.hi)) throw Error("affine16: non-finite range");
  std::vector<double> out(q.codes.size());
  const double dlo = static_cast<double>(q.lo);
  const double span = static_cast<double>(q.hi) - dlo;
  for (std::size_t i = 0; i < q.codes.size(); ++i)
    out[i] = dlo + span * (static_cast<double>(q.codes[i]) / 65535.0);
  return out;
}

std::vector<double> layer_values(const model::KernelBank& bank, int layer) {
  auto& mutable_bank = const_cast<model::KernelBank&>(bank);  // read-only traversal
  std::vector<double> out;
  for (Tensor* t : layer_tensor_list(mutable_bank, layer))
    out.insert(out.end(), t->data(), t->data() + t->size());
  return out;
}

void set_layer_values(model::KernelBank& bank, int layer, const std::vector<double>& values) {
  std::size_t off = 0;
  for (Tensor* t : layer_tensor_list(bank, layer)) {
    const std::size_t n = static_cast<std::size_t>(t->size());
    if (off + n > values.size()) throw Error("set_layer_values: value count mismatch");
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(off),
              values.begin() + static_cast<std::ptrdiff_t>(off + n), t->data());
    off += n;
  }
  if (off != values.size()) throw Error("set_layer_values: value count mismatch");
}

std::size_t layer_value_count(const model::NetworkConfig& config) {
  const std::size_t c = static_cast<std::size_t>(config.channels());
  const std::size_t slice =
      (config.decompose_kernels ? static_cast<std::size_t>(config.r) : std::size_t{9}) * c;
  const std::size_t U = static_cast<std::size_t>(config.U), V = static_cast<std::size_t>(config.V);
  std::size_t count = slice * static_cast<std::size_t>(config.c_d);  // descriptors
  if (config.allocate_modulators) {
    count += (U + V) * slice * static_cast<std::size_t>(config.c_m / 2);
    count += (U + V) * c;
  } else {
    count += U * V * slice * static_cast<std::size_t>(config.c_m);
    count += U * V * c;
  }
  count += 2 * c;  // gamma, beta
  return count;
}

QuantizeResult quantize_model(model::KernelBank bank, const lightfield_io::LightField& lf,
                              const trainer::TrainSchedule& schedule) {
  schedule.validate();
  const auto& cfg = bank.config;
  if (lf.U != cfg.U || lf.V != cfg.V || lf.X != cfg.X || lf.Y != cfg.Y)
    throw Error("quantize: light field extents do not match the model configuration");

  const Tensor noise = model::make_noise(cfg);
  auto params = model::bank_params(bank);
  std::vector<numerics::AdamState> states(params.size());
  numerics::AdamHyper hyper;
  hyper.lr = schedule.lr;
  SplitMix64 rng(mix_seed(schedule.seed, 3));

  const std::size_t per_epoch =
      (static_cast<std::size_t>(cfg.U) * static_cast<std::size_t>(cfg.V) *
           static_cast<std::size_t>(schedule.quant_uses_per_sai) +
       static_cast<std::size_t>(schedule.batch) - 1) /
      static_cast<std::size_t>(schedule.batch);
  const double inv_batch = 1.0 / static_cast<double>(schedule.batch);

  QuantizeResult result;
  result.qm.config = cfg;
  result.qm.raw = false;

  std::vector<char> u_used(static_cast<std::size_t>(cfg.U));
  std::vector<char> v_used(static_cast<std::size_t>(cfg.V));
  std::vector<char> uv_used(static_cast<std::size_t>(cfg.U) * static_cast<std::size_t>(cfg.V));

  for (int q = 0; q < model::kLayers; ++q) {
    std::vector<double> pool = layer_values(bank, q);
    Codebook cb = kmeans_fit(pool, cfg.n, mix_seed(schedule.seed, 0x10 + static_cast<std::uint64_t>(q)));
    write_snapped(bank, q, cb.centroids, cb.assignments);
    result.layer_mse_before[static_cast<std::size_t>(q)] = mean_view_mse(bank, lf, noise);

    // bases stay frozen for the whole phase; finished layers stay frozen;
    // the active layer only moves through its centroids
    for (auto& ref : params) {
      bool train = true;
      if (ref.role == ParamRole::Bases) train = false;
      if (ref.layer >= 0 && ref.layer <= q) train = ref.layer == q;
      ref.tensor->requires_grad = train;
      ref.tensor->grad.clear();
    }

    Tensor centroids(std::vector<int>{cfg.n}, cb.centroids);
    numerics::AdamState centroid_state;

    for (std::size_t it = 0; it < per_epoch; ++it) {
      auto batch = trainer::sample_batch(rng, cfg.U, cfg.V, schedule.batch);
      std::fill(u_used.begin(), u_used.end(), char(0));
      std::fill(v_used.begin(), v_used.end(), char(0));
      std::fill(uv_used.begin(), uv_used.end(), char(0));
      for (const auto& view : batch) {
        u_used[static_cast<std::size_t>(view.u)] = 1;
        v_used[static_cast<std::size_t>(view.v)] = 1;
        uv_used[static_cast<std::size_t>(view.u) * static_cast<std::size_t>(cfg.V) +
                static_cast<std::size_t>(view.v)] = 1;
      }

      for (auto& ref : params)
        if (ref.tensor->requires_grad) ref.tensor->zero_grad();

      double loss = 0.0;
      for (const auto& view : batch) {
        model::ForwardTrace trace;
        Tensor rendered = model::forward(bank, noise, view.u, view.v, trace);
        const Tensor& target = lf.view(view.u, view.v);
        loss += numerics::mse(rendered, target) * inv_batch;
        rendered.requires_grad = true;
        numerics::mse_backward(rendered, target, inv_batch);
        Tensor grad_out(rendered.shape(), std::move(rendered.grad));
        model::backward(bank, noise, trace, grad_out);
      }
      if (!std::isfinite(loss))
        throw Error("quantize: non-finite loss while fine-tuning layer " + std::to_string(q + 1));

      // straight-through: centroid gradient is the sum over member elements
      centroids.requires_grad = true;
      centroids.ensure_grad();
      std::fill(centroids.grad.begin(), centroids.grad.end(), 0.0);
      std::size_t off = 0;
      for (Tensor* t : layer_tensor_list(bank, q)) {
        if (!t->grad.empty()) {
          const std::int64_t n = t->size();
          for (std::int64_t i = 0; i < n; ++i)
            centroids.grad[cb.assignments[off + static_cast<std::size_t>(i)]] += t->grad[static_cast<std::size_t>(i)];
        }
        off += static_cast<std::size_t>(t->size());
      }
      numerics::adam_step(centroids, centroid_state, hyper);
      write_snapped(bank, q, std::vector<double>(centroids.data(), centroids.data() + centroids.size()),
                    cb.assignments);

      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& ref = params[i];
        if (!ref.tensor->requires_grad) continue;
        if (ref.layer == q) continue;  // centroid-tied
        switch (ref.role) {
          case ParamRole::ModU:
          case ParamRole::BiasU:
            if (!u_used[static_cast<std::size_t>(ref.index)]) continue;
            break;
          case ParamRole::ModV:
          case ParamRole::BiasV:
            if (!v_used[static_cast<std::size_t>(ref.index)]) continue;
            break;
          case ParamRole::ModUV:
          case ParamRole::BiasUV:
            if (!uv_used[static_cast<std::size_t>(ref.index)]) continue;
            break;
          default:
            break;
        }
        numerics::adam_step(*ref.tensor, states[i], hyper);
      }

      if (schedule.verbose && (it % 100 == 0))
        std::fprintf(stderr, "quant layer %d iter %zu loss %.6g\n", q + 1, it, loss);
    }

    result.layer_mse_after[static_cast<std::size_t>(q)] = mean_view_mse(bank, lf, noise);

    // freeze through the exact 32-bit values a decoder will see
    QuantizedLayer ql;
    ql.centroids.resize(static_cast<std::size_t>(cfg.n));
    std::vector<double> pinned(static_cast<std::size_t>(cfg.n));
    for (int j = 0; j < cfg.n; ++j) {
      ql.centroids[static_cast<std::size_t>(j)] = static_cast<float>(centroids[j]);
      pinned[static_cast<std::size_t>(j)] =
          static_cast<double>(ql.centroids[static_cast<std::size_t>(j)]);
    }
    ql.indices = cb.assignments;
    write_snapped(bank, q, pinned, cb.assignments);
    result.qm.layers[static_cast<std::size_t>(q)] = std::move(ql);
  }

  for (auto& ref : params) {
    ref.tensor->requires_grad = false;
    ref.tensor->grad.clear();
  }

  if (cfg.decompose_kernels) {
    std::vector<double> base_values(bank.bases.data(), bank.bases.data() + bank.bases.size());
    result.qm.bases = affine16_encode(base_values);
    const std::vector<double> decoded = affine16_decode(result.qm.bases);
    std::copy(decoded.begin(), decoded.end(), bank.bases.data());
  }
  {
    std::vector<double> dec(bank.decoder_kernel.data(),
                            bank.decoder_kernel.data() + bank.decoder_kernel.size());
    dec.insert(dec.end(), bank.decoder_bias.data(),
               bank.decoder_bias.data() + bank.decoder_bias.size());
    result.qm.decoder = affine16_encode(dec);
    const std::vector<double> decoded = affine16_decode(result.qm.decoder);
    std::copy(decoded.begin(), decoded.end() - 3, bank.decoder_kernel.data());
    std::copy(decoded.end() - 3, decoded.end(), bank.decoder_bias.data());
  }

  result.bank = std::move(bank);
  return result;
}

QuantizedModel raw_model(const model::KernelBank& bank) {
  auto& mutable_bank = const_cast<model::KernelBank&>(bank);  // read-only traversal
  QuantizedModel qm;
  qm.config = bank.config;
  qm.raw = true;
  for (const auto& ref : model::bank_params(mutable_bank)) {
    const Tensor& t = *ref.tensor;
    for (std::int64_t i = 0; i < t.size(); ++i)
      qm.raw_values.push_back(static_cast<float>(t[i]));
  }
  return qm;
}

model::KernelBank bank_from_model(const QuantizedModel& qm) {
  qm.config.validate();
  model::KernelBank bank = model::init_bank(qm.config);
  if (qm.raw) {
    std::size_t off = 0;
    auto params = model::bank_params(bank);
    for (auto& ref : params) {
      Tensor& t = *ref.tensor;
      if (off + static_cast<std::size_t>(t.size()) > qm.raw_values.size())
        throw Error("model payload is shorter than the configuration requires");
      for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<double>(qm.raw_values[off + static_cast<std::size_t>(i)]);
      off += static_cast<std::size_t>(t.size());
    }
    if (off != qm.raw_values.size())
      throw Error("model payload is longer than the configuration requires");
    return bank;
  }

  const std::size_t per_layer = layer_value_count(qm.config);
  for (int q = 0; q < model::kLayers; ++q) {
    const QuantizedLayer& ql = qm.layers[static_cast<std::size_t>(q)];
    if (ql.centroids.size() != static_cast<std::size_t>(qm.config.n))
      throw Error("layer codebook size does not match the configuration");
    if (ql.indices.size() != per_layer)
      throw Error("layer index count does not match the configuration");
    std::vector<double> values(per_layer);
    for (std::size_t i = 0; i < per_layer; ++i) {
      if (ql.indices[i] >= ql.centroids.size()) throw Error("layer index out of codebook range");
      values[i] = static_cast<double>(ql.centroids[ql.indices[i]]);
    }
    set_layer_values(bank, q, values);
  }
  if (qm.config.decompose_kernels) {
    if (qm.bases.codes.size() != static_cast<std::size_t>(bank.bases.size()))
      throw Error("basis payload size does not match the configuration");
    const std::vector<double> decoded = affine16_decode(qm.bases);
    std::copy(decoded.begin(), decoded.end(), bank.bases.data());
  }
  const std::size_t dk = static_cast<std::size_t>(bank.decoder_kernel.size());
  if (qm.decoder.codes.size() != dk + 3)
    throw Error("decoder payload size does not match the configuration");
  const std::vector<double> decoded = affine16_decode(qm.decoder);
  std::copy(decoded.begin(), decoded.begin() + static_cast<std::ptrdiff_t>(dk),
            bank.decoder_kernel.data());
  std::copy(decoded.begin() + static_cast<std::ptrdiff_t>(dk), decoded.end(),
            bank.decoder_bias.data());
  return bank;
}

}  // namespace lfkm::quantizer
