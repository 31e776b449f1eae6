#include "lfkm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lfkm/error.hpp"
#include "lfkm/numerics.hpp"

namespace lfkm::trainer {

namespace {

using model::KernelBank;
using model::ParamRef;
using model::ParamRole;

bool role_is_modulator_u(ParamRole role) {
  return role == ParamRole::ModU || role == ParamRole::BiasU;
}

bool role_is_modulator_v(ParamRole role) {
  return role == ParamRole::ModV || role == ParamRole::BiasV;
}

bool role_is_modulator_uv(ParamRole role) {
  return role == ParamRole::ModUV || role == ParamRole::BiasUV;
}

bool trainable(ParamRole role, const FreezeMask& freeze) {
  if (role_is_modulator_u(role)) return !freeze.modulators_u;
  if (role_is_modulator_v(role)) return !freeze.modulators_v;
  if (role_is_modulator_uv(role)) return !freeze.modulators_u && !freeze.modulators_v;
  return true;
}

// Modulator slices only receive gradients from views that reference them;
// everything else is touched by every view.
bool touched_by_batch(const ParamRef& ref, const std::vector<char>& u_used,
                      const std::vector<char>& v_used, const std::vector<char>& uv_used, int V) {
  switch (ref.role) {
    case ParamRole::ModU:
    case ParamRole::BiasU:
      return u_used[static_cast<std::size_t>(ref.index)] != 0;
    case ParamRole::ModV:
    case ParamRole::BiasV:
      return v_used[static_cast<std::size_t>(ref.index)] != 0;
    case ParamRole::ModUV:
    case ParamRole::BiasUV:
      return uv_used[static_cast<std::size_t>(ref.index)] != 0;
    default:
      (void)V;
      return true;
  }
}

}  // namespace

void TrainSchedule::validate() const {
  if (epochs < 0) throw Error("schedule: epochs must be non-negative");
  if (uses_per_sai < 1) throw Error("schedule: uses_per_sai must be positive");
  if (quant_uses_per_sai < 0) throw Error("schedule: quant_uses_per_sai must be non-negative");
  if (batch < 1) throw Error("schedule: batch must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("schedule: lr must be positive and finite");
}

std::vector<ViewIndex> sample_batch(SplitMix64& rng, int U, int V, int count) {
  if (U < 1 || V < 1) throw Error("sample_batch: grid extents must be positive");
  if (count < 1) throw Error("sample_batch: count must be positive");
  std::vector<ViewIndex> out(static_cast<std::size_t>(count));
  for (auto& view : out) {
    view.u = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(U)));
    view.v = static_cast<int>(rng.next_below(static_cast<std::uint32_t>(V)));
  }
  return out;
}

void TrainReport::write_tsv(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out << "# iteration\tloss\n";
    for (std::size_t i = 0; i < loss.size(); ++i) {
      char line[64];
      std::snprintf(line, sizeof line, "%zu\t%.17g\n", i, loss[i]);
      out << line;
    }
    out << "# epoch\tmean_psnr\tseconds\n";
    for (std::size_t e = 0; e < epoch_psnr.size(); ++e) {
      const double secs = e < epoch_seconds.size() ? epoch_seconds[e] : 0.0;
      char line[96];
      std::snprintf(line, sizeof line, "%zu\t%.6f\t%.3f\n", e, epoch_psnr[e], secs);
      out << line;
    }
    if (!out) throw Error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

EvalResult evaluate(const model::KernelBank& bank, const LightField& lf) {
  const auto& cfg = bank.config;
  if (lf.U != cfg.U || lf.V != cfg.V || lf.X != cfg.X || lf.Y != cfg.Y)
    throw Error("evaluate: light field extents do not match the model configuration");

  const Tensor noise = model::make_noise(cfg);
  EvalResult result;
  result.view_psnr.resize(static_cast<std::size_t>(cfg.U) * static_cast<std::size_t>(cfg.V));
  for (int u = 0; u < cfg.U; ++u) {
    for (int v = 0; v < cfg.V; ++v) {
      const Tensor rendered = model::forward(bank, noise, u, v);
      result.view_psnr[static_cast<std::size_t>(u) * static_cast<std::size_t>(cfg.V) +
                       static_cast<std::size_t>(v)] =
          lightfield_io::psnr(rendered, lf.view(u, v));
    }
  }
  double sum = 0.0;
  for (double p : result.view_psnr) sum += p;
  result.mean = sum / static_cast<double>(result.view_psnr.size());
  double var = 0.0;
  for (double p : result.view_psnr) var += (p - result.mean) * (p - result.mean);
  result.variance = var / static_cast<double>(result.view_psnr.size());
  return result;
}

TrainReport Trainer::run(const TrainSchedule& schedule, const LightField& lf) {
  std::vector<ViewIndex> all;
  all.reserve(static_cast<std::size_t>(bank_.config.U) * static_cast<std::size_t>(bank_.config.V));
  for (int u = 0; u < bank_.config.U; ++u)
    for (int v = 0; v < bank_.config.V; ++v) all.push_back({u, v});
  return run(schedule, lf, all);
}

TrainReport Trainer::run(const TrainSchedule& schedule, const LightField& lf,
                         const std::vector<ViewIndex>& subset) {
  schedule.validate();
  const auto& cfg = bank_.config;
  if (lf.U != cfg.U || lf.V != cfg.V || lf.X != cfg.X || lf.Y != cfg.Y)
    throw Error("train: light field extents do not match the model configuration");
  if (subset.empty()) throw Error("train: view subset is empty");
  for (const auto& view : subset)
    if (view.u < 0 || view.u >= cfg.U || view.v < 0 || view.v >= cfg.V)
      throw Error("train: view subset index out of range");

  auto params = model::bank_params(bank_);
  for (auto& ref : params) {
    ref.tensor->requires_grad = trainable(ref.role, freeze_);
    ref.tensor->grad.clear();
  }

  std::vector<numerics::AdamState> states(params.size());
  numerics::AdamHyper hyper;
  hyper.lr = schedule.lr;

  const Tensor noise = model::make_noise(cfg);
  SplitMix64 rng(mix_seed(schedule.seed, 2));

  const bool full_grid =
      subset.size() == static_cast<std::size_t>(cfg.U) * static_cast<std::size_t>(cfg.V);
  const std::size_t per_epoch =
      (subset.size() * static_cast<std::size_t>(schedule.uses_per_sai) +
       static_cast<std::size_t>(schedule.batch) - 1) /
      static_cast<std::size_t>(schedule.batch);

  TrainReport report;
  report.loss.reserve(per_epoch * static_cast<std::size_t>(schedule.epochs));

  std::vector<char> u_used(static_cast<std::size_t>(cfg.U));
  std::vector<char> v_used(static_cast<std::size_t>(cfg.V));
  std::vector<char> uv_used(static_cast<std::size_t>(cfg.U) * static_cast<std::size_t>(cfg.V));

  const double inv_batch = 1.0 / static_cast<double>(schedule.batch);
  std::size_t iteration = 0;
  const auto t_start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    for (std::size_t it = 0; it < per_epoch; ++it, ++iteration) {
      std::vector<ViewIndex> batch;
      if (full_grid) {
        batch = sample_batch(rng, cfg.U, cfg.V, schedule.batch);
      } else {
        batch.resize(static_cast<std::size_t>(schedule.batch));
        for (auto& view : batch)
          view = subset[rng.next_below(static_cast<std::uint32_t>(subset.size()))];
      }

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
        Tensor rendered = model::forward(bank_, noise, view.u, view.v, trace);
        const Tensor& target = lf.view(view.u, view.v);
        loss += numerics::mse(rendered, target) * inv_batch;
        rendered.requires_grad = true;
        numerics::mse_backward(rendered, target, inv_batch);
        Tensor grad_out(rendered.shape(), std::move(rendered.grad));
        model::backward(bank_, noise, trace, grad_out);
      }
      if (!std::isfinite(loss))
        throw Error("train: non-finite loss at iteration " + std::to_string(iteration));
      report.loss.push_back(loss);

      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& ref = params[i];
        if (!ref.tensor->requires_grad) continue;
        if (!touched_by_batch(ref, u_used, v_used, uv_used, cfg.V)) continue;
        numerics::adam_step(*ref.tensor, states[i], hyper);
      }

      if (schedule.verbose && (iteration % 100 == 0)) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        std::fprintf(stderr, "iter %zu loss %.6g elapsed %.1fs\n", iteration, loss, secs);
      }
    }

    EvalResult eval = evaluate(bank_, lf);
    report.epoch_psnr.push_back(eval.mean);
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count());
    if (schedule.verbose)
      std::fprintf(stderr, "epoch %d mean psnr %.3f dB (%.1fs)\n", epoch, eval.mean,
                   report.epoch_seconds.back());
  }

  for (auto& ref : params) {
    ref.tensor->requires_grad = false;
    ref.tensor->grad.clear();
  }
  return report;
}

std::pair<model::KernelBank, TrainReport> train(const model::NetworkConfig& config,
                                                const TrainSchedule& schedule,
                                                const LightField& lf) {
  Trainer trainer(config);
  TrainReport report = trainer.run(schedule, lf);
  return {std::move(trainer.bank()), std::move(report)};
}

}  // namespace lfkm::trainer
