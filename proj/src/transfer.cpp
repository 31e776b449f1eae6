#include "lfkm/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "lfkm/error.hpp"

namespace lfkm::transfer {

namespace {

int round_half_even(double x) {
  const double r = std::nearbyint(x);  // default rounding mode is to-nearest-even
  return static_cast<int>(r);
}

std::vector<ViewIndex> finish(std::set<std::pair<int, int>> points) {
  std::vector<ViewIndex> out;
  out.reserve(points.size());
  for (const auto& [u, v] : points) out.push_back({u, v});
  return out;
}

// snapshot of every modulator byte, used to verify the freeze contract
std::vector<double> modulator_values(const model::KernelBank& bank) {
  auto& mutable_bank = const_cast<model::KernelBank&>(bank);  // read-only traversal
  std::vector<double> out;
  for (const auto& ref : model::bank_params(mutable_bank)) {
    switch (ref.role) {
      case model::ParamRole::ModU:
      case model::ParamRole::ModV:
      case model::ParamRole::ModUV:
      case model::ParamRole::BiasU:
      case model::ParamRole::BiasV:
      case model::ParamRole::BiasUV:
        out.insert(out.end(), ref.tensor->data(), ref.tensor->data() + ref.tensor->size());
        break;
      default:
        break;
    }
  }
  return out;
}

}  // namespace

std::vector<ViewIndex> pattern(const std::string& name, int U, int V) {
  if (U < 5 || V < 5) throw Error("pattern: grid too small (needs U, V >= 5)");
  const int uc = (U - 1) / 2, vc = (V - 1) / 2;

  std::set<std::pair<int, int>> pts;
  if (name == "S5") {
    pts = {{uc, vc}, {0, 0}, {0, V - 1}, {U - 1, 0}, {U - 1, V - 1}};
  } else if (name == "S9" || name == "S13") {
    for (int u : {0, uc, U - 1})
      for (int v : {0, vc, V - 1}) pts.insert({u, v});
    if (name == "S13") {
      pts.insert({round_half_even(uc / 2.0), vc});
      pts.insert({round_half_even((uc + U - 1) / 2.0), vc});
      pts.insert({uc, round_half_even(vc / 2.0)});
      pts.insert({uc, round_half_even((vc + V - 1) / 2.0)});
    }
  } else if (name == "S25") {
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j)
        pts.insert({round_half_even(i * (U - 1) / 4.0), round_half_even(j * (V - 1) / 4.0)});
  } else {
    throw Error("pattern: unknown subset name " + name);
  }

  const std::size_t expected = name == "S5" ? 5 : name == "S9" ? 9 : name == "S13" ? 13 : 25;
  if (pts.size() != expected) throw Error("pattern: degenerate grid for " + name);
  return finish(std::move(pts));
}

void TransferReport::write_csv(const std::string& path, int U, int V) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out << "u,v,psnr,involved\n";
    for (int u = 0; u < U; ++u)
      for (int v = 0; v < V; ++v) {
        const std::size_t i =
            static_cast<std::size_t>(u) * static_cast<std::size_t>(V) + static_cast<std::size_t>(v);
        char line[96];
        std::snprintf(line, sizeof line, "%d,%d,%.6f,%d\n", u, v, view_psnr[i], int(involved[i]));
        out << line;
      }
    char tail[160];
    std::snprintf(tail, sizeof tail, "# mean,%.6f\n# mean_involved,%.6f\n# mean_uninvolved,%.6f\n",
                  mean, mean_involved, mean_uninvolved);
    out << tail;
    if (!out) throw Error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TransferResult transfer(const model::KernelBank& pretrained,
                        const lightfield_io::LightField& target,
                        const std::vector<ViewIndex>& subset,
                        const trainer::TrainSchedule& schedule) {
  const auto& cfg = pretrained.config;
  if (target.U != cfg.U || target.V != cfg.V || target.X != cfg.X || target.Y != cfg.Y)
    throw Error("transfer: target light field extents do not match the pretrained model");
  if (subset.empty()) throw Error("transfer: empty subset");

  const std::vector<double> frozen = modulator_values(pretrained);

  trainer::Trainer tr(pretrained);
  tr.set_freeze({true, true});
  tr.run(schedule, target, subset);

  const std::vector<double> after = modulator_values(tr.bank());
  if (after.size() != frozen.size() ||
      std::memcmp(after.data(), frozen.data(), frozen.size() * sizeof(double)) != 0)
    throw Error("transfer: modulators drifted during retraining");

  trainer::EvalResult eval = trainer::evaluate(tr.bank(), target);

  std::vector<char> row(static_cast<std::size_t>(cfg.U), 0), col(static_cast<std::size_t>(cfg.V), 0);
  for (const auto& view : subset) {
    if (view.u < 0 || view.u >= cfg.U || view.v < 0 || view.v >= cfg.V)
      throw Error("transfer: subset view out of range");
    row[static_cast<std::size_t>(view.u)] = 1;
    col[static_cast<std::size_t>(view.v)] = 1;
  }

  TransferResult result;
  result.report.view_psnr = std::move(eval.view_psnr);
  result.report.mean = eval.mean;
  result.report.involved.resize(result.report.view_psnr.size());
  double sum_in = 0.0, sum_out = 0.0;
  int n_in = 0;
  for (int u = 0; u < cfg.U; ++u)
    for (int v = 0; v < cfg.V; ++v) {
      const std::size_t i =
          static_cast<std::size_t>(u) * static_cast<std::size_t>(cfg.V) + static_cast<std::size_t>(v);
      const bool in = row[static_cast<std::size_t>(u)] && col[static_cast<std::size_t>(v)];
      result.report.involved[i] = in ? 1 : 0;
      (in ? sum_in : sum_out) += result.report.view_psnr[i];
      n_in += in ? 1 : 0;
    }
  const int n_out = static_cast<int>(result.report.view_psnr.size()) - n_in;
  result.report.involved_count = n_in;
  result.report.mean_involved = n_in > 0 ? sum_in / n_in : 0.0;
  result.report.mean_uninvolved = n_out > 0 ? sum_out / n_out : 0.0;
  result.bank = std::move(tr.bank());
  return result;
}

}  // namespace lfkm::transfer
