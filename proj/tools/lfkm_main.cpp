#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lfkm/bitstream.hpp"
#include "lfkm/error.hpp"
#include "lfkm/lightfield_io.hpp"
#include "lfkm/model.hpp"
#include "lfkm/numerics.hpp"
#include "lfkm/quantizer.hpp"
#include "lfkm/trainer.hpp"
#include "lfkm/transfer.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace lfkm;

constexpr const char* kVersion = "1.0.0";

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("failed reading " + path);
  return bytes;
}

void write_file_atomic(const std::string& path, const void* data, std::size_t size) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw Error("failed writing " + tmp);
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

json config_json(const model::NetworkConfig& c) {
  return json{{"c_m", c.c_m},
              {"c_d", c.c_d},
              {"rank", c.r},
              {"centroids", c.n},
              {"U", c.U},
              {"V", c.V},
              {"X", c.X},
              {"Y", c.Y},
              {"output_activation", c.output_activation == model::OutputAct::Sigmoid ? "sigmoid" : "softmax"},
              {"allocate_modulators", c.allocate_modulators},
              {"decompose_kernels", c.decompose_kernels},
              {"decoder_k3", c.decoder_k3},
              {"seed", c.seed}};
}

json schedule_json(const trainer::TrainSchedule& s) {
  return json{{"epochs", s.epochs},       {"uses_per_sai", s.uses_per_sai},
              {"batch", s.batch},         {"quant_uses_per_sai", s.quant_uses_per_sai},
              {"lr", s.lr},               {"seed", s.seed}};
}

json manifest_base(const std::string& command, int argc, char** argv) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  json args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  m["argv"] = args;
  m["threads"] = numerics::num_threads();
  return m;
}

void finish_manifest(json& m, const std::string& path,
                     std::chrono::steady_clock::time_point t0) {
  m["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_atomic(path, m.dump(2) + "\n");
}

lightfield_io::LightField render_all(const model::KernelBank& bank) {
  const auto& c = bank.config;
  const Tensor noise = model::make_noise(c);
  lightfield_io::LightField lf;
  lf.U = c.U;
  lf.V = c.V;
  lf.X = c.X;
  lf.Y = c.Y;
  lf.views.reserve(static_cast<std::size_t>(c.U) * static_cast<std::size_t>(c.V));
  for (int u = 0; u < c.U; ++u)
    for (int v = 0; v < c.V; ++v) lf.views.push_back(model::forward(bank, noise, u, v));
  return lf;
}

struct EncodeArgs {
  std::string input, output, report;
  int cm = 2, cd = 48, rank = 6, centroids = 256;
  int epochs = 12, uses = 500, quant_uses = 200, batch = 5;
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool no_alloc = false, no_decomp = false, skip_quant = false;
  bool decoder_k3 = false, softmax = false, quiet = false;
};

int run_encode(const EncodeArgs& a, int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const lightfield_io::LightField lf = lightfield_io::load_lightfield(a.input);

  model::NetworkConfig cfg;
  cfg.c_m = a.cm;
  cfg.c_d = a.cd;
  cfg.r = a.rank;
  cfg.n = a.centroids;
  cfg.U = lf.U;
  cfg.V = lf.V;
  cfg.X = lf.X;
  cfg.Y = lf.Y;
  cfg.output_activation = a.softmax ? model::OutputAct::Softmax : model::OutputAct::Sigmoid;
  cfg.allocate_modulators = !a.no_alloc;
  cfg.decompose_kernels = !a.no_decomp;
  cfg.decoder_k3 = a.decoder_k3;
  cfg.seed = a.seed;
  cfg.validate();

  trainer::TrainSchedule schedule;
  schedule.epochs = a.epochs;
  schedule.uses_per_sai = a.uses;
  schedule.quant_uses_per_sai = a.quant_uses;
  schedule.batch = a.batch;
  schedule.lr = a.lr;
  schedule.seed = a.seed;
  schedule.verbose = !a.quiet;

  trainer::Trainer tr(cfg);
  trainer::TrainReport report = tr.run(schedule, lf);

  model::KernelBank bank;
  quantizer::QuantizedModel qm;
  if (a.skip_quant) {
    qm = quantizer::raw_model(tr.bank());
    bank = quantizer::bank_from_model(qm);
  } else {
    quantizer::QuantizeResult qr = quantizer::quantize_model(std::move(tr.bank()), lf, schedule);
    qm = std::move(qr.qm);
    bank = std::move(qr.bank);
  }

  const std::vector<std::uint8_t> bytes = bitstream::serialize(qm);
  write_file_atomic(a.output, bytes.data(), bytes.size());
  if (!a.report.empty()) report.write_tsv(a.report);

  const trainer::EvalResult eval = trainer::evaluate(bank, lf);
  const double bpp = bitstream::compute_bpp(bytes.size(), cfg.X, cfg.Y, cfg.U, cfg.V);

  json m = manifest_base("encode", argc, argv);
  m["input"] = a.input;
  m["output"] = a.output;
  m["config"] = config_json(cfg);
  m["schedule"] = schedule_json(schedule);
  m["skip_quant"] = a.skip_quant;
  m["bytes"] = bytes.size();
  m["bpp"] = bpp;
  m["mean_psnr"] = eval.mean;
  m["psnr_variance"] = eval.variance;
  finish_manifest(m, a.output + ".manifest.json", t0);

  std::printf("wrote %s: %zu bytes, %.6f bpp, mean PSNR %.3f dB, variance %.4f\n",
              a.output.c_str(), bytes.size(), bpp, eval.mean, eval.variance);
  return 0;
}

struct DecodeArgs {
  std::string model, output;
};

int run_decode(const DecodeArgs& a, int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::uint8_t> bytes = read_file(a.model);
  const quantizer::QuantizedModel qm = bitstream::deserialize(bytes);
  const model::KernelBank bank = quantizer::bank_from_model(qm);

  const lightfield_io::LightField decoded = render_all(bank);
  lightfield_io::save_lightfield(decoded, a.output);

  json m = manifest_base("decode", argc, argv);
  m["input"] = a.model;
  m["output"] = a.output;
  m["config"] = config_json(bank.config);
  m["bytes"] = bytes.size();
  m["bpp"] = bitstream::compute_bpp(bytes.size(), bank.config.X, bank.config.Y, bank.config.U,
                                    bank.config.V);
  finish_manifest(m, (fs::path(a.output) / "manifest.json").string(), t0);

  std::printf("decoded %d x %d views (%d x %d) to %s\n", bank.config.U, bank.config.V,
              bank.config.X, bank.config.Y, a.output.c_str());
  return 0;
}

struct EvalArgs {
  std::string model, reference, report, error_maps;
};

int run_eval(const EvalArgs& a, int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::uint8_t> bytes = read_file(a.model);
  const quantizer::QuantizedModel qm = bitstream::deserialize(bytes);
  const model::KernelBank bank = quantizer::bank_from_model(qm);
  const lightfield_io::LightField reference = lightfield_io::load_lightfield(a.reference);
  if (reference.U != bank.config.U || reference.V != bank.config.V ||
      reference.X != bank.config.X || reference.Y != bank.config.Y)
    throw Error("reference extents do not match the model");

  const lightfield_io::LightField decoded = render_all(bank);
  std::vector<double> view_psnr(decoded.views.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < decoded.views.size(); ++i) {
    view_psnr[i] = lightfield_io::psnr(decoded.views[i], reference.views[i]);
    mean += view_psnr[i];
  }
  mean /= static_cast<double>(view_psnr.size());
  double variance = 0.0;
  for (double p : view_psnr) variance += (p - mean) * (p - mean);
  variance /= static_cast<double>(view_psnr.size());
  const double bpp = bitstream::compute_bpp(bytes.size(), bank.config.X, bank.config.Y,
                                            bank.config.U, bank.config.V);

  std::string csv = "u,v,psnr\n";
  for (int u = 0; u < bank.config.U; ++u)
    for (int v = 0; v < bank.config.V; ++v) {
      char line[64];
      std::snprintf(line, sizeof line, "%d,%d,%.6f\n", u, v,
                    view_psnr[static_cast<std::size_t>(u * bank.config.V + v)]);
      csv += line;
    }
  char tail[128];
  std::snprintf(tail, sizeof tail, "mean,%.6f,variance,%.6f,bpp,%.8f\n", mean, variance, bpp);
  csv += tail;
  write_text_atomic(a.report, csv);

  if (!a.error_maps.empty()) {
    fs::create_directories(a.error_maps);
    lightfield_io::save_error_map(lightfield_io::error_map(decoded, reference),
                                  (fs::path(a.error_maps) / "error_map.png").string());
    for (int u = 0; u < bank.config.U; ++u)
      for (int v = 0; v < bank.config.V; ++v) {
        lightfield_io::LightField one_d, one_r;
        one_d.U = one_d.V = 1;
        one_d.X = bank.config.X;
        one_d.Y = bank.config.Y;
        one_r = one_d;
        one_d.views.push_back(decoded.view(u, v));
        one_r.views.push_back(reference.view(u, v));
        char name[48];
        std::snprintf(name, sizeof name, "error_%02d_%02d.png", u, v);
        lightfield_io::save_error_map(lightfield_io::error_map(one_d, one_r),
                                      (fs::path(a.error_maps) / name).string());
      }
  }

  json m = manifest_base("eval", argc, argv);
  m["model"] = a.model;
  m["reference"] = a.reference;
  m["report"] = a.report;
  m["config"] = config_json(bank.config);
  m["bpp"] = bpp;
  m["mean_psnr"] = mean;
  m["psnr_variance"] = variance;
  finish_manifest(m, a.report + ".manifest.json", t0);

  std::printf("mean PSNR %.3f dB, variance %.4f, %.6f bpp (%s)\n", mean, variance, bpp,
              a.report.c_str());
  return 0;
}

struct TransferArgs {
  std::string pretrained, target, output, out_model;
  std::string subset = "9";
  int epochs = 1, uses = 500, batch = 5;
  double lr = 0.01;
  std::uint64_t seed = 0;
  bool quiet = false;
};

int run_transfer(const TransferArgs& a, int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::uint8_t> bytes = read_file(a.pretrained);
  const quantizer::QuantizedModel qm = bitstream::deserialize(bytes);
  const model::KernelBank bank = quantizer::bank_from_model(qm);
  const lightfield_io::LightField target = lightfield_io::load_lightfield(a.target);

  std::string name = a.subset;
  if (!name.empty() && name[0] != 'S') name = "S" + name;
  const std::vector<trainer::ViewIndex> subset =
      transfer::pattern(name, bank.config.U, bank.config.V);

  trainer::TrainSchedule schedule;
  schedule.epochs = a.epochs;
  schedule.uses_per_sai = a.uses;
  schedule.batch = a.batch;
  schedule.lr = a.lr;
  schedule.seed = a.seed;
  schedule.verbose = !a.quiet;

  const transfer::TransferResult result = transfer::transfer(bank, target, subset, schedule);
  result.report.write_csv(a.output, bank.config.U, bank.config.V);

  if (!a.out_model.empty()) {
    const std::vector<std::uint8_t> out_bytes =
        bitstream::serialize(quantizer::raw_model(result.bank));
    write_file_atomic(a.out_model, out_bytes.data(), out_bytes.size());
  }

  json m = manifest_base("transfer", argc, argv);
  m["pretrained"] = a.pretrained;
  m["target"] = a.target;
  m["subset"] = name;
  m["output"] = a.output;
  m["config"] = config_json(bank.config);
  m["schedule"] = schedule_json(schedule);
  m["mean_psnr"] = result.report.mean;
  m["mean_involved"] = result.report.mean_involved;
  m["mean_uninvolved"] = result.report.mean_uninvolved;
  finish_manifest(m, a.output + ".manifest.json", t0);

  std::printf("%s: mean PSNR %.3f dB, involved %.3f dB (%d views), uninvolved %.3f dB\n",
              name.c_str(), result.report.mean, result.report.mean_involved,
              result.report.involved_count, result.report.mean_uninvolved);
  return 0;
}

int run_info(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  const quantizer::QuantizedModel qm = bitstream::deserialize(bytes);
  const model::NetworkConfig& c = qm.config;
  const model::ParamCount pc = model::param_count(c);
  std::printf("%s: %zu bytes, format v%d, %s payload\n", path.c_str(), bytes.size(),
              int(bitstream::kFormatVersion), qm.raw ? "raw f32" : "quantized");
  std::printf("  views %d x %d, spatial %d x %d\n", c.U, c.V, c.X, c.Y);
  std::printf("  c_m %d, c_d %d, rank %d, centroids %d\n", c.c_m, c.c_d, c.r, c.n);
  std::printf("  output %s, allocate_modulators %s, decompose_kernels %s, decoder %dx%d\n",
              c.output_activation == model::OutputAct::Sigmoid ? "sigmoid" : "softmax",
              c.allocate_modulators ? "yes" : "no", c.decompose_kernels ? "yes" : "no",
              c.decoder_k(), c.decoder_k());
  std::printf("  seed %llu\n", static_cast<unsigned long long>(c.seed));
  std::printf("  parameters %lld (modulator share %.4f)\n", static_cast<long long>(pc.total),
              pc.modulator_share);
  std::printf("  bpp %.8f\n", bitstream::compute_bpp(bytes.size(), c.X, c.Y, c.U, c.V));
  return 0;
}

struct AblateArgs {
  std::string input, output;
  int cm = 2, cd = 16, rank = 6;
  int epochs = 2, uses = 200, batch = 5;
  double lr = 0.01;
  std::uint64_t seed = 0;
  int seeds = 1;
  bool quiet = false;
};

int run_ablate(const AblateArgs& a, int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  const lightfield_io::LightField lf = lightfield_io::load_lightfield(a.input);

  model::NetworkConfig base;
  base.c_m = a.cm;
  base.c_d = a.cd;
  base.r = a.rank;
  base.U = lf.U;
  base.V = lf.V;
  base.X = lf.X;
  base.Y = lf.Y;
  base.seed = a.seed;
  base.validate();
  const std::int64_t budget = model::param_count(base).total;

  struct Variant {
    const char* name;
    bool alloc, decomp;
  };
  const Variant variants[] = {{"Net", true, true}, {"Net*", false, true}, {"Net+", false, false}};

  std::string csv = "variant,c_d,params,seed,mean_psnr,variance\n";
  for (const Variant& variant : variants) {
    model::NetworkConfig cfg = base;
    cfg.allocate_modulators = variant.alloc;
    cfg.decompose_kernels = variant.decomp;
    cfg.c_d = model::match_c_d(cfg, budget);
    const std::int64_t total = model::param_count(cfg).total;
    for (int s = 0; s < a.seeds; ++s) {
      cfg.seed = a.seed + static_cast<std::uint64_t>(s);
      trainer::TrainSchedule schedule;
      schedule.epochs = a.epochs;
      schedule.uses_per_sai = a.uses;
      schedule.batch = a.batch;
      schedule.lr = a.lr;
      schedule.seed = cfg.seed;
      schedule.verbose = !a.quiet;
      trainer::Trainer tr(cfg);
      tr.run(schedule, lf);
      const trainer::EvalResult eval = trainer::evaluate(tr.bank(), lf);
      char line[160];
      std::snprintf(line, sizeof line, "%s,%d,%lld,%llu,%.6f,%.6f\n", variant.name, cfg.c_d,
                    static_cast<long long>(total), static_cast<unsigned long long>(cfg.seed),
                    eval.mean, eval.variance);
      csv += line;
      std::printf("%s", line);
    }
  }
  write_text_atomic(a.output, csv);

  json m = manifest_base("ablate", argc, argv);
  m["input"] = a.input;
  m["output"] = a.output;
  m["budget_params"] = budget;
  m["base_config"] = config_json(base);
  finish_manifest(m, a.output + ".manifest.json", t0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("LFKM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) numerics::set_num_threads(n);
  }

  CLI::App app{"kernel-modulated light field codec"};
  app.require_subcommand(1);

  EncodeArgs enc;
  CLI::App* encode = app.add_subcommand("encode", "fit a model to a light field and write .lfkm");
  encode->add_option("--input", enc.input, "directory of view_UU_VV.png files")->required();
  encode->add_option("--output", enc.output, "output .lfkm path")->required();
  encode->add_option("--cm", enc.cm, "modulator channels");
  encode->add_option("--cd", enc.cd, "descriptor channels");
  encode->add_option("--rank", enc.rank, "basis rank");
  encode->add_option("--centroids", enc.centroids, "codebook size per layer");
  encode->add_option("--epochs", enc.epochs, "training epochs");
  encode->add_option("--uses", enc.uses, "uses of each view per epoch");
  encode->add_option("--quant-uses", enc.quant_uses, "uses of each view per quantization epoch");
  encode->add_option("--batch", enc.batch, "views per iteration");
  encode->add_option("--lr", enc.lr, "learning rate");
  encode->add_option("--seed", enc.seed, "seed for noise, init and sampling");
  encode->add_option("--report", enc.report, "write the loss/psnr trace to this tsv");
  encode->add_flag("--no-alloc", enc.no_alloc, "one modulator set per view");
  encode->add_flag("--no-decomp", enc.no_decomp, "dense kernels, no basis decomposition");
  encode->add_flag("--skip-quant", enc.skip_quant, "store raw 32-bit parameters");
  encode->add_flag("--decoder-k3", enc.decoder_k3, "3x3 decoder window");
  encode->add_flag("--softmax", enc.softmax, "softmax output activation");
  encode->add_flag("--quiet", enc.quiet, "suppress progress output");

  DecodeArgs dec;
  CLI::App* decode = app.add_subcommand("decode", "render all views from a .lfkm file");
  decode->add_option("--model", dec.model, ".lfkm path")->required();
  decode->add_option("--output", dec.output, "output directory")->required();

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a model against a reference directory");
  eval_cmd->add_option("--model", ev.model, ".lfkm path")->required();
  eval_cmd->add_option("--reference", ev.reference, "reference view directory")->required();
  eval_cmd->add_option("--report", ev.report, "output csv path")->required();
  eval_cmd->add_option("--error-maps", ev.error_maps, "directory for error-map pngs");

  TransferArgs tra;
  CLI::App* transfer_cmd =
      app.add_subcommand("transfer", "retrain descriptors on a new scene, modulators frozen");
  transfer_cmd->add_option("--pretrained", tra.pretrained, "pretrained .lfkm path")->required();
  transfer_cmd->add_option("--target", tra.target, "target view directory")->required();
  transfer_cmd->add_option("--subset", tra.subset, "5, 9, 13 or 25")->required();
  transfer_cmd->add_option("--output", tra.output, "report csv path")->required();
  transfer_cmd->add_option("--out-model", tra.out_model, "write the transferred bank (raw)");
  transfer_cmd->add_option("--epochs", tra.epochs, "retraining epochs");
  transfer_cmd->add_option("--uses", tra.uses, "uses of each subset view per epoch");
  transfer_cmd->add_option("--batch", tra.batch, "views per iteration");
  transfer_cmd->add_option("--lr", tra.lr, "learning rate");
  transfer_cmd->add_option("--seed", tra.seed, "sampling seed");
  transfer_cmd->add_flag("--quiet", tra.quiet, "suppress progress output");

  std::string info_path;
  CLI::App* info = app.add_subcommand("info", "print the header of a .lfkm file");
  info->add_option("file", info_path, ".lfkm path")->required();

  AblateArgs abl;
  CLI::App* ablate = app.add_subcommand("ablate", "budget-matched variant comparison");
  ablate->add_option("--input", abl.input, "directory of view_UU_VV.png files")->required();
  ablate->add_option("--output", abl.output, "report csv path")->required();
  ablate->add_option("--cm", abl.cm, "modulator channels");
  ablate->add_option("--cd", abl.cd, "descriptor channels for the full variant");
  ablate->add_option("--rank", abl.rank, "basis rank");
  ablate->add_option("--epochs", abl.epochs, "training epochs");
  ablate->add_option("--uses", abl.uses, "uses of each view per epoch");
  ablate->add_option("--batch", abl.batch, "views per iteration");
  ablate->add_option("--lr", abl.lr, "learning rate");
  ablate->add_option("--seed", abl.seed, "base seed");
  ablate->add_option("--seeds", abl.seeds, "seeds per variant");
  ablate->add_flag("--quiet", abl.quiet, "suppress progress output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (encode->parsed()) return run_encode(enc, argc, argv);
    if (decode->parsed()) return run_decode(dec, argc, argv);
    if (eval_cmd->parsed()) return run_eval(ev, argc, argv);
    if (transfer_cmd->parsed()) return run_transfer(tra, argc, argv);
    if (info->parsed()) return run_info(info_path);
    if (ablate->parsed()) return run_ablate(abl, argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
