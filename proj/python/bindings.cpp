#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <vector>

#include <lfkm/bitstream.hpp>
#include <lfkm/fb_basis.hpp>
#include <lfkm/lightfield_io.hpp>
#include <lfkm/model.hpp>
#include <lfkm/numerics.hpp>
#include <lfkm/quantizer.hpp>
#include <lfkm/trainer.hpp>

namespace py = pybind11;
using namespace lfkm;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

lightfield_io::LightField lightfield_from_array(const DoubleArray& views) {
  auto buf = views.request();
  if (buf.ndim != 5 || buf.shape[2] != 3)
    throw Error("views must have shape (U, V, 3, X, Y)");
  lightfield_io::LightField lf;
  lf.U = static_cast<int>(buf.shape[0]);
  lf.V = static_cast<int>(buf.shape[1]);
  lf.X = static_cast<int>(buf.shape[3]);
  lf.Y = static_cast<int>(buf.shape[4]);
  const double* src = static_cast<const double*>(buf.ptr);
  std::int64_t per_view = 3LL * lf.X * lf.Y;
  for (int u = 0; u < lf.U; ++u)
    for (int v = 0; v < lf.V; ++v) {
      Tensor t({3, lf.X, lf.Y});
      std::memcpy(t.data(), src + (static_cast<std::int64_t>(u) * lf.V + v) * per_view,
                  sizeof(double) * static_cast<std::size_t>(per_view));
      lf.views.push_back(std::move(t));
    }
  return lf;
}

py::array_t<double> array_from_lightfield(const lightfield_io::LightField& lf) {
  py::array_t<double> out({lf.U, lf.V, 3, lf.X, lf.Y});
  double* dst = out.mutable_data();
  std::int64_t per_view = 3LL * lf.X * lf.Y;
  for (int u = 0; u < lf.U; ++u)
    for (int v = 0; v < lf.V; ++v)
      std::memcpy(dst + (static_cast<std::int64_t>(u) * lf.V + v) * per_view,
                  lf.view(u, v).data(), sizeof(double) * static_cast<std::size_t>(per_view));
  return out;
}

Tensor tensor_from_view(const DoubleArray& view) {
  auto buf = view.request();
  if (buf.ndim != 3 || buf.shape[0] != 3) throw Error("view must have shape (3, X, Y)");
  Tensor t({3, static_cast<int>(buf.shape[1]), static_cast<int>(buf.shape[2])});
  std::memcpy(t.data(), buf.ptr, sizeof(double) * static_cast<std::size_t>(t.size()));
  return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  py::array_t<double> out(t.shape());
  std::memcpy(out.mutable_data(), t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
  return out;
}

model::OutputAct parse_activation(const std::string& name) {
  if (name == "sigmoid") return model::OutputAct::Sigmoid;
  if (name == "softmax") return model::OutputAct::Softmax;
  throw Error("output_activation must be 'sigmoid' or 'softmax'");
}

std::vector<std::uint8_t> bytes_to_vector(const py::bytes& data) {
  std::string_view s = data;
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

py::bytes encode_views(const DoubleArray& views, int c_m, int c_d, int r, int n,
                       std::uint64_t seed, int epochs, int uses_per_sai, int batch,
                       int quant_uses_per_sai, double lr, const std::string& output_activation,
                       bool decompose_kernels, bool decoder_k3, bool verbose) {
  auto lf = lightfield_from_array(views);
  model::NetworkConfig cfg;
  cfg.c_m = c_m;
  cfg.c_d = c_d;
  cfg.r = r;
  cfg.n = n;
  cfg.U = lf.U;
  cfg.V = lf.V;
  cfg.X = lf.X;
  cfg.Y = lf.Y;
  cfg.output_activation = parse_activation(output_activation);
  cfg.decompose_kernels = decompose_kernels;
  cfg.decoder_k3 = decoder_k3;
  cfg.seed = seed;
  cfg.validate();
  trainer::TrainSchedule sched;
  sched.epochs = epochs;
  sched.uses_per_sai = uses_per_sai;
  sched.batch = batch;
  sched.quant_uses_per_sai = quant_uses_per_sai;
  sched.lr = lr;
  sched.seed = seed;
  sched.verbose = verbose;
  sched.validate();
  std::vector<std::uint8_t> payload;
  {
    py::gil_scoped_release release;
    auto trained = trainer::train(cfg, sched, lf);
    auto qr = quantizer::quantize_model(std::move(trained.first), lf, sched);
    payload = bitstream::serialize(qr.qm);
  }
  return py::bytes(reinterpret_cast<const char*>(payload.data()), payload.size());
}

py::array_t<double> decode_bytes(const py::bytes& data) {
  auto qm = bitstream::deserialize(bytes_to_vector(data));
  lightfield_io::LightField lf;
  {
    py::gil_scoped_release release;
    auto bank = quantizer::bank_from_model(qm);
    auto noise = model::make_noise(bank.config);
    lf.U = bank.config.U;
    lf.V = bank.config.V;
    lf.X = bank.config.X;
    lf.Y = bank.config.Y;
    for (int u = 0; u < lf.U; ++u)
      for (int v = 0; v < lf.V; ++v) lf.views.push_back(model::forward(bank, noise, u, v));
  }
  return array_from_lightfield(lf);
}

py::array_t<double> decode_one(const py::bytes& data, int u, int v) {
  auto qm = bitstream::deserialize(bytes_to_vector(data));
  if (u < 0 || u >= qm.config.U || v < 0 || v >= qm.config.V)
    throw Error("view index out of range");
  Tensor view;
  {
    py::gil_scoped_release release;
    auto bank = quantizer::bank_from_model(qm);
    auto noise = model::make_noise(bank.config);
    view = model::forward(bank, noise, u, v);
  }
  return array_from_tensor(view);
}

py::dict info_bytes(const py::bytes& data) {
  auto raw = bytes_to_vector(data);
  auto qm = bitstream::deserialize(raw);
  auto pc = model::param_count(qm.config);
  py::dict d;
  d["c_m"] = qm.config.c_m;
  d["c_d"] = qm.config.c_d;
  d["r"] = qm.config.r;
  d["n"] = qm.config.n;
  d["U"] = qm.config.U;
  d["V"] = qm.config.V;
  d["X"] = qm.config.X;
  d["Y"] = qm.config.Y;
  d["seed"] = qm.config.seed;
  d["output_activation"] =
      qm.config.output_activation == model::OutputAct::Sigmoid ? "sigmoid" : "softmax";
  d["allocate_modulators"] = qm.config.allocate_modulators;
  d["decompose_kernels"] = qm.config.decompose_kernels;
  d["decoder_k3"] = qm.config.decoder_k3;
  d["raw"] = qm.raw;
  d["bytes"] = raw.size();
  d["bpp"] = bitstream::compute_bpp(raw.size(), qm.config.X, qm.config.Y, qm.config.U,
                                    qm.config.V);
  d["params"] = pc.total;
  d["modulator_share"] = pc.modulator_share;
  return d;
}

py::dict param_count_dict(int c_m, int c_d, int r, int n, int U, int V, int X, int Y,
                          bool allocate_modulators, bool decompose_kernels, bool decoder_k3) {
  model::NetworkConfig cfg;
  cfg.c_m = c_m;
  cfg.c_d = c_d;
  cfg.r = r;
  cfg.n = n;
  cfg.U = U;
  cfg.V = V;
  cfg.X = X;
  cfg.Y = Y;
  cfg.allocate_modulators = allocate_modulators;
  cfg.decompose_kernels = decompose_kernels;
  cfg.decoder_k3 = decoder_k3;
  auto pc = model::param_count(cfg);
  py::dict d;
  d["total"] = pc.total;
  d["modulator_values"] = pc.modulator_values;
  d["modulator_share"] = pc.modulator_share;
  return d;
}

double psnr_arrays(const DoubleArray& a, const DoubleArray& b) {
  return lightfield_io::psnr(tensor_from_view(a), tensor_from_view(b));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "light field kernel-modulation codec";

  py::register_exception<Error>(m, "LfkmError", PyExc_ValueError);

  m.def("fb_bases", [](int k, int r) { return array_from_tensor(fb_basis::generate_fb_bases(k, r)); },
        py::arg("k"), py::arg("r"));

  m.def("make_synthetic",
        [](const std::string& kind, int X, int Y, int U, int V, double disparity) {
          return array_from_lightfield(
              lightfield_io::make_synthetic_lf(kind, X, Y, U, V, disparity));
        },
        py::arg("kind"), py::arg("X"), py::arg("Y"), py::arg("U"), py::arg("V"),
        py::arg("disparity") = 1.0);

  m.def("encode", &encode_views, py::arg("views"), py::arg("c_m") = 2, py::arg("c_d") = 16,
        py::arg("r") = 6, py::arg("n") = 256, py::arg("seed") = 0, py::arg("epochs") = 12,
        py::arg("uses_per_sai") = 500, py::arg("batch") = 5, py::arg("quant_uses_per_sai") = 200,
        py::arg("lr") = 0.01, py::arg("output_activation") = "sigmoid",
        py::arg("decompose_kernels") = true, py::arg("decoder_k3") = false,
        py::arg("verbose") = false);

  m.def("decode", &decode_bytes, py::arg("data"));
  m.def("decode_view", &decode_one, py::arg("data"), py::arg("u"), py::arg("v"));
  m.def("info", &info_bytes, py::arg("data"));

  m.def("psnr", &psnr_arrays, py::arg("a"), py::arg("b"));

  m.def("compute_bpp", &bitstream::compute_bpp, py::arg("byte_count"), py::arg("X"),
        py::arg("Y"), py::arg("U"), py::arg("V"));

  m.def("param_count", &param_count_dict, py::arg("c_m"), py::arg("c_d"), py::arg("r") = 6,
        py::arg("n") = 256, py::arg("U") = 9, py::arg("V") = 9, py::arg("X") = 64,
        py::arg("Y") = 64, py::arg("allocate_modulators") = true,
        py::arg("decompose_kernels") = true, py::arg("decoder_k3") = false);

  m.def("estimate_per_view_params", &model::estimate_per_view_params, py::arg("l"), py::arg("k"),
        py::arg("c_in"), py::arg("U"), py::arg("V"), py::arg("c_m"), py::arg("c_d"));
  m.def("estimate_allocated_params", &model::estimate_allocated_params, py::arg("l"),
        py::arg("k"), py::arg("c_in"), py::arg("U"), py::arg("V"), py::arg("c_m"),
        py::arg("c_d"));

  m.def("set_num_threads", &numerics::set_num_threads, py::arg("n"));
  m.def("num_threads", &numerics::num_threads);
}
