#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sepbn/eval.hpp"
#include "sepbn/gradcheck.hpp"
#include "sepbn/synth.hpp"
#include "sepbn/train.hpp"

namespace py = pybind11;
using namespace sepbn;

namespace {

Tensor make_tensor(const std::vector<double>& data, const std::vector<int>& shape) {
  return Tensor(shape, data);
}

py::tuple unpack(const Tensor& t) { return py::make_tuple(t.vec(), t.shape()); }

// Desk-scale network handle for smoke tests: forward, pixel prediction and a
// finite-difference audit of the analytic gradients.
class DeskNet {
public:
  DeskNet(int landmarks, const std::string& norm, int input_size, uint64_t seed, bool zero_final)
    : rng_(seed),
      net_(VanillaConfig::desk(landmarks, norm_kind_from_name(norm), input_size), rng_,
           zero_final) {}

  py::tuple forward(const std::vector<double>& data, const std::vector<int>& shape, bool train) {
    Ctx ctx;
    ctx.mode = train ? Mode::kTrain : Mode::kEval;
    return unpack(net_.forward(make_tensor(data, shape), ctx));
  }

  py::tuple predict_pixels(const std::vector<double>& data, const std::vector<int>& shape) {
    return unpack(net_.predict_pixels(make_tensor(data, shape)));
  }

  void set_tau(double tau) { net_.set_tau(tau); }
  int64_t param_count() { return net_.param_count(); }

  double gradcheck_max_rel_err(int batch, int samples, uint64_t seed) {
    Rng drng(seed);
    const int s = net_.config().input_size;
    Tensor images({batch, 3, s, s});
    for (int64_t i = 0; i < images.numel(); ++i) images[i] = drng.uniform();
    Tensor targets({batch, 2 * net_.config().landmarks});
    for (int64_t i = 0; i < targets.numel(); ++i) targets[i] = drng.uniform(-0.5, 0.5);
    Ctx ctx;
    ctx.mode = Mode::kTrain;
    auto loss = [&]() { return ops::l1_loss(net_.forward(images, ctx), targets, nullptr); };
    auto fwd_bwd = [&]() {
      net_.zero_grad();
      Tensor g;
      ops::l1_loss(net_.forward(images, ctx), targets, &g);
      net_.backward(g);
    };
    Rng pick(seed + 1);
    return grad_check(net_.params(), loss, fwd_bwd, kGradCheckStep, samples, pick).max_rel_err();
  }

private:
  Rng rng_;
  VanillaNet net_;
};

// Standalone grouped-attention module handle.
class SepBNModule {
public:
  SepBNModule(int channels, int k, int g, int t, uint64_t seed)
    : rng_(seed), layer_("sepbn", channels, k, g, t, rng_) {}

  py::tuple forward(const std::vector<double>& data, const std::vector<int>& shape, bool train) {
    Ctx ctx;
    ctx.mode = train ? Mode::kTrain : Mode::kEval;
    return unpack(layer_.forward(make_tensor(data, shape), ctx));
  }

  py::tuple attention(const std::vector<double>& data, const std::vector<int>& shape) {
    return unpack(layer_.attention(make_tensor(data, shape)));
  }

  void set_tau(double tau) { layer_.set_tau(tau); }
  void set_aggregation(const std::string& mode) {
    if (mode == "soft")
      layer_.set_aggregation(Aggregation::kSoft);
    else if (mode == "hard")
      layer_.set_aggregation(Aggregation::kHard);
    else
      throw ConfigError("aggregation must be 'soft' or 'hard'");
  }

private:
  Rng rng_;
  SepBN layer_;
};

}  // namespace

PYBIND11_MODULE(_sepbn, m) {
  m.doc() = "Separable batch normalization kernels and landmark metrics";

  m.def("conv2d",
        [](const std::vector<double>& x, const std::vector<int>& xs, const std::vector<double>& w,
           const std::vector<int>& ws, const std::vector<double>& b, int stride, int pad) {
          return unpack(ops::conv2d(make_tensor(x, xs), make_tensor(w, ws),
                                    make_tensor(b, {static_cast<int>(b.size())}), stride, pad));
        },
        py::arg("x"), py::arg("x_shape"), py::arg("w"), py::arg("w_shape"), py::arg("bias"),
        py::arg("stride") = 1, py::arg("pad") = 0);

  m.def("linear",
        [](const std::vector<double>& x, const std::vector<int>& xs, const std::vector<double>& w,
           const std::vector<int>& ws, const std::vector<double>& b) {
          return unpack(ops::linear(make_tensor(x, xs), make_tensor(w, ws),
                                    make_tensor(b, {static_cast<int>(b.size())})));
        });

  m.def("temp_softmax",
        [](const std::vector<double>& z, const std::vector<int>& shape, double tau) {
          return unpack(ops::temp_softmax(make_tensor(z, shape), tau));
        },
        py::arg("logits"), py::arg("shape"), py::arg("tau") = 1.0);

  m.def("l1_loss", [](const std::vector<double>& pred, const std::vector<double>& target) {
    const int n = static_cast<int>(pred.size());
    return ops::l1_loss(make_tensor(pred, {n}), make_tensor(target, {n}), nullptr);
  });

  m.def("cosine_lr", [](int epoch, int total, int warmup, double lr_max, double lr_min) {
    ScheduleConfig cfg;
    cfg.total_epochs = total;
    cfg.warmup_epochs = warmup;
    cfg.lr_max = lr_max;
    cfg.lr_min = lr_min;
    return cosine_lr(epoch, cfg);
  }, py::arg("epoch"), py::arg("total") = 500, py::arg("warmup") = 120,
     py::arg("lr_max") = 1e-3, py::arg("lr_min") = 5e-6);

  m.def("tau_schedule", [](int epoch, double tau_start, double tau_end, int anneal) {
    ScheduleConfig cfg;
    cfg.tau_start = tau_start;
    cfg.tau_end = tau_end;
    cfg.tau_anneal_epochs = anneal;
    return tau_schedule(epoch, cfg);
  }, py::arg("epoch"), py::arg("tau_start") = 30.0, py::arg("tau_end") = 1.0,
     py::arg("anneal") = 30);

  m.def("nme_bbox",
        [](const std::vector<double>& pred, const std::vector<double>& gt, double bw, double bh) {
          ProtocolSpec p;
          p.id = "py";
          p.landmarks = static_cast<int>(pred.size() / 2);
          p.flip_perm.resize(static_cast<size_t>(p.landmarks));
          for (int i = 0; i < p.landmarks; ++i) p.flip_perm[static_cast<size_t>(i)] = i;
          p.norm_rule.kind = NormRule::kBboxSize;
          return nme_percent(pred, gt, p, bw, bh);
        });

  m.def("nme_interocular",
        [](const std::vector<double>& pred, const std::vector<double>& gt, int left, int right) {
          ProtocolSpec p;
          p.id = "py";
          p.landmarks = static_cast<int>(pred.size() / 2);
          p.flip_perm.resize(static_cast<size_t>(p.landmarks));
          for (int i = 0; i < p.landmarks; ++i) p.flip_perm[static_cast<size_t>(i)] = i;
          p.norm_rule = {NormRule::kInterOcular, left, right};
          return nme_percent(pred, gt, p, 1, 1);
        });

  m.def("failure_rate", [](const std::vector<double>& nmes, double threshold) {
    return failure_rate_percent(nmes, threshold);
  }, py::arg("nmes"), py::arg("threshold") = 10.0);

  m.def("param_similarity",
        [](const std::vector<std::vector<double>>& vectors) { return param_similarity(vectors); });

  m.def("synth_generate",
        [](const std::string& out_dir, int n_samples, int image_size, int landmarks, uint64_t seed,
           const std::vector<double>& weights) {
          SynthConfig cfg;
          cfg.n_samples = n_samples;
          cfg.image_size = image_size;
          cfg.landmarks = landmarks;
          cfg.seed = seed;
          if (!weights.empty()) {
            cfg.domain_weights = weights;
            cfg.yaw_centers_deg.resize(weights.size(), 0.0);
            cfg.brightness.resize(weights.size(), 0.0);
            cfg.contrast.resize(weights.size(), 1.0);
          }
          synth_generate_to(cfg, out_dir);
        },
        py::arg("out_dir"), py::arg("n_samples") = 64, py::arg("image_size") = 48,
        py::arg("landmarks") = 5, py::arg("seed") = 1,
        py::arg("domain_weights") = std::vector<double>{});

  m.def("dataset_summary", [](const std::string& manifest) {
    Dataset ds = load_dataset(manifest);
    py::dict out;
    out["size"] = ds.size();
    out["protocol"] = ds.protocol.id;
    out["landmarks"] = ds.protocol.landmarks;
    return out;
  });

  py::class_<DeskNet>(m, "DeskNet")
      .def(py::init<int, const std::string&, int, uint64_t, bool>(), py::arg("landmarks") = 5,
           py::arg("norm") = "bn", py::arg("input_size") = 64, py::arg("seed") = 1,
           py::arg("zero_final") = true)
      .def("forward", &DeskNet::forward, py::arg("data"), py::arg("shape"),
           py::arg("train") = false)
      .def("predict_pixels", &DeskNet::predict_pixels)
      .def("set_tau", &DeskNet::set_tau)
      .def("param_count", &DeskNet::param_count)
      .def("gradcheck_max_rel_err", &DeskNet::gradcheck_max_rel_err, py::arg("batch") = 2,
           py::arg("samples") = 50, py::arg("seed") = 7);

  py::class_<SepBNModule>(m, "SepBN")
      .def(py::init<int, int, int, int, uint64_t>(), py::arg("channels"), py::arg("k") = 3,
           py::arg("g") = 2, py::arg("t") = 3, py::arg("seed") = 1)
      .def("forward", &SepBNModule::forward, py::arg("data"), py::arg("shape"),
           py::arg("train") = true)
      .def("attention", &SepBNModule::attention)
      .def("set_tau", &SepBNModule::set_tau)
      .def("set_aggregation", &SepBNModule::set_aggregation);
}
