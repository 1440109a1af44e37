#include "sepbn/eval.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

using nlohmann::json;

namespace sepbn {

double nme_percent(const std::vector<double>& pred, const std::vector<double>& gt,
                   const ProtocolSpec& proto, double bw, double bh) {
  const int L = proto.landmarks;
  if (static_cast<int>(pred.size()) != 2 * L || static_cast<int>(gt.size()) != 2 * L)
    throw DimensionError("nme: expected " + std::to_string(2 * L) + " coordinates");

  double d;
  if (proto.norm_rule.kind == NormRule::kBboxSize) {
    if (!(bw > 0) || !(bh > 0)) throw MetricError("nme: nonpositive bbox normalizer");
    d = std::sqrt(bw * bh);
  } else {
    const int li = proto.norm_rule.left, ri = proto.norm_rule.right;
    const double dx = gt[static_cast<size_t>(2 * li)] - gt[static_cast<size_t>(2 * ri)];
    const double dy = gt[static_cast<size_t>(2 * li + 1)] - gt[static_cast<size_t>(2 * ri + 1)];
    d = std::hypot(dx, dy);
    if (!(d > 0)) throw MetricError("nme: coincident eye landmarks give a zero normalizer");
  }

  double acc = 0.0;
  for (int j = 0; j < L; ++j)
    acc += std::hypot(pred[static_cast<size_t>(2 * j)] - gt[static_cast<size_t>(2 * j)],
                      pred[static_cast<size_t>(2 * j + 1)] - gt[static_cast<size_t>(2 * j + 1)]);
  return acc / L / d * 100.0;
}

double failure_rate_percent(const std::vector<double>& nmes, double threshold_percent) {
  if (!(threshold_percent > 0)) throw ParameterError("failure threshold must be > 0");
  if (nmes.empty()) throw MetricError("failure rate undefined for an empty sample set");
  int failures = 0;
  for (double v : nmes)
    if (v > threshold_percent) ++failures;
  return 100.0 * failures / static_cast<double>(nmes.size());
}

int eval_thread_cap() {
  const char* env = std::getenv("SEPBN_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v < 1 ? 1 : v;
}

namespace {

EvalReport score(const std::vector<double>& nmes, const Dataset& ds, double threshold) {
  EvalReport r;
  r.per_sample = nmes;
  r.failure_threshold = threshold;
  r.sample_count = static_cast<int>(nmes.size());
  double acc = 0;
  for (size_t i = 0; i < nmes.size(); ++i) {
    acc += nmes[i];
    const int dom = ds.samples[i].domain;
    r.per_domain_nme[dom] += nmes[i];
    r.per_domain_count[dom] += 1;
  }
  r.overall_nme = acc / static_cast<double>(nmes.size());
  for (auto& [dom, sum] : r.per_domain_nme) sum /= r.per_domain_count[dom];
  r.failure_rate = failure_rate_percent(nmes, threshold);
  return r;
}

std::vector<double> score_samples(const Predictor& predict, const Dataset& ds, int input_size,
                                  int batch) {
  if (ds.samples.empty()) throw MetricError("cannot evaluate an empty dataset");
  const int L = ds.protocol.landmarks;
  std::vector<double> nmes(ds.samples.size(), 0.0);
  const int n = ds.size();
  const int workers = std::min(eval_thread_cap(), batch);
  for (int start = 0; start < n; start += batch) {
    const int count = std::min(batch, n - start);
    Tensor images({count, 3, input_size, input_size});
    std::vector<Affine> from_crop(static_cast<size_t>(count));
    const int64_t plane = static_cast<int64_t>(3) * input_size * input_size;
    auto prepare = [&](int first, int stride) {
      for (int i = first; i < count; i += stride) {
        Crop crop = crop_resize(ds.samples[static_cast<size_t>(start + i)], input_size);
        std::copy_n(crop.image.data(), plane, images.data() + i * plane);
        from_crop[static_cast<size_t>(i)] = crop.to_crop.inverse();
      }
    };
    if (workers > 1) {
      // crops are independent and land in their own slots, so the result is
      // identical for any worker count
      std::vector<std::thread> pool;
      for (int w = 1; w < workers; ++w) pool.emplace_back(prepare, w, workers);
      prepare(0, workers);
      for (auto& t : pool) t.join();
    } else {
      prepare(0, 1);
    }
    Tensor pred = predict(images);
    if (pred.dim(0) != count || pred.dim(1) != 2 * L)
      throw DimensionError("predictor returned " + pred.shape_str() + ", expected " +
                           std::to_string(count) + "x" + std::to_string(2 * L));
    for (int i = 0; i < count; ++i) {
      const LandmarkSample& s = ds.samples[static_cast<size_t>(start + i)];
      std::vector<double> px(static_cast<size_t>(2 * L));
      for (int j = 0; j < L; ++j)
        from_crop[static_cast<size_t>(i)].apply(pred[static_cast<int64_t>(i) * 2 * L + 2 * j],
                                                pred[static_cast<int64_t>(i) * 2 * L + 2 * j + 1],
                                                px[static_cast<size_t>(2 * j)],
                                                px[static_cast<size_t>(2 * j + 1)]);
      nmes[static_cast<size_t>(start + i)] = nme_percent(px, s.landmarks, ds.protocol, s.bw, s.bh);
    }
  }
  return nmes;
}

}  // namespace

EvalReport evaluate(const Predictor& predict, const Dataset& ds, int input_size,
                    double failure_threshold) {
  return score(score_samples(predict, ds, input_size, 16), ds, failure_threshold);
}

EvalReport evaluate(VanillaNet& net, const Dataset& ds, double failure_threshold) {
  if (net.config().landmarks != ds.protocol.landmarks)
    throw ConfigError("network regresses " + std::to_string(net.config().landmarks) +
                      " landmarks, dataset protocol '" + ds.protocol.id + "' has " +
                      std::to_string(ds.protocol.landmarks));
  return evaluate([&](const Tensor& images) { return net.predict_pixels(images); }, ds,
                  net.config().input_size, failure_threshold);
}

EvalReport evaluate(MultiHeadNet& net, const std::string& head_id, const Dataset& ds,
                    double failure_threshold) {
  if (!net.has_head(head_id)) throw RoutingError("unknown head '" + head_id + "'");
  if (net.head_landmarks(head_id) != ds.protocol.landmarks)
    throw ConfigError("head '" + head_id + "' landmark count does not match dataset protocol");
  return evaluate([&](const Tensor& images) { return net.predict_pixels(images, head_id); }, ds,
                  net.config().backbone.input_size, failure_threshold);
}

EvalReport bruteforce_best_of_k(VanillaNet& net, const Dataset& ds, double failure_threshold) {
  int k = 1;
  for (Layer* l : net.layers())
    if (auto* bf = dynamic_cast<BruteForceSepBN*>(l)) k = std::max(k, bf->branch_count());

  std::vector<double> best;
  for (int branch = 0; branch < k; ++branch) {
    auto predict = [&](const Tensor& images) {
      Ctx ctx;
      ctx.mode = Mode::kEval;
      ctx.forced_branch = branch;
      return offsets_to_pixels(net.forward(images, ctx), net.config().input_size);
    };
    std::vector<double> nmes = score_samples(predict, ds, net.config().input_size, 16);
    if (best.empty()) {
      best = std::move(nmes);
    } else {
      for (size_t i = 0; i < best.size(); ++i) best[i] = std::min(best[i], nmes[i]);
    }
  }
  EvalReport r = score(best, ds, failure_threshold);
  r.oracle_assisted = k > 1;
  return r;
}

json report_to_json(const EvalReport& r) {
  json dom = json::object();
  for (const auto& [d, v] : r.per_domain_nme) dom[std::to_string(d)] = v;
  json counts = json::object();
  for (const auto& [d, c] : r.per_domain_count) counts[std::to_string(d)] = c;
  return json{{"overall_nme", r.overall_nme},
              {"failure_rate", r.failure_rate},
              {"failure_threshold", r.failure_threshold},
              {"sample_count", r.sample_count},
              {"per_domain_nme", dom},
              {"per_domain_count", counts},
              {"oracle_assisted", r.oracle_assisted},
              {"config", r.config_echo}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.overall_nme = j.at("overall_nme").get<double>();
  r.failure_rate = j.at("failure_rate").get<double>();
  r.failure_threshold = j.at("failure_threshold").get<double>();
  r.sample_count = j.at("sample_count").get<int>();
  for (auto& [k, v] : j.at("per_domain_nme").items()) r.per_domain_nme[std::stoi(k)] = v.get<double>();
  for (auto& [k, v] : j.at("per_domain_count").items()) r.per_domain_count[std::stoi(k)] = v.get<int>();
  r.oracle_assisted = j.at("oracle_assisted").get<bool>();
  r.config_echo = j.value("config", json());
  return r;
}

void emit_report(const EvalReport& r, const std::string& path, const std::string& format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report '" + path + "'");
  if (format == "json") {
    out << report_to_json(r).dump(2) << "\n";
  } else if (format == "csv") {
    char buf[64];
    auto fmt = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    out << "metric,value,domain\n";
    out << "nme," << fmt(r.overall_nme) << ",\n";
    out << "failure_rate," << fmt(r.failure_rate) << ",\n";
    out << "sample_count," << r.sample_count << ",\n";
    for (const auto& [d, v] : r.per_domain_nme)
      out << "nme," << fmt(v) << "," << d << "\n";
  } else {
    throw ConfigError("unknown report format '" + format + "' (expected json or csv)");
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace sepbn
