#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sepbn/checkpoint.hpp"
#include "sepbn/eval.hpp"
#include "sepbn/ops.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sepbn;

namespace {

std::string manifest_of(const std::string& data) {
  if (fs::is_directory(data)) return (fs::path(data) / "manifest.csv").string();
  return data;
}

void write_json(const json& doc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << doc.dump(2) << "\n";
}

void write_run_echo(const std::string& dir, const std::string& command, const RunConfig& cfg,
                    const json& extra) {
  fs::create_directories(dir);
  json doc{{"command", command}, {"seed", cfg.seed}, {"config", run_config_to_json(cfg)}};
  for (auto& [k, v] : extra.items()) doc[k] = v;
  write_json(doc, (fs::path(dir) / "run.json").string());
}

int cmd_gen_data(const std::string& config_path, const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  SynthConfig synth = cfg.synth;
  synth.seed = cfg.seed;
  synth_generate_to(synth, out);
  write_run_echo(out, "gen-data", cfg, json{{"out", out}});
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  if (!cfg.has_model || cfg.is_multihead)
    throw ConfigError("train needs a model section of type 'vanilla'");
  Dataset ds = load_dataset(manifest_of(data));
  if (ds.protocol.landmarks != cfg.vanilla.landmarks)
    throw ConfigError("model regresses " + std::to_string(cfg.vanilla.landmarks) +
                      " landmarks but dataset protocol has " +
                      std::to_string(ds.protocol.landmarks));

  fs::create_directories(out);
  Rng rng(cfg.seed);
  VanillaNet net(cfg.vanilla, rng);
  Sgd opt(cfg.train.optimizer);
  opt.attach(net.params());

  std::vector<EpochMetrics> metrics;
  const int total = cfg.train.schedule.total_epochs;
  for (int epoch = 0; epoch < total; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(epoch, cfg.train.schedule);
    m.tau = tau_schedule(epoch, cfg.train.schedule);
    m.loss = train_epoch(net, ds, opt, cfg.train, epoch);
    const bool eval_now = cfg.train.eval_every > 0 &&
                          ((epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == total);
    if (eval_now) m.nme = evaluate(net, ds, cfg.train.failure_threshold).overall_nme;
    metrics.push_back(m);
    std::printf("epoch %3d  lr %.3e  tau %6.2f  loss %.6f  nme %s\n", epoch, m.lr, m.tau, m.loss,
                std::isnan(m.nme) ? "-" : std::to_string(m.nme).c_str());
  }
  write_metrics_csv(metrics, (fs::path(out) / "metrics.csv").string());
  RunState st{total, tau_schedule(total, cfg.train.schedule), cfg.seed};
  checkpoint_save((fs::path(out) / "checkpoint.bin").string(), net, cfg.train, opt, st);
  write_run_echo(out, "train", cfg, json{{"data", data}, {"out", out}});
  return 0;
}

int cmd_cnt_train(const std::string& config_path, const std::vector<std::string>& data,
                  const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  if (!cfg.has_model || !cfg.is_multihead)
    throw ConfigError("cnt-train needs a model section of type 'multihead'");
  if (data.size() < 2) throw ConfigError("cnt-train needs at least two --data sets");

  std::vector<Dataset> sets;
  for (const auto& d : data) sets.push_back(load_dataset(manifest_of(d)));
  std::vector<const Dataset*> refs;
  for (auto& ds : sets) refs.push_back(&ds);

  fs::create_directories(out);
  Rng rng(cfg.seed);
  MultiHeadNet net(cfg.multihead, rng);
  Sgd opt(cfg.train.optimizer);
  opt.attach(net.params());

  std::vector<EpochMetrics> metrics;
  const int total = cfg.train.schedule.total_epochs;
  for (int epoch = 0; epoch < total; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(epoch, cfg.train.schedule);
    m.tau = tau_schedule(epoch, cfg.train.schedule);
    Stage1Epoch se = cnt_stage1_epoch(net, refs, opt, cfg.train, epoch);
    m.loss = se.loss;
    metrics.push_back(m);
    std::printf("epoch %3d  lr %.3e  tau %6.2f  loss %.6f\n", epoch, m.lr, m.tau, m.loss);
  }
  write_metrics_csv(metrics, (fs::path(out) / "metrics.csv").string());
  RunState st{total, tau_schedule(total, cfg.train.schedule), cfg.seed};
  checkpoint_save((fs::path(out) / "checkpoint.bin").string(), net, cfg.train, opt, st);
  json extra{{"out", out}};
  extra["data"] = data;
  write_run_echo(out, "cnt-train", cfg, extra);
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint,
                 const std::string& data, const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  Dataset ds = load_dataset(manifest_of(data));

  LoadedCheckpoint loaded = checkpoint_load(checkpoint);
  if (!loaded.multihead) throw ConfigError("finetune expects a multihead checkpoint");
  MultiHeadNet& net = *loaded.multihead;
  if (!net.has_head(ds.protocol.id))
    throw ConfigError("checkpoint has no head for protocol '" + ds.protocol.id + "'");
  net.drop_other_heads(ds.protocol.id);

  fs::create_directories(out);
  TrainConfig tc = cfg.train;
  Sgd opt(tc.optimizer);
  opt.attach(net.params());

  std::vector<EpochMetrics> metrics;
  const int total = tc.schedule.total_epochs;
  for (int epoch = 0; epoch < total; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(epoch, tc.schedule);
    m.tau = tau_schedule(epoch, tc.schedule);
    m.loss = finetune_epoch(net, ds.protocol.id, ds, opt, tc, epoch);
    const bool eval_now = tc.eval_every > 0 &&
                          ((epoch + 1) % tc.eval_every == 0 || epoch + 1 == total);
    if (eval_now) m.nme = evaluate(net, ds.protocol.id, ds, tc.failure_threshold).overall_nme;
    metrics.push_back(m);
    std::printf("epoch %3d  lr %.3e  tau %6.2f  loss %.6f  nme %s\n", epoch, m.lr, m.tau, m.loss,
                std::isnan(m.nme) ? "-" : std::to_string(m.nme).c_str());
  }
  write_metrics_csv(metrics, (fs::path(out) / "metrics.csv").string());
  RunState st{total, tau_schedule(total, tc.schedule), cfg.seed};
  checkpoint_save((fs::path(out) / "checkpoint.bin").string(), net, tc, opt, st);
  write_run_echo(out, "finetune", cfg,
                 json{{"data", data}, {"checkpoint", checkpoint}, {"out", out}});
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& report,
             bool best_of_k) {
  LoadedCheckpoint loaded = checkpoint_load(checkpoint);
  Dataset ds = load_dataset(manifest_of(data));

  EvalReport r;
  if (loaded.vanilla) {
    r = best_of_k ? bruteforce_best_of_k(*loaded.vanilla, ds, loaded.train.failure_threshold)
                  : evaluate(*loaded.vanilla, ds, loaded.train.failure_threshold);
  } else {
    if (best_of_k) throw ConfigError("--best-of-k applies to vanilla checkpoints only");
    r = evaluate(*loaded.multihead, ds.protocol.id, ds, loaded.train.failure_threshold);
  }
  r.config_echo = json{{"checkpoint", checkpoint}, {"data", data}};

  const std::string format = fs::path(report).extension() == ".csv" ? "csv" : "json";
  if (!fs::path(report).parent_path().empty())
    fs::create_directories(fs::path(report).parent_path());
  emit_report(r, report, format);
  std::printf("nme %.4f%%  failure %.2f%%  samples %d%s\n", r.overall_nme, r.failure_rate,
              r.sample_count, r.oracle_assisted ? "  (best-of-k oracle)" : "");

  RunConfig echo;
  echo.seed = loaded.state.seed;
  echo.train = loaded.train;
  const fs::path dir = fs::path(report).parent_path();
  write_run_echo(dir.empty() ? "." : dir.string(), "eval", echo,
                 json{{"checkpoint", checkpoint},
                      {"data", data},
                      {"report", report},
                      {"best_of_k", best_of_k}});
  return 0;
}

int cmd_gradcheck(const std::string& config_path) {
  RunConfig cfg = load_run_config(config_path);
  const GradcheckConfig& gc = cfg.gradcheck;
  // no --out directory: the reproducibility echo goes to stdout
  std::printf("run-echo: %s\n",
              json{{"command", "gradcheck"}, {"seed", cfg.seed}, {"config", run_config_to_json(cfg)}}
                  .dump()
                  .c_str());

  bool all_ok = true;
  for (NormKind kind : gc.norms) {
    VanillaConfig vc =
        cfg.has_model && !cfg.is_multihead ? cfg.vanilla : VanillaConfig::desk(5, kind, 32);
    vc.norm_mask.assign(static_cast<size_t>(vc.stages()), kind);
    if (kind == NormKind::kSepBN) vc.sepbn.aggregation = Aggregation::kSoft;

    Rng rng(cfg.seed);
    VanillaNet net(vc, rng, /*zero_final=*/false);
    net.set_tau(2.0);  // away from the tau=1 special case

    Rng data_rng = Rng(cfg.seed).split(7);
    Tensor images({gc.batch, 3, vc.input_size, vc.input_size});
    for (int64_t i = 0; i < images.numel(); ++i) images[i] = data_rng.uniform();
    Tensor targets({gc.batch, 2 * vc.landmarks});
    for (int64_t i = 0; i < targets.numel(); ++i) targets[i] = data_rng.uniform(-0.5, 0.5);

    std::vector<int> domains(static_cast<size_t>(gc.batch));
    for (auto& d : domains) d = static_cast<int>(data_rng.below(static_cast<uint64_t>(vc.sepbn.k)));
    Ctx ctx;
    ctx.mode = Mode::kTrain;
    ctx.domains = &domains;

    auto loss = [&]() {
      Tensor pred = net.forward(images, ctx);
      return ops::l1_loss(pred, targets, nullptr);
    };
    auto fwd_bwd = [&]() {
      net.zero_grad();
      Tensor pred = net.forward(images, ctx);
      Tensor grad;
      ops::l1_loss(pred, targets, &grad);
      net.backward(grad);
    };

    Rng pick_rng = Rng(cfg.seed).split(11);
    GradCheckReport report =
        grad_check(net.params(), loss, fwd_bwd, kGradCheckStep, gc.samples_per_param, pick_rng);

    std::printf("== norm variant: %s ==\n", norm_kind_name(kind));
    for (const auto& e : report.entries)
      std::printf("  %-36s checked %4d  max rel err %.3e\n", e.param.c_str(), e.checked,
                  e.max_rel_err);
    const bool ok = report.pass(gc.tolerance);
    std::printf("  -> max %.3e  tolerance %.1e  %s\n", report.max_rel_err(), gc.tolerance,
                ok ? "OK" : "FAIL");
    if (!ok) {
      std::printf("  first failure: %s\n", report.first_failure(gc.tolerance).c_str());
      all_ok = false;
    }
  }
  return all_ok ? 0 : 1;
}

int cmd_analyze_params(const std::string& checkpoint, const std::string& report) {
  LoadedCheckpoint loaded = checkpoint_load(checkpoint);
  std::vector<Layer*> layers =
      loaded.vanilla ? loaded.vanilla->layers() : loaded.multihead->layers();

  std::vector<SimilarityRow> rows;
  for (Layer* l : layers)
    if (auto row = norm_similarity(*l)) rows.push_back(*row);
  if (rows.empty()) throw ConfigError("checkpoint has no multi-set norm layers to analyze");

  if (!fs::path(report).parent_path().empty())
    fs::create_directories(fs::path(report).parent_path());
  std::ofstream out(report);
  if (!out) throw IoError("cannot write report '" + report + "'");
  out << "module,running_mean,running_var,scale,shift\n";
  char buf[64];
  auto cell = [&](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
  };
  for (const auto& r : rows) {
    out << r.module << "," << cell(r.running_mean) << "," << cell(r.running_var) << ","
        << cell(r.scale) << "," << cell(r.shift) << "\n";
    std::printf("%-24s rm %-10s rv %-10s scale %-10s shift %-10s\n", r.module.c_str(),
                cell(r.running_mean).substr(0, 8).c_str(), cell(r.running_var).substr(0, 8).c_str(),
                cell(r.scale).substr(0, 8).c_str(), cell(r.shift).substr(0, 8).c_str());
  }

  RunConfig echo;
  echo.seed = loaded.state.seed;
  echo.train = loaded.train;
  const fs::path dir = fs::path(report).parent_path();
  write_run_echo(dir.empty() ? "." : dir.string(), "analyze-params", echo,
                 json{{"checkpoint", checkpoint}, {"report", report}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Separable batch normalization landmark localization harness"};
  app.require_subcommand(1);

  std::string config, data, out, checkpoint, report;
  std::vector<std::string> data_list;
  bool best_of_k = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-domain dataset");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "Train a vanilla network on one dataset");
  train->add_option("--config", config)->required();
  train->add_option("--data", data)->required();
  train->add_option("--out", out)->required();

  auto* cnt = app.add_subcommand("cnt-train", "Cross-protocol stage-1 training");
  cnt->add_option("--config", config)->required();
  cnt->add_option("--data", data_list)->required();
  cnt->add_option("--out", out)->required();

  auto* ft = app.add_subcommand("finetune", "Cross-protocol stage-2 fine-tune");
  ft->add_option("--config", config)->required();
  ft->add_option("--checkpoint", checkpoint)->required();
  ft->add_option("--data", data)->required();
  ft->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--report", report)->required();
  ev->add_flag("--best-of-k", best_of_k);

  auto* gch = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  gch->add_option("--config", config)->required();

  auto* ap = app.add_subcommand("analyze-params", "Mapping/tracking parameter similarity");
  ap->add_option("--checkpoint", checkpoint)->required();
  ap->add_option("--report", report)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config, out);
    if (train->parsed()) return cmd_train(config, data, out);
    if (cnt->parsed()) return cmd_cnt_train(config, data_list, out);
    if (ft->parsed()) return cmd_finetune(config, checkpoint, data, out);
    if (ev->parsed()) return cmd_eval(checkpoint, data, report, best_of_k);
    if (gch->parsed()) return cmd_gradcheck(config);
    if (ap->parsed()) return cmd_analyze_params(checkpoint, report);
  } catch (const ConfigError& e) {
    std::cerr << json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << json{{"error", "io"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << json{{"error", "checkpoint"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << json{{"error", "divergence"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
