#include "sepbn/config.hpp"

#include <fstream>

using nlohmann::json;

namespace sepbn {

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

json sepbn_params_to_json(const SepBNParams& p) {
  return json{{"k", p.k},
              {"g", p.g},
              {"t", p.t},
              {"reduction", p.reduction},
              {"aggregation", p.aggregation == Aggregation::kSoft ? "soft" : "hard"}};
}

SepBNParams sepbn_params_from_json(const json& j) {
  check_keys(j, {"k", "g", "t", "reduction", "aggregation"}, "model.sepbn");
  SepBNParams p;
  p.k = get_or(j, "k", p.k);
  p.g = get_or(j, "g", p.g);
  p.t = get_or(j, "t", p.t);
  p.reduction = get_or(j, "reduction", p.reduction);
  const std::string agg = get_or<std::string>(j, "aggregation", "soft");
  if (agg == "soft")
    p.aggregation = Aggregation::kSoft;
  else if (agg == "hard")
    p.aggregation = Aggregation::kHard;
  else
    throw ConfigError("model.sepbn.aggregation must be 'soft' or 'hard'");
  return p;
}

std::vector<NormKind> norm_mask_from_json(const json& j, size_t stages) {
  std::vector<NormKind> mask;
  if (j.is_string()) {
    mask.assign(stages, norm_kind_from_name(j.get<std::string>()));
  } else if (j.is_array()) {
    for (const auto& e : j) mask.push_back(norm_kind_from_name(e.get<std::string>()));
  } else {
    throw ConfigError("model.norm must be a string or an array of strings");
  }
  return mask;
}

json norm_mask_to_json(const std::vector<NormKind>& mask) {
  json arr = json::array();
  for (NormKind k : mask) arr.push_back(norm_kind_name(k));
  return arr;
}

void fill_vanilla_common(const json& j, VanillaConfig& cfg) {
  cfg.input_size = get_or(j, "input_size", cfg.input_size);
  if (j.contains("channels")) cfg.channels = j.at("channels").get<std::vector<int>>();
  cfg.hidden_width = get_or(j, "hidden_width", cfg.hidden_width);
  if (j.contains("sepbn")) cfg.sepbn = sepbn_params_from_json(j.at("sepbn"));
  if (j.contains("norm")) cfg.norm_mask = norm_mask_from_json(j.at("norm"), cfg.channels.size());
  if (cfg.norm_mask.empty()) cfg.norm_mask.assign(cfg.channels.size(), NormKind::kBatchNorm);
}

}  // namespace

json vanilla_to_json(const VanillaConfig& cfg) {
  return json{{"type", "vanilla"},
              {"input_size", cfg.input_size},
              {"channels", cfg.channels},
              {"landmarks", cfg.landmarks},
              {"hidden_width", cfg.hidden_width},
              {"norm", norm_mask_to_json(cfg.norm_mask)},
              {"sepbn", sepbn_params_to_json(cfg.sepbn)}};
}

VanillaConfig vanilla_from_json(const json& j) {
  check_keys(j, {"type", "input_size", "channels", "landmarks", "hidden_width", "norm", "sepbn"},
             "model");
  VanillaConfig cfg = VanillaConfig::desk(5);
  fill_vanilla_common(j, cfg);
  cfg.landmarks = get_or(j, "landmarks", cfg.landmarks);
  cfg.validate();
  return cfg;
}

json multihead_to_json(const MultiHeadConfig& cfg) {
  json heads = json::array();
  for (const auto& h : cfg.heads)
    heads.push_back(json{{"protocol", h.protocol_id}, {"landmarks", h.landmarks}});
  json j = vanilla_to_json(cfg.backbone);
  j["type"] = "multihead";
  j.erase("landmarks");
  j["heads"] = heads;
  j["head_hidden"] = cfg.head_hidden;
  return j;
}

MultiHeadConfig multihead_from_json(const json& j) {
  check_keys(j,
             {"type", "input_size", "channels", "hidden_width", "norm", "sepbn", "heads",
              "head_hidden"},
             "model");
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5);
  fill_vanilla_common(j, cfg.backbone);
  cfg.head_hidden = get_or(j, "head_hidden", cfg.head_hidden);
  if (!j.contains("heads")) throw ConfigError("multihead model needs a 'heads' array");
  for (const auto& h : j.at("heads")) {
    check_keys(h, {"protocol", "landmarks"}, "model.heads[]");
    cfg.heads.push_back(HeadSpec{h.at("protocol").get<std::string>(), h.at("landmarks").get<int>()});
  }
  return cfg;
}

json train_to_json(const TrainConfig& cfg) {
  return json{{"epochs", cfg.schedule.total_epochs},
              {"warmup_epochs", cfg.schedule.warmup_epochs},
              {"lr_max", cfg.schedule.lr_max},
              {"lr_min", cfg.schedule.lr_min},
              {"tau_start", cfg.schedule.tau_start},
              {"tau_end", cfg.schedule.tau_end},
              {"tau_anneal_epochs", cfg.schedule.tau_anneal_epochs},
              {"momentum", cfg.optimizer.momentum},
              {"weight_decay", cfg.optimizer.weight_decay},
              {"batch_size", cfg.batch_size},
              {"eval_every", cfg.eval_every},
              {"failure_threshold", cfg.failure_threshold},
              {"backbone_lr", cfg.backbone_lr}};
}

TrainConfig train_from_json(const json& j) {
  check_keys(j,
             {"epochs", "warmup_epochs", "lr_max", "lr_min", "tau_start", "tau_end",
              "tau_anneal_epochs", "momentum", "weight_decay", "batch_size", "eval_every",
              "failure_threshold", "backbone_lr"},
             "train");
  TrainConfig cfg = desk_train_config(1);
  cfg.schedule.total_epochs = get_or(j, "epochs", cfg.schedule.total_epochs);
  cfg.schedule.warmup_epochs = get_or(j, "warmup_epochs", cfg.schedule.warmup_epochs);
  cfg.schedule.lr_max = get_or(j, "lr_max", cfg.schedule.lr_max);
  cfg.schedule.lr_min = get_or(j, "lr_min", cfg.schedule.lr_min);
  cfg.schedule.tau_start = get_or(j, "tau_start", cfg.schedule.tau_start);
  cfg.schedule.tau_end = get_or(j, "tau_end", cfg.schedule.tau_end);
  cfg.schedule.tau_anneal_epochs = get_or(j, "tau_anneal_epochs", cfg.schedule.tau_anneal_epochs);
  cfg.optimizer.momentum = get_or(j, "momentum", cfg.optimizer.momentum);
  cfg.optimizer.weight_decay = get_or(j, "weight_decay", cfg.optimizer.weight_decay);
  cfg.batch_size = get_or(j, "batch_size", cfg.batch_size);
  cfg.eval_every = get_or(j, "eval_every", cfg.eval_every);
  cfg.failure_threshold = get_or(j, "failure_threshold", cfg.failure_threshold);
  cfg.backbone_lr = get_or(j, "backbone_lr", cfg.backbone_lr);
  cfg.validate();
  return cfg;
}

json augment_to_json(const AugmentConfig& cfg) {
  return json{{"rot_deg", cfg.rot_deg},
              {"bbox_jitter_frac", cfg.bbox_jitter_frac},
              {"hflip_prob", cfg.hflip_prob},
              {"shear_max", cfg.shear_max}};
}

AugmentConfig augment_from_json(const json& j) {
  check_keys(j, {"rot_deg", "bbox_jitter_frac", "hflip_prob", "shear_max"}, "augment");
  AugmentConfig cfg;
  cfg.rot_deg = get_or(j, "rot_deg", cfg.rot_deg);
  cfg.bbox_jitter_frac = get_or(j, "bbox_jitter_frac", cfg.bbox_jitter_frac);
  cfg.hflip_prob = get_or(j, "hflip_prob", cfg.hflip_prob);
  cfg.shear_max = get_or(j, "shear_max", cfg.shear_max);
  cfg.validate();
  return cfg;
}

json synth_to_json(const SynthConfig& cfg) {
  return json{{"n_samples", cfg.n_samples},
              {"image_size", cfg.image_size},
              {"landmarks", cfg.landmarks},
              {"domain_weights", cfg.domain_weights},
              {"yaw_centers_deg", cfg.yaw_centers_deg},
              {"yaw_jitter_deg", cfg.yaw_jitter_deg},
              {"brightness", cfg.brightness},
              {"contrast", cfg.contrast},
              {"landmark_noise_px", cfg.landmark_noise_px},
              {"protocol_id", cfg.protocol_id}};
}

SynthConfig synth_from_json(const json& j) {
  check_keys(j,
             {"n_samples", "image_size", "landmarks", "domain_weights", "yaw_centers_deg",
              "yaw_jitter_deg", "brightness", "contrast", "landmark_noise_px", "protocol_id"},
             "synth");
  SynthConfig cfg;
  cfg.n_samples = get_or(j, "n_samples", cfg.n_samples);
  cfg.image_size = get_or(j, "image_size", cfg.image_size);
  cfg.landmarks = get_or(j, "landmarks", cfg.landmarks);
  if (j.contains("domain_weights"))
    cfg.domain_weights = j.at("domain_weights").get<std::vector<double>>();
  if (j.contains("yaw_centers_deg"))
    cfg.yaw_centers_deg = j.at("yaw_centers_deg").get<std::vector<double>>();
  cfg.yaw_jitter_deg = get_or(j, "yaw_jitter_deg", cfg.yaw_jitter_deg);
  if (j.contains("brightness")) cfg.brightness = j.at("brightness").get<std::vector<double>>();
  if (j.contains("contrast")) cfg.contrast = j.at("contrast").get<std::vector<double>>();
  cfg.landmark_noise_px = get_or(j, "landmark_noise_px", cfg.landmark_noise_px);
  cfg.protocol_id = get_or<std::string>(j, "protocol_id", cfg.protocol_id);
  cfg.validate();
  return cfg;
}

json gradcheck_to_json(const GradcheckConfig& cfg) {
  json norms = json::array();
  for (NormKind k : cfg.norms) norms.push_back(norm_kind_name(k));
  return json{{"batch", cfg.batch},
              {"tolerance", cfg.tolerance},
              {"samples_per_param", cfg.samples_per_param},
              {"norms", norms}};
}

GradcheckConfig gradcheck_from_json(const json& j) {
  check_keys(j, {"batch", "tolerance", "samples_per_param", "norms"}, "gradcheck");
  GradcheckConfig cfg;
  cfg.batch = get_or(j, "batch", cfg.batch);
  cfg.tolerance = get_or(j, "tolerance", cfg.tolerance);
  cfg.samples_per_param = get_or(j, "samples_per_param", cfg.samples_per_param);
  if (j.contains("norms")) {
    cfg.norms.clear();
    for (const auto& e : j.at("norms")) cfg.norms.push_back(norm_kind_from_name(e.get<std::string>()));
  }
  if (cfg.batch < 1) throw ConfigError("gradcheck.batch must be >= 1");
  return cfg;
}

RunConfig run_config_from_json(const json& doc) {
  check_keys(doc, {"seed", "model", "train", "augment", "synth", "gradcheck"}, "config");
  RunConfig cfg;
  cfg.seed = get_or<uint64_t>(doc, "seed", cfg.seed);
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    const std::string type = get_or<std::string>(m, "type", "vanilla");
    cfg.has_model = true;
    if (type == "vanilla") {
      cfg.vanilla = vanilla_from_json(m);
    } else if (type == "multihead") {
      cfg.is_multihead = true;
      cfg.multihead = multihead_from_json(m);
    } else {
      throw ConfigError("model.type must be 'vanilla' or 'multihead'");
    }
  }
  if (doc.contains("train")) cfg.train = train_from_json(doc.at("train"));
  else cfg.train = desk_train_config(cfg.seed);
  if (doc.contains("augment")) cfg.train.augment = augment_from_json(doc.at("augment"));
  if (doc.contains("synth")) cfg.synth = synth_from_json(doc.at("synth"));
  if (doc.contains("gradcheck")) cfg.gradcheck = gradcheck_from_json(doc.at("gradcheck"));
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return run_config_from_json(doc);
}

json run_config_to_json(const RunConfig& cfg) {
  json doc;
  doc["seed"] = cfg.seed;
  if (cfg.has_model)
    doc["model"] = cfg.is_multihead ? multihead_to_json(cfg.multihead) : vanilla_to_json(cfg.vanilla);
  doc["train"] = train_to_json(cfg.train);
  doc["augment"] = augment_to_json(cfg.train.augment);
  doc["synth"] = synth_to_json(cfg.synth);
  doc["gradcheck"] = gradcheck_to_json(cfg.gradcheck);
  return doc;
}

}  // namespace sepbn
