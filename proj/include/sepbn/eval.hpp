#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sepbn/data.hpp"
#include "sepbn/model.hpp"

namespace sepbn {

// NME(%) = (1/L) sum_j ||p_j - g_j|| / d * 100, with d the normalizer from
// the protocol rule (sqrt(bw*bh) or ground-truth inter-ocular distance).
double nme_percent(const std::vector<double>& pred, const std::vector<double>& gt,
                   const ProtocolSpec& proto, double bw, double bh);

double failure_rate_percent(const std::vector<double>& nmes, double threshold_percent);

struct EvalReport {
  double overall_nme = 0.0;
  double failure_rate = 0.0;
  double failure_threshold = 10.0;
  int sample_count = 0;
  std::map<int, double> per_domain_nme;
  std::map<int, int> per_domain_count;
  bool oracle_assisted = false;
  std::vector<double> per_sample;  // in dataset order, not serialized
  nlohmann::json config_echo;
};

// Maps crop-space pixel predictions back to the original image and scores
// them. `predict` takes a [N,3,S,S] batch and returns [N,2L] crop pixels.
using Predictor = std::function<Tensor(const Tensor& images)>;

EvalReport evaluate(const Predictor& predict, const Dataset& ds, int input_size,
                    double failure_threshold = 10.0);
EvalReport evaluate(VanillaNet& net, const Dataset& ds, double failure_threshold = 10.0);
EvalReport evaluate(MultiHeadNet& net, const std::string& head_id, const Dataset& ds,
                    double failure_threshold = 10.0);

// Brute-force protocol: forward each sample once per branch (forced routing)
// and keep the best NME. Flagged oracle-assisted in the report.
EvalReport bruteforce_best_of_k(VanillaNet& net, const Dataset& ds,
                                double failure_threshold = 10.0);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
void emit_report(const EvalReport& r, const std::string& path, const std::string& format);

// Worker-thread cap for evaluation, from SEPBN_THREADS (default 1).
int eval_thread_cap();

}  // namespace sepbn
