#pragma once

// Artifact-producing pipeline stages behind the command-line tool. Every
// stage writes under one output directory and is byte-deterministic.
//
//   generate  -> cohort.jsonl, cohort.manifest.json
//   train     -> config.json, train.json, seed_<s>/{checkpoint.json,checkpoint.bin,trace.csv,split.json}
//   evaluate  -> metrics_<model>.csv, metrics_<model>_test_ood.csv, metrics_<model>.json
//   saliency  -> saliency.csv, saliency.json
//   baseline  -> metrics_{gbt_baseline,mean_predictor}[_test_ood].csv, matching .json, gbt/seed_<s>.json
//   report    -> report.txt, report.json, saliency.csv, metrics CSVs of every merged model

#include <string>
#include <vector>

#include <json.hpp>

#include "cdr/cohort.hpp"
#include "cdr/gbt.hpp"
#include "cdr/metrics.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

// "erm_ablation" when only the causal head is supervised, else "causal_network".
std::string model_tag(const RunConfig& config);

void run_generate(const CohortConfig& config, const std::string& out_dir);

ProtocolResult run_train(const RunConfig& config, const std::string& out_dir);

// Reads config.json and the per-seed checkpoints and splits of a train run.
RunConfig load_run_config(const std::string& run_dir);
std::vector<MetricsReport> run_evaluate(const std::string& run_dir);
std::vector<SaliencyTable> run_saliency(const std::string& run_dir);

BaselineResult run_baseline(const RunConfig& config, const std::string& out_dir);

// Merges metrics_*.json and saliency.json found in `inputs` (in order) and
// emits the combined report under out_dir.
ReportInputs run_report(const std::vector<std::string>& inputs, const std::string& out_dir);

}  // namespace cdr
