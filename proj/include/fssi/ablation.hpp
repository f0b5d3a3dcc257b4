#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fssi/backbone.hpp"
#include "fssi/config.hpp"
#include "fssi/dataset.hpp"
#include "fssi/manifest.hpp"

namespace fssi {

// SC, DSC, SC+CA, DSC+CA derived from `base` (channels, kernel, reduction and
// seed are kept; variant and use_ca are overridden).
std::vector<ModelConfig> ablation_configs(const ModelConfig& base);

struct AblationRow {
  std::string variant;
  std::size_t parameters = 0;  // recomputed from the config
  double accuracy = 0.0;
  double std_accuracy = 0.0;
  double f_score = 0.0;
  double std_f = 0.0;
  double train_seconds = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;  // set when training or evaluation failed
};

struct AblationReport {
  std::vector<AblationRow> rows;

  bool complete() const;
  const AblationRow* find(const std::string& variant) const;
};

struct AblationData {
  Dataset train;
  Dataset enroll;
  Dataset test;
};

AblationData load_ablation_data(const Manifest& manifest);

using AblationProgress = std::function<void(const std::string& variant, const EpochRecord&)>;

// Trains the four variants from `seed` and scores each with evaluate_episodic
// on identical evaluation episodes. A failing variant is recorded with ok=false
// and the remaining rows are left unrun.
AblationReport run_ablation(const AblationData& data, const RunConfig& base, std::uint64_t seed,
                            const AblationProgress& progress = {});

// Variant | NoP | Acc | F | train s | seed.
std::string format_ablation_table(const AblationReport& report);

struct AblationSummary {
  std::vector<std::string> variants;
  std::vector<double> mean_accuracy;  // over reports, per variant
  std::vector<std::string> violations;  // "seed 2: DSC+CA 0.91 < DSC 0.93"
};

// Checks accuracy(X+CA) >= accuracy(X) per seed and on average.
AblationSummary summarize_ablation(const std::vector<AblationReport>& reports);
std::string format_ablation_summary(const AblationSummary& summary);

}  // namespace fssi
