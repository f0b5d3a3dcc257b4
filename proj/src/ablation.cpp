#include "fssi/ablation.hpp"

#include <chrono>
#include <cstdio>
#include <exception>

#include "fssi/episodic.hpp"
#include "fssi/identification.hpp"

namespace fssi {
namespace {

std::string fmt(const char* format, double a, double b) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a, b);
  return buf;
}

// "DSC+CA 0.9100 < DSC 0.9300"
std::string ordering_violation(const std::string& with_ca, double a, const std::string& plain,
                               double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s %.4f < %s %.4f", with_ca.c_str(), a, plain.c_str(), b);
  return buf;
}

}  // namespace

std::vector<ModelConfig> ablation_configs(const ModelConfig& base) {
  std::vector<ModelConfig> out;
  for (bool ca : {false, true}) {
    for (ConvVariant v : {ConvVariant::kStandard, ConvVariant::kDepthwiseSeparable}) {
      ModelConfig c = base;
      c.variant = v;
      c.use_ca = ca;
      out.push_back(c);
    }
  }
  return out;
}

bool AblationReport::complete() const {
  if (rows.size() != 4) return false;
  for (const AblationRow& r : rows) {
    if (!r.ok) return false;
  }
  return true;
}

const AblationRow* AblationReport::find(const std::string& variant) const {
  for (const AblationRow& r : rows) {
    if (r.variant == variant) return &r;
  }
  return nullptr;
}

AblationData load_ablation_data(const Manifest& manifest) {
  return {load_split(manifest, Split::kTrain), load_split(manifest, Split::kEnroll),
          load_split(manifest, Split::kTest)};
}

AblationReport run_ablation(const AblationData& data, const RunConfig& base, std::uint64_t seed,
                            const AblationProgress& progress) {
  RunConfig run = base;
  run.set_seed(seed);
  AblationReport report;
  bool failed = false;
  for (const ModelConfig& config : ablation_configs(run.model)) {
    AblationRow row;
    row.variant = config.variant_name();
    row.parameters = count_parameters(config);
    row.seed = seed;
    if (failed) {
      row.error = "not run";
      report.rows.push_back(row);
      continue;
    }
    try {
      const auto start = std::chrono::steady_clock::now();
      EpochCallback on_epoch;
      if (progress) on_epoch = [&](const EpochRecord& r) { progress(row.variant, r); };
      const TrainResult trained = train(data.train, config, run.train, on_epoch);
      row.train_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      Rng eval_rng(seed);
      const EpisodicScores scores =
          evaluate_episodic(trained.model, data.enroll, data.test, run.eval, eval_rng);
      row.accuracy = scores.mean_accuracy;
      row.std_accuracy = scores.std_accuracy;
      row.f_score = scores.mean_f;
      row.std_f = scores.std_f;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
      failed = true;
    }
    report.rows.push_back(row);
  }
  return report;
}

std::string format_ablation_table(const AblationReport& report) {
  std::string out = "Variant   NoP        Acc              F-score          Train(s)  Seed\n";
  for (const AblationRow& r : report.rows) {
    char line[256];
    if (r.ok) {
      std::snprintf(line, sizeof line, "%-9s %-10zu %-16s %-16s %-9.1f %llu\n", r.variant.c_str(),
                    r.parameters, fmt("%.4f+-%.4f", r.accuracy, r.std_accuracy).c_str(),
                    fmt("%.4f+-%.4f", r.f_score, r.std_f).c_str(), r.train_seconds,
                    static_cast<unsigned long long>(r.seed));
    } else {
      std::snprintf(line, sizeof line, "%-9s %-10zu FAILED: %s\n", r.variant.c_str(), r.parameters,
                    r.error.c_str());
    }
    out += line;
  }
  return out;
}

AblationSummary summarize_ablation(const std::vector<AblationReport>& reports) {
  AblationSummary s;
  s.variants = {"SC", "DSC", "SC+CA", "DSC+CA"};
  s.mean_accuracy.assign(s.variants.size(), 0.0);
  std::vector<std::size_t> counts(s.variants.size(), 0);
  for (const AblationReport& report : reports) {
    for (std::size_t v = 0; v < s.variants.size(); ++v) {
      const AblationRow* row = report.find(s.variants[v]);
      if (row && row->ok) {
        s.mean_accuracy[v] += row->accuracy;
        ++counts[v];
      }
    }
    for (const char* plain : {"SC", "DSC"}) {
      const std::string with_ca = std::string(plain) + "+CA";
      const AblationRow* a = report.find(plain);
      const AblationRow* b = report.find(with_ca);
      const unsigned long long seed = report.rows.empty() ? 0 : report.rows.front().seed;
      if (!a || !b || !a->ok || !b->ok) {
        s.violations.push_back("seed " + std::to_string(seed) + ": " + with_ca + " vs " + plain +
                               " incomplete");
      } else if (b->accuracy < a->accuracy) {
        s.violations.push_back("seed " + std::to_string(seed) + ": " +
                               ordering_violation(with_ca, b->accuracy, plain, a->accuracy));
      }
    }
  }
  for (std::size_t v = 0; v < s.variants.size(); ++v) {
    if (counts[v]) s.mean_accuracy[v] /= static_cast<double>(counts[v]);
  }
  for (std::size_t plain = 0; plain < 2; ++plain) {
    if (s.mean_accuracy[plain + 2] < s.mean_accuracy[plain]) {
      s.violations.push_back("mean: " + ordering_violation(s.variants[plain + 2],
                                                           s.mean_accuracy[plain + 2],
                                                           s.variants[plain],
                                                           s.mean_accuracy[plain]));
    }
  }
  return s;
}

std::string format_ablation_summary(const AblationSummary& summary) {
  std::string out = "Variant   mean Acc\n";
  for (std::size_t v = 0; v < summary.variants.size(); ++v) {
    char line[64];
    std::snprintf(line, sizeof line, "%-9s %.4f\n", summary.variants[v].c_str(),
                  summary.mean_accuracy[v]);
    out += line;
  }
  if (summary.violations.empty()) {
    out += "CA ordering holds for every seed\n";
  } else {
    for (const std::string& v : summary.violations) out += "VIOLATION " + v + "\n";
  }
  return out;
}

}  // namespace fssi
