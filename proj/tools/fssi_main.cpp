// fssi: few-shot speaker identification command-line tool.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "fssi/ablation.hpp"
#include "fssi/backbone.hpp"
#include "fssi/config.hpp"
#include "fssi/episodic.hpp"
#include "fssi/errors.hpp"
#include "fssi/features.hpp"
#include "fssi/identification.hpp"
#include "fssi/manifest.hpp"
#include "fssi/synthetic.hpp"
#include "fssi/wav.hpp"

namespace {

using namespace fssi;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct CommonFlags {
  std::string config;
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config, bool manifest, bool seed, bool out,
                bool checkpoint) {
  if (config) cmd->add_option("--config", f.config, "key=value run configuration");
  if (manifest) cmd->add_option("--manifest", f.manifest, "CSV manifest (speaker_id,path,split)");
  if (seed) cmd->add_option("--seed", f.seed, "seed for every random draw");
  if (out) cmd->add_option("--out", f.out, "output path");
  if (checkpoint) cmd->add_option("--checkpoint", f.checkpoint, "model checkpoint");
}

// Config file first, then command-line flags on top.
RunConfig resolve(const CommonFlags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) c.set_seed(*f.seed);
  if (!f.manifest.empty()) c.manifest = f.manifest;
  if (!f.out.empty()) c.out = f.out;
  if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
  c.validate();
  return c;
}

const std::string& require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing ") + flag);
  return value;
}

std::vector<std::pair<std::string, const ManifestRow*>> split_rows(const Manifest& m, Split s) {
  std::vector<std::pair<std::string, const ManifestRow*>> out;
  for (const auto& row : m.rows) {
    if (row.split == s) out.emplace_back(row.speaker_id, &row);
  }
  return out;
}

int cmd_features(const std::vector<std::string>& inputs, const std::string& out) {
  if (inputs.size() != 1) throw ConfigError("features takes exactly one WAV file");
  const FeatureMatrix f = log_mel(read_wav(inputs[0]));
  if (out.empty()) {
    std::printf("%zu bins x %zu frames\n", f.bins, f.frames);
  } else {
    write_features(out, f);
  }
  return kOk;
}

int cmd_count_params(const CommonFlags& flags, bool all) {
  const RunConfig c = resolve(flags);
  const std::vector<ModelConfig> configs = all ? ablation_configs(c.model) : std::vector{c.model};
  for (const ModelConfig& m : configs) std::printf("%s %zu\n", m.variant_name().c_str(), count_parameters(m));
  return kOk;
}

int cmd_train(const CommonFlags& flags) {
  const RunConfig c = resolve(flags);
  const Manifest manifest = read_manifest(require(c.manifest, "--manifest"));
  const std::string& checkpoint = require(c.checkpoint, "--checkpoint");
  const Dataset train_set = load_split(manifest, Split::kTrain);
  std::ofstream log;
  if (!c.out.empty()) {
    log.open(c.out, std::ios::trunc);
    if (!log) throw DataError("cannot write " + c.out);
  }
  const TrainResult result = train(train_set, c.model, c.train, [&](const EpochRecord& r) {
    std::printf("%s\n", r.to_line().c_str());
    std::fflush(stdout);
    if (log) log << r.to_line() << '\n';
  });
  save_checkpoint(checkpoint, result.model);
  return kOk;
}

int cmd_enroll(const CommonFlags& flags) {
  const RunConfig c = resolve(flags);
  const Model model = load_checkpoint(require(c.checkpoint, "--checkpoint"));
  const Manifest manifest = read_manifest(require(c.manifest, "--manifest"));
  const EnrollmentDB db = enroll(model, load_split(manifest, Split::kEnroll));
  save_enrollment(require(c.out, "--out"), db);
  std::printf("enrolled %zu speakers\n", db.size());
  return kOk;
}

int cmd_identify(const CommonFlags& flags, const std::string& db_path,
                 const std::vector<std::string>& inputs) {
  const RunConfig c = resolve(flags);
  const Model model = load_checkpoint(require(c.checkpoint, "--checkpoint"));
  const EnrollmentDB db = load_enrollment(require(db_path, "--db"));
  std::vector<std::string> paths = inputs;
  if (!c.manifest.empty()) {
    const Manifest manifest = read_manifest(c.manifest);
    for (const auto& [id, row] : split_rows(manifest, Split::kTest)) {
      paths.push_back(manifest.resolve(*row).string());
    }
  }
  if (paths.empty()) throw ConfigError("identify needs WAV files or --manifest");
  std::ofstream out;
  if (!c.out.empty()) {
    out.open(c.out, std::ios::trunc);
    if (!out) throw DataError("cannot write " + c.out);
  }
  for (const std::string& p : paths) {
    const Prediction pred = identify(model, log_mel(read_wav(p)), db);
    char line[512];
    std::snprintf(line, sizeof line, "%s %s margin=%.6g", p.c_str(), pred.speaker_id.c_str(),
                  pred.margin);
    std::printf("%s\n", line);
    if (out) out << line << '\n';
  }
  return kOk;
}

int cmd_eval(const CommonFlags& flags) {
  const RunConfig c = resolve(flags);
  const Model model = load_checkpoint(require(c.checkpoint, "--checkpoint"));
  const Manifest manifest = read_manifest(require(c.manifest, "--manifest"));
  const Dataset enroll_pool = load_split(manifest, Split::kEnroll);
  const Dataset test_pool = load_split(manifest, Split::kTest);
  Rng rng(c.seed);
  const EpisodicScores scores = evaluate_episodic(model, enroll_pool, test_pool, c.eval, rng);
  std::fputs(format_episodic_table(scores).c_str(), stdout);
  if (!c.out.empty()) {
    write_metric_record(c.out, {{"accuracy", scores.mean_accuracy},
                                {"accuracy_std", scores.std_accuracy},
                                {"macro_f", scores.mean_f},
                                {"macro_f_std", scores.std_f},
                                {"repeats", static_cast<double>(scores.accuracies.size())}});
  }
  return kOk;
}

int cmd_synth(const CommonFlags& flags, CorpusSpec spec) {
  if (flags.seed) spec.seed = *flags.seed;
  const Manifest m = generate_synthetic_corpus(spec, require(flags.out, "--out"));
  std::printf("wrote %zu utterances to %s\n", m.rows.size(), flags.out.c_str());
  return kOk;
}

int cmd_ablation(const CommonFlags& flags, const std::vector<std::uint64_t>& seeds) {
  const RunConfig c = resolve(flags);
  const Manifest manifest = read_manifest(require(c.manifest, "--manifest"));
  const AblationData data = load_ablation_data(manifest);
  std::vector<std::uint64_t> run_seeds = seeds;
  if (run_seeds.empty()) run_seeds.push_back(c.seed);
  std::string text;
  std::vector<AblationReport> reports;
  bool complete = true;
  for (std::uint64_t seed : run_seeds) {
    reports.push_back(run_ablation(data, c, seed, [](const std::string& v, const EpochRecord& r) {
      std::fprintf(stderr, "%s %s\n", v.c_str(), r.to_line().c_str());
    }));
    const std::string table = format_ablation_table(reports.back());
    std::fputs(table.c_str(), stdout);
    std::fflush(stdout);
    text += table;
    complete = complete && reports.back().complete();
  }
  const std::string summary = format_ablation_summary(summarize_ablation(reports));
  std::fputs(summary.c_str(), stdout);
  text += summary;
  if (!c.out.empty()) {
    std::ofstream out(c.out, std::ios::trunc);
    if (!(out << text)) throw DataError("cannot write " + c.out);
  }
  return complete ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Batch activations exceed glibc's mmap threshold; without this every
  // episode maps, faults in and unmaps them again.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Few-shot speaker identification"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::vector<std::string> inputs;
  std::string db_path;
  bool all_variants = false;
  CorpusSpec corpus;
  std::vector<std::uint64_t> seeds;

  auto* features = app.add_subcommand("features", "log-mel features of one WAV file (FMX1)");
  features->add_option("wav", inputs, "input WAV")->required();
  add_common(features, flags, false, false, false, true, false);

  auto* count = app.add_subcommand("count-params", "learnable parameter count of a config");
  add_common(count, flags, true, false, false, false, false);
  count->add_flag("--all", all_variants, "all four ablation variants");

  auto* train_cmd = app.add_subcommand("train", "episodic training on the train split");
  add_common(train_cmd, flags, true, true, true, true, true);

  auto* enroll_cmd = app.add_subcommand("enroll", "enroll the enroll split into a database");
  add_common(enroll_cmd, flags, true, true, false, true, true);

  auto* identify_cmd = app.add_subcommand("identify", "nearest enrolled speaker per utterance");
  add_common(identify_cmd, flags, true, true, false, true, true);
  identify_cmd->add_option("--db", db_path, "enrollment database")->required();
  identify_cmd->add_option("wav", inputs, "utterances to identify");

  auto* eval_cmd = app.add_subcommand("eval", "repeated K-way episodic evaluation");
  add_common(eval_cmd, flags, true, true, true, true, true);

  auto* synth = app.add_subcommand("synth", "generate a synthetic speaker corpus");
  add_common(synth, flags, false, false, true, true, false);
  synth->add_option("--train-speakers", corpus.train_speakers);
  synth->add_option("--train-utterances", corpus.train_utterances);
  synth->add_option("--eval-speakers", corpus.eval_speakers);
  synth->add_option("--enroll-utterances", corpus.enroll_utterances);
  synth->add_option("--test-utterances", corpus.test_utterances);
  synth->add_option("--min-duration", corpus.min_duration);
  synth->add_option("--max-duration", corpus.max_duration);

  auto* ablation = app.add_subcommand("ablation", "train and score SC, DSC, SC+CA, DSC+CA");
  add_common(ablation, flags, true, true, true, true, false);
  ablation->add_option("--seeds", seeds, "several seeds; overrides --seed")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*features) return cmd_features(inputs, flags.out);
    if (*count) return cmd_count_params(flags, all_variants);
    if (*train_cmd) return cmd_train(flags);
    if (*enroll_cmd) return cmd_enroll(flags);
    if (*identify_cmd) return cmd_identify(flags, db_path, inputs);
    if (*eval_cmd) return cmd_eval(flags);
    if (*synth) return cmd_synth(flags, corpus);
    if (*ablation) return cmd_ablation(flags, seeds);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "fssi: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "fssi: numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fssi: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
