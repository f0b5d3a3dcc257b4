// Acceptance runner: one PASS/FAIL line per criterion.
//
//   fssi_acceptance [--criterion N ...] [--work-dir DIR]
//
// Exit status is 0 only when every selected criterion passes.

#include <sys/wait.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "composite_check.hpp"
#include "fssi/ablation.hpp"
#include "fssi/backbone.hpp"
#include "fssi/config.hpp"
#include "fssi/episodic.hpp"
#include "fssi/identification.hpp"
#include "fssi/manifest.hpp"
#include "fssi/ops.hpp"
#include "fssi/synthetic.hpp"
#include "gradcheck.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fssi;
using fssi::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(FSSI_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// The default synthetic corpus: 40 x 40 training utterances, 10 evaluation
// speakers with 10 enrollment and 20 test utterances each.
Manifest default_corpus(const fs::path& work_dir) {
  CorpusSpec spec;
  return generate_synthetic_corpus(spec, work_dir / "corpus");
}

Outcome gradient_correctness(const fs::path&) {
  const auto start = std::chrono::steady_clock::now();
  bool ok = true;
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& c : fssi::testing::gradient_cases()) {
    const auto r = c.run();
    if (r.fewest_points < 20 || r.max_rel_error >= 1e-4) ok = false;
    if (r.max_rel_error >= worst_op) worst_op = r.max_rel_error, worst_name = c.name;
  }
  std::string composite;
  for (ConvVariant v : {ConvVariant::kDepthwiseSeparable, ConvVariant::kStandard}) {
    const auto r = fssi::testing::check_forward_composition(v, 70);
    if (r.points < 20 || r.max_error >= 1e-4) ok = false;
    composite += fmt("; forward %s+CA worst %.2e over %zu points (%.2e at the plain 1e-8 floor, %s)",
                     to_string(v).c_str(), r.max_error, r.points, r.max_fixed_floor,
                     r.worst_entry.c_str());
  }
  const double elapsed = seconds_since(start);
  if (elapsed >= 120.0) ok = false;
  return {ok, fmt("ops worst %.2e (%s)", worst_op, worst_name.c_str()) + composite +
                  fmt("; %.1f s", elapsed)};
}

Outcome convolution_factorization(const fs::path&) {
  Rng rng(2024);
  double separable = 0.0, standard = 0.0;
  auto random_geometry = [&rng](std::size_t& kh, std::size_t& kw, std::size_t& h, std::size_t& w,
                                ops::Conv2dGeometry& g) {
    kh = 1 + 2 * rng.below(3);
    kw = 1 + 2 * rng.below(3);
    g.stride_h = 1 + rng.below(2);
    g.stride_w = 1 + rng.below(2);
    g.pad_h = rng.below(kh / 2 + 1);
    g.pad_w = rng.below(kw / 2 + 1);
    h = kh + rng.below(12);
    w = kw + rng.below(12);
  };
  Tape tape(GradMode::kDisabled);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t kh, kw, h, w;
    ops::Conv2dGeometry g;
    random_geometry(kh, kw, h, w, g);
    const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(8), cout = 1 + rng.below(8);
    const Tensor x = random_tensor({n, c, h, w}, rng);
    const Tensor dk = random_tensor({c, kh, kw}, rng);
    const Tensor pk = random_tensor({cout, c}, rng);
    const Tensor got =
        ops::conv_pointwise(ops::conv2d_depthwise(tape.constant(x), tape.constant(dk), g), tape.constant(pk))
            .value();
    const Tensor want = oracle::conv_pointwise(
        oracle::conv_depthwise(x, dk, g.stride_h, g.stride_w, g.pad_h, g.pad_w), pk);
    separable = std::max(separable, max_abs_diff(got, want));
  }
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t kh, kw, h, w;
    ops::Conv2dGeometry g;
    random_geometry(kh, kw, h, w, g);
    const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(6), cout = 1 + rng.below(6);
    const Tensor x = random_tensor({n, cin, h, w}, rng);
    const Tensor k = random_tensor({cout, cin, kh, kw}, rng);
    const Tensor got = ops::conv2d_standard(tape.constant(x), tape.constant(k), g).value();
    standard = std::max(standard,
                        max_abs_diff(got, oracle::conv_standard(x, k, g.stride_h, g.stride_w, g.pad_h, g.pad_w)));
  }
  return {separable <= 1e-10 && standard <= 1e-12,
          fmt("depthwise+pointwise max |diff| %.2e over 50 shapes (limit 1e-10); standard %.2e over 50 "
              "shapes (limit 1e-12)",
              separable, standard)};
}

Outcome prototypical_loss_oracle(const fs::path&) {
  Rng rng(2025);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(10), m = 1 + rng.below(20), d = 1 + rng.below(16);
    std::vector<Embedding> queries(m, Embedding(d)), centers(k, Embedding(d));
    std::vector<std::size_t> labels(m);
    for (auto& q : queries)
      for (double& v : q) v = rng.uniform(-1.0, 1.0);
    for (auto& c : centers)
      for (double& v : c) v = rng.uniform(-1.0, 1.0);
    for (auto& l : labels) l = rng.below(k);
    PrototypeSet set{centers, {}};
    for (std::size_t i = 0; i < k; ++i) set.labels.push_back(i);
    const double want = oracle::prototypical_loss(queries, labels, centers);
    worst = std::max(worst, std::abs(prototypical_loss(queries, labels, set).loss - want));

    Tensor qt({m, d}), ct({k, d});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) qt.at({i, j}) = queries[i][j];
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) ct.at({i, j}) = centers[i][j];
    Tape tape(GradMode::kDisabled);
    const double taped = prototypical_loss(tape.constant(qt), tape.constant(ct), labels).value()[0];
    worst = std::max(worst, std::abs(taped - want));
  }

  // Five prototypes on the unit sphere, queries at the origin.
  std::vector<Embedding> centers(5, Embedding(kEmbeddingDim, 0.0));
  for (std::size_t i = 0; i < 5; ++i) centers[i][i] = 1.0;
  PrototypeSet set{centers, {0, 1, 2, 3, 4}};
  const std::vector<Embedding> queries(4, Embedding(kEmbeddingDim, 0.0));
  const std::vector<std::size_t> labels{0, 1, 2, 4};
  const double uniform = prototypical_loss(queries, labels, set).loss;
  const double uniform_error = std::abs(uniform - std::log(5.0));
  return {worst <= 1e-9 && uniform_error <= 1e-12,
          fmt("max |diff| vs enumeration %.2e over 100 instances (limit 1e-9); equidistant K=5 loss "
              "%.12f, |loss - ln 5| = %.2e (limit 1e-12)",
              worst, uniform, uniform_error)};
}

Outcome parameter_counts(const fs::path&) {
  ModelConfig base;
  base.channels = {128, 256, 512};
  std::map<std::string, std::size_t> nop;
  for (const ModelConfig& c : ablation_configs(base)) nop[c.variant_name()] = count_parameters(c);
  const long long sc_delta = static_cast<long long>(nop["SC+CA"]) - static_cast<long long>(nop["SC"]);
  const long long dsc_delta = static_cast<long long>(nop["DSC+CA"]) - static_cast<long long>(nop["DSC"]);
  const double share_sc = static_cast<double>(sc_delta) / static_cast<double>(nop["SC"]);
  const double share_dsc = static_cast<double>(dsc_delta) / static_cast<double>(nop["DSC"]);
  const bool ok = nop["DSC"] < nop["SC"] && sc_delta == dsc_delta && share_sc <= 0.02 && share_dsc <= 0.02;
  return {ok, fmt("SC %zu, DSC %zu, SC+CA %zu, DSC+CA %zu; CA delta %lld / %lld = %.2f%% of SC, %.2f%% "
                  "of DSC (reduction %zu)",
                  nop["SC"], nop["DSC"], nop["SC+CA"], nop["DSC+CA"], sc_delta, dsc_delta, 100.0 * share_sc,
                  100.0 * share_dsc, base.ca_reduction)};
}

// Training budget for the desk-scale run, well inside 20 epochs x 50 episodes.
constexpr std::size_t kExperimentEpochs = 4;
constexpr std::size_t kExperimentEpisodes = 25;

Outcome few_shot_experiment(const fs::path& work_dir) {
  const auto start = std::chrono::steady_clock::now();
  const Manifest manifest = default_corpus(work_dir);
  const AblationData data = load_ablation_data(manifest);

  ModelConfig model;  // DSC+CA, channels 128/256/512
  model.seed = 1;
  TrainConfig train_config;  // 5-way 5-shot, 5 queries
  train_config.max_epochs = kExperimentEpochs;
  train_config.episodes_per_epoch = kExperimentEpisodes;
  train_config.rng_seed = 1;
  const TrainResult trained = train(data.train, model, train_config, [](const EpochRecord& r) {
    std::fprintf(stderr, "  %s\n", r.to_line().c_str());
  });
  const double train_seconds = seconds_since(start);

  EpisodicEvalConfig eval;  // K=5, 50 repeats, 5 enrollment shots
  Rng rng(1);
  const EpisodicScores scores = evaluate_episodic(trained.model, data.enroll, data.test, eval, rng);
  const double total = seconds_since(start);
  const bool ok = scores.mean_accuracy >= 0.90 && scores.mean_f >= 0.90 && total <= 600.0;
  return {ok, fmt("%s %zu epochs x %zu episodes; accuracy %.4f +- %.4f, macro-F %.4f +- %.4f over %zu "
                  "repeats (limit 0.90); corpus+training %.0f s, total %.0f s on one core (limit 600 s)",
                  model.variant_name().c_str(), kExperimentEpochs, kExperimentEpisodes, scores.mean_accuracy,
                  scores.std_accuracy, scores.mean_f, scores.std_f, scores.accuracies.size(), train_seconds,
                  total)};
}

// A narrower network than the full-width model so that twelve trainings fit
// a single core; the ordering under test is about the attention module, not
// width.
RunConfig ablation_run_config() {
  RunConfig run;
  run.model.channels = {32, 64, 128};
  run.model.ca_reduction = 16;
  run.train.max_epochs = 10;
  run.train.episodes_per_epoch = 20;
  return run;
}

Outcome ablation_ordering(const fs::path& work_dir) {
  const auto start = std::chrono::steady_clock::now();
  const AblationData data = load_ablation_data(default_corpus(work_dir));
  const RunConfig run = ablation_run_config();
  std::vector<AblationReport> reports;
  for (std::uint64_t seed : {1, 2, 3}) {
    reports.push_back(run_ablation(data, run, seed));
    std::fprintf(stderr, "%s", format_ablation_table(reports.back()).c_str());
  }
  const AblationSummary summary = summarize_ablation(reports);
  std::fprintf(stderr, "%s", format_ablation_summary(summary).c_str());

  bool complete = true;
  for (const AblationReport& r : reports) complete = complete && r.complete();
  std::vector<std::string> mean_violations, seed_violations;
  for (const std::string& v : summary.violations) {
    (v.rfind("mean", 0) == 0 ? mean_violations : seed_violations).push_back(v);
  }
  std::string detail = "mean accuracy";
  for (std::size_t i = 0; i < summary.variants.size(); ++i) {
    detail += fmt(" %s %.4f", summary.variants[i].c_str(), summary.mean_accuracy[i]);
  }
  detail += fmt("; channels 32/64/128, %zu x %zu episodes, seeds 1,2,3; %.0f s", run.train.max_epochs,
                run.train.episodes_per_epoch, seconds_since(start));
  for (const std::string& v : mean_violations) detail += "; VIOLATION " + v;
  for (const std::string& v : seed_violations) detail += "; flagged " + v;
  return {complete && mean_violations.empty(), detail};
}

Outcome determinism(const fs::path& work_dir) {
  fs::create_directories(work_dir);
  const fs::path log = work_dir / "cli.log";
  const fs::path corpus = work_dir / "corpus";
  if (run_cli("synth --out " + corpus.string() +
                  " --seed 5 --train-speakers 4 --train-utterances 6 --eval-speakers 3"
                  " --enroll-utterances 3 --test-utterances 3 --min-duration 2 --max-duration 2.5",
              log) != 0) {
    return {false, "synth failed: " + slurp(log)};
  }
  const fs::path config = work_dir / "run.cfg";
  std::ofstream(config) << "channels=8,16,32\nca_reduction=4\nK=3\nN=2\nQ=2\nepochs=2\n"
                           "episodes_per_epoch=3\ncrop_frames=32\neval_k=3\neval_repeats=5\neval_shots=2\n";
  const std::string common = "--config " + config.string() + " --manifest " + (corpus / "manifest.csv").string();

  std::vector<std::string> failures;
  auto step = [&](const std::string& args) {
    const int code = run_cli(args, log);
    if (code != 0) failures.push_back("exit " + std::to_string(code) + " for: " + args);
  };
  const fs::path a = work_dir / "a.dscn", b = work_dir / "b.dscn";
  step("train " + common + " --seed 11 --checkpoint " + a.string());
  step("train " + common + " --seed 11 --checkpoint " + b.string());
  const bool checkpoints = fs::exists(a) && slurp(a) == slurp(b);

  const Manifest manifest = read_manifest(corpus / "manifest.csv");
  const std::string wav = manifest.resolve(manifest.rows.front()).string();
  step("features " + wav + " --out " + (work_dir / "a.fmx").string());
  step("features " + wav + " --out " + (work_dir / "b.fmx").string());
  const bool features = fs::exists(work_dir / "a.fmx") && slurp(work_dir / "a.fmx") == slurp(work_dir / "b.fmx");

  step("eval " + common + " --seed 11 --checkpoint " + a.string() + " --out " + (work_dir / "a.txt").string());
  step("eval " + common + " --seed 11 --checkpoint " + b.string() + " --out " + (work_dir / "b.txt").string());
  const bool evaluation = fs::exists(work_dir / "a.txt") && slurp(work_dir / "a.txt") == slurp(work_dir / "b.txt");

  std::string detail = fmt("checkpoints %s (%zu bytes), features %s, evaluation %s",
                           checkpoints ? "identical" : "DIFFER", fs::exists(a) ? fs::file_size(a) : 0,
                           features ? "identical" : "DIFFER", evaluation ? "identical" : "DIFFER");
  for (const std::string& f : failures) detail += "; " + f;
  return {failures.empty() && checkpoints && features && evaluation, detail};
}

Outcome metric_correctness(const fs::path&) {
  Rng rng(2026);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(9);
    const std::size_t samples = 1 + rng.below(300);
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < k; ++i) labels.push_back("s" + std::to_string(i));
    ConfusionMatrix cm(labels);
    std::vector<std::pair<std::size_t, std::size_t>> outcomes;
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t actual = rng.below(k);
      const std::size_t predicted = rng.uniform() < 0.5 ? actual : rng.below(k);
      cm.record(actual, predicted);
      outcomes.emplace_back(actual, predicted);
    }
    const EvaluationReport r = compute_metrics(cm);
    const oracle::CountedScores want = oracle::count_scores(outcomes, k);
    if (r.accuracy != want.accuracy || r.macro_f != want.macro_f) ++mismatches;
  }

  ConfusionMatrix perfect({"a", "b", "c", "d", "e"});
  for (std::size_t c = 0; c < 5; ++c)
    for (int i = 0; i < 20; ++i) perfect.record(c, c);
  const EvaluationReport p = compute_metrics(perfect);
  ConfusionMatrix half({"a", "b"});
  for (int i = 0; i < 10; ++i) {
    half.record(0, 0);
    half.record(0, 1);
    half.record(1, 1);
    half.record(1, 0);
  }
  const EvaluationReport h = compute_metrics(half);
  const bool closed = p.accuracy == 1.0 && p.macro_f == 1.0 && h.accuracy == 0.5 && h.macro_f == 0.5;
  return {mismatches == 0 && closed,
          fmt("%zu / 200 random matrices differ from the counting oracle; all-correct acc %.17g F %.17g; "
              "binary half-errors acc %.17g F %.17g",
              mismatches, p.accuracy, p.macro_f, h.accuracy, h.macro_f)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(const fs::path&)> run;
};

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Acceptance criteria"};
  std::vector<int> selected;
  std::string work_dir = (fs::temp_directory_path() / "fssi_acceptance").string();
  app.add_option("--criterion", selected, "criterion number (repeatable; default all)")->check(CLI::Range(1, 8));
  app.add_option("--work-dir", work_dir, "scratch directory for corpora and checkpoints");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "convolution factorization oracle", convolution_factorization},
      {3, "prototypical loss oracle", prototypical_loss_oracle},
      {4, "parameter-count relations", parameter_counts},
      {5, "desk-scale few-shot experiment", few_shot_experiment},
      {6, "ablation ordering", ablation_ordering},
      {7, "determinism", determinism},
      {8, "metric correctness", metric_correctness},
  };
  bool all_pass = true;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome outcome;
    try {
      outcome = c.run(fs::path(work_dir));
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    all_pass = all_pass && outcome.pass;
    std::printf("CRITERION %d %s: %s (%s)\n", c.id, c.name, outcome.pass ? "PASS" : "FAIL", outcome.detail.c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
