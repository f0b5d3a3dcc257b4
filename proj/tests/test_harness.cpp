#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "fssi/ablation.hpp"
#include "fssi/config.hpp"
#include "fssi/errors.hpp"
#include "fssi/manifest.hpp"
#include "fssi/synthetic.hpp"

using namespace fssi;
using fssi::testing::scratch_dir;
using fssi::testing::slurp;

TEST_CASE("manifest round trip is byte-identical") {
  const auto dir = scratch_dir("manifest");
  for (const char* name : {"a.wav", "b.wav", "c.wav"}) std::ofstream(dir / name) << "x";
  Manifest m;
  m.rows = {{"alice", "a.wav", Split::kTrain}, {"bob", "b.wav", Split::kEnroll}, {"bob", "c.wav", Split::kTest}};
  write_manifest(dir / "m.csv", m);
  const Manifest back = read_manifest(dir / "m.csv");
  CHECK(back.rows == m.rows);
  CHECK(back.resolve(back.rows[0]) == dir / "a.wav");
  write_manifest(dir / "m2.csv", back);
  CHECK(slurp(dir / "m.csv") == slurp(dir / "m2.csv"));
  CHECK(slurp(dir / "m.csv").rfind("speaker_id,path,split\n", 0) == 0);
  const auto groups = back.group(Split::kEnroll);
  REQUIRE(groups.size() == 1);
  CHECK(groups[0].first == "bob");
}

TEST_CASE("manifest validation") {
  const auto dir = scratch_dir("manifest_bad");
  std::ofstream(dir / "a.wav") << "x";
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  CHECK_THROWS_AS(read_manifest(write("h.csv", "who,path,split\n")), DataError);
  CHECK_THROWS_AS(read_manifest(write("f.csv", "speaker_id,path,split\nalice,a.wav\n")), DataError);
  CHECK_THROWS_AS(read_manifest(write("s.csv", "speaker_id,path,split\nalice,a.wav,dev\n")), DataError);
  CHECK_THROWS_AS(read_manifest(write("m.csv", "speaker_id,path,split\nalice,missing.wav,train\n")), DataError);
  CHECK_NOTHROW(read_manifest(dir / "m.csv", false));
  CHECK_THROWS_AS(read_manifest(write("d.csv", "speaker_id,path,split\nalice,a.wav,train\nbob,a.wav,test\n")),
                  DataError);
  CHECK_THROWS_AS(read_manifest(dir / "nope.csv"), DataError);
  CHECK(parse_split("enroll") == Split::kEnroll);
  CHECK(to_string(Split::kTest) == "test");
  Manifest bad;
  bad.rows = {{"a,b", "a.wav", Split::kTrain}};
  CHECK_THROWS_AS(write_manifest(dir / "w.csv", bad), DataError);
}

TEST_CASE("config parse and format round trip") {
  const RunConfig c = parse_config(
      "# comment\n"
      "variant=SC\nuse_ca=false\nchannels=8,16,32\nkernel=3x5\nca_reduction=8\n"
      "K=4\nN=3\nQ=2\nepochs=7\nepisodes_per_epoch=9\nlr=0.00025\ncrop_frames=32\n"
      "eval_k=4\neval_repeats=11\neval_shots=2\nseed=42\nmanifest=m.csv\ncheckpoint=c.dscn\nout=o.txt\n");
  CHECK(c.model.variant == ConvVariant::kStandard);
  CHECK_FALSE(c.model.use_ca);
  CHECK(c.model.channels == std::vector<std::size_t>{8, 16, 32});
  CHECK(c.model.kernel_w == 5);
  CHECK(c.train.k_way == 4);
  CHECK(c.train.learning_rate == 0.00025);
  CHECK(c.eval.repeats == 11);
  CHECK(c.seed == 42);
  CHECK(c.manifest == "m.csv");
  const RunConfig again = parse_config(format_config(c));
  CHECK(format_config(again) == format_config(c));
  CHECK(again.model == c.model);

  // Defaults survive an empty file.
  const RunConfig d = parse_config("");
  CHECK(d.model.channels == std::vector<std::size_t>{128, 256, 512});
  CHECK(d.train.k_way == 5);
  CHECK(d.train.learning_rate == 1e-4);
  CHECK(d.eval.repeats == 50);

  CHECK_THROWS_AS(parse_config("colour=blue\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("K five\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("K=-1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("use_ca=maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("kernel=3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("channels=64,32,16\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("synthetic speaker specs") {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const SyntheticSpeakerSpec t = draw_speaker(training_population(), rng);
    const SyntheticSpeakerSpec e = draw_speaker(evaluation_population(), rng);
    CHECK_NOTHROW(t.validate());
    CHECK_NOTHROW(e.validate());
    CHECK(t.f0_hz >= 80.0);
    CHECK(t.f0_hz <= 200.0);
    CHECK(e.f0_hz >= 150.0);
    CHECK(e.f0_hz <= 300.0);
  }
  SyntheticSpeakerSpec bad = draw_speaker(training_population(), rng);
  std::swap(bad.formants[0], bad.formants[1]);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = draw_speaker(training_population(), rng);
  bad.formants[2].frequency_hz = 9000.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("synthetic utterances are bounded, sized and seeded") {
  Rng pick(2);
  const SyntheticSpeakerSpec spk = draw_speaker(training_population(), pick);
  Rng a(3), b(3);
  const AudioClip x = synthesize_utterance(spk, 2.5, a);
  CHECK(x.samples.size() == 40000);
  CHECK(x.sample_rate == kExpectedSampleRate);
  CHECK(x.samples == synthesize_utterance(spk, 2.5, b).samples);
  double peak = 0.0;
  for (double v : x.samples) peak = std::max(peak, std::abs(v));
  CHECK(peak <= 1.0);
  CHECK(peak > 0.1);
}

TEST_CASE("tiny corpus layout and determinism") {
  CorpusSpec spec;
  spec.train_speakers = 2;
  spec.train_utterances = 1;
  spec.eval_speakers = 1;
  spec.enroll_utterances = 1;
  spec.test_utterances = 1;
  spec.seed = 9;
  const auto a = scratch_dir("corpus_a"), b = scratch_dir("corpus_b");
  const Manifest ma = generate_synthetic_corpus(spec, a);
  generate_synthetic_corpus(spec, b);
  REQUIRE(ma.rows.size() == 4);
  CHECK(ma.rows[0].split == Split::kTrain);
  CHECK(ma.rows[1].split == Split::kTrain);
  CHECK(ma.rows[0].speaker_id != ma.rows[1].speaker_id);
  CHECK(ma.rows[2].split == Split::kEnroll);
  CHECK(ma.rows[3].split == Split::kTest);
  CHECK(ma.rows[2].speaker_id == ma.rows[3].speaker_id);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  for (const ManifestRow& row : ma.rows) {
    CHECK(slurp(a / row.path) == slurp(b / row.path));
    const double seconds = static_cast<double>(read_wav(a / row.path).samples.size()) / kExpectedSampleRate;
    CHECK(seconds >= 2.0);
    CHECK(seconds <= 5.0);
  }
  const Manifest read = read_manifest(a / "manifest.csv");
  CHECK(read.rows == ma.rows);
  spec.seed = 10;
  const auto c = scratch_dir("corpus_c");
  generate_synthetic_corpus(spec, c);
  CHECK(slurp(a / ma.rows[0].path) != slurp(c / ma.rows[0].path));
}

TEST_CASE("synthetic speakers are separable in log-mel space") {
  CorpusSpec spec;
  spec.train_speakers = 6;
  spec.train_utterances = 5;
  spec.eval_speakers = 0;
  spec.min_duration = 2.0;
  spec.max_duration = 2.5;
  spec.seed = 4;
  const auto dir = scratch_dir("separable");
  const Manifest m = generate_synthetic_corpus(spec, dir);
  const Dataset d = load_split(m, Split::kTrain);
  REQUIRE(d.speakers.size() == 6);
  // Per-utterance mean log-mel vectors.
  std::vector<std::vector<std::vector<double>>> means;
  for (const auto& s : d.speakers) {
    std::vector<std::vector<double>> per;
    for (const auto& f : s.utterances) {
      std::vector<double> mu(f.bins, 0.0);
      for (std::size_t b = 0; b < f.bins; ++b) {
        for (std::size_t t = 0; t < f.frames; ++t) mu[b] += f.at(b, t);
        mu[b] /= static_cast<double>(f.frames);
      }
      per.push_back(mu);
    }
    means.push_back(per);
  }
  auto dist = [](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s);
  };
  std::vector<std::vector<double>> centers;
  double within = 0.0;
  std::size_t n = 0;
  for (const auto& per : means) {
    std::vector<double> c(kMelBins, 0.0);
    for (const auto& mu : per)
      for (std::size_t b = 0; b < kMelBins; ++b) c[b] += mu[b] / static_cast<double>(per.size());
    for (const auto& mu : per) {
      within += dist(mu, c);
      ++n;
    }
    centers.push_back(c);
  }
  within /= static_cast<double>(n);
  double between = 1e300;
  for (std::size_t i = 0; i < centers.size(); ++i)
    for (std::size_t j = i + 1; j < centers.size(); ++j) between = std::min(between, dist(centers[i], centers[j]));
  INFO("within " << within << " between " << between);
  CHECK(between > within);
}

namespace {

AblationData toy_ablation_data() {
  AblationData data;
  data.train = fssi::testing::toy_dataset(5, 6, 20, 31, "train");
  data.enroll = fssi::testing::toy_dataset(4, 3, 20, 32, "eval");
  data.test = fssi::testing::toy_dataset(4, 2, 20, 32, "eval");
  return data;
}

RunConfig toy_run() {
  RunConfig run;
  run.model = fssi::testing::tiny_config();
  run.train.k_way = 3;
  run.train.n_shot = 2;
  run.train.n_query = 2;
  run.train.max_epochs = 1;
  run.train.episodes_per_epoch = 2;
  run.train.crop_frames = 16;
  run.eval = {3, 4, 2};
  return run;
}

}  // namespace

TEST_CASE("ablation report structure") {
  const std::vector<ModelConfig> configs = ablation_configs(fssi::testing::tiny_config());
  REQUIRE(configs.size() == 4);
  CHECK(configs[0].variant_name() == "SC");
  CHECK(configs[1].variant_name() == "DSC");
  CHECK(configs[2].variant_name() == "SC+CA");
  CHECK(configs[3].variant_name() == "DSC+CA");

  std::vector<std::string> seen;
  const AblationReport r = run_ablation(toy_ablation_data(), toy_run(), 5,
                                        [&](const std::string& v, const EpochRecord&) { seen.push_back(v); });
  REQUIRE(r.rows.size() == 4);
  CHECK(r.complete());
  CHECK(seen.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.rows[i].variant == configs[i].variant_name());
    CHECK(r.rows[i].parameters == count_parameters(configs[i]));
    CHECK(r.rows[i].seed == 5);
    CHECK(r.rows[i].ok);
    CHECK(r.rows[i].accuracy >= 0.0);
    CHECK(r.rows[i].accuracy <= 1.0);
  }
  CHECK(r.find("DSC+CA") == &r.rows[3]);
  CHECK(r.find("nope") == nullptr);
  const std::string table = format_ablation_table(r);
  for (const char* v : {"SC", "DSC", "SC+CA", "DSC+CA"}) CHECK(table.find(v) != std::string::npos);

  // Same seed, same report.
  const AblationReport again = run_ablation(toy_ablation_data(), toy_run(), 5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(again.rows[i].accuracy == r.rows[i].accuracy);
}

TEST_CASE("ablation flags a failing variant and leaves the rest unrun") {
  AblationData data = toy_ablation_data();
  data.test.speakers.pop_back();  // an enrolled speaker without test utterances
  const AblationReport r = run_ablation(data, toy_run(), 1);
  REQUIRE(r.rows.size() == 4);
  CHECK_FALSE(r.complete());
  CHECK_FALSE(r.rows[0].ok);
  CHECK_FALSE(r.rows[0].error.empty());
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK_FALSE(r.rows[i].ok);
    CHECK(r.rows[i].parameters > 0);
  }
}

TEST_CASE("ablation summary checks the attention ordering") {
  auto report = [](double sc, double dsc, double sc_ca, double dsc_ca, std::uint64_t seed) {
    AblationReport r;
    const char* names[] = {"SC", "DSC", "SC+CA", "DSC+CA"};
    const double acc[] = {sc, dsc, sc_ca, dsc_ca};
    for (int i = 0; i < 4; ++i) r.rows.push_back({names[i], 1, acc[i], 0, acc[i], 0, 0, seed, true, ""});
    return r;
  };
  const AblationSummary good = summarize_ablation({report(0.8, 0.8, 0.9, 0.85, 1), report(0.7, 0.8, 0.7, 0.9, 2)});
  CHECK(good.violations.empty());
  REQUIRE(good.mean_accuracy.size() == 4);
  CHECK(good.mean_accuracy[0] == doctest::Approx(0.75));
  CHECK(format_ablation_summary(good).find("holds") != std::string::npos);

  const AblationSummary bad = summarize_ablation({report(0.8, 0.93, 0.9, 0.91, 2), report(0.8, 0.8, 0.9, 0.8, 3)});
  REQUIRE(bad.violations.size() == 2);  // seed 2 and the DSC mean
  CHECK(bad.violations[0] == "seed 2: DSC+CA 0.9100 < DSC 0.9300");
  CHECK(format_ablation_summary(bad).find("VIOLATION") != std::string::npos);
}
