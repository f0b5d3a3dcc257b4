#include "fssi/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "fssi/errors.hpp"

namespace fssi {
namespace {

constexpr double kJitter = 0.03;
constexpr double kPi = std::numbers::pi;

double draw(const Range& r, Rng& rng) { return rng.uniform(r.lo, r.hi); }

double jitter(double value, Rng& rng) { return value * (1.0 + rng.uniform(-kJitter, kJitter)); }

// Two-pole resonator with unit gain at DC.
class Resonator {
 public:
  Resonator(double frequency, double bandwidth, double rate) {
    c_ = -std::exp(-2.0 * kPi * bandwidth / rate);
    b_ = 2.0 * std::exp(-kPi * bandwidth / rate) * std::cos(2.0 * kPi * frequency / rate);
    a_ = 1.0 - b_ - c_;
  }
  double operator()(double x) {
    const double y = a_ * x + b_ * y1_ + c_ * y2_;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double a_ = 0.0, b_ = 0.0, c_ = 0.0, y1_ = 0.0, y2_ = 0.0;
};

std::string speaker_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
  return buf;
}

std::string utterance_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03zu.wav", prefix, i);
  return buf;
}

}  // namespace

void SyntheticSpeakerSpec::validate() const {
  const double nyquist = kExpectedSampleRate / 2.0;
  if (!(f0_hz > 0.0 && f0_hz < nyquist)) throw ConfigError("f0 must lie in (0, Nyquist)");
  double previous = 0.0;
  for (const Formant& f : formants) {
    if (!(f.frequency_hz > previous)) throw ConfigError("formants must be strictly increasing");
    if (!(f.frequency_hz < nyquist)) throw ConfigError("formants must lie below Nyquist");
    if (!(f.bandwidth_hz > 0.0)) throw ConfigError("formant bandwidths must be positive");
    previous = f.frequency_hz;
  }
  if (!(spectral_tilt > 0.0 && spectral_tilt < 1.0)) {
    throw ConfigError("spectral tilt pole must lie in (0, 1)");
  }
}

SpeakerPopulation training_population() {
  return SpeakerPopulation{{80.0, 200.0},
                           {{{300.0, 850.0}, {900.0, 2300.0}, {2400.0, 3400.0}}},
                           {{{50.0, 150.0}, {70.0, 200.0}, {100.0, 250.0}}},
                           {0.80, 0.97},
                           {-45.0, -30.0}};
}

SpeakerPopulation evaluation_population() {
  SpeakerPopulation p = training_population();
  p.f0_hz = {150.0, 300.0};
  return p;
}

SyntheticSpeakerSpec draw_speaker(const SpeakerPopulation& population, Rng& rng) {
  SyntheticSpeakerSpec s;
  s.f0_hz = draw(population.f0_hz, rng);
  for (std::size_t i = 0; i < 3; ++i) {
    s.formants[i] = {draw(population.formant_hz[i], rng), draw(population.bandwidth_hz[i], rng)};
  }
  s.spectral_tilt = draw(population.spectral_tilt, rng);
  s.noise_floor_db = draw(population.noise_floor_db, rng);
  s.seed = rng.next();
  s.validate();
  return s;
}

AudioClip synthesize_utterance(const SyntheticSpeakerSpec& speaker, double duration_seconds,
                               Rng& rng) {
  speaker.validate();
  const double rate = kExpectedSampleRate;
  const auto n = static_cast<std::size_t>(std::llround(duration_seconds * rate));
  if (n == 0) throw ConfigError("utterance duration must be positive");

  const double f0 = jitter(speaker.f0_hz, rng);
  std::array<Resonator, 3> tract{
      Resonator(jitter(speaker.formants[0].frequency_hz, rng), speaker.formants[0].bandwidth_hz, rate),
      Resonator(jitter(speaker.formants[1].frequency_hz, rng), speaker.formants[1].bandwidth_hz, rate),
      Resonator(jitter(speaker.formants[2].frequency_hz, rng), speaker.formants[2].bandwidth_hz, rate)};
  const double intonation_rate = rng.uniform(0.3, 1.0);
  const double intonation_phase = rng.uniform(0.0, 2.0 * kPi);
  const double syllable_rate = rng.uniform(2.5, 5.0);
  const double syllable_phase = rng.uniform(0.0, 2.0 * kPi);
  const double peak_level = rng.uniform(0.3, 0.8);

  std::vector<double> voiced(n);
  double phase = rng.uniform();
  double carry = 0.0;  // impulse mass spilling into the next sample
  double glottal = 0.0, radiated_prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    const double pitch = f0 * (1.0 + 0.04 * std::sin(2.0 * kPi * intonation_rate * t + intonation_phase));
    double pulse = carry;
    carry = 0.0;
    phase += pitch / rate;
    if (phase >= 1.0) {
      phase -= 1.0;
      // Split the impulse between this sample and the next by its fractional position.
      const double frac = phase / (pitch / rate);
      pulse += 1.0 - frac;
      carry = frac;
    }
    glottal = pulse + speaker.spectral_tilt * glottal;
    const double radiated = glottal - radiated_prev;
    radiated_prev = glottal;
    double y = radiated;
    for (Resonator& r : tract) y = r(y);
    const double envelope =
        0.55 + 0.45 * std::sin(2.0 * kPi * syllable_rate * t + syllable_phase);
    voiced[i] = y * envelope;
  }

  double peak = 0.0, energy = 0.0;
  for (double v : voiced) {
    peak = std::max(peak, std::abs(v));
    energy += v * v;
  }
  const double gain = peak > 0.0 ? peak_level / peak : 0.0;
  const double rms = std::sqrt(energy / static_cast<double>(n)) * gain;
  const double noise_rms = rms * std::pow(10.0, speaker.noise_floor_db / 20.0);

  AudioClip clip;
  clip.sample_rate = kExpectedSampleRate;
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    clip.samples[i] = std::clamp(voiced[i] * gain + noise_rms * rng.normal(), -1.0, 32767.0 / 32768.0);
  }
  return clip;
}

Manifest generate_synthetic_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir) {
  if (!(spec.min_duration > 0.0 && spec.max_duration >= spec.min_duration)) {
    throw ConfigError("corpus duration range must be positive and ordered");
  }
  Rng master(spec.seed);
  Manifest manifest;
  manifest.base_dir = out_dir;

  auto write_speaker = [&](const SyntheticSpeakerSpec& speaker, const std::string& group,
                           const std::string& id,
                           const std::vector<std::pair<Split, std::size_t>>& plan) {
    const std::filesystem::path rel_dir = std::filesystem::path(group) / id;
    std::error_code ec;
    std::filesystem::create_directories(out_dir / rel_dir, ec);
    if (ec) throw DataError("cannot create " + (out_dir / rel_dir).string() + ": " + ec.message());
    Rng rng(speaker.seed);
    for (const auto& [split, count] : plan) {
      const char* prefix = split == Split::kTrain ? "utt" : split == Split::kEnroll ? "enroll" : "test";
      for (std::size_t u = 0; u < count; ++u) {
        const double duration = rng.uniform(spec.min_duration, spec.max_duration);
        const AudioClip clip = synthesize_utterance(speaker, duration, rng);
        const std::filesystem::path rel = rel_dir / utterance_name(prefix, u);
        write_wav(out_dir / rel, clip);
        manifest.rows.push_back(ManifestRow{id, rel.generic_string(), split});
      }
    }
  };

  const SpeakerPopulation train_pop = training_population();
  const SpeakerPopulation eval_pop = evaluation_population();
  std::vector<SyntheticSpeakerSpec> train_specs, eval_specs;
  for (std::size_t s = 0; s < spec.train_speakers; ++s) train_specs.push_back(draw_speaker(train_pop, master));
  for (std::size_t s = 0; s < spec.eval_speakers; ++s) eval_specs.push_back(draw_speaker(eval_pop, master));

  for (std::size_t s = 0; s < train_specs.size(); ++s) {
    write_speaker(train_specs[s], "train", speaker_name("train_s", s),
                  {{Split::kTrain, spec.train_utterances}});
  }
  for (std::size_t s = 0; s < eval_specs.size(); ++s) {
    write_speaker(eval_specs[s], "eval", speaker_name("eval_s", s),
                  {{Split::kEnroll, spec.enroll_utterances}, {Split::kTest, spec.test_utterances}});
  }
  write_manifest(out_dir / "manifest.csv", manifest);
  return manifest;
}

}  // namespace fssi
