#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>

#include "fssi/manifest.hpp"
#include "fssi/random.hpp"
#include "fssi/wav.hpp"

namespace fssi {

struct Formant {
  double frequency_hz = 0.0;
  double bandwidth_hz = 0.0;
};

// Source-filter voice: a glottal pulse train at f0, a one-pole glottal
// lowpass (spectral_tilt is its pole, in (0, 1)), three cascaded formant
// resonators and white noise noise_floor_db below the voiced signal's RMS.
struct SyntheticSpeakerSpec {
  double f0_hz = 120.0;
  std::array<Formant, 3> formants{};
  double spectral_tilt = 0.9;
  double noise_floor_db = -40.0;
  std::uint64_t seed = 0;

  // Formants strictly increasing and below Nyquist; throws ConfigError.
  void validate() const;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SpeakerPopulation {
  Range f0_hz;
  std::array<Range, 3> formant_hz;
  std::array<Range, 3> bandwidth_hz;
  Range spectral_tilt;
  Range noise_floor_db;
};

// F0 in [80, 200] Hz.
SpeakerPopulation training_population();
// F0 in [150, 300] Hz; shifted against training to mimic a corpus mismatch.
SpeakerPopulation evaluation_population();

SyntheticSpeakerSpec draw_speaker(const SpeakerPopulation& population, Rng& rng);

// F0 and every formant jittered by at most 3% per utterance; slow intonation
// and syllable-rate amplitude modulation; peak level varies per utterance.
AudioClip synthesize_utterance(const SyntheticSpeakerSpec& speaker, double duration_seconds,
                               Rng& rng);

struct CorpusSpec {
  std::size_t train_speakers = 40;
  std::size_t train_utterances = 40;
  std::size_t eval_speakers = 10;
  std::size_t enroll_utterances = 10;
  std::size_t test_utterances = 20;
  double min_duration = 2.0;
  double max_duration = 5.0;
  std::uint64_t seed = 0;
};

// Writes WAVs under out_dir/{train,eval}/<speaker>/ and out_dir/manifest.csv
// (paths relative to out_dir). Train and eval speakers are disjoint and drawn
// from the two populations above. Byte-identical for equal specs.
Manifest generate_synthetic_corpus(const CorpusSpec& spec, const std::filesystem::path& out_dir);

}  // namespace fssi
