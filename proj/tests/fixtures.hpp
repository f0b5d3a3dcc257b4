#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fssi/backbone.hpp"
#include "fssi/dataset.hpp"
#include "fssi/random.hpp"

namespace fssi::testing {

// Speakers whose log-mel frames scatter around a speaker-specific spectral
// profile; enough structure for a few training steps.
inline Dataset toy_dataset(std::size_t speakers, std::size_t utterances, std::size_t frames,
                           std::uint64_t seed, const std::string& prefix = "spk", double noise = 0.5) {
  Rng rng(seed);
  Dataset data;
  for (std::size_t s = 0; s < speakers; ++s) {
    std::vector<double> profile(kMelBins);
    for (double& p : profile) p = rng.uniform(-3.0, 3.0);
    SpeakerData speaker{prefix + std::to_string(s), {}};
    for (std::size_t u = 0; u < utterances; ++u) {
      FeatureMatrix f{kMelBins, frames + rng.below(4), {}};
      f.values.resize(f.bins * f.frames);
      for (std::size_t b = 0; b < f.bins; ++b)
        for (std::size_t t = 0; t < f.frames; ++t) f.values[b * f.frames + t] = profile[b] + noise * rng.normal();
      speaker.utterances.push_back(std::move(f));
    }
    data.speakers.push_back(std::move(speaker));
  }
  return data;
}

inline ModelConfig tiny_config(ConvVariant variant = ConvVariant::kDepthwiseSeparable, bool ca = true,
                               std::uint64_t seed = 1) {
  ModelConfig c;
  c.variant = variant;
  c.use_ca = ca;
  c.channels = {4, 8, 16};
  c.ca_reduction = 4;
  c.seed = seed;
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fssi_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fssi::testing
