#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fssi/errors.hpp"

namespace fssi {

inline constexpr int kExpectedSampleRate = 16000;

// Mono PCM audio normalized to [-1, 1) (int16 value / 32768).
struct AudioClip {
  std::vector<double> samples;
  int sample_rate = kExpectedSampleRate;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

enum class WavErrorKind { kIo, kNotRiffWave, kNotPcm, kUnsupportedBitDepth, kMultiChannel, kTruncated };

class WavError : public DataError {
 public:
  WavError(WavErrorKind kind, const std::string& what) : DataError(what), kind_(kind) {}
  WavErrorKind kind() const { return kind_; }

 private:
  WavErrorKind kind_;
};

// RIFF/WAVE, 16-bit PCM, mono only.
AudioClip read_wav(const std::filesystem::path& path);

// Writes 16-bit PCM mono. Samples are scaled by 32768, rounded and clipped.
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

}  // namespace fssi
