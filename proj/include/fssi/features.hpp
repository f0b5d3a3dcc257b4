#pragma once

#include <cstddef>
#include <filesystem>
#include <utility>
#include <vector>

#include "fssi/wav.hpp"

namespace fssi {

inline constexpr std::size_t kMelBins = 39;
inline constexpr std::size_t kFrameLength = 400;  // 25 ms at 16 kHz
inline constexpr std::size_t kFrameShift = 200;   // 12.5 ms at 16 kHz
inline constexpr std::size_t kFftLength = 512;
inline constexpr double kEnergyFloor = 1e-10;

// Log-mel energies, row-major [bins x frames].
struct FeatureMatrix {
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<double> values;

  double at(std::size_t bin, std::size_t frame) const { return values[bin * frames + frame]; }
  bool operator==(const FeatureMatrix&) const = default;

  // Columns [start, start + count).
  FeatureMatrix crop(std::size_t start, std::size_t count) const;
};

std::size_t frame_count(std::size_t num_samples);

// Triangular filters on the HTK mel scale between 0 Hz and Nyquist, evaluated
// at the FFT bin centres. Row-major [kMelBins x (kFftLength / 2 + 1)].
class MelFilterbank {
 public:
  MelFilterbank();

  static double hz_to_mel(double hz);
  static double mel_to_hz(double mel);

  std::size_t num_fft_bins() const { return kFftLength / 2 + 1; }
  double weight(std::size_t filter, std::size_t fft_bin) const {
    return weights_[filter * num_fft_bins() + fft_bin];
  }
  double center_hz(std::size_t filter) const { return centers_hz_[filter]; }
  // [first, last) FFT bins with a nonzero weight.
  std::pair<std::size_t, std::size_t> support(std::size_t filter) const { return support_[filter]; }

 private:
  std::vector<double> weights_;
  std::vector<double> centers_hz_;
  std::vector<std::pair<std::size_t, std::size_t>> support_;
};

const MelFilterbank& default_filterbank();

// 400-sample Hann frames, 200-sample shift, 512-point power spectrum,
// 39 mel filters, natural log with a 1e-10 floor. No normalization.
FeatureMatrix log_mel(const AudioClip& clip);

// "FMX1" | bins u32 | frames u32 | row-major f64, all little-endian.
void write_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_features(const std::filesystem::path& path);

}  // namespace fssi
