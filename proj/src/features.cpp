#include "fssi/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numbers>

#include "byte_io.hpp"

namespace fssi {
namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// One r2c plan with its buffers per thread; the FFTW planner is not reentrant.
class RealFft {
 public:
  RealFft() {
    in_ = fftw_alloc_real(kFftLength);
    out_ = fftw_alloc_complex(kFftLength / 2 + 1);
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(kFftLength), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  void execute() { fftw_execute(plan_); }
  double power(std::size_t k) const { return out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]; }

 private:
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

const std::vector<double>& hann_window() {
  static const std::vector<double> window = [] {
    std::vector<double> w(kFrameLength);
    for (std::size_t n = 0; n < kFrameLength; ++n) {
      w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                  static_cast<double>(kFrameLength - 1));
    }
    return w;
  }();
  return window;
}

}  // namespace

FeatureMatrix FeatureMatrix::crop(std::size_t start, std::size_t count) const {
  if (count == 0 || start + count > frames) {
    throw ShapeError("feature crop [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") exceeds " + std::to_string(frames) +
                     " frames");
  }
  FeatureMatrix out{bins, count, std::vector<double>(bins * count)};
  for (std::size_t b = 0; b < bins; ++b) {
    for (std::size_t t = 0; t < count; ++t) out.values[b * count + t] = at(b, start + t);
  }
  return out;
}

std::size_t frame_count(std::size_t num_samples) {
  if (num_samples < kFrameLength) return 0;
  return 1 + (num_samples - kFrameLength) / kFrameShift;
}

double MelFilterbank::hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double MelFilterbank::mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

MelFilterbank::MelFilterbank() {
  const double nyquist = kExpectedSampleRate / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(kMelBins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(kMelBins + 1));
  }
  const std::size_t nbins = num_fft_bins();
  weights_.assign(kMelBins * nbins, 0.0);
  centers_hz_.resize(kMelBins);
  support_.assign(kMelBins, {nbins, 0});
  for (std::size_t m = 0; m < kMelBins; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    centers_hz_[m] = center;
    for (std::size_t k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * kExpectedSampleRate / static_cast<double>(kFftLength);
      double w = 0.0;
      if (f > left && f <= center) {
        w = (f - left) / (center - left);
      } else if (f > center && f < right) {
        w = (right - f) / (right - center);
      }
      weights_[m * nbins + k] = w;
      if (w != 0.0) {
        support_[m].first = std::min(support_[m].first, k);
        support_[m].second = k + 1;
      }
    }
    if (support_[m].second == 0) support_[m].first = 0;
  }
}

const MelFilterbank& default_filterbank() {
  static const MelFilterbank bank;
  return bank;
}

FeatureMatrix log_mel(const AudioClip& clip) {
  if (clip.sample_rate != kExpectedSampleRate) {
    throw DataError("log_mel: expected " + std::to_string(kExpectedSampleRate) +
                    " Hz audio, got " + std::to_string(clip.sample_rate) + " Hz");
  }
  const std::size_t frames = frame_count(clip.samples.size());
  if (frames == 0) {
    throw DataError("log_mel: clip has " + std::to_string(clip.samples.size()) +
                    " samples, fewer than one " + std::to_string(kFrameLength) + "-sample frame");
  }
  thread_local RealFft fft;
  const MelFilterbank& bank = default_filterbank();
  const std::vector<double>& window = hann_window();
  const std::size_t nbins = bank.num_fft_bins();

  FeatureMatrix out{kMelBins, frames, std::vector<double>(kMelBins * frames)};
  std::vector<double> power(nbins);
  double* buf = fft.input();
  for (std::size_t t = 0; t < frames; ++t) {
    const double* frame = clip.samples.data() + t * kFrameShift;
    for (std::size_t n = 0; n < kFrameLength; ++n) buf[n] = frame[n] * window[n];
    for (std::size_t n = kFrameLength; n < kFftLength; ++n) buf[n] = 0.0;
    fft.execute();
    for (std::size_t k = 0; k < nbins; ++k) power[k] = fft.power(k);
    for (std::size_t m = 0; m < kMelBins; ++m) {
      double energy = 0.0;
      const auto [first, last] = bank.support(m);
      for (std::size_t k = first; k < last; ++k) energy += bank.weight(m, k) * power[k];
      out.values[m * frames + t] = std::log(std::max(energy, kEnergyFloor));
    }
  }
  return out;
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& features) {
  if (features.values.size() != features.bins * features.frames) {
    throw ShapeError("feature matrix data does not match its extents");
  }
  std::vector<unsigned char> out;
  out.reserve(12 + 8 * features.values.size());
  detail::append_bytes(out, "FMX1");
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(features.bins));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(features.frames));
  for (double v : features.values) detail::append_le<double>(out, v);
  detail::write_file(path, out);
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  detail::ByteReader r = detail::open_reader(path);
  r.expect_magic("FMX1");
  FeatureMatrix f;
  f.bins = r.get<std::uint32_t>();
  f.frames = r.get<std::uint32_t>();
  f.values.resize(f.bins * f.frames);
  for (double& v : f.values) v = r.get<double>();
  if (!r.at_end()) throw DataError(path.string() + ": trailing bytes after feature data");
  return f;
}

}  // namespace fssi
