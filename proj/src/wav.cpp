#include "fssi/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "byte_io.hpp"

namespace fssi {
namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  bool has(std::size_t n) const { return pos + n <= bytes.size(); }
  std::uint32_t u32() {
    std::uint32_t v = detail::load_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    std::uint16_t v = detail::load_le<std::uint16_t>(bytes.data() + pos);
    pos += 2;
    return v;
  }
  bool tag(const char* t) const { return std::memcmp(bytes.data() + pos, t, 4) == 0; }
};

}  // namespace

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError(WavErrorKind::kIo, "cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), {}};
  const std::string name = path.string();

  Reader r{bytes};
  if (!r.has(12)) throw WavError(WavErrorKind::kTruncated, name + ": truncated RIFF header");
  if (!r.tag("RIFF")) throw WavError(WavErrorKind::kNotRiffWave, name + ": missing RIFF tag");
  r.pos = 8;
  if (!r.tag("WAVE")) throw WavError(WavErrorKind::kNotRiffWave, name + ": missing WAVE tag");
  r.pos = 12;

  bool have_fmt = false;
  int sample_rate = 0;
  while (true) {
    if (!r.has(8)) {
      throw WavError(WavErrorKind::kTruncated, name + ": no data chunk before end of file");
    }
    const bool is_fmt = r.tag("fmt ");
    const bool is_data = r.tag("data");
    r.pos += 4;
    const std::uint32_t size = r.u32();
    if (is_fmt) {
      if (size < 16 || !r.has(size)) {
        throw WavError(WavErrorKind::kTruncated, name + ": truncated fmt chunk");
      }
      const std::size_t start = r.pos;
      std::uint16_t format = r.u16();
      const std::uint16_t channels = r.u16();
      sample_rate = static_cast<int>(r.u32());
      r.pos += 6;  // byte rate, block align
      const std::uint16_t bits = r.u16();
      if (format == kFormatExtensible && size >= 40) {
        r.pos = start + 24;  // sub-format GUID starts with the format tag
        format = r.u16();
      }
      if (format != kFormatPcm) {
        throw WavError(WavErrorKind::kNotPcm, name + ": audio format " +
                                                  std::to_string(format) + " is not PCM");
      }
      if (channels != 1) {
        throw WavError(WavErrorKind::kMultiChannel,
                       name + ": expected mono, got " + std::to_string(channels) + " channels");
      }
      if (bits != 16) {
        throw WavError(WavErrorKind::kUnsupportedBitDepth,
                       name + ": expected 16-bit samples, got " + std::to_string(bits));
      }
      have_fmt = true;
      r.pos = start + size + (size & 1u);
    } else if (is_data) {
      if (!have_fmt) throw WavError(WavErrorKind::kNotRiffWave, name + ": data chunk before fmt");
      if (!r.has(size) || size % 2 != 0) {
        throw WavError(WavErrorKind::kTruncated, name + ": data chunk declares " +
                                                     std::to_string(size) + " bytes but file is shorter");
      }
      AudioClip clip;
      clip.sample_rate = sample_rate;
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(r.u16());
        clip.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return clip;
    } else {
      if (!r.has(size)) throw WavError(WavErrorKind::kTruncated, name + ": truncated chunk");
      r.pos += size + (size & 1u);
    }
  }
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  tag("RIFF");
  detail::append_le<std::uint32_t>(out, 36 + data_bytes);
  tag("WAVE");
  tag("fmt ");
  detail::append_le<std::uint32_t>(out, 16);
  detail::append_le<std::uint16_t>(out, kFormatPcm);
  detail::append_le<std::uint16_t>(out, 1);
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
  detail::append_le<std::uint16_t>(out, 2);
  detail::append_le<std::uint16_t>(out, 16);
  tag("data");
  detail::append_le<std::uint32_t>(out, data_bytes);
  for (double s : clip.samples) {
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    detail::append_le<std::uint16_t>(
        out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw WavError(WavErrorKind::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw WavError(WavErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace fssi
