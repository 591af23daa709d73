#include "ctefm/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ctefm {

void Utterance::validate() const {
  if (samples.empty()) throw std::runtime_error("empty utterance: " + id);
  if (sample_rate != kSampleRate) {
    throw std::runtime_error("sample-rate mismatch for " + id + ": got " +
                             std::to_string(sample_rate) + " Hz, need " +
                             std::to_string(kSampleRate) + " Hz");
  }
  for (double s : samples) {
    if (!std::isfinite(s)) throw std::runtime_error("non-finite sample in " + id);
  }
}

namespace {

struct ChunkHeader {
  char id[4];
  std::uint32_t size;
};

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

std::uint16_t read_u16(std::ifstream& in) {
  std::uint16_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 2);
  return v;
}

}  // namespace

Utterance read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open wav: " + path);

  char riff[4], wave[4];
  in.read(riff, 4);
  read_u32(in);  // riff size
  in.read(wave, 4);
  if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0) {
    throw std::runtime_error("not a RIFF/WAVE file: " + path);
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::vector<std::int16_t> pcm;
  bool have_fmt = false, have_data = false;

  while (in && !(have_fmt && have_data)) {
    ChunkHeader hdr{};
    in.read(hdr.id, 4);
    hdr.size = read_u32(in);
    if (!in) break;
    if (std::memcmp(hdr.id, "fmt ", 4) == 0) {
      format = read_u16(in);
      channels = read_u16(in);
      rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      if (hdr.size > 16) in.seekg(hdr.size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(hdr.id, "data", 4) == 0) {
      pcm.resize(hdr.size / 2);
      in.read(reinterpret_cast<char*>(pcm.data()),
              static_cast<std::streamsize>(pcm.size() * 2));
      have_data = true;
    } else {
      in.seekg(hdr.size + (hdr.size & 1), std::ios::cur);  // chunks are word-aligned
    }
  }

  if (!have_fmt || !have_data) throw std::runtime_error("missing fmt/data chunk: " + path);
  if (format != 1) throw std::runtime_error("wav is not PCM: " + path);
  if (bits != 16) {
    throw std::runtime_error("wav must be 16-bit PCM, got " + std::to_string(bits) +
                             "-bit: " + path);
  }
  if (channels != 1) {
    throw std::runtime_error("wav must be mono, got " + std::to_string(channels) +
                             " channels: " + path);
  }
  if (rate != kSampleRate) {
    throw std::runtime_error("sample-rate mismatch for " + path + ": got " +
                             std::to_string(rate) + " Hz, need " +
                             std::to_string(kSampleRate) + " Hz");
  }

  Utterance utt;
  utt.sample_rate = static_cast<int>(rate);
  utt.id = path;
  utt.samples.resize(pcm.size());
  for (std::size_t i = 0; i < pcm.size(); ++i) {
    utt.samples[i] = static_cast<double>(pcm[i]) / 32768.0;
  }
  utt.validate();
  return utt;
}

void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);

  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  const std::uint32_t riff_size = 36 + data_bytes;
  const std::uint16_t channels = 1, bits = 16, format = 1;
  const std::uint32_t rate = static_cast<std::uint32_t>(sample_rate);
  const std::uint32_t byte_rate = rate * channels * bits / 8;
  const std::uint16_t block_align = channels * bits / 8;
  const std::uint32_t fmt_size = 16;

  out.write("RIFF", 4);
  out.write(reinterpret_cast<const char*>(&riff_size), 4);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  out.write(reinterpret_cast<const char*>(&fmt_size), 4);
  out.write(reinterpret_cast<const char*>(&format), 2);
  out.write(reinterpret_cast<const char*>(&channels), 2);
  out.write(reinterpret_cast<const char*>(&rate), 4);
  out.write(reinterpret_cast<const char*>(&byte_rate), 4);
  out.write(reinterpret_cast<const char*>(&block_align), 2);
  out.write(reinterpret_cast<const char*>(&bits), 2);
  out.write("data", 4);
  out.write(reinterpret_cast<const char*>(&data_bytes), 4);

  for (double s : samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
    out.write(reinterpret_cast<const char*>(&v), 2);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace ctefm
