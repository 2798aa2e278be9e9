#include "paed/audio_features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "paed/error.hpp"

namespace paed {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Iterative radix-2 FFT, in place. Sizes here are always powers of two
// (fft_size defaults to 2048), so a general transform is unnecessary.
void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(angle), std::sin(angle));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

int SpectrogramConfig::win_samples(int sample_rate) const {
  return static_cast<int>(std::lround(win_ms * 1e-3 * sample_rate));
}

int SpectrogramConfig::hop_samples(int sample_rate) const {
  return static_cast<int>(std::lround(hop_ms * 1e-3 * sample_rate));
}

void SpectrogramConfig::validate(int sample_rate) const {
  if (n_mels < 1) throw InvalidConfig("features: n_mels must be >= 1");
  if (std::abs(hop_ms - win_ms / 2.0) > 1e-9) {
    throw InvalidConfig("features: hop must be half the window (50% overlap)");
  }
  if (!(fmin_hz < fmax_hz) || fmax_hz > sample_rate / 2.0 + 1e-9) {
    throw InvalidConfig("features: need fmin < fmax <= sample_rate/2");
  }
  if (fft_size < win_samples(sample_rate)) {
    throw InvalidConfig("features: fft_size smaller than the analysis window");
  }
  if ((fft_size & (fft_size - 1)) != 0) {
    throw InvalidConfig("features: fft_size must be a power of two");
  }
  if (log_floor <= 0.0) throw InvalidConfig("features: log_floor must be positive");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open WAV file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw UnsupportedFormat("not a RIFF/WAVE file: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw UnsupportedFormat("not a RIFF/WAVE file: " + path);
  }

  int channels = 0, bits = 0, rate = 0, format = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const std::uint32_t chunk_len = read_u32(p + off + 4);
    const unsigned char* body = p + off + 8;
    if (off + 8 + chunk_len > bytes.size()) throw UnsupportedFormat("truncated WAV chunk: " + path);
    if (std::memcmp(p + off, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw UnsupportedFormat("malformed fmt chunk: " + path);
      format = read_u16(body);
      channels = read_u16(body + 2);
      rate = static_cast<int>(read_u32(body + 4));
      bits = read_u16(body + 14);
    } else if (std::memcmp(p + off, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    off += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }
  if (format != 1) throw UnsupportedFormat("only PCM WAV is supported: " + path);
  if (bits != 16) throw UnsupportedFormat("only 16-bit WAV is supported: " + path);
  if (channels < 1 || data == nullptr) throw UnsupportedFormat("malformed WAV: " + path);
  if (rate != kRequiredSampleRate) {
    throw UnsupportedFormat("sample rate must be 44100 Hz, got " + std::to_string(rate) + ": " + path);
  }

  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * 2;
  const std::size_t n = data_len / frame_bytes;
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* s = data + i * frame_bytes;  // first channel
    const std::int16_t v = static_cast<std::int16_t>(s[0] | (s[1] << 8));
    w.samples[i] = static_cast<double>(v) / 32768.0;
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  std::string out;
  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, data_bytes);
  for (double x : w.samples) {
    const double clamped = std::clamp(x, -1.0, 1.0);
    const std::int16_t v = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
    put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write WAV file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to WAV file: " + path);
}

MelFilterbank build_mel_filterbank(const SpectrogramConfig& cfg, int sample_rate) {
  cfg.validate(sample_rate);
  const int m = cfg.n_mels;
  const int bins = cfg.fft_size / 2 + 1;
  const double bin_hz = static_cast<double>(sample_rate) / cfg.fft_size;

  // M+2 mel-equidistant edges; filter i rises over [edge i, edge i+1] and
  // falls over [edge i+1, edge i+2].
  std::vector<double> edges_hz(static_cast<std::size_t>(m) + 2);
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  for (int i = 0; i < m + 2; ++i) {
    edges_hz[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (m + 1));
  }

  for (int i = 0; i + 1 < m + 2; ++i) {
    if (std::lround(edges_hz[static_cast<std::size_t>(i)] / bin_hz) ==
        std::lround(edges_hz[static_cast<std::size_t>(i) + 1] / bin_hz)) {
      throw InvalidConfig("filterbank: adjacent mel centers collapse onto one FFT bin");
    }
  }

  MelFilterbank fb;
  fb.weights = Tensor({m, bins});
  fb.center_freqs_hz.assign(edges_hz.begin() + 1, edges_hz.end() - 1);
  for (int i = 0; i < m; ++i) {
    const double left = edges_hz[static_cast<std::size_t>(i)];
    const double center = edges_hz[static_cast<std::size_t>(i) + 1];
    const double right = edges_hz[static_cast<std::size_t>(i) + 2];
    double row_max = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double wgt = 0.0;
      if (f > left && f < center) {
        wgt = (f - left) / (center - left);
      } else if (f >= center && f < right) {
        wgt = (right - f) / (right - center);
      }
      fb.weights[static_cast<std::int64_t>(i) * bins + k] = wgt;
      row_max = std::max(row_max, wgt);
    }
    if (row_max <= 0.0) throw InvalidConfig("filterbank: filter row has no supported FFT bin");
    // Normalize so the sampled peak is exactly 1.
    for (int k = 0; k < bins; ++k) fb.weights[static_cast<std::int64_t>(i) * bins + k] /= row_max;
  }
  return fb;
}

LogMelSpectrogram compute_logmel(const Waveform& w, const SpectrogramConfig& cfg,
                                 const MelFilterbank& fb, const std::string& recording_id) {
  cfg.validate(w.sample_rate);
  const int win = cfg.win_samples(w.sample_rate);
  const int hop = cfg.hop_samples(w.sample_rate);
  if (static_cast<int>(w.samples.size()) < win) {
    throw TooShort("waveform shorter than one analysis window");
  }
  const int n_frames = static_cast<int>((w.samples.size() - static_cast<std::size_t>(win)) / hop) + 1;
  const int bins = cfg.fft_size / 2 + 1;
  if (fb.n_mels() != cfg.n_mels || fb.n_bins() != bins) {
    throw ShapeMismatch("filterbank does not match spectrogram config");
  }

  std::vector<double> window(static_cast<std::size_t>(win));
  for (int i = 0; i < win; ++i) {
    window[static_cast<std::size_t>(i)] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (win - 1));
  }

  LogMelSpectrogram spec;
  spec.n_mels = cfg.n_mels;
  spec.n_frames = n_frames;
  spec.hop_s = cfg.hop_s();
  spec.recording_id = recording_id;
  spec.values.resize(static_cast<std::size_t>(n_frames) * cfg.n_mels);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(cfg.fft_size));
  std::vector<double> power(static_cast<std::size_t>(bins));
  const double lf = std::log(cfg.log_floor);
  for (int n = 0; n < n_frames; ++n) {
    const double* src = w.samples.data() + static_cast<std::ptrdiff_t>(n) * hop;
    for (int i = 0; i < win; ++i) buf[static_cast<std::size_t>(i)] = src[i] * window[static_cast<std::size_t>(i)];
    std::fill(buf.begin() + win, buf.end(), std::complex<double>(0.0, 0.0));
    fft_radix2(buf);
    for (int k = 0; k < bins; ++k) power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* wrow = fb.weights.data() + static_cast<std::int64_t>(m) * bins;
      double acc = 0.0;
      for (int k = 0; k < bins; ++k) acc += wrow[k] * power[static_cast<std::size_t>(k)];
      spec.at(m, n) = acc > cfg.log_floor ? std::log(acc) : lf;
    }
  }
  return spec;
}

Standardizer fit_standardizer(const std::vector<const LogMelSpectrogram*>& train_specs) {
  if (train_specs.empty()) throw EmptyCorpus("standardizer: no training spectrograms");
  const int m = train_specs.front()->n_mels;
  std::int64_t frames = 0;
  for (const auto* s : train_specs) {
    if (s->n_mels != m) throw ShapeMismatch("standardizer: inconsistent mel counts");
    frames += s->n_frames;
  }
  if (frames < 2) throw EmptyCorpus("standardizer: need at least two frames");

  Standardizer st;
  st.mean.assign(static_cast<std::size_t>(m), 0.0);
  st.stddev.assign(static_cast<std::size_t>(m), 0.0);
  for (const auto* s : train_specs) {
    for (int n = 0; n < s->n_frames; ++n) {
      for (int b = 0; b < m; ++b) st.mean[static_cast<std::size_t>(b)] += s->at(b, n);
    }
  }
  for (int b = 0; b < m; ++b) st.mean[static_cast<std::size_t>(b)] /= static_cast<double>(frames);
  for (const auto* s : train_specs) {
    for (int n = 0; n < s->n_frames; ++n) {
      for (int b = 0; b < m; ++b) {
        const double d = s->at(b, n) - st.mean[static_cast<std::size_t>(b)];
        st.stddev[static_cast<std::size_t>(b)] += d * d;
      }
    }
  }
  for (int b = 0; b < m; ++b) {
    st.stddev[static_cast<std::size_t>(b)] =
        std::max(std::sqrt(st.stddev[static_cast<std::size_t>(b)] / static_cast<double>(frames)), 1e-6);
  }
  return st;
}

void apply_standardizer(const Standardizer& st, LogMelSpectrogram& spec) {
  if (static_cast<int>(st.mean.size()) != spec.n_mels) {
    throw ShapeMismatch("standardizer: mel count mismatch");
  }
  for (int n = 0; n < spec.n_frames; ++n) {
    for (int b = 0; b < spec.n_mels; ++b) {
      spec.at(b, n) = (spec.at(b, n) - st.mean[static_cast<std::size_t>(b)]) / st.stddev[static_cast<std::size_t>(b)];
    }
  }
}

void write_feature_cache(const std::string& path, const LogMelSpectrogram& spec) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write feature cache: " + path);
  std::string header = "LMEL";
  put_u32(header, static_cast<std::uint32_t>(spec.n_mels));
  put_u32(header, static_cast<std::uint32_t>(spec.n_frames));
  put_u32(header, 0);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> vals(spec.values.begin(), spec.values.end());
  f.write(reinterpret_cast<const char*>(vals.data()),
          static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!f) throw IoError("short write to feature cache: " + path);
}

LogMelSpectrogram read_feature_cache(const std::string& path, const std::string& recording_id) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open feature cache: " + path);
  unsigned char header[16];
  f.read(reinterpret_cast<char*>(header), 16);
  if (!f || std::memcmp(header, "LMEL", 4) != 0) {
    throw CorruptFile("bad feature cache header: " + path);
  }
  LogMelSpectrogram spec;
  spec.n_mels = static_cast<int>(read_u32(header + 4));
  spec.n_frames = static_cast<int>(read_u32(header + 8));
  spec.recording_id = recording_id;
  const std::size_t count = static_cast<std::size_t>(spec.n_mels) * static_cast<std::size_t>(spec.n_frames);
  std::vector<float> vals(count);
  f.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!f) throw CorruptFile("truncated feature cache: " + path);
  spec.values.assign(vals.begin(), vals.end());
  return spec;
}

}  // namespace paed
