#ifndef PAED_AUDIO_FEATURES_HPP
#define PAED_AUDIO_FEATURES_HPP

#include <string>
#include <vector>

#include "paed/tensor.hpp"

namespace paed {

inline constexpr int kRequiredSampleRate = 44100;

struct Waveform {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = 0;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

struct SpectrogramConfig {
  int n_mels = 40;
  double fmin_hz = 50.0;
  double fmax_hz = 22050.0;
  double win_ms = 40.0;
  double hop_ms = 20.0;
  int fft_size = 2048;
  double log_floor = 1e-10;

  int win_samples(int sample_rate) const;
  int hop_samples(int sample_rate) const;
  double hop_s() const { return hop_ms / 1000.0; }
  // Throws InvalidConfig when the invariants (50% overlap, band inside
  // Nyquist, FFT covers the window) do not hold.
  void validate(int sample_rate) const;
};

// Triangular mel filters with unit peaks; weights is [n_mels x (fft/2+1)].
struct MelFilterbank {
  Tensor weights;
  std::vector<double> center_freqs_hz;

  int n_mels() const { return weights.ndim() == 2 ? weights.dim(0) : 0; }
  int n_bins() const { return weights.ndim() == 2 ? weights.dim(1) : 0; }
};

// Log mel spectrogram, stored frame-major: values[frame * n_mels + mel].
struct LogMelSpectrogram {
  int n_mels = 0;
  int n_frames = 0;
  double hop_s = 0.02;
  std::string recording_id;
  std::vector<double> values;

  double at(int mel, int frame) const { return values[static_cast<std::size_t>(frame) * n_mels + mel]; }
  double& at(int mel, int frame) { return values[static_cast<std::size_t>(frame) * n_mels + mel]; }
};

// Per-mel-bin affine normalization fit on the training split only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-6

  bool empty() const { return mean.empty(); }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Reads a 16-bit PCM WAV. Throws UnsupportedFormat for non-PCM data, other
// bit depths, or a sample rate other than 44100 Hz (inputs are not resampled);
// multichannel files keep the first channel.
Waveform load_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

MelFilterbank build_mel_filterbank(const SpectrogramConfig& cfg, int sample_rate);

// Hamming-windowed power spectrum, mel projection, natural log with floor.
LogMelSpectrogram compute_logmel(const Waveform& w, const SpectrogramConfig& cfg,
                                 const MelFilterbank& fb, const std::string& recording_id = "");

Standardizer fit_standardizer(const std::vector<const LogMelSpectrogram*>& train_specs);
void apply_standardizer(const Standardizer& s, LogMelSpectrogram& spec);

// Feature cache: "LMEL" magic, u32 n_mels, u32 n_frames, u32 reserved, then
// n_frames*n_mels little-endian f32 values in frame-major order.
void write_feature_cache(const std::string& path, const LogMelSpectrogram& spec);
LogMelSpectrogram read_feature_cache(const std::string& path, const std::string& recording_id = "");

}  // namespace paed

#endif  // PAED_AUDIO_FEATURES_HPP
