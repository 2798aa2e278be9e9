#ifndef PAED_CHECKPOINT_HPP
#define PAED_CHECKPOINT_HPP

#include <string>
#include <vector>

#include "paed/audio_features.hpp"
#include "paed/model.hpp"

namespace paed {

// Per-class decision thresholds, filled in by the tuning step. Empty vectors
// mean "not tuned yet".
struct Thresholds {
  std::vector<double> alpha;           // activity gate for confidence accumulation
  std::vector<double> beta;            // detection threshold on normalized confidence
  std::vector<double> baseline_alpha;  // activity binarization for the baseline decoder
  std::vector<int> median_window;      // per-class median filter width (odd)

  bool has_decoder() const { return !alpha.empty() && !beta.empty(); }
  bool has_baseline() const { return !baseline_alpha.empty() && !median_window.empty(); }
};

// Everything `detect` needs besides the audio itself.
struct Checkpoint {
  ModelConfig model;
  SpectrogramConfig features;
  Standardizer standardizer;
  Thresholds thresholds;
  std::vector<std::string> labels;
  ModelParams params;
};

// Binary container: "PAED" magic, u32 version, u32 header length, UTF-8 JSON
// header (config, parameter manifest, standardizer, thresholds, labels),
// concatenated little-endian float64 parameter blocks, trailing CRC32 over
// all preceding bytes. Round trips are bit-exact.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Guards fine-tuning/decoding against a checkpoint trained for a different
// problem size; throws VersionMismatch on any disagreement.
void ensure_compatible(const Checkpoint& ckpt, const ModelConfig& expected);

}  // namespace paed

#endif  // PAED_CHECKPOINT_HPP
