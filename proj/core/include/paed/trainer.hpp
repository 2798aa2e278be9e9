#ifndef PAED_TRAINER_HPP
#define PAED_TRAINER_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "paed/annotation.hpp"
#include "paed/audio_features.hpp"
#include "paed/checkpoint.hpp"
#include "paed/losses.hpp"
#include "paed/model.hpp"

namespace paed {

struct TrainConfig {
  int batch_size = 4;
  int epochs = 100;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  int segment_stride = 0;   // 0 resolves to T/2; 1 samples every possible window
  double clip_norm = 5.0;   // global gradient-norm clip; <= 0 disables

  void validate() const;
};

struct AdamState {
  struct Moment {
    Tensor m, v;
  };
  std::vector<Moment> moments;  // aligned with the trainable entries order
  std::int64_t step = 0;
};

// Bias-corrected Adam over every trainable parameter; gradients must have
// been populated by a backward pass. BN running stats are untouched.
void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg);

// Scales all gradients by clip_norm/|g| when the global norm exceeds it.
double clip_gradients(ModelParams& params, double clip_norm);

struct LossRow {
  int epoch = 0;
  std::int64_t step = 0;
  LossBreakdown loss;
};

struct ValRow {
  int epoch = 0;
  LossBreakdown loss;  // mean per validation window
};

// One recording with features and aligned annotation.
struct TrainRecording {
  LogMelSpectrogram features;  // raw (unstandardized) log-mel
  RecordingAnnotation annotation;
};

struct TrainResult {
  Checkpoint final;
  Checkpoint best;  // lowest validation total loss (== final without val data)
  std::vector<LossRow> log;
  std::vector<ValRow> val_log;
  int best_epoch = -1;
};

// Fits the feature standardizer on the training split, then runs shuffled
// minibatch training with per-epoch validation loss in infer mode. Identical
// seeds and data give bit-identical checkpoints.
TrainResult train(const std::vector<TrainRecording>& train_recs,
                  const std::vector<TrainRecording>& val_recs, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const SpectrogramConfig& feature_cfg,
                  const std::vector<std::string>& labels);

// Leave-one-recording-out cross-validation: fold k trains on all recordings
// but k (with its own standardizer) and validates on k.
std::vector<TrainResult> train_cv(const std::vector<TrainRecording>& recordings,
                                  const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  const SpectrogramConfig& feature_cfg,
                                  const std::vector<std::string>& labels);

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows);
void write_val_loss_csv(const std::string& path, const std::vector<ValRow>& rows);

}  // namespace paed

#endif  // PAED_TRAINER_HPP
