#include "paed/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "paed/error.hpp"
#include "paed/rng.hpp"

namespace paed {

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidConfig("train: batch_size must be >= 1");
  if (epochs < 0) throw InvalidConfig("train: epochs must be >= 0");
  if (!(lr > 0.0)) throw InvalidConfig("train: learning rate must be positive");
  if (segment_stride < 0) throw InvalidConfig("train: segment_stride must be >= 0");
}

void adam_step(ModelParams& params, AdamState& state, const TrainConfig& cfg) {
  auto entries = params.entries();
  std::vector<ModelParams::Entry*> trainables;
  for (auto& e : entries) {
    if (e.trainable) trainables.push_back(&e);
  }
  if (state.moments.empty()) {
    state.moments.resize(trainables.size());
    for (std::size_t i = 0; i < trainables.size(); ++i) {
      state.moments[i].m = Tensor(trainables[i]->param->value.shape());
      state.moments[i].v = Tensor(trainables[i]->param->value.shape());
    }
  }
  if (state.moments.size() != trainables.size()) {
    throw Error("adam: moment count does not match parameter count");
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < trainables.size(); ++i) {
    Param& p = *trainables[i]->param;
    if (!p.grad.same_shape(p.value)) {
      throw MissingGradient("adam: no gradient for " + trainables[i]->name);
    }
    Tensor& m = state.moments[i].m;
    Tensor& v = state.moments[i].v;
    for (std::int64_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p.value[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double clip_gradients(ModelParams& params, double clip_norm) {
  double sq = 0.0;
  auto entries = params.entries();
  for (auto& e : entries) {
    if (!e.trainable) continue;
    const Tensor& g = e.param->grad;
    for (std::int64_t k = 0; k < g.size(); ++k) sq += g[k] * g[k];
  }
  const double norm = std::sqrt(sq);
  if (clip_norm > 0.0 && norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (auto& e : entries) {
      if (!e.trainable) continue;
      Tensor& g = e.param->grad;
      for (std::int64_t k = 0; k < g.size(); ++k) g[k] *= scale;
    }
  }
  return norm;
}

namespace {

struct PreparedData {
  std::vector<LogMelSpectrogram> specs;  // standardized
  std::vector<const RecordingAnnotation*> anns;
  std::vector<SegmentRef> segments;
};

PreparedData prepare(const std::vector<TrainRecording>& recs, const Standardizer& st,
                     int context_frames, int stride) {
  PreparedData out;
  std::vector<int> frame_counts;
  for (const auto& r : recs) {
    LogMelSpectrogram spec = r.features;
    apply_standardizer(st, spec);
    frame_counts.push_back(spec.n_frames);
    out.specs.push_back(std::move(spec));
    out.anns.push_back(&r.annotation);
  }
  out.segments = sample_training_segments(frame_counts, context_frames, stride);
  return out;
}

void check_params_finite(ModelParams& params, std::int64_t step) {
  for (auto& e : params.entries()) {
    const Tensor& t = e.param != nullptr ? e.param->value : *e.state;
    if (!t.all_finite()) {
      throw NumericError("non-finite value in " + e.name + " after step " + std::to_string(step));
    }
  }
}

LossBreakdown validation_loss(PreparedData& val, ModelParams& params, const ModelConfig& cfg) {
  LossBreakdown sum;
  int windows = 0;
  for (std::size_t r = 0; r < val.specs.size(); ++r) {
    const LogMelSpectrogram& spec = val.specs[r];
    for (int start = 0;; start += cfg.context_frames) {
      if (start > 0 && start >= spec.n_frames) break;
      const Tensor seg = make_segment_input(spec.values, spec.n_mels, spec.n_frames, start,
                                            cfg.context_frames);
      const PredictionSequence pred = predict_segment(params, cfg, seg);
      const SegmentTarget tgt = render_segment_target(*val.anns[r], start, cfg.context_frames,
                                                      spec.hop_s, cfg.n_classes);
      sum.class_loss += class_loss(tgt, pred);
      sum.dist_loss += dist_loss(tgt, pred);
      sum.conf_loss += conf_loss(tgt, pred);
      ++windows;
      if (start + cfg.context_frames >= spec.n_frames) break;
    }
  }
  if (windows > 0) {
    sum.class_loss /= windows;
    sum.dist_loss /= windows;
    sum.conf_loss /= windows;
  }
  sum.total = sum.class_loss + sum.dist_loss + sum.conf_loss;
  return sum;
}

}  // namespace

TrainResult train(const std::vector<TrainRecording>& train_recs,
                  const std::vector<TrainRecording>& val_recs, const ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const SpectrogramConfig& feature_cfg,
                  const std::vector<std::string>& labels) {
  model_cfg.validate();
  train_cfg.validate();
  if (train_recs.empty()) throw EmptyDataset("train: no training recordings");

  std::vector<const LogMelSpectrogram*> train_specs;
  for (const auto& r : train_recs) train_specs.push_back(&r.features);
  const Standardizer st = fit_standardizer(train_specs);

  const int stride = train_cfg.segment_stride > 0 ? train_cfg.segment_stride
                                                  : std::max(1, model_cfg.context_frames / 2);
  PreparedData train_data = prepare(train_recs, st, model_cfg.context_frames, stride);
  PreparedData val_data = prepare(val_recs, st, model_cfg.context_frames, model_cfg.context_frames);

  TrainResult result;
  result.final.model = model_cfg;
  result.final.features = feature_cfg;
  result.final.standardizer = st;
  result.final.labels = labels;
  result.final.params = init_params(model_cfg, train_cfg.seed);

  ModelParams& params = result.final.params;
  AdamState adam;
  Rng shuffle_rng(mix_seed(train_cfg.seed, 0x5487));
  double best_val = std::numeric_limits<double>::infinity();

  std::int64_t global_step = 0;
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    std::vector<SegmentRef> order = train_data.segments;
    shuffle_rng.shuffle(order);

    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += static_cast<std::size_t>(train_cfg.batch_size)) {
      const int bsz = static_cast<int>(
          std::min<std::size_t>(train_cfg.batch_size, order.size() - batch_start));

      // Assemble the minibatch input [B,1,M,T] and its targets.
      Tensor batch_input({bsz, 1, model_cfg.n_mels, model_cfg.context_frames});
      std::vector<SegmentTarget> targets;
      targets.reserve(static_cast<std::size_t>(bsz));
      const std::int64_t per_sample =
          static_cast<std::int64_t>(model_cfg.n_mels) * model_cfg.context_frames;
      for (int b = 0; b < bsz; ++b) {
        const SegmentRef ref = order[batch_start + static_cast<std::size_t>(b)];
        const LogMelSpectrogram& spec = train_data.specs[static_cast<std::size_t>(ref.recording_index)];
        const Tensor seg = make_segment_input(spec.values, spec.n_mels, spec.n_frames,
                                              ref.start_frame, model_cfg.context_frames);
        std::copy(seg.data(), seg.data() + per_sample, batch_input.data() + b * per_sample);
        targets.push_back(render_segment_target(*train_data.anns[static_cast<std::size_t>(ref.recording_index)],
                                                ref.start_frame, model_cfg.context_frames,
                                                spec.hop_s, model_cfg.n_classes));
      }
      std::vector<const SegmentTarget*> target_ptrs;
      for (const auto& t : targets) target_ptrs.push_back(&t);

      Tape tape;
      TapeParams tp = lift_params(tape, params);
      StepContext ctx{train_cfg.seed, global_step, true, 0};
      Var input = tape.input(std::move(batch_input));
      Var pred = model_forward(tape, input, tp, model_cfg, Mode::kTrain, &ctx);
      LossBreakdown breakdown;
      Var loss = total_loss_op(tape, pred, target_ptrs, &breakdown);
      if (!std::isfinite(breakdown.total)) {
        throw NumericError("non-finite training loss at step " + std::to_string(global_step));
      }
      tape.backward(loss);
      clip_gradients(params, train_cfg.clip_norm);
      adam_step(params, adam, train_cfg);
      check_params_finite(params, global_step);

      result.log.push_back({epoch, global_step, breakdown});
      ++global_step;
    }

    if (!val_data.specs.empty()) {
      const LossBreakdown val = validation_loss(val_data, params, model_cfg);
      result.val_log.push_back({epoch, val});
      if (val.total < best_val) {
        best_val = val.total;
        result.best = result.final;  // snapshot current params
        result.best_epoch = epoch;
      }
    }
  }

  if (result.best_epoch < 0) {
    result.best = result.final;
    result.best_epoch = train_cfg.epochs > 0 ? train_cfg.epochs - 1 : -1;
  }
  return result;
}

std::vector<TrainResult> train_cv(const std::vector<TrainRecording>& recordings,
                                  const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                  const SpectrogramConfig& feature_cfg,
                                  const std::vector<std::string>& labels) {
  if (recordings.size() < 2) throw TooFewFolds("cross-validation needs at least 2 recordings");
  std::vector<TrainResult> results;
  for (std::size_t k = 0; k < recordings.size(); ++k) {
    std::vector<TrainRecording> fold_train;
    std::vector<TrainRecording> fold_val;
    for (std::size_t i = 0; i < recordings.size(); ++i) {
      (i == k ? fold_val : fold_train).push_back(recordings[i]);
    }
    TrainConfig fold_cfg = train_cfg;
    fold_cfg.seed = mix_seed(train_cfg.seed, 0xf01d, k);
    results.push_back(train(fold_train, fold_val, model_cfg, fold_cfg, feature_cfg, labels));
  }
  return results;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write loss log: " + path);
  f << "epoch,step,class_loss,dist_loss,conf_loss,total\n";
  f.precision(10);
  for (const auto& r : rows) {
    f << r.epoch << ',' << r.step << ',' << r.loss.class_loss << ',' << r.loss.dist_loss << ','
      << r.loss.conf_loss << ',' << r.loss.total << '\n';
  }
}

void write_val_loss_csv(const std::string& path, const std::vector<ValRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write validation loss log: " + path);
  f << "epoch,class_loss,dist_loss,conf_loss,total\n";
  f.precision(10);
  for (const auto& r : rows) {
    f << r.epoch << ',' << r.loss.class_loss << ',' << r.loss.dist_loss << ',' << r.loss.conf_loss
      << ',' << r.loss.total << '\n';
  }
}

}  // namespace paed
