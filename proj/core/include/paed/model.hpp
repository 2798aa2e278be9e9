#ifndef PAED_MODEL_HPP
#define PAED_MODEL_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "paed/autodiff.hpp"
#include "paed/tensor.hpp"

namespace paed {

struct ModelConfig {
  int n_mels = 40;          // M, spectral input height
  int context_frames = 512; // T, temporal extent of one window
  int n_classes = 0;        // C
  int conv_filters = 256;   // F
  int hidden_size = 256;    // H, per GRU direction
  std::array<int, 3> pool_sizes = {5, 4, 2};  // spectral pooling chain
  double dropout = 0.25;

  void validate() const;  // pool chain must reduce n_mels to exactly 1
};

// Trainable tensor with its gradient buffer (filled by Tape::backward).
struct Param {
  Tensor value;
  Tensor grad;
};

struct ConvLayer {
  Param kernel;  // [Cout, Cin, 5, 5]
  Param bias;    // [Cout]
};

struct BatchNormLayer {
  Param gamma;
  Param beta;
  BatchNormState state;
};

struct GruParams {
  Param w_update, u_update, b_update;
  Param w_reset, u_reset, b_reset;
  Param w_cand, u_cand, b_cand;
};

struct ModelParams {
  std::array<ConvLayer, 3> conv;
  std::array<BatchNormLayer, 3> bn_conv;
  GruParams gru_fwd, gru_bwd;
  Param w_proj, b_proj;  // projection of the concatenated GRU states, [2H,2H]/[2H]
  Param w_res, b_res;    // residual projection of conv features, [F,2H]/[2H]
  BatchNormLayer bn_res;
  Param w_head, b_head;  // output head, [4H,3C]/[3C]

  // Enumerates every stored tensor in a fixed order: trainables first
  // semantics are per-entry (running stats are not trainable).
  struct Entry {
    std::string name;
    Param* param = nullptr;          // set for trainables
    Tensor* state = nullptr;         // set for running stats
    BatchNormState* bn = nullptr;    // owning BN state when `state` is set
    bool trainable = false;
  };
  std::vector<Entry> entries();
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

// Network output for one window: values[t][c][k] with k = (activity,
// onset distance, offset distance), all in [0,1].
struct PredictionSequence {
  int context_frames = 0;
  int n_classes = 0;
  std::vector<double> values;  // [T * C * 3]

  double at(int t, int c, int k) const {
    return values[(static_cast<std::size_t>(t) * n_classes + c) * 3 + k];
  }
  double& at(int t, int c, int k) {
    return values[(static_cast<std::size_t>(t) * n_classes + c) * 3 + k];
  }
};

// Tape-bound handles to the parameters for one forward/backward pass.
struct TapeGru {
  Var w_update, u_update, b_update;
  Var w_reset, u_reset, b_reset;
  Var w_cand, u_cand, b_cand;
};

struct TapeParams {
  std::array<Var, 3> conv_kernel, conv_bias;
  std::array<Var, 3> bn_conv_gamma, bn_conv_beta;
  TapeGru gru_fwd, gru_bwd;
  Var w_proj, b_proj, w_res, b_res;
  Var bn_res_gamma, bn_res_beta;
  Var w_head, b_head;
  ModelParams* source = nullptr;
};

TapeParams lift_params(Tape& tape, ModelParams& params);

// Conv stack: 3 x (conv -> BN -> ReLU -> spectral max-pool -> dropout),
// then the singleton spectral axis is squeezed away.
// input [B,1,M,T] -> [B,F,T]; optional trace receives each pooled stage.
Var conv_block_forward(Tape& tape, Var input, const TapeParams& tp, const ModelConfig& cfg,
                       Mode mode, StepContext* ctx, std::vector<Var>* trace = nullptr);

// One GRU step: x [B,F], h_prev [B,H] -> h [B,H].
Var gru_cell(Tape& tape, Var x, Var h_prev, const TapeGru& g);

// Bidirectional GRU over X [B,F,T] followed by the linear projection of
// [h_backward ++ h_forward]; returns row-flattened Z [B*T, 2H].
Var bigru_forward(Tape& tape, Var conv_features, const TapeParams& tp, const ModelConfig& cfg,
                  Mode mode, StepContext* ctx);

// a = relu(BN(x W_res + b_res)) ++ z over rows; x [R,F], z [R,2H] -> [R,4H].
Var residual_combine(Tape& tape, Var conv_rows, Var recurrent_rows, const TapeParams& tp,
                     double dropout_rate, Mode mode, StepContext* ctx);

// Sigmoid head over rows: [R,4H] -> [R,3C].
Var output_head(Tape& tape, Var residual_rows, const TapeParams& tp);

// Full network: input [B,1,M,T] -> predictions [B,T,3C].
Var model_forward(Tape& tape, Var input, const TapeParams& tp, const ModelConfig& cfg, Mode mode,
                  StepContext* ctx);

// Packs standardized feature frames [start, start+T) of a recording into a
// [1,1,M,T] input tensor, zero-padding past the end.
struct LogMelSpectrogram;
Tensor make_segment_input(const std::vector<double>& framewise_values, int n_mels, int n_frames,
                          int start_frame, int context_frames);

// Infer-mode forward of a single segment (batch of one); BN running stats
// are read, never written.
PredictionSequence predict_segment(ModelParams& params, const ModelConfig& cfg,
                                   const Tensor& segment_input);

}  // namespace paed

#endif  // PAED_MODEL_HPP
