#ifndef PAED_AUTODIFF_HPP
#define PAED_AUTODIFF_HPP

#include <cstdint>
#include <functional>
#include <vector>

#include "paed/tensor.hpp"

namespace paed {

enum class Mode { kTrain, kInfer };

// Reproducibility context for one optimization step. Dropout masks are a pure
// function of (seed, step, counter), so replaying a step yields identical
// masks; update_batchnorm gates running-stat writes during train forwards.
struct StepContext {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  bool update_batchnorm = true;
  int dropout_counter = 0;
};

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Persistent batch-norm statistics; owned by the model, referenced by tape ops.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  bool initialized = false;
  double momentum = 0.99;
  double eps = 1e-5;
};

// Reverse-mode tape over dense tensors. Nodes are appended in execution order
// (hence already topologically sorted); backward() walks them in reverse.
// A tape is confined to a single thread; ops may parallelize internally over
// disjoint output slices, which keeps results independent of thread count.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Parameter leaf: value is read through `value`, gradient is accumulated
  // into `*grad` (resized/zeroed by backward()). Both must outlive the tape.
  Var leaf(const Tensor* value, Tensor* grad);

  // Owned input (features, targets); gradient tracked internally.
  Var input(Tensor value);

  const Tensor& value(Var v) const;
  // Gradient of a node after backward(); throws MissingGradient before that.
  const Tensor& grad(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // Elementwise / linear algebra.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine(Var a, double scale, double shift);
  Var matmul(Var a, Var b);        // [R,K] x [K,N] -> [R,N]
  Var add_bias(Var x, Var bias);   // [R,K] + [K] broadcast over rows
  Var relu(Var x);
  Var sigmoid(Var x);
  Var tanh_op(Var x);
  Var sum(Var x);  // -> scalar [1]
  Var add_scalars(const std::vector<Var>& xs);

  // Shape plumbing.
  Var reshape(Var x, std::vector<int> shape);
  Var concat_cols(Var a, Var b);               // [R,K1],[R,K2] -> [R,K1+K2]
  Var transpose_last2(Var x);                  // [B,F,T] -> [B,T,F]
  Var slice_time(Var x, int t);                // [B,F,T] -> [B,F]
  Var stack_rows(const std::vector<Var>& xs);  // T x [B,K] -> [B,T,K]

  // Network layers.
  // Zero-padded SAME cross-correlation, stride 1: [B,Cin,H,W] * [Cout,Cin,kh,kw].
  Var conv2d_same(Var x, Var kernels, Var bias);
  // Max over k consecutive rows of the H axis (kernel == stride == k);
  // gradient routes to the first maximal index of each window.
  Var maxpool_rows(Var x, int k);
  // Per-channel batch norm over (batch, H, W) of a [B,C,H,W] tensor.
  Var batchnorm_conv(Var x, Var gamma, Var beta, BatchNormState* state, Mode mode,
                     bool update_running);
  // Per-feature batch norm over the rows of a [R,K] tensor.
  Var batchnorm_rows(Var x, Var gamma, Var beta, BatchNormState* state, Mode mode,
                     bool update_running);
  // Inverted dropout: train scales kept entries by 1/(1-rate); infer = identity.
  Var dropout(Var x, double rate, Mode mode, StepContext* ctx);

  // Extension point for fused ops (the loss kernels use this).
  Var make_node(Tensor value, std::vector<int> inputs,
                std::function<void(Tape&, int)> backward);
  const Tensor& value_at(int id) const;
  Tensor& grad_at(int id);
  const std::vector<int>& inputs_at(int id) const;

  // Populates gradients of every node up to `loss`. Zeroes all gradient
  // buffers first, so repeated calls without a new forward are idempotent.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    const Tensor* external_value = nullptr;
    Tensor* external_grad = nullptr;
    Tensor grad;
    bool grad_ready = false;
    std::vector<int> inputs;
    std::function<void(Tape&, int)> backward;
  };

  const Tensor& node_value(int id) const;
  Var push(Node node);
  void check_id(int id) const;

  std::vector<Node> nodes_;
};

}  // namespace paed

#endif  // PAED_AUTODIFF_HPP
