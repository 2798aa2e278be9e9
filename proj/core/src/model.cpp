#include "paed/model.hpp"

#include <cmath>

#include "paed/error.hpp"
#include "paed/rng.hpp"

namespace paed {

void ModelConfig::validate() const {
  if (n_classes < 1) throw InvalidConfig("model: n_classes must be >= 1");
  if (conv_filters < 1 || hidden_size < 1) throw InvalidConfig("model: F and H must be >= 1");
  if (context_frames < 1) throw InvalidConfig("model: context_frames must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidConfig("model: dropout must be in [0,1)");
  int reduced = n_mels;
  for (int p : pool_sizes) {
    if (p < 1 || reduced % p != 0) {
      throw InvalidConfig("model: pool sizes must divide the spectral extent");
    }
    reduced /= p;
  }
  if (reduced != 1) throw InvalidConfig("model: pool chain must reduce n_mels to 1");
}

namespace {

Tensor glorot_uniform(std::vector<int> shape, double fan_in, double fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

void init_gru(GruParams& g, int in_size, int hidden, Rng& rng) {
  for (Param* w : {&g.w_update, &g.w_reset, &g.w_cand}) {
    w->value = glorot_uniform({in_size, hidden}, in_size, hidden, rng);
  }
  for (Param* u : {&g.u_update, &g.u_reset, &g.u_cand}) {
    u->value = glorot_uniform({hidden, hidden}, hidden, hidden, rng);
  }
  for (Param* b : {&g.b_update, &g.b_reset, &g.b_cand}) b->value = Tensor({hidden});
}

void init_bn(BatchNormLayer& bn, int features) {
  bn.gamma.value = Tensor({features}, 1.0);
  bn.beta.value = Tensor({features});
  bn.state.running_mean = Tensor({features});
  bn.state.running_var = Tensor({features}, 1.0);
  bn.state.initialized = false;
}

void gru_entries(const std::string& prefix, GruParams& g, std::vector<ModelParams::Entry>& out) {
  auto add = [&](const std::string& name, Param& p) {
    out.push_back({prefix + "." + name, &p, nullptr, nullptr, true});
  };
  add("w_update", g.w_update);
  add("u_update", g.u_update);
  add("b_update", g.b_update);
  add("w_reset", g.w_reset);
  add("u_reset", g.u_reset);
  add("b_reset", g.b_reset);
  add("w_cand", g.w_cand);
  add("u_cand", g.u_cand);
  add("b_cand", g.b_cand);
}

void bn_entries(const std::string& prefix, BatchNormLayer& bn, std::vector<ModelParams::Entry>& out) {
  out.push_back({prefix + ".gamma", &bn.gamma, nullptr, nullptr, true});
  out.push_back({prefix + ".beta", &bn.beta, nullptr, nullptr, true});
  out.push_back({prefix + ".running_mean", nullptr, &bn.state.running_mean, &bn.state, false});
  out.push_back({prefix + ".running_var", nullptr, &bn.state.running_var, &bn.state, false});
}

}  // namespace

std::vector<ModelParams::Entry> ModelParams::entries() {
  std::vector<Entry> out;
  for (int i = 0; i < 3; ++i) {
    const std::string prefix = "conv" + std::to_string(i + 1);
    out.push_back({prefix + ".kernel", &conv[static_cast<std::size_t>(i)].kernel, nullptr, nullptr, true});
    out.push_back({prefix + ".bias", &conv[static_cast<std::size_t>(i)].bias, nullptr, nullptr, true});
    bn_entries(prefix + ".bn", bn_conv[static_cast<std::size_t>(i)], out);
  }
  gru_entries("gru_fwd", gru_fwd, out);
  gru_entries("gru_bwd", gru_bwd, out);
  out.push_back({"proj.weight", &w_proj, nullptr, nullptr, true});
  out.push_back({"proj.bias", &b_proj, nullptr, nullptr, true});
  out.push_back({"residual.weight", &w_res, nullptr, nullptr, true});
  out.push_back({"residual.bias", &b_res, nullptr, nullptr, true});
  bn_entries("residual.bn", bn_res, out);
  out.push_back({"head.weight", &w_head, nullptr, nullptr, true});
  out.push_back({"head.bias", &b_head, nullptr, nullptr, true});
  return out;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x9a2d));
  const int f = cfg.conv_filters;
  const int h = cfg.hidden_size;
  const int c = cfg.n_classes;

  ModelParams p;
  for (int i = 0; i < 3; ++i) {
    const int cin = i == 0 ? 1 : f;
    p.conv[static_cast<std::size_t>(i)].kernel =
        Param{glorot_uniform({f, cin, 5, 5}, cin * 25.0, f * 25.0, rng), {}};
    p.conv[static_cast<std::size_t>(i)].bias = Param{Tensor({f}), {}};
    init_bn(p.bn_conv[static_cast<std::size_t>(i)], f);
  }
  init_gru(p.gru_fwd, f, h, rng);
  init_gru(p.gru_bwd, f, h, rng);
  p.w_proj.value = glorot_uniform({2 * h, 2 * h}, 2.0 * h, 2.0 * h, rng);
  p.b_proj.value = Tensor({2 * h});
  p.w_res.value = glorot_uniform({f, 2 * h}, f, 2.0 * h, rng);
  p.b_res.value = Tensor({2 * h});
  init_bn(p.bn_res, 2 * h);
  p.w_head.value = glorot_uniform({4 * h, 3 * c}, 4.0 * h, 3.0 * c, rng);
  p.b_head.value = Tensor({3 * c});
  return p;
}

TapeParams lift_params(Tape& tape, ModelParams& params) {
  TapeParams tp;
  tp.source = &params;
  auto bind = [&tape](Param& p) { return tape.leaf(&p.value, &p.grad); };
  for (int i = 0; i < 3; ++i) {
    tp.conv_kernel[static_cast<std::size_t>(i)] = bind(params.conv[static_cast<std::size_t>(i)].kernel);
    tp.conv_bias[static_cast<std::size_t>(i)] = bind(params.conv[static_cast<std::size_t>(i)].bias);
    tp.bn_conv_gamma[static_cast<std::size_t>(i)] = bind(params.bn_conv[static_cast<std::size_t>(i)].gamma);
    tp.bn_conv_beta[static_cast<std::size_t>(i)] = bind(params.bn_conv[static_cast<std::size_t>(i)].beta);
  }
  auto bind_gru = [&](GruParams& g) {
    TapeGru tg;
    tg.w_update = bind(g.w_update);
    tg.u_update = bind(g.u_update);
    tg.b_update = bind(g.b_update);
    tg.w_reset = bind(g.w_reset);
    tg.u_reset = bind(g.u_reset);
    tg.b_reset = bind(g.b_reset);
    tg.w_cand = bind(g.w_cand);
    tg.u_cand = bind(g.u_cand);
    tg.b_cand = bind(g.b_cand);
    return tg;
  };
  tp.gru_fwd = bind_gru(params.gru_fwd);
  tp.gru_bwd = bind_gru(params.gru_bwd);
  tp.w_proj = bind(params.w_proj);
  tp.b_proj = bind(params.b_proj);
  tp.w_res = bind(params.w_res);
  tp.b_res = bind(params.b_res);
  tp.bn_res_gamma = bind(params.bn_res.gamma);
  tp.bn_res_beta = bind(params.bn_res.beta);
  tp.w_head = bind(params.w_head);
  tp.b_head = bind(params.b_head);
  return tp;
}

Var conv_block_forward(Tape& tape, Var input, const TapeParams& tp, const ModelConfig& cfg,
                       Mode mode, StepContext* ctx, std::vector<Var>* trace) {
  ModelParams& mp = *tp.source;
  const bool update = mode == Mode::kTrain && ctx != nullptr && ctx->update_batchnorm;
  Var x = input;
  for (int i = 0; i < 3; ++i) {
    x = tape.conv2d_same(x, tp.conv_kernel[static_cast<std::size_t>(i)], tp.conv_bias[static_cast<std::size_t>(i)]);
    x = tape.batchnorm_conv(x, tp.bn_conv_gamma[static_cast<std::size_t>(i)],
                            tp.bn_conv_beta[static_cast<std::size_t>(i)],
                            &mp.bn_conv[static_cast<std::size_t>(i)].state, mode, update);
    x = tape.relu(x);
    x = tape.maxpool_rows(x, cfg.pool_sizes[static_cast<std::size_t>(i)]);
    x = tape.dropout(x, cfg.dropout, mode, ctx);
    if (trace != nullptr) trace->push_back(x);
  }
  const Tensor& v = tape.value(x);
  if (v.dim(2) != 1) throw ShapeMismatch("conv block: spectral axis not reduced to 1");
  return tape.reshape(x, {v.dim(0), v.dim(1), v.dim(3)});  // [B,F,T]
}

Var gru_cell(Tape& tape, Var x, Var h_prev, const TapeGru& g) {
  Var update = tape.sigmoid(tape.add_bias(
      tape.add(tape.matmul(x, g.w_update), tape.matmul(h_prev, g.u_update)), g.b_update));
  Var reset = tape.sigmoid(tape.add_bias(
      tape.add(tape.matmul(x, g.w_reset), tape.matmul(h_prev, g.u_reset)), g.b_reset));
  Var cand = tape.tanh_op(tape.add_bias(
      tape.add(tape.matmul(x, g.w_cand), tape.matmul(tape.mul(reset, h_prev), g.u_cand)),
      g.b_cand));
  // h' = (1 - update) * h_prev + update * cand
  return tape.add(tape.mul(tape.affine(update, -1.0, 1.0), h_prev), tape.mul(update, cand));
}

Var bigru_forward(Tape& tape, Var conv_features, const TapeParams& tp, const ModelConfig& cfg,
                  Mode mode, StepContext* ctx) {
  const Tensor& xv = tape.value(conv_features);
  if (xv.ndim() != 3) throw ShapeMismatch("bigru: [B,F,T] input required");
  const int batch = xv.dim(0);
  const int steps = xv.dim(2);
  const int hidden = cfg.hidden_size;

  std::vector<Var> slices(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) slices[static_cast<std::size_t>(t)] = tape.slice_time(conv_features, t);

  std::vector<Var> h_fwd(static_cast<std::size_t>(steps)), h_bwd(static_cast<std::size_t>(steps));
  Var h = tape.input(Tensor({batch, hidden}));
  for (int t = 0; t < steps; ++t) {
    h = gru_cell(tape, slices[static_cast<std::size_t>(t)], h, tp.gru_fwd);
    h_fwd[static_cast<std::size_t>(t)] = h;
  }
  h = tape.input(Tensor({batch, hidden}));
  for (int t = steps - 1; t >= 0; --t) {
    h = gru_cell(tape, slices[static_cast<std::size_t>(t)], h, tp.gru_bwd);
    h_bwd[static_cast<std::size_t>(t)] = h;
  }

  Var fwd_rows = tape.reshape(tape.stack_rows(h_fwd), {batch * steps, hidden});
  Var bwd_rows = tape.reshape(tape.stack_rows(h_bwd), {batch * steps, hidden});
  // Backward state leads in the concatenation; the projection is linear.
  Var z = tape.add_bias(tape.matmul(tape.concat_cols(bwd_rows, fwd_rows), tp.w_proj), tp.b_proj);
  return tape.dropout(z, cfg.dropout, mode, ctx);
}

Var residual_combine(Tape& tape, Var conv_rows, Var recurrent_rows, const TapeParams& tp,
                     double dropout_rate, Mode mode, StepContext* ctx) {
  ModelParams& mp = *tp.source;
  const bool update = mode == Mode::kTrain && ctx != nullptr && ctx->update_batchnorm;
  Var projected = tape.add_bias(tape.matmul(conv_rows, tp.w_res), tp.b_res);
  projected = tape.batchnorm_rows(projected, tp.bn_res_gamma, tp.bn_res_beta, &mp.bn_res.state,
                                  mode, update);
  projected = tape.relu(projected);
  projected = tape.dropout(projected, dropout_rate, mode, ctx);
  return tape.concat_cols(projected, recurrent_rows);
}

Var output_head(Tape& tape, Var residual_rows, const TapeParams& tp) {
  return tape.sigmoid(tape.add_bias(tape.matmul(residual_rows, tp.w_head), tp.b_head));
}

Var model_forward(Tape& tape, Var input, const TapeParams& tp, const ModelConfig& cfg, Mode mode,
                  StepContext* ctx) {
  const Tensor& in = tape.value(input);
  if (in.ndim() != 4 || in.dim(1) != 1 || in.dim(2) != cfg.n_mels || in.dim(3) != cfg.context_frames) {
    throw ShapeMismatch("model_forward: input must be [B,1,M,T]");
  }
  const int batch = in.dim(0);
  const int steps = cfg.context_frames;

  Var conv = conv_block_forward(tape, input, tp, cfg, mode, ctx);  // [B,F,T]
  Var z_rows = bigru_forward(tape, conv, tp, cfg, mode, ctx);      // [B*T,2H]
  Var x_rows = tape.reshape(tape.transpose_last2(conv), {batch * steps, cfg.conv_filters});
  Var a_rows = residual_combine(tape, x_rows, z_rows, tp, cfg.dropout, mode, ctx);  // [B*T,4H]
  Var out_rows = output_head(tape, a_rows, tp);                        // [B*T,3C]
  return tape.reshape(out_rows, {batch, steps, 3 * cfg.n_classes});
}

Tensor make_segment_input(const std::vector<double>& framewise_values, int n_mels, int n_frames,
                          int start_frame, int context_frames) {
  Tensor seg({1, 1, n_mels, context_frames});
  for (int t = 0; t < context_frames; ++t) {
    const int n = start_frame + t;
    if (n < 0 || n >= n_frames) continue;  // zero padding
    for (int m = 0; m < n_mels; ++m) {
      seg[static_cast<std::int64_t>(m) * context_frames + t] =
          framewise_values[static_cast<std::size_t>(n) * n_mels + m];
    }
  }
  return seg;
}

PredictionSequence predict_segment(ModelParams& params, const ModelConfig& cfg,
                                   const Tensor& segment_input) {
  Tape tape;
  TapeParams tp = lift_params(tape, params);
  Var input = tape.input(segment_input);
  Var out = model_forward(tape, input, tp, cfg, Mode::kInfer, nullptr);
  const Tensor& v = tape.value(out);

  PredictionSequence pred;
  pred.context_frames = cfg.context_frames;
  pred.n_classes = cfg.n_classes;
  pred.values.assign(v.data(), v.data() + v.size());
  return pred;
}

}  // namespace paed
