#include "paed/losses.hpp"

#include <cmath>

#include "paed/error.hpp"

namespace paed {

namespace {

constexpr double kBceClamp = 1e-7;
constexpr double kIouDenomFloor = 1e-12;

struct Cell {
  double y, p, q;     // targets
  double yh, ph, qh;  // predictions
};

// Iterates (t,c) cells of one (target, prediction) pair; fn returns the
// cell's loss term, optionally writing d(term)/d(pred) into g[0..2].
template <typename Fn>
double reduce_cells(const SegmentTarget& tgt, const double* pred, int t_frames, int classes,
                    Fn&& fn, double* grad = nullptr) {
  double acc = 0.0;
  for (int t = 0; t < t_frames; ++t) {
    for (int c = 0; c < classes; ++c) {
      const std::size_t ti = tgt.idx(t, c);
      const std::size_t pi = (static_cast<std::size_t>(t) * classes + c) * 3;
      Cell cell{tgt.y[ti], tgt.p[ti], tgt.q[ti], pred[pi], pred[pi + 1], pred[pi + 2]};
      acc += fn(cell, grad != nullptr ? grad + pi : nullptr);
    }
  }
  return acc / static_cast<double>(t_frames);
}

void check_pair(const SegmentTarget& tgt, const PredictionSequence& pred) {
  if (tgt.context_frames != pred.context_frames || tgt.n_classes != pred.n_classes) {
    throw ShapeMismatch("loss: target and prediction extents differ");
  }
}

double class_term(const Cell& cell, double* g, double inv_t) {
  const double yh = std::min(std::max(cell.yh, kBceClamp), 1.0 - kBceClamp);
  if (g != nullptr && cell.yh > kBceClamp && cell.yh < 1.0 - kBceClamp) {
    g[0] += inv_t * (-cell.y / yh + (1.0 - cell.y) / (1.0 - yh));
  }
  return -cell.y * std::log(yh) - (1.0 - cell.y) * std::log(1.0 - yh);
}

double dist_term(const Cell& cell, double* g, double inv_t) {
  const double dp = cell.p - cell.ph;
  const double dq = cell.q - cell.qh;
  if (g != nullptr) {
    g[1] += inv_t * (-2.0 * dp);
    g[2] += inv_t * (-2.0 * dq);
  }
  return dp * dp + dq * dq;
}

double conf_term(const Cell& cell, double* g, double inv_t) {
  const double inter = std::min(cell.p, cell.ph) + std::min(cell.q, cell.qh);
  const double uni = std::max(cell.p, cell.ph) + std::max(cell.q, cell.qh);
  if (uni < kIouDenomFloor) {
    // 0/0 ratio defined as 0; constant w.r.t. the predictions.
    return cell.y * cell.y;
  }
  const double iou = inter / uni;
  const double diff = cell.y - iou;
  if (g != nullptr) {
    // Ties route the subgradient to the target argument, i.e. zero here.
    const double di_dph = cell.ph < cell.p ? 1.0 : 0.0;
    const double du_dph = cell.ph > cell.p ? 1.0 : 0.0;
    const double di_dqh = cell.qh < cell.q ? 1.0 : 0.0;
    const double du_dqh = cell.qh > cell.q ? 1.0 : 0.0;
    const double factor = -2.0 * diff / (uni * uni);
    g[1] += inv_t * factor * (di_dph * uni - inter * du_dph);
    g[2] += inv_t * factor * (di_dqh * uni - inter * du_dqh);
  }
  return diff * diff;
}

}  // namespace

double class_loss(const SegmentTarget& target, const PredictionSequence& pred) {
  check_pair(target, pred);
  const double inv_t = 1.0 / target.context_frames;
  return reduce_cells(target, pred.values.data(), target.context_frames, target.n_classes,
                      [inv_t](const Cell& c, double* g) { return class_term(c, g, inv_t); });
}

double dist_loss(const SegmentTarget& target, const PredictionSequence& pred) {
  check_pair(target, pred);
  const double inv_t = 1.0 / target.context_frames;
  return reduce_cells(target, pred.values.data(), target.context_frames, target.n_classes,
                      [inv_t](const Cell& c, double* g) { return dist_term(c, g, inv_t); });
}

double conf_loss(const SegmentTarget& target, const PredictionSequence& pred) {
  check_pair(target, pred);
  const double inv_t = 1.0 / target.context_frames;
  return reduce_cells(target, pred.values.data(), target.context_frames, target.n_classes,
                      [inv_t](const Cell& c, double* g) { return conf_term(c, g, inv_t); });
}

LossBreakdown total_loss(const std::vector<const SegmentTarget*>& targets,
                         const std::vector<const PredictionSequence*>& preds) {
  if (targets.empty() || targets.size() != preds.size()) {
    throw EmptyBatch("total_loss: batch is empty or ragged");
  }
  LossBreakdown sum;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    sum.class_loss += class_loss(*targets[i], *preds[i]);
    sum.dist_loss += dist_loss(*targets[i], *preds[i]);
    sum.conf_loss += conf_loss(*targets[i], *preds[i]);
  }
  sum.total = sum.class_loss + sum.dist_loss + sum.conf_loss;
  return sum;
}

namespace {

enum class LossKind { kClass, kDist, kConf };

Var fused_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets,
                  LossKind kind) {
  if (targets.empty()) throw EmptyBatch("loss op: empty batch");
  const Tensor& pv = tape.value(predictions);
  if (pv.ndim() != 3) throw ShapeMismatch("loss op: predictions must be [B,T,3C]");
  const int batch = pv.dim(0);
  const int t_frames = pv.dim(1);
  if (batch != static_cast<int>(targets.size())) {
    throw ShapeMismatch("loss op: batch size does not match target count");
  }
  const int classes = targets[0]->n_classes;
  if (pv.dim(2) != 3 * classes || targets[0]->context_frames != t_frames) {
    throw ShapeMismatch("loss op: target extents do not match predictions");
  }

  const double inv_t = 1.0 / t_frames;
  const std::int64_t per_sample = static_cast<std::int64_t>(t_frames) * classes * 3;
  double acc = 0.0;
  for (int b = 0; b < batch; ++b) {
    const double* pred = pv.data() + b * per_sample;
    acc += reduce_cells(*targets[static_cast<std::size_t>(b)], pred, t_frames, classes,
                        [kind, inv_t](const Cell& c, double* g) {
                          switch (kind) {
                            case LossKind::kClass: return class_term(c, g, inv_t);
                            case LossKind::kDist: return dist_term(c, g, inv_t);
                            default: return conf_term(c, g, inv_t);
                          }
                        });
  }

  // Backward recomputes the per-cell gradients; the targets are captured by
  // pointer and must outlive the tape.
  auto targets_copy = targets;
  return tape.make_node(
      Tensor::scalar(acc), {predictions.id},
      [targets_copy, kind, inv_t, batch, t_frames, classes, per_sample](Tape& t, int self) {
        const double gout = t.grad_at(self)[0];
        const Tensor& pv = t.value_at(t.inputs_at(self)[0]);
        Tensor& gp = t.grad_at(t.inputs_at(self)[0]);
        Tensor local(gp.shape());
        for (int b = 0; b < batch; ++b) {
          const double* pred = pv.data() + b * per_sample;
          double* grad = local.data() + b * per_sample;
          reduce_cells(*targets_copy[static_cast<std::size_t>(b)], pred, t_frames, classes,
                       [kind, inv_t](const Cell& c, double* g) {
                         switch (kind) {
                           case LossKind::kClass: return class_term(c, g, inv_t);
                           case LossKind::kDist: return dist_term(c, g, inv_t);
                           default: return conf_term(c, g, inv_t);
                         }
                       },
                       grad);
        }
        for (std::int64_t i = 0; i < gp.size(); ++i) gp[i] += gout * local[i];
      });
}

}  // namespace

Var class_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets) {
  return fused_loss_op(tape, predictions, targets, LossKind::kClass);
}

Var dist_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets) {
  return fused_loss_op(tape, predictions, targets, LossKind::kDist);
}

Var conf_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets) {
  return fused_loss_op(tape, predictions, targets, LossKind::kConf);
}

Var total_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets,
                  LossBreakdown* breakdown) {
  Var c = class_loss_op(tape, predictions, targets);
  Var d = dist_loss_op(tape, predictions, targets);
  Var f = conf_loss_op(tape, predictions, targets);
  Var total = tape.add_scalars({c, d, f});
  if (breakdown != nullptr) {
    breakdown->class_loss = tape.value(c)[0];
    breakdown->dist_loss = tape.value(d)[0];
    breakdown->conf_loss = tape.value(f)[0];
    breakdown->total = tape.value(total)[0];
  }
  return total;
}

}  // namespace paed
