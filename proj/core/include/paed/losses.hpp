#ifndef PAED_LOSSES_HPP
#define PAED_LOSSES_HPP

#include <vector>

#include "paed/annotation.hpp"
#include "paed/autodiff.hpp"
#include "paed/model.hpp"

namespace paed {

struct LossBreakdown {
  double class_loss = 0.0;
  double dist_loss = 0.0;
  double conf_loss = 0.0;
  double total = 0.0;
};

// Binary cross-entropy on activity, averaged over T, summed over classes.
// Predictions are clamped to [1e-7, 1-1e-7] before the logs.
double class_loss(const SegmentTarget& target, const PredictionSequence& pred);

// Squared onset/offset distance error, averaged over T, summed over classes;
// inactive frames (zero targets) are penalized like any other.
double dist_loss(const SegmentTarget& target, const PredictionSequence& pred);

// Squared deviation of the activity indicator from the boundary
// intersection:union ratio (min(p,p^)+min(q,q^)) / (max(p,p^)+max(q,q^));
// a vanishing denominator makes the ratio 0. The ratio is not weighted by
// the predicted activity likelihood.
double conf_loss(const SegmentTarget& target, const PredictionSequence& pred);

// Sum of the three components over a batch, unweighted.
LossBreakdown total_loss(const std::vector<const SegmentTarget*>& targets,
                         const std::vector<const PredictionSequence*>& preds);

// Tape variants: predictions [B,T,3C] on the tape, one target per batch row.
// Gradients flow into the prediction node only (targets are constants).
Var class_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets);
Var dist_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets);
Var conf_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets);

// total = class + dist + conf; fills `breakdown` with the batch sums.
Var total_loss_op(Tape& tape, Var predictions, const std::vector<const SegmentTarget*>& targets,
                  LossBreakdown* breakdown = nullptr);

}  // namespace paed

#endif  // PAED_LOSSES_HPP
