#pragma once

#include "hidisc/sampler.hpp"
#include "hidisc/tensor.hpp"

#include <map>
#include <vector>

namespace hidisc {

// Defines one HiDisc variant: temperature, per-level weights, enabled levels,
// or the label-based SupCon objective.
struct LossConfig {
  double tau = 0.7;
  double lambda_patch = 1.0;
  double lambda_slide = 1.0;
  double lambda_patient = 1.0;
  bool enable_patch = true;
  bool enable_slide = true;
  bool enable_patient = true;
  bool supcon = false;

  void validate() const;
  bool enabled(Level level) const;
  double lambda(Level level) const;

  static LossConfig patch_only();
  static LossConfig slide_only();   // patch + slide levels (HiDisc-Slide)
  static LossConfig patient_all();  // all three levels (HiDisc-Patient)
  static LossConfig supcon_only();
};

struct LossBreakdown {
  std::map<Level, TensorPtr> per_level;
  TensorPtr total;
  std::map<Level, int> skipped_anchor_count;

  double total_value() const { return total->scalar_value(); }
  double level_value(Level level) const { return per_level.at(level)->scalar_value(); }
};

// Contrastive loss over unit-norm embeddings z [N, d] with explicit per-row
// positive sets: sum over anchors of the mean over positives of
// -log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) ).
// Anchors with no positives contribute zero and are counted in *skipped.
TensorPtr level_loss(Tape& tape, const TensorPtr& z,
                     const std::vector<std::vector<int>>& positives, double tau,
                     int* skipped = nullptr);

// Weighted sum of the enabled per-level losses, each computed from the
// batch ancestry partition at that level over the same embeddings.
LossBreakdown hidisc_loss(Tape& tape, const TensorPtr& z, const HierBatch& batch,
                          const LossConfig& cfg);

// Same functional form with positives defined by shared class labels.
TensorPtr supcon_loss(Tape& tape, const TensorPtr& z, const std::vector<int>& class_labels,
                      double tau, int* skipped = nullptr);

}  // namespace hidisc
