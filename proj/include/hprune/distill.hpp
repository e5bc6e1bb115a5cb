#pragma once

// Student recovery after pruning: positional freezing, plain distillation and
// sensitivity-guided distillation with per-block update scaling.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "hprune/contribution.hpp"
#include "hprune/data.hpp"
#include "hprune/model.hpp"
#include "hprune/planner.hpp"

namespace hprune {

struct FreezeMask {
  std::set<std::size_t> frozen_blocks;  // teacher indices of retained blocks
  double freeze_fraction = 0.5;
  bool embeddings_frozen = true;

  bool operator==(const FreezeMask&) const = default;
};

// Freezes retained blocks whose teacher index is below f * |B|.
FreezeMask freeze_mask(const PrunePlan& plan, double freeze_fraction, bool embeddings_frozen = true);

struct SensitivityWeights {
  std::map<std::size_t, double> weights;  // teacher index -> update scale
  std::size_t zero_top_k = 1;
  double eps = 1e-6;

  bool operator==(const SensitivityWeights&) const = default;
};

// Trainable retained blocks get 1 / max(|ΔP|, eps) from their WholeBlock
// entry, normalized to mean 1 over the nonzero weights; the zero_top_k blocks
// with the largest |ΔP| get 0 (ties resolved towards the earlier block).
SensitivityWeights sensitivity_weights(const ContributionTable& table, const PrunePlan& plan, const FreezeMask& mask,
                                       std::size_t zero_top_k = 1, double eps = 1e-6);

// Teacher velocity and image-stream features for one batch, without a graph.
struct TeacherTargets {
  Tensor velocity;
  std::vector<Tensor> features;           // by teacher block position
  std::vector<std::size_t> teacher_index;  // position -> teacher index
};

TeacherTargets teacher_targets(const Model& teacher, const ForwardInput& input);

struct DistillLosses {
  Tensor l_kd;    // batch-mean squared velocity error
  Tensor l_feat;  // sum over student blocks of batch-mean squared feature error
};

// Throws ContractError when a student block has no teacher correspondent.
DistillLosses distill_losses(const TeacherTargets& targets, const Model& student, const ForwardInput& input);

struct DistillConfig {
  std::size_t steps = 1500;
  float learning_rate = 0.2f;
  std::size_t batch_size = 32;
  float clip_norm = 1.0f;
  double r_thres = 0.30;
  double lambda_feat = 1.0;
  double lambda_kd = 1.0;
  std::size_t zero_top_k = 1;
  double eps = 1e-6;
  std::uint64_t seed = 0;

  // Throws ContractError when a field is out of range.
  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

struct DistillLogRow {
  std::size_t step = 0;
  double l_kd = 0.0;
  double l_feat = 0.0;
  std::vector<double> block_update_norms;  // by student block position
};

struct DistillResult {
  std::vector<DistillLogRow> log;
  std::vector<double> cumulative_update_norms;  // |sum of applied updates| per student block
};

// Replaces the raw gradient of a trainable parameter before clipping and
// scaling. Used by tests to inject known gradients.
using GradientHook = std::function<void(std::size_t step, const ParamRef& param, std::span<float> grad)>;

// Trains `student` in place towards `teacher` on flow-matching draws from the
// train split of `data`. Sensitivity weights are required exactly when the
// plan's target ratio reaches cfg.r_thres. Throws DegenerateMaskError when no
// block is trainable and DivergenceError on a non-finite loss.
DistillResult distill_run(const Model& teacher, Model& student, const PrunePlan& plan, const FreezeMask& mask,
                          const std::optional<SensitivityWeights>& weights, const DistillConfig& cfg,
                          const GlyphDataset& data, const GradientHook& hook = {});

void write_distill_log_csv(std::ostream& out, const DistillResult& result, std::span<const std::size_t> teacher_index);

}  // namespace hprune
