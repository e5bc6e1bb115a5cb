#include "hprune/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "hprune/errors.hpp"

namespace hprune {

FreezeMask freeze_mask(const PrunePlan& plan, double freeze_fraction, bool embeddings_frozen) {
  if (!(freeze_fraction >= 0.0 && freeze_fraction <= 1.0))
    throw ContractError("freeze mask: fraction must lie in [0, 1]");
  const double nb = static_cast<double>(plan.correspondence.size() + plan.whole_blocks_removed.size());
  FreezeMask mask;
  mask.freeze_fraction = freeze_fraction;
  mask.embeddings_frozen = embeddings_frozen;
  for (auto t : plan.correspondence)
    if (static_cast<double>(t) < freeze_fraction * nb) mask.frozen_blocks.insert(t);
  return mask;
}

SensitivityWeights sensitivity_weights(const ContributionTable& table, const PrunePlan& plan, const FreezeMask& mask,
                                       std::size_t zero_top_k, double eps) {
  if (!(eps > 0.0)) throw ContractError("sensitivity weights: eps must be positive");
  struct Entry {
    std::size_t block;
    double mag;
  };
  std::vector<Entry> trainable;
  for (auto t : plan.correspondence) {
    if (mask.frozen_blocks.count(t)) continue;
    const auto it = table.entries.find(AblationSpec{t, Removal::whole_block()});
    if (it == table.entries.end())
      throw ContractError("sensitivity weights: no WholeBlock ΔP for block " + std::to_string(t));
    trainable.push_back({t, std::abs(it->second)});
  }
  std::vector<Entry> by_mag = trainable;
  std::stable_sort(by_mag.begin(), by_mag.end(), [](const Entry& a, const Entry& b) { return a.mag > b.mag; });

  SensitivityWeights w;
  w.zero_top_k = zero_top_k;
  w.eps = eps;
  const std::size_t k = std::min(zero_top_k, by_mag.size());
  for (std::size_t j = 0; j < k; ++j) w.weights[by_mag[j].block] = 0.0;
  double sum = 0.0;
  std::size_t nonzero = 0;
  for (std::size_t j = k; j < by_mag.size(); ++j) {
    const double raw = 1.0 / std::max(by_mag[j].mag, eps);
    w.weights[by_mag[j].block] = raw;
    sum += raw;
    ++nonzero;
  }
  if (nonzero > 0) {
    const double mean = sum / static_cast<double>(nonzero);
    for (std::size_t j = k; j < by_mag.size(); ++j) w.weights[by_mag[j].block] /= mean;
  }
  return w;
}

TeacherTargets teacher_targets(const Model& teacher, const ForwardInput& input) {
  const Tape* tape = active_tape();
  if (tape) throw ContractError("teacher targets: must be computed outside a tape");
  auto out = forward(teacher, input, {}, true);
  TeacherTargets t;
  t.velocity = out.velocity.detach();
  for (auto& f : out.block_features) t.features.push_back(f.detach());
  t.teacher_index = teacher.teacher_indices();
  return t;
}

DistillLosses distill_losses(const TeacherTargets& targets, const Model& student, const ForwardInput& input) {
  const std::size_t b = input.batch();
  const auto out = forward(student, input, {}, true);
  DistillLosses l;
  l.l_kd = squared_error(out.velocity, targets.velocity, b);
  l.l_feat = Tensor::scalar(0.0f);
  for (std::size_t p = 0; p < student.num_blocks(); ++p) {
    const std::size_t t = student.teacher_indices()[p];
    const auto it = std::find(targets.teacher_index.begin(), targets.teacher_index.end(), t);
    if (it == targets.teacher_index.end())
      throw ContractError("distill losses: student block " + std::to_string(p) + " (teacher " + std::to_string(t) +
                          ") has no teacher correspondent");
    const auto& tf = targets.features[static_cast<std::size_t>(it - targets.teacher_index.begin())];
    l.l_feat = add(l.l_feat, squared_error(out.block_features[p], tf, b));
  }
  return l;
}

void DistillConfig::validate() const {
  if (steps < 1) throw ContractError("distill config: steps must be at least 1");
  if (!(learning_rate > 0.0f)) throw ContractError("distill config: learning rate must be positive");
  if (batch_size < 1) throw ContractError("distill config: batch size must be at least 1");
  if (!(r_thres > 0.0 && r_thres < 1.0)) throw ContractError("distill config: r_thres must lie in (0, 1)");
  if (!(lambda_feat >= 0.0 && lambda_kd >= 0.0)) throw ContractError("distill config: loss weights must be >= 0");
  if (!(eps > 0.0)) throw ContractError("distill config: eps must be positive");
}

namespace {

bool is_trainable(const ParamRef& p, const FreezeMask& mask) {
  switch (p.group) {
    case ParamGroup::Embedding: return !mask.embeddings_frozen;
    case ParamGroup::Head: return true;
    case ParamGroup::Block: return mask.frozen_blocks.count(p.teacher_index) == 0;
  }
  return false;
}

// Restores the student's gradient flags when the run ends.
class FlagGuard {
 public:
  explicit FlagGuard(const std::vector<ParamRef>& params) : params_(params) {
    for (const auto& p : params_) flags_.push_back(p.tensor.requires_grad());
  }
  ~FlagGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].tensor;
      t.zero_grad();
      t.set_requires_grad(flags_[i]);
    }
  }

 private:
  const std::vector<ParamRef>& params_;
  std::vector<bool> flags_;
};

}  // namespace

DistillResult distill_run(const Model& teacher, Model& student, const PrunePlan& plan, const FreezeMask& mask,
                          const std::optional<SensitivityWeights>& weights, const DistillConfig& cfg,
                          const GlyphDataset& data, const GradientHook& hook) {
  cfg.validate();
  if (student.teacher_indices() != plan.correspondence)
    throw ContractError("distill: student does not match the plan's correspondence");
  const bool aggressive = plan.target_ratio >= cfg.r_thres;
  if (aggressive && !weights) throw ContractError("distill: aggressive plan requires sensitivity weights");
  if (!aggressive && weights) throw ContractError("distill: moderate plan must not use sensitivity weights");

  const auto params = student.parameters();
  std::vector<bool> trainable(params.size());
  std::size_t trainable_blocks = 0;
  for (std::size_t p = 0; p < student.num_blocks(); ++p)
    if (!mask.frozen_blocks.count(student.teacher_indices()[p])) ++trainable_blocks;
  if (trainable_blocks == 0) throw DegenerateMaskError("distill: the freeze mask leaves no trainable block");

  std::vector<double> weight(params.size(), 1.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    trainable[i] = is_trainable(params[i], mask);
    if (weights && params[i].group == ParamGroup::Block && trainable[i]) {
      const auto it = weights->weights.find(params[i].teacher_index);
      if (it == weights->weights.end())
        throw ContractError("distill: no sensitivity weight for block " + std::to_string(params[i].teacher_index));
      weight[i] = it->second;
    }
  }

  const GlyphDataset train = data.subset(Split::Train);
  const std::size_t n = train.size(), dim = student.config().sample_dim();
  if (n == 0 || train.data.dim(1) != dim) throw ContractError("distill: dataset rows do not match the sample size");

  FlagGuard guard(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    t.zero_grad();
    t.set_requires_grad(trainable[i]);
  }

  DistillResult result;
  std::vector<std::vector<double>> cumulative(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    if (trainable[i]) cumulative[i].assign(params[i].tensor.numel(), 0.0);
  std::vector<std::vector<float>> grads(params.size());

  Rng rng(derive_seed(cfg.seed, "distill.batches"));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<float> x0;
    std::vector<std::size_t> y;
    x0.reserve(cfg.batch_size * dim);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t k = rng.index(n);
      const auto row = train.data.data().subspan(k * dim, dim);
      x0.insert(x0.end(), row.begin(), row.end());
      y.push_back(train.labels[k]);
    }
    const FlowBatch fb = make_flow_batch(Tensor::from({cfg.batch_size, dim}, std::move(x0)), std::move(y), rng);
    const TeacherTargets targets = teacher_targets(teacher, fb.input);

    DistillLogRow row;
    row.step = step;
    {
      Tape tape;
      TapeScope scope(tape);
      const auto l = distill_losses(targets, student, fb.input);
      const Tensor total = add(scale(l.l_kd, static_cast<float>(cfg.lambda_kd)),
                               scale(l.l_feat, static_cast<float>(cfg.lambda_feat)));
      row.l_kd = l.l_kd.item();
      row.l_feat = l.l_feat.item();
      if (!std::isfinite(total.item())) throw DivergenceError("distill: non-finite loss", step);
      tape.backward(total);
    }

    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable[i]) continue;
      Tensor t = params[i].tensor;
      if (t.has_grad()) grads[i].assign(t.grad().begin(), t.grad().end());
      else grads[i].assign(t.numel(), 0.0f);
      t.zero_grad();
      if (hook) hook(step, params[i], grads[i]);
      for (float g : grads[i]) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = (cfg.clip_norm > 0.0f && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
    const double lr = static_cast<double>(cfg.learning_rate) * clip;

    row.block_update_norms.assign(student.num_blocks(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable[i] || weight[i] == 0.0) continue;
      Tensor t = params[i].tensor;
      auto w = t.mutable_data();
      double step_sq = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double delta = lr * weight[i] * grads[i][k];
        w[k] = static_cast<float>(w[k] - delta);
        cumulative[i][k] += delta;
        step_sq += delta * delta;
      }
      if (params[i].group == ParamGroup::Block) row.block_update_norms[params[i].block_position] += step_sq;
    }
    for (auto& v : row.block_update_norms) v = std::sqrt(v);
    result.log.push_back(std::move(row));
  }

  result.cumulative_update_norms.assign(student.num_blocks(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].group == ParamGroup::Block)
      for (double d : cumulative[i]) result.cumulative_update_norms[params[i].block_position] += d * d;
  for (auto& v : result.cumulative_update_norms) v = std::sqrt(v);
  return result;
}

void write_distill_log_csv(std::ostream& out, const DistillResult& result, std::span<const std::size_t> teacher_index) {
  out << "step,l_kd,l_feat";
  for (auto t : teacher_index) out << ",update_norm_block" << t;
  out << "\n";
  char buf[40];
  for (const auto& row : result.log) {
    out << row.step;
    std::snprintf(buf, sizeof buf, ",%.9g", row.l_kd);
    out << buf;
    std::snprintf(buf, sizeof buf, ",%.9g", row.l_feat);
    out << buf;
    for (double v : row.block_update_norms) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace hprune
