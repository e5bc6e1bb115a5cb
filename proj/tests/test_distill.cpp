#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hprune/distill.hpp"
#include "hprune/errors.hpp"

using namespace hprune;

namespace {

ModelConfig tiny(std::size_t blocks) {
  ModelConfig c;
  c.num_blocks = blocks;
  c.d_model = 16;
  c.num_heads = 2;
  c.time_embed_dim = 8;
  return c;
}

const GlyphDataset& glyphs() {
  static const GlyphDataset ds = gen_dataset(8, 40, 1);
  return ds;
}

PrunePlan plan_removing(const Model& m, std::vector<std::size_t> whole, double target, double r_thres = 0.30) {
  PrunePlan p;
  p.whole_blocks_removed = std::move(whole);
  p.target_ratio = target;
  p.r_thres = r_thres;
  for (auto t : m.teacher_indices())
    if (std::count(p.whole_blocks_removed.begin(), p.whole_blocks_removed.end(), t) == 0) p.correspondence.push_back(t);
  return p;
}

ContributionTable deltas(std::vector<double> d) {
  ContributionTable t;
  for (std::size_t i = 0; i < d.size(); ++i) t.entries[{i, Removal::whole_block()}] = d[i];
  return t;
}

std::vector<std::vector<float>> snapshot(const Model& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

ForwardInput batch_input(const Model& m, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> x(b * m.config().sample_dim());
  for (auto& v : x) v = rng.normal();
  std::vector<float> t(b);
  std::vector<std::size_t> y(b);
  for (std::size_t i = 0; i < b; ++i) {
    t[i] = rng.uniform();
    y[i] = rng.index(m.config().num_classes);
  }
  return {Tensor::from({b, m.config().sample_dim()}, std::move(x)), std::move(t), std::move(y)};
}

DistillConfig short_run(std::size_t steps) {
  DistillConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.learning_rate = 0.1f;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(FreezeMaskTest, Threshold) {
  const auto m = Model::init(tiny(12), 1);
  const auto plan = plan_removing(m, {10, 11}, 0.2);
  const auto mask = freeze_mask(plan, 0.5);
  EXPECT_EQ(mask.frozen_blocks, (std::set<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_TRUE(mask.embeddings_frozen);
  EXPECT_TRUE(freeze_mask(plan, 0.0).frozen_blocks.empty());
  EXPECT_TRUE(freeze_mask(plan, 0.0).embeddings_frozen);
  EXPECT_EQ(freeze_mask(plan, 1.0).frozen_blocks.size(), 10u);
  const auto early = freeze_mask(plan_removing(m, {2, 3}, 0.2), 0.5);
  EXPECT_EQ(early.frozen_blocks, (std::set<std::size_t>{0, 1, 4, 5}));
  EXPECT_THROW(freeze_mask(plan, 1.5), ContractError);
}

TEST(SensitivityTest, HandNormalization) {
  const auto m = Model::init(tiny(3), 1);
  const auto plan = plan_removing(m, {}, 0.35);
  const auto w = sensitivity_weights(deltas({4.0, -2.0, 1.0}), plan, freeze_mask(plan, 0.0), 1, 1e-6);
  EXPECT_EQ(w.weights.at(0), 0.0);
  EXPECT_NEAR(w.weights.at(1), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(w.weights.at(2), 4.0 / 3.0, 1e-12);

  const auto equal = sensitivity_weights(deltas({2.0, 2.0, -2.0}), plan, freeze_mask(plan, 0.0), 0, 1e-6);
  for (const auto& [b, v] : equal.weights) EXPECT_DOUBLE_EQ(v, 1.0);

  const auto clamped = sensitivity_weights(deltas({0.0, 1.0, 3.0}), plan, freeze_mask(plan, 0.0), 0, 1e-6);
  for (const auto& [b, v] : clamped.weights) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(clamped.weights.at(0), clamped.weights.at(1));

  EXPECT_THROW(sensitivity_weights(deltas({1.0, 2.0}), plan, freeze_mask(plan, 0.0)), ContractError);
}

TEST(SensitivityTest, OrderingInverseToMagnitude) {
  const auto m = Model::init(tiny(12), 1);
  const auto plan = plan_removing(m, {11}, 0.35);
  Rng rng(9);
  std::vector<double> d(12);
  for (auto& v : d) v = 10.0 * rng.normal();
  const auto mask = freeze_mask(plan, 0.25);
  const auto w = sensitivity_weights(deltas(d), plan, mask, 2);
  EXPECT_EQ(w.weights.size(), 8u);
  std::size_t zeros = 0;
  for (const auto& [a, wa] : w.weights) {
    zeros += wa == 0.0 ? 1 : 0;
    for (const auto& [b, wb] : w.weights)
      if (std::abs(d[a]) > std::abs(d[b])) EXPECT_LE(wa, wb);
  }
  EXPECT_EQ(zeros, 2u);
  double sum = 0.0;
  for (const auto& [b, v] : w.weights) sum += v;
  EXPECT_NEAR(sum / 6.0, 1.0, 1e-12);
}

TEST(LossTest, SelfDistillationIsZero) {
  const auto m = Model::init(tiny(3), 2);
  const auto copy = m.clone();
  const auto in = batch_input(m, 4, 1);
  const auto l = distill_losses(teacher_targets(m, in), copy, in);
  EXPECT_EQ(l.l_kd.item(), 0.0f);
  EXPECT_EQ(l.l_feat.item(), 0.0f);
}

TEST(LossTest, HandComputedDifferences) {
  const auto m = Model::init(tiny(1), 3);
  const auto in = batch_input(m, 2, 2);
  auto targets = teacher_targets(m, in);
  auto shift = [](Tensor& t, std::size_t k, float by) {
    std::vector<float> v(t.data().begin(), t.data().end());
    v[k] += by;
    t = Tensor::from(t.shape(), std::move(v));
  };
  shift(targets.features[0], 0, 0.5f);
  shift(targets.features[0], 16 * 3 + 5, -0.25f);
  shift(targets.velocity, 7, 1.0f);
  const auto l = distill_losses(targets, m, in);
  EXPECT_NEAR(l.l_feat.item(), (0.25 + 0.0625) / 2.0, 1e-6);
  EXPECT_NEAR(l.l_kd.item(), 1.0 / 2.0, 1e-6);
}

TEST(LossTest, DuplicatedBatchKeepsMeans) {
  const auto teacher = Model::init(tiny(3), 4);
  const auto student = teacher.prune(std::vector<std::size_t>{1}, {});
  const auto in = batch_input(teacher, 3, 3);
  ForwardInput twice = in;
  std::vector<float> x(in.x_t.data().begin(), in.x_t.data().end());
  x.insert(x.end(), in.x_t.data().begin(), in.x_t.data().end());
  twice.x_t = Tensor::from({6, in.x_t.dim(1)}, std::move(x));
  twice.t.insert(twice.t.end(), in.t.begin(), in.t.end());
  twice.y.insert(twice.y.end(), in.y.begin(), in.y.end());
  const auto a = distill_losses(teacher_targets(teacher, in), student, in);
  const auto b = distill_losses(teacher_targets(teacher, twice), student, twice);
  EXPECT_NEAR(a.l_kd.item(), b.l_kd.item(), 1e-5 * std::abs(a.l_kd.item()));
  EXPECT_NEAR(a.l_feat.item(), b.l_feat.item(), 1e-5 * std::abs(a.l_feat.item()));
}

TEST(LossTest, MissingCorrespondentIsRejected) {
  const auto teacher = Model::init(tiny(3), 5);
  const auto small = teacher.prune(std::vector<std::size_t>{2}, {});
  const auto big = teacher.clone();
  const auto in = batch_input(teacher, 2, 4);
  EXPECT_THROW(distill_losses(teacher_targets(small, in), big, in), ContractError);
}

TEST(DistillRunTest, FrozenParametersAreBitwiseUnchanged) {
  const auto teacher = Model::init(tiny(6), 6);
  const auto plan = plan_removing(teacher, {5}, 0.2);
  auto student = apply_prune(teacher, plan);
  const auto mask = freeze_mask(plan, 0.5);
  const auto before = snapshot(student);
  const auto result = distill_run(teacher, student, plan, mask, std::nullopt, short_run(200), glyphs());
  EXPECT_EQ(result.log.size(), 200u);
  const auto after = snapshot(student);
  const auto params = student.parameters();
  bool trained_changed = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool frozen = params[i].group == ParamGroup::Embedding ||
                        (params[i].group == ParamGroup::Block && mask.frozen_blocks.count(params[i].teacher_index));
    if (frozen) EXPECT_EQ(after[i], before[i]) << params[i].name;
    else trained_changed |= after[i] != before[i];
    EXPECT_EQ(params[i].tensor.requires_grad(), true);
  }
  EXPECT_TRUE(trained_changed);
  for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(result.cumulative_update_norms[p], 0.0);
}

TEST(DistillRunTest, TeacherMissingStudentBlocksIsRejected) {
  const auto teacher = Model::init(tiny(4), 7);
  const auto plan = plan_removing(teacher, {}, 0.2);
  auto student = apply_prune(teacher, plan);
  const auto partial = teacher.prune(std::vector<std::size_t>{3}, {});
  EXPECT_THROW(distill_run(partial, student, plan, freeze_mask(plan, 0.0), std::nullopt, short_run(1), glyphs()),
               ContractError);
}

TEST(DistillRunTest, ZeroWeightAndRiggedRatio) {
  const auto teacher = Model::init(tiny(3), 8);
  const auto plan = plan_removing(teacher, {}, 0.35);
  auto student = apply_prune(teacher, plan);
  const auto mask = freeze_mask(plan, 0.0);
  const auto w = sensitivity_weights(deltas({4.0, 2.0, 1.0}), plan, mask, 1);
  const auto before = snapshot(student);
  const auto constant = [](std::size_t, const ParamRef&, std::span<float> g) {
    for (std::size_t k = 0; k < g.size(); ++k) g[k] = (k % 2 == 0 ? 1e-3f : -5e-4f);
  };
  const auto result = distill_run(teacher, student, plan, mask, w, short_run(50), glyphs(), constant);
  EXPECT_EQ(result.cumulative_update_norms[0], 0.0);
  for (const auto& row : result.log) EXPECT_EQ(row.block_update_norms[0], 0.0);
  const auto after = snapshot(student);
  const auto params = student.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].group == ParamGroup::Block && params[i].teacher_index == 0) EXPECT_EQ(after[i], before[i]);
  EXPECT_NEAR(result.cumulative_update_norms[2] / result.cumulative_update_norms[1], 2.0, 1e-6);
}

TEST(DistillRunTest, RegimeGateAndDegenerateMask) {
  const auto teacher = Model::init(tiny(3), 9);
  const auto moderate = plan_removing(teacher, {}, 0.2);
  const auto aggressive = plan_removing(teacher, {}, 0.35);
  auto student = teacher.clone();
  const auto mask = freeze_mask(moderate, 0.0);
  const auto w = sensitivity_weights(deltas({1.0, 2.0, 3.0}), aggressive, mask, 1);
  EXPECT_THROW(distill_run(teacher, student, moderate, mask, w, short_run(1), glyphs()), ContractError);
  EXPECT_THROW(distill_run(teacher, student, aggressive, mask, std::nullopt, short_run(1), glyphs()), ContractError);
  EXPECT_THROW(distill_run(teacher, student, moderate, freeze_mask(moderate, 1.0), std::nullopt, short_run(1), glyphs()),
               DegenerateMaskError);
  auto bad = short_run(0);
  EXPECT_THROW(distill_run(teacher, student, moderate, mask, std::nullopt, bad, glyphs()), ContractError);
}

TEST(DistillRunTest, SelfDistillationDoesNotDrift) {
  const auto teacher = Model::init(tiny(3), 10);
  const auto plan = plan_removing(teacher, {}, 0.2);
  auto student = teacher.clone();
  const auto before = snapshot(student);
  const auto result = distill_run(teacher, student, plan, freeze_mask(plan, 0.0), std::nullopt, short_run(5), glyphs());
  for (const auto& row : result.log) {
    EXPECT_EQ(row.l_kd, 0.0);
    EXPECT_EQ(row.l_feat, 0.0);
  }
  EXPECT_EQ(snapshot(student), before);
}

TEST(DistillRunTest, DivergenceNamesTheStep) {
  const auto teacher = Model::init(tiny(3), 11);
  const auto plan = plan_removing(teacher, {}, 0.2);
  auto student = teacher.clone();
  const auto poison = [](std::size_t step, const ParamRef&, std::span<float> g) {
    if (step == 2) std::fill(g.begin(), g.end(), std::numeric_limits<float>::infinity());
  };
  try {
    distill_run(teacher, student, plan, freeze_mask(plan, 0.0), std::nullopt, short_run(10), glyphs(), poison);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 3u);
  }
}

TEST(DistillRunTest, LossDecreasesAndIsDeterministic) {
  const auto teacher = Model::init(tiny(6), 12);
  const auto plan = plan_removing(teacher, {4, 5}, 0.2);
  auto a = apply_prune(teacher, plan);
  auto b = apply_prune(teacher, plan);
  const auto mask = freeze_mask(plan, 0.5);
  const auto ra = distill_run(teacher, a, plan, mask, std::nullopt, short_run(200), glyphs());
  const auto rb = distill_run(teacher, b, plan, mask, std::nullopt, short_run(200), glyphs());
  EXPECT_EQ(snapshot(a), snapshot(b));
  auto median = [&](std::size_t from, std::size_t to) {
    std::vector<double> v;
    for (std::size_t s = from; s < to; ++s) v.push_back(ra.log[s].l_kd);
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  EXPECT_LT(median(180, 200), median(0, 20));

  std::stringstream csv;
  write_distill_log_csv(csv, ra, a.teacher_indices());
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,l_kd,l_feat,update_norm_block0,update_norm_block1,update_norm_block2,update_norm_block3");
}
