#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hprune/pipeline.hpp"

using namespace hprune;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config(const std::string& dir, double r = 0.25) {
  PipelineConfig c;
  c.model.num_blocks = 4;
  c.model.d_model = 32;
  c.model.num_heads = 2;
  c.model.time_embed_dim = 16;
  c.data.per_class = 40;
  c.teacher.steps = 60;
  c.analysis.budget = {16, 2};
  c.planner.target_ratio = r;
  c.student.distill.steps = 20;
  c.eval.budget = {16, 2};
  c.seed = 11;
  c.out_dir = fs::temp_directory_path() / ("hprune_pipeline_" + dir);
  fs::remove_all(c.out_dir);
  return c;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Independent count: every Linear costs in*out per token it is applied to,
// plus the two T×T×d attention products.
std::uint64_t walk_macs(const Model& m, const std::string& prefix = "") {
  const auto& c = m.config();
  const std::uint64_t ni = c.n_img_tokens, nc = c.n_ctx_tokens, T = ni + nc;
  std::uint64_t macs = 0;
  for (const auto& p : m.parameters()) {
    if (!p.is_linear_weight || p.tensor.rank() != 2) continue;
    const auto& n = p.name;
    if (n.rfind(prefix, 0) != 0) continue;
    auto has = [&](const char* s) { return n.find(s) != std::string::npos; };
    std::uint64_t tokens = 1;
    if (has("embed.patch") || has("head.out") || has(".qkv_img") || has(".out_img") || has(".mlp.")) tokens = ni;
    if (has(".qkv_ctx") || has(".out_ctx") || has(".ctx_mlp.")) tokens = nc;
    macs += tokens * p.tensor.dim(0) * p.tensor.dim(1);
    if (has(".qkv_img")) macs += 2 * T * T * c.d_model;
  }
  return macs;
}

ReportRow row(const RunReport& r, Variant v) {
  for (const auto& x : r.rows)
    if (x.variant == v) return x;
  ADD_FAILURE() << "missing row " << variant_name(v);
  return {};
}

}  // namespace

TEST(PipelineTest, ConfigJsonRoundTripAndValidation) {
  auto c = small_config("cfg");
  c.planner.scorer = ScorerId::KoalaCosine;
  const auto back = pipeline_config_from_json(nlohmann::json(pipeline_config_to_json(c)));
  EXPECT_EQ(pipeline_config_to_json(back), pipeline_config_to_json(c));
  EXPECT_EQ(back.planner, c.planner);
  EXPECT_EQ(back.student, c.student);

  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"planner", {{"r", 0.3}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"planner", {{"target_ratio", "high"}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"planner", {{"scorer", "random"}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"planner", {{"target_ratio", 1.5}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"eval", {{"budget", {{"n_per_class", 4}}}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"student", {{"learning_rate", -1.0}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(nlohmann::json{{"data", {{"num_classes", 5}}}}), ConfigError);

  // Validation happens before any artifact is written.
  auto bad = small_config("bad");
  bad.student.freeze_fraction = 2.0;
  EXPECT_THROW(Pipeline{bad}, ConfigError);
  EXPECT_FALSE(fs::exists(bad.out_dir));
}

TEST(PipelineTest, StageNamesAndSeeds) {
  for (Stage s : kStages) EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_THROW(parse_stage("compress"), ConfigError);
  const auto c = small_config("seeds");
  EXPECT_NE(stage_seed(c, "distill"), stage_seed(c, "eval"));
  auto d = c;
  d.seed = 12;
  EXPECT_NE(stage_seed(c, "distill"), stage_seed(d, "distill"));
}

TEST(PipelineTest, DatasetCheckpointRoundTrip) {
  const auto ds = gen_dataset(4, 10, 3);
  const auto back = dataset_from_checkpoint(parse_checkpoint(serialize_checkpoint(dataset_checkpoint(ds))));
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.split, ds.split);
  EXPECT_EQ(back.num_classes, ds.num_classes);
  EXPECT_TRUE(std::equal(back.data.data().begin(), back.data.data().end(), ds.data.data().begin()));
  auto c = dataset_checkpoint(ds);
  c.meta["kind"] = "model";
  EXPECT_THROW(dataset_from_checkpoint(c), FormatError);
}

TEST(PipelineTest, TwoRunsAreBitwiseIdentical) {
  Pipeline a(small_config("det_a")), b(small_config("det_b"));
  a.run();
  b.run();
  for (Stage s : kStages)
    for (auto name : stage_outputs(s, a.config())) {
      ASSERT_TRUE(fs::exists(a.path(name))) << name;
      EXPECT_EQ(bytes_of(a.path(name)), bytes_of(b.path(name))) << name;
    }
}

TEST(PipelineTest, ResumeAndStageIdempotence) {
  Pipeline p(small_config("resume"));
  p.run();
  const auto student = bytes_of(p.path(artifact::kStudent));
  const auto report = bytes_of(p.path(artifact::kReportCsv));
  const auto teacher_time = fs::last_write_time(p.path(artifact::kTeacher));

  p.run_stage(Stage::Distill);
  EXPECT_EQ(bytes_of(p.path(artifact::kStudent)), student);

  fs::remove(p.path(artifact::kStudent));
  fs::remove(p.path(artifact::kReportCsv));
  p.run(true);
  EXPECT_EQ(fs::last_write_time(p.path(artifact::kTeacher)), teacher_time);
  EXPECT_EQ(bytes_of(p.path(artifact::kStudent)), student);
  EXPECT_EQ(bytes_of(p.path(artifact::kReportCsv)), report);

  auto changed = p.config();
  changed.seed = 99;
  EXPECT_THROW(Pipeline(changed).run(true), ConfigError);
}

TEST(PipelineTest, MissingArtifactIsADependencyError) {
  Pipeline p(small_config("missing"));
  try {
    p.run_stage(Stage::Plan);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::Plan);
    EXPECT_EQ(std::string(e.what()).rfind("plan: ", 0), 0u);
    EXPECT_THROW(std::rethrow_exception(e.cause()), DependencyError);
  }
}

TEST(PipelineTest, RegimeGateSelectsDistillation) {
  for (double r : {0.25, 0.35}) {
    Pipeline p(small_config(r < 0.3 ? "moderate" : "aggressive", r));
    for (Stage s : {Stage::GenData, Stage::TrainTeacher, Stage::TrainProbe, Stage::Analyze, Stage::Plan,
                    Stage::Prune, Stage::Distill})
      p.run_stage(s);
    const auto plan = plan_from_json(bytes_of(p.path(artifact::kPlan)));
    const auto meta = load_checkpoint(p.path(artifact::kStudent)).meta;
    EXPECT_TRUE(meta.contains("mask"));
    if (r < 0.3) {
      EXPECT_TRUE(plan.subcomponents_removed.empty());
      EXPECT_FALSE(meta.contains("sensitivity_weights"));
    } else {
      EXPECT_TRUE(meta.contains("sensitivity_weights"));
    }
  }
}

TEST(PipelineTest, ReportArithmeticIsRecomputable) {
  Pipeline p(small_config("report", 0.35));
  const auto report = p.run();
  std::ifstream in(p.path(artifact::kReportCsv));
  const auto parsed = read_report_csv(in);
  ASSERT_EQ(parsed.rows.size(), 4u);
  EXPECT_EQ(parsed.rows[0].variant, Variant::Original);
  EXPECT_EQ(parsed.rows[2].variant, Variant::SgDistill);
  const auto& base = parsed.rows[0];
  EXPECT_EQ(base.memory_percent, 100.0);
  EXPECT_EQ(base.param_reduction_percent, 0.0);
  EXPECT_EQ(base.memory_reduction_percent, 0.0);
  EXPECT_EQ(base.mac_reduction_percent, 0.0);
  EXPECT_EQ(base.quality_drop, 0.0);
  for (const auto& r : parsed.rows) {
    EXPECT_NEAR(r.memory_percent, 100.0 * double(r.bytes) / double(base.bytes), 1e-12);
    EXPECT_NEAR(r.memory_reduction_percent, 100.0 * (1.0 - double(r.bytes) / double(base.bytes)), 1e-12);
    EXPECT_NEAR(r.param_reduction_percent,
                100.0 * (1.0 - double(r.transformer_params) / double(base.transformer_params)), 1e-12);
    EXPECT_NEAR(r.mac_reduction_percent, 100.0 * (1.0 - double(r.macs) / double(base.macs)), 1e-12);
    EXPECT_NEAR(r.quality_drop, base.probe_accuracy - r.probe_accuracy, 1e-12);
  }
  EXPECT_LT(row(parsed, Variant::Quant).bytes, row(parsed, Variant::SgDistill).bytes);
  EXPECT_EQ(parsed.final_variant, Variant::Quant);
  EXPECT_EQ(parsed.passed, row(parsed, Variant::Quant).probe_accuracy >= parsed.quality_floor);
  EXPECT_NEAR(parsed.quality_floor, 0.9 * base.probe_accuracy, 1e-12);
  EXPECT_EQ(parsed.rows.size(), report.rows.size());

  const auto teacher = model_from_checkpoint(load_checkpoint(p.path(artifact::kTeacher)));
  EXPECT_EQ(base.bytes, transformer_bytes(teacher));

  std::ostringstream md;
  write_report_markdown(md, parsed);
  EXPECT_NE(md.str().find("| Original | "), std::string::npos);
}

TEST(PipelineTest, ReportRequiresTeacherRow) {
  QualityReport q{50.0, 0.1, 16, 0};
  EXPECT_THROW(build_report_rows({{Variant::HppOnly, 10, 100, 1000, q}}), ContractError);
  EXPECT_THROW(build_report_rows({{Variant::Original, 10, 100, 1000, q}, {Variant::Original, 10, 100, 1000, q}}),
               ContractError);
  const auto rows = build_report_rows({{Variant::Quant, 5, 10, 500, q}, {Variant::Original, 10, 100, 1000, q}});
  EXPECT_EQ(rows[0].variant, Variant::Original);
  EXPECT_DOUBLE_EQ(rows[1].memory_reduction_percent, 90.0);
  EXPECT_DOUBLE_EQ(rows[1].mac_reduction_percent, 50.0);
  std::istringstream bad("# quality_floor=1 final=Original status=passed\nvariant,oops\n");
  EXPECT_THROW(read_report_csv(bad), FormatError);
}

TEST(PipelineTest, MacCountMatchesIndependentWalk) {
  const auto teacher = Model::init(ModelConfig{}, 1);
  EXPECT_EQ(forward_macs(teacher), walk_macs(teacher));
  const auto per_block = walk_macs(teacher, "blocks.0.");
  EXPECT_EQ(per_block, walk_macs(teacher, "blocks.7."));
  for (std::size_t k = 1; k <= 4; ++k) {
    std::vector<std::size_t> removed;
    for (std::size_t i = 0; i < k; ++i) removed.push_back(11 - 2 * i);
    const auto student = teacher.prune(removed, {});
    EXPECT_EQ(forward_macs(student), forward_macs(teacher) - k * per_block);
    EXPECT_EQ(forward_macs(student), walk_macs(student));
  }
  const auto sub = teacher.prune(std::vector<std::size_t>{}, std::vector<std::pair<std::size_t, Subcomponent>>{
                                                              {3, Subcomponent::Attention}, {5, Subcomponent::Mlp}});
  EXPECT_EQ(forward_macs(sub), walk_macs(sub));
}
