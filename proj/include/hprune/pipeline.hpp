#pragma once

// End-to-end compression run: configuration, per-stage artifacts in an output
// directory, resumable stages and the final report.

#include <array>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "hprune/checkpoint.hpp"
#include "hprune/contribution.hpp"
#include "hprune/data.hpp"
#include "hprune/distill.hpp"
#include "hprune/errors.hpp"
#include "hprune/model.hpp"
#include "hprune/planner.hpp"
#include "hprune/quant.hpp"

namespace hprune {

struct DataConfig {
  std::size_t num_classes = 8;
  std::size_t per_class = 100;
  bool operator==(const DataConfig&) const = default;
};

struct TeacherConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  float learning_rate = 0.5f;
  float clip_norm = 1.0f;
  bool operator==(const TeacherConfig&) const = default;
};

struct AnalysisConfig {
  EvalBudget budget{};
  bool include_joint = false;
  std::size_t workers = 1;
  bool operator==(const AnalysisConfig&) const = default;
};

struct PlannerConfig {
  double alpha = kDefaultAlpha;
  double target_ratio = 0.25;
  double r_thres = 0.30;
  ScorerId scorer = ScorerId::Hierarchical;
  std::size_t calibration_batch = 64;  // koala_cosine only
  bool operator==(const PlannerConfig&) const = default;
};

struct StudentConfig {
  DistillConfig distill{};  // r_thres and seed are taken from the planner and the run seed
  double freeze_fraction = 0.5;
  bool embeddings_frozen = true;
  bool operator==(const StudentConfig&) const = default;
};

struct QuantConfig {
  bool enabled = true;
  std::size_t group_size = kDefaultGroupSize;
  bool operator==(const QuantConfig&) const = default;
};

struct EvalConfig {
  EvalBudget budget{};
  double quality_fraction = 0.9;  // floor q = fraction * teacher probe accuracy
  bool operator==(const EvalConfig&) const = default;
};

struct PipelineConfig {
  ModelConfig model{};
  DataConfig data{};
  ProbeConfig probe{};
  TeacherConfig teacher{};
  AnalysisConfig analysis{};
  PlannerConfig planner{};
  StudentConfig student{};
  QuantConfig quant{};
  EvalConfig eval{};
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "hprune_out";

  // Checks every stage's parameters. Throws ConfigError naming the field.
  void validate() const;
};

nlohmann::ordered_json pipeline_config_to_json(const PipelineConfig& cfg);
// Missing fields keep their defaults. Throws ConfigError on unknown keys or
// ill-typed values.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

enum class Stage : std::uint8_t {
  GenData = 0,
  TrainTeacher,
  TrainProbe,
  Analyze,
  Plan,
  Prune,
  Distill,
  Quantize,
  Eval,
  Report
};

inline constexpr std::array<Stage, 10> kStages = {Stage::GenData, Stage::TrainTeacher, Stage::TrainProbe,
                                                 Stage::Analyze, Stage::Plan,         Stage::Prune,
                                                 Stage::Distill, Stage::Quantize,     Stage::Eval,
                                                 Stage::Report};

std::string_view stage_name(Stage s);
// Throws ConfigError for an unknown name.
Stage parse_stage(std::string_view name);

// A stage failed; what() is prefixed with the stage name and cause() holds
// the original exception.
class StageError : public Error {
 public:
  StageError(Stage stage, const std::string& what, std::exception_ptr cause)
      : Error(std::string(stage_name(stage)) + ": " + what), stage_(stage), cause_(std::move(cause)) {}
  Stage stage() const noexcept { return stage_; }
  std::exception_ptr cause() const noexcept { return cause_; }

 private:
  Stage stage_;
  std::exception_ptr cause_;
};

// Artifact file names inside out_dir.
namespace artifact {
inline constexpr std::string_view kConfig = "config.json";
inline constexpr std::string_view kDataset = "dataset.hprn";
inline constexpr std::string_view kTeacher = "teacher.hprn";
inline constexpr std::string_view kTeacherLog = "teacher_log.csv";
inline constexpr std::string_view kProbe = "probe.hprn";
inline constexpr std::string_view kContribution = "contribution.csv";
inline constexpr std::string_view kScores = "scores.csv";
inline constexpr std::string_view kPlan = "plan.json";
inline constexpr std::string_view kPruned = "pruned.hprn";
inline constexpr std::string_view kStudent = "student.hprn";
inline constexpr std::string_view kDistillLog = "distill_log.csv";
inline constexpr std::string_view kQuantized = "student_q4.hprn";
inline constexpr std::string_view kEval = "eval.json";
inline constexpr std::string_view kReportCsv = "report.csv";
inline constexpr std::string_view kReportMd = "report.md";
}  // namespace artifact

// Outputs written by a stage (a quantize stage with quantization disabled
// writes nothing).
std::vector<std::string_view> stage_outputs(Stage s, const PipelineConfig& cfg);

// Named per-stage seed substream of the run seed.
std::uint64_t stage_seed(const PipelineConfig& cfg, std::string_view stream);

Checkpoint dataset_checkpoint(const GlyphDataset& ds);
GlyphDataset dataset_from_checkpoint(const Checkpoint& ckpt);

enum class Variant : std::uint8_t { Original = 0, HppOnly, PwpDistill, SgDistill, Quant };

std::string_view variant_name(Variant v);

struct ReportRow {
  Variant variant = Variant::Original;
  std::size_t transformer_params = 0;
  std::uint64_t bytes = 0;  // serialized transformer blocks
  double probe_accuracy = 0.0;
  double mmd = 0.0;
  std::uint64_t macs = 0;
  double memory_percent = 0.0;            // bytes relative to Original
  double param_reduction_percent = 0.0;
  double memory_reduction_percent = 0.0;
  double mac_reduction_percent = 0.0;
  double quality_drop = 0.0;              // Original probe accuracy minus this row's
};

struct RunReport {
  std::vector<ReportRow> rows;  // canonical variant order
  double quality_floor = 0.0;
  Variant final_variant = Variant::Original;
  bool passed = false;
};

struct EvaluatedVariant {
  Variant variant;
  std::size_t transformer_params;
  std::uint64_t bytes;
  std::uint64_t macs;
  QualityReport quality;
};

// Sorts into canonical order and fills the relative columns against the
// Original row. Throws ContractError when the Original row is missing or a
// variant repeats.
std::vector<ReportRow> build_report_rows(std::vector<EvaluatedVariant> variants);

void write_report_csv(std::ostream& out, const RunReport& report);
void write_report_markdown(std::ostream& out, const RunReport& report);
// Throws FormatError on malformed input.
RunReport read_report_csv(std::istream& in);

// Serialized size of the transformer blocks of `model`, stored as q4 where
// `quantized` has entries.
std::uint64_t transformer_bytes(const Model& model, const std::map<std::string, QTensor>* quantized = nullptr);

class Pipeline {
 public:
  // Validates the configuration (ConfigError) before anything else.
  explicit Pipeline(PipelineConfig cfg);

  const PipelineConfig& config() const noexcept { return cfg_; }
  std::filesystem::path path(std::string_view artifact_name) const;

  // Runs one stage from the artifacts of earlier stages. Throws StageError;
  // a missing input artifact surfaces as a DependencyError cause.
  void run_stage(Stage s);
  // Every stage in order. With resume, stages whose outputs all exist are
  // skipped; the stored config must then match. Returns the report.
  RunReport run(bool resume = false);
  bool stage_complete(Stage s) const;

  RunReport load_report() const;

 private:
  void write_config() const;
  void check_config_matches() const;

  void gen_data();
  void train_teacher();
  void train_probe_stage();
  void analyze();
  void plan();
  void prune();
  void distill();
  void quantize();
  void eval();
  void report();

  PipelineConfig cfg_;
};

}  // namespace hprune
