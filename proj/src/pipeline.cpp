#include "hprune/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "hprune/rng.hpp"

namespace hprune {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ------------------------------------------------------------------ config

using FieldSetter = std::function<void(const nlohmann::json&)>;

void read_section(const nlohmann::json& j, const std::string& section,
                  const std::map<std::string, FieldSetter>& fields) {
  if (!j.is_object()) throw ConfigError(section + ": must be an object");
  for (const auto& [k, v] : j.items()) {
    const auto it = fields.find(k);
    if (it == fields.end()) throw ConfigError(section + ": unknown field '" + k + "'");
    try {
      it->second(v);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(section + "." + k + ": " + e.what());
    }
  }
}

template <class T>
FieldSetter set(T& dst) {
  return [&dst](const nlohmann::json& v) { dst = v.get<T>(); };
}

ojson budget_json(const EvalBudget& b) { return {{"n_per_class", b.n_per_class}, {"steps", b.steps}}; }

FieldSetter set_budget(EvalBudget& b, const std::string& section) {
  return [&b, section](const nlohmann::json& v) {
    read_section(v, section, {{"n_per_class", set(b.n_per_class)}, {"steps", set(b.steps)}});
  };
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// ------------------------------------------------------------------- files

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw DependencyError("missing artifact " + p.string());
}

std::string read_text(const fs::path& p) {
  require_file(p);
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

template <class F>
void write_stream(const fs::path& p, F&& body) {
  std::ostringstream ss;
  body(ss);
  write_text(p, ss.str());
}

Checkpoint load_artifact(const fs::path& p) {
  require_file(p);
  return load_checkpoint(p);
}

// ------------------------------------------------------------------ report

const char* const kReportHeader =
    "variant,transformer_params,bytes,probe_accuracy,mmd,macs,memory_percent,param_reduction_percent,"
    "memory_reduction_percent,mac_reduction_percent,quality_drop";

double reduction(double before, double after) { return 100.0 * (1.0 - after / before); }

}  // namespace

// ------------------------------------------------------------------ config

void PipelineConfig::validate() const {
  try {
    model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  require(data.num_classes >= 2 && data.num_classes <= kMaxGlyphClasses,
          "data.num_classes must be in [2, " + std::to_string(kMaxGlyphClasses) + "]");
  require(data.num_classes == model.num_classes, "data.num_classes must equal model.num_classes");
  require(model.sample_dim() == kGlyphDim, "model sample size must match the 8x8 glyphs");
  require(data.per_class >= 10, "data.per_class must be at least 10");
  require(probe.hidden > 0 && probe.epochs > 0 && probe.batch_size > 0, "probe: sizes must be positive");
  require(probe.learning_rate > 0.0f, "probe.learning_rate must be positive");
  require(probe.min_accuracy >= 0.0 && probe.min_accuracy <= 100.0, "probe.min_accuracy must be a percentage");
  require(teacher.steps > 0 && teacher.batch_size > 0, "teacher: steps and batch_size must be positive");
  require(teacher.learning_rate > 0.0f && teacher.clip_norm > 0.0f, "teacher: learning_rate and clip_norm must be positive");
  require(analysis.budget.n_per_class >= 16 && analysis.budget.steps > 0,
          "analysis.budget: n_per_class must be at least 16 and steps positive");
  require(analysis.workers >= 1, "analysis.workers must be at least 1");
  require(planner.alpha > 0.0, "planner.alpha must be positive");
  require(planner.target_ratio > 0.0 && planner.target_ratio < 1.0, "planner.target_ratio must be in (0, 1)");
  require(planner.r_thres > 0.0 && planner.r_thres < 1.0, "planner.r_thres must be in (0, 1)");
  require(planner.calibration_batch > 0, "planner.calibration_batch must be positive");
  require(student.freeze_fraction >= 0.0 && student.freeze_fraction <= 1.0, "student.freeze_fraction must be in [0, 1]");
  try {
    student.distill.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("student.distill: ") + e.what());
  }
  require(quant.group_size >= 2, "quant.group_size must be at least 2");
  require(eval.budget.n_per_class >= 16 && eval.budget.steps > 0,
          "eval.budget: n_per_class must be at least 16 and steps positive");
  require(eval.quality_fraction >= 0.0 && eval.quality_fraction <= 1.0, "eval.quality_fraction must be in [0, 1]");
  require(!out_dir.empty(), "out_dir must not be empty");
}

nlohmann::ordered_json pipeline_config_to_json(const PipelineConfig& c) {
  const auto& d = c.student.distill;
  ojson j;
  j["model"] = config_to_json(c.model);
  j["data"] = {{"num_classes", c.data.num_classes}, {"per_class", c.data.per_class}};
  j["probe"] = {{"hidden", c.probe.hidden},
                {"epochs", c.probe.epochs},
                {"batch_size", c.probe.batch_size},
                {"learning_rate", c.probe.learning_rate},
                {"min_accuracy", c.probe.min_accuracy}};
  j["teacher"] = {{"steps", c.teacher.steps},
                  {"batch_size", c.teacher.batch_size},
                  {"learning_rate", c.teacher.learning_rate},
                  {"clip_norm", c.teacher.clip_norm}};
  j["analysis"] = {{"budget", budget_json(c.analysis.budget)},
                   {"include_joint", c.analysis.include_joint},
                   {"workers", c.analysis.workers}};
  j["planner"] = {{"alpha", c.planner.alpha},
                  {"target_ratio", c.planner.target_ratio},
                  {"r_thres", c.planner.r_thres},
                  {"scorer", std::string(scorer_name(c.planner.scorer))},
                  {"calibration_batch", c.planner.calibration_batch}};
  j["student"] = {{"steps", d.steps},
                  {"learning_rate", d.learning_rate},
                  {"batch_size", d.batch_size},
                  {"clip_norm", d.clip_norm},
                  {"lambda_feat", d.lambda_feat},
                  {"lambda_kd", d.lambda_kd},
                  {"zero_top_k", d.zero_top_k},
                  {"eps", d.eps},
                  {"freeze_fraction", c.student.freeze_fraction},
                  {"embeddings_frozen", c.student.embeddings_frozen}};
  j["quant"] = {{"enabled", c.quant.enabled}, {"group_size", c.quant.group_size}};
  j["eval"] = {{"budget", budget_json(c.eval.budget)}, {"quality_fraction", c.eval.quality_fraction}};
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir.string();
  return j;
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  auto& d = c.student.distill;
  auto section = [](const std::string& name, std::map<std::string, FieldSetter> fields) -> FieldSetter {
    return [name, fields = std::move(fields)](const nlohmann::json& v) { read_section(v, name, fields); };
  };
  read_section(
      j, "config",
      {{"model", [&](const nlohmann::json& v) { c.model = config_from_json(v); }},
       {"data", section("data", {{"num_classes", set(c.data.num_classes)}, {"per_class", set(c.data.per_class)}})},
       {"probe", section("probe", {{"hidden", set(c.probe.hidden)},
                                   {"epochs", set(c.probe.epochs)},
                                   {"batch_size", set(c.probe.batch_size)},
                                   {"learning_rate", set(c.probe.learning_rate)},
                                   {"min_accuracy", set(c.probe.min_accuracy)}})},
       {"teacher", section("teacher", {{"steps", set(c.teacher.steps)},
                                       {"batch_size", set(c.teacher.batch_size)},
                                       {"learning_rate", set(c.teacher.learning_rate)},
                                       {"clip_norm", set(c.teacher.clip_norm)}})},
       {"analysis", section("analysis", {{"budget", set_budget(c.analysis.budget, "analysis.budget")},
                                         {"include_joint", set(c.analysis.include_joint)},
                                         {"workers", set(c.analysis.workers)}})},
       {"planner", section("planner",
                           {{"alpha", set(c.planner.alpha)},
                            {"target_ratio", set(c.planner.target_ratio)},
                            {"r_thres", set(c.planner.r_thres)},
                            {"scorer",
                             [&](const nlohmann::json& v) {
                               try {
                                 c.planner.scorer = parse_scorer(v.get<std::string>());
                               } catch (const ContractError& e) {
                                 throw ConfigError(std::string("planner.scorer: ") + e.what());
                               }
                             }},
                            {"calibration_batch", set(c.planner.calibration_batch)}})},
       {"student", section("student", {{"steps", set(d.steps)},
                                       {"learning_rate", set(d.learning_rate)},
                                       {"batch_size", set(d.batch_size)},
                                       {"clip_norm", set(d.clip_norm)},
                                       {"lambda_feat", set(d.lambda_feat)},
                                       {"lambda_kd", set(d.lambda_kd)},
                                       {"zero_top_k", set(d.zero_top_k)},
                                       {"eps", set(d.eps)},
                                       {"freeze_fraction", set(c.student.freeze_fraction)},
                                       {"embeddings_frozen", set(c.student.embeddings_frozen)}})},
       {"quant", section("quant", {{"enabled", set(c.quant.enabled)}, {"group_size", set(c.quant.group_size)}})},
       {"eval", section("eval", {{"budget", set_budget(c.eval.budget, "eval.budget")},
                                 {"quality_fraction", set(c.eval.quality_fraction)}})},
       {"seed", set(c.seed)},
       {"out_dir", [&](const nlohmann::json& v) { c.out_dir = v.get<std::string>(); }}});
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

// ------------------------------------------------------------------ stages

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::GenData: return "gen-data";
    case Stage::TrainTeacher: return "train-teacher";
    case Stage::TrainProbe: return "train-probe";
    case Stage::Analyze: return "analyze";
    case Stage::Plan: return "plan";
    case Stage::Prune: return "prune";
    case Stage::Distill: return "distill";
    case Stage::Quantize: return "quantize";
    case Stage::Eval: return "eval";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : kStages)
    if (stage_name(s) == name) return s;
  throw ConfigError("unknown stage '" + std::string(name) + "'");
}

std::vector<std::string_view> stage_outputs(Stage s, const PipelineConfig& cfg) {
  using namespace artifact;
  switch (s) {
    case Stage::GenData: return {kDataset};
    case Stage::TrainTeacher: return {kTeacher, kTeacherLog};
    case Stage::TrainProbe: return {kProbe};
    case Stage::Analyze: return {kContribution};
    case Stage::Plan: return {kScores, kPlan};
    case Stage::Prune: return {kPruned};
    case Stage::Distill: return {kStudent, kDistillLog};
    case Stage::Quantize: return cfg.quant.enabled ? std::vector<std::string_view>{kQuantized} : std::vector<std::string_view>{};
    case Stage::Eval: return {kEval};
    case Stage::Report: return {kReportCsv, kReportMd};
  }
  return {};
}

std::uint64_t stage_seed(const PipelineConfig& cfg, std::string_view stream) { return derive_seed(cfg.seed, stream); }

Checkpoint dataset_checkpoint(const GlyphDataset& ds) {
  Checkpoint c;
  c.meta["kind"] = "dataset";
  c.meta["num_classes"] = ds.num_classes;
  std::vector<float> labels(ds.size()), split(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    labels[i] = static_cast<float>(ds.labels[i]);
    split[i] = static_cast<float>(ds.split[i]);
  }
  c.tensors.push_back({"data", false, ds.data.detach(), {}});
  c.tensors.push_back({"labels", false, Tensor::from({ds.size()}, std::move(labels)), {}});
  c.tensors.push_back({"split", false, Tensor::from({ds.size()}, std::move(split)), {}});
  return c;
}

GlyphDataset dataset_from_checkpoint(const Checkpoint& ckpt) {
  try {
    if (ckpt.meta.value("kind", "") != "dataset") throw FormatError("checkpoint: not a dataset checkpoint", 0);
    GlyphDataset ds;
    ds.num_classes = ckpt.meta.at("num_classes").get<std::size_t>();
    ds.data = ckpt.tensor("data");
    const auto labels = ckpt.tensor("labels").data(), split = ckpt.tensor("split").data();
    if (ds.data.rank() != 2 || ds.data.dim(0) != labels.size() || split.size() != labels.size() ||
        ds.data.dim(1) != kGlyphDim)
      throw FormatError("dataset checkpoint: inconsistent shapes", 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0.0f || labels[i] >= float(ds.num_classes) || labels[i] != std::floor(labels[i]))
        throw FormatError("dataset checkpoint: bad label at row " + std::to_string(i), 0);
      if (split[i] != 0.0f && split[i] != 1.0f)
        throw FormatError("dataset checkpoint: bad split tag at row " + std::to_string(i), 0);
      ds.labels.push_back(static_cast<std::size_t>(labels[i]));
      ds.split.push_back(static_cast<Split>(split[i]));
    }
    return ds;
  } catch (const ContractError& e) {
    throw FormatError(std::string("dataset checkpoint: ") + e.what(), 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset checkpoint: ") + e.what(), 0);
  }
}

// ------------------------------------------------------------------ report

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Original: return "Original";
    case Variant::HppOnly: return "HPP-only";
    case Variant::PwpDistill: return "+PWP+distill";
    case Variant::SgDistill: return "+PWP+SGDistill";
    case Variant::Quant: return "+Quant";
  }
  return "?";
}

std::vector<ReportRow> build_report_rows(std::vector<EvaluatedVariant> variants) {
  std::stable_sort(variants.begin(), variants.end(),
                   [](const auto& a, const auto& b) { return a.variant < b.variant; });
  for (std::size_t i = 1; i < variants.size(); ++i)
    if (variants[i].variant == variants[i - 1].variant)
      throw ContractError("report: variant " + std::string(variant_name(variants[i].variant)) + " repeats");
  if (variants.empty() || variants.front().variant != Variant::Original)
    throw ContractError("report: the Original row is required");
  const auto& base = variants.front();
  std::vector<ReportRow> rows;
  for (const auto& v : variants) {
    ReportRow r;
    r.variant = v.variant;
    r.transformer_params = v.transformer_params;
    r.bytes = v.bytes;
    r.probe_accuracy = v.quality.probe_accuracy;
    r.mmd = v.quality.mmd;
    r.macs = v.macs;
    r.memory_percent = 100.0 * double(v.bytes) / double(base.bytes);
    r.param_reduction_percent = reduction(double(base.transformer_params), double(v.transformer_params));
    r.memory_reduction_percent = reduction(double(base.bytes), double(v.bytes));
    r.mac_reduction_percent = reduction(double(base.macs), double(v.macs));
    r.quality_drop = base.quality.probe_accuracy - v.quality.probe_accuracy;
    rows.push_back(r);
  }
  return rows;
}

void write_report_csv(std::ostream& out, const RunReport& report) {
  out << "# quality_floor=" << fmt_double(report.quality_floor) << " final=" << variant_name(report.final_variant)
      << " status=" << (report.passed ? "passed" : "failed") << "\n";
  out << kReportHeader << "\n";
  for (const auto& r : report.rows)
    out << variant_name(r.variant) << "," << r.transformer_params << "," << r.bytes << ","
        << fmt_double(r.probe_accuracy) << "," << fmt_double(r.mmd) << "," << r.macs << ","
        << fmt_double(r.memory_percent) << "," << fmt_double(r.param_reduction_percent) << ","
        << fmt_double(r.memory_reduction_percent) << "," << fmt_double(r.mac_reduction_percent) << ","
        << fmt_double(r.quality_drop) << "\n";
}

void write_report_markdown(std::ostream& out, const RunReport& report) {
  out << "| Variant | Params | Bytes | Memory (%) | Probe acc (%) | MMD | MACs | Param red. (%) | Memory red. (%) | "
         "MAC red. (%) | Quality drop |\n";
  out << "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : report.rows)
    out << "| " << variant_name(r.variant) << " | " << r.transformer_params << " | " << r.bytes << " | "
        << fmt_fixed(r.memory_percent, 2) << " | " << fmt_fixed(r.probe_accuracy, 2) << " | " << fmt_fixed(r.mmd, 4)
        << " | " << r.macs << " | " << fmt_fixed(r.param_reduction_percent, 2) << " | "
        << fmt_fixed(r.memory_reduction_percent, 2) << " | " << fmt_fixed(r.mac_reduction_percent, 2) << " | "
        << fmt_fixed(r.quality_drop, 2) << " |\n";
  out << "\nQuality floor: " << fmt_fixed(report.quality_floor, 2) << "% probe accuracy. Final variant "
      << variant_name(report.final_variant) << ": " << (report.passed ? "passed" : "failed") << ".\n";
}

RunReport read_report_csv(std::istream& in) {
  RunReport report;
  std::string line;
  std::uint64_t offset = 0, line_start = 0;
  auto next = [&] {
    line_start = offset;
    if (!std::getline(in, line)) return false;
    offset += line.size() + 1;
    return true;
  };
  auto fail = [&](const std::string& what) { throw FormatError("report csv: " + what, line_start); };
  auto parse_variant = [&](const std::string& s) {
    for (auto v : {Variant::Original, Variant::HppOnly, Variant::PwpDistill, Variant::SgDistill, Variant::Quant})
      if (variant_name(v) == s) return v;
    fail("unknown variant '" + s + "'");
    return Variant::Original;
  };
  if (!next() || line.rfind("# ", 0) != 0) fail("missing metadata line");
  {
    std::istringstream meta(line.substr(2));
    std::string tok;
    std::set<std::string> seen;
    while (meta >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) fail("bad metadata token '" + tok + "'");
      const auto key = tok.substr(0, eq), val = tok.substr(eq + 1);
      seen.insert(key);
      try {
        if (key == "quality_floor") report.quality_floor = std::stod(val);
        else if (key == "final") report.final_variant = parse_variant(val);
        else if (key == "status") {
          if (val != "passed" && val != "failed") fail("bad status '" + val + "'");
          report.passed = val == "passed";
        } else fail("unknown metadata key '" + key + "'");
      } catch (const std::logic_error&) {
        fail("bad metadata value '" + tok + "'");
      }
    }
    if (seen.size() != 3) fail("incomplete metadata line");
  }
  if (!next() || line != kReportHeader) fail("bad header");
  while (next()) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::istringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 11) fail("expected 11 columns");
    ReportRow r;
    try {
      r.variant = parse_variant(cols[0]);
      r.transformer_params = std::stoull(cols[1]);
      r.bytes = std::stoull(cols[2]);
      r.probe_accuracy = std::stod(cols[3]);
      r.mmd = std::stod(cols[4]);
      r.macs = std::stoull(cols[5]);
      r.memory_percent = std::stod(cols[6]);
      r.param_reduction_percent = std::stod(cols[7]);
      r.memory_reduction_percent = std::stod(cols[8]);
      r.mac_reduction_percent = std::stod(cols[9]);
      r.quality_drop = std::stod(cols[10]);
    } catch (const std::logic_error&) {
      fail("bad number");
    }
    report.rows.push_back(r);
  }
  return report;
}

std::uint64_t transformer_bytes(const Model& model, const std::map<std::string, QTensor>* quantized) {
  return serialize_checkpoint(model_checkpoint(model, quantized, true)).size();
}

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

fs::path Pipeline::path(std::string_view artifact_name) const { return cfg_.out_dir / std::string(artifact_name); }

bool Pipeline::stage_complete(Stage s) const {
  for (auto name : stage_outputs(s, cfg_))
    if (!fs::exists(path(name))) return false;
  return true;
}

void Pipeline::write_config() const {
  fs::create_directories(cfg_.out_dir);
  write_text(path(artifact::kConfig), pipeline_config_to_json(cfg_).dump(2) + "\n");
}

void Pipeline::check_config_matches() const {
  const auto p = path(artifact::kConfig);
  if (!fs::exists(p)) return;
  nlohmann::json stored;
  try {
    stored = nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("stored config " + p.string() + ": " + e.what());
  }
  if (stored != nlohmann::json(pipeline_config_to_json(cfg_)))
    throw ConfigError("resume: " + p.string() + " was written by a different configuration");
}

void Pipeline::run_stage(Stage s) {
  try {
    fs::create_directories(cfg_.out_dir);
    switch (s) {
      case Stage::GenData: gen_data(); break;
      case Stage::TrainTeacher: train_teacher(); break;
      case Stage::TrainProbe: train_probe_stage(); break;
      case Stage::Analyze: analyze(); break;
      case Stage::Plan: plan(); break;
      case Stage::Prune: prune(); break;
      case Stage::Distill: distill(); break;
      case Stage::Quantize: quantize(); break;
      case Stage::Eval: eval(); break;
      case Stage::Report: report(); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(s, e.what(), std::current_exception());
  }
}

RunReport Pipeline::run(bool resume) {
  if (resume) check_config_matches();
  write_config();
  for (Stage s : kStages) {
    if (resume && stage_complete(s)) continue;
    run_stage(s);
  }
  return load_report();
}

RunReport Pipeline::load_report() const {
  const auto text = read_text(path(artifact::kReportCsv));
  std::istringstream in(text);
  return read_report_csv(in);
}

void Pipeline::gen_data() {
  const auto ds = gen_dataset(cfg_.data.num_classes, cfg_.data.per_class, stage_seed(cfg_, "gen-data"));
  save_checkpoint(path(artifact::kDataset), dataset_checkpoint(ds));
}

void Pipeline::train_teacher() {
  const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
  const auto train = ds.subset(Split::Train);
  auto teacher = Model::init(cfg_.model, stage_seed(cfg_, "teacher.init"));
  TrainConfig tc;
  tc.steps = cfg_.teacher.steps;
  tc.batch_size = cfg_.teacher.batch_size;
  tc.sgd = {cfg_.teacher.learning_rate, cfg_.teacher.clip_norm};
  tc.seed = stage_seed(cfg_, "teacher.train");
  const auto log = train_flow(teacher, train.data, train.labels, tc);
  save_checkpoint(path(artifact::kTeacher), model_checkpoint(teacher));
  write_stream(path(artifact::kTeacherLog), [&](std::ostream& out) {
    out << "step,loss,grad_norm\n";
    for (const auto& r : log) out << r.step << "," << fmt_double(r.loss) << "," << fmt_double(r.grad_norm) << "\n";
  });
}

void Pipeline::train_probe_stage() {
  const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
  const auto probe = train_probe(ds, stage_seed(cfg_, "probe"), cfg_.probe);
  save_checkpoint(path(artifact::kProbe), probe_checkpoint(probe));
}

void Pipeline::analyze() {
  const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
  const auto teacher = model_from_checkpoint(load_artifact(path(artifact::kTeacher)));
  const auto probe = probe_from_checkpoint(load_artifact(path(artifact::kProbe)));
  const auto specs = default_specs(teacher.num_blocks(), cfg_.analysis.include_joint);
  const auto table = sweep(teacher, specs, probe, ds.subset(Split::Val), cfg_.analysis.budget,
                           stage_seed(cfg_, "analyze"), cfg_.analysis.workers);
  write_stream(path(artifact::kContribution), [&](std::ostream& out) { write_contribution_csv(out, table); });
}

void Pipeline::plan() {
  const auto teacher = model_from_checkpoint(load_artifact(path(artifact::kTeacher)));
  std::istringstream csv(read_text(path(artifact::kContribution)));
  const auto table = read_contribution_csv(csv);
  ScoreTable scores;
  switch (cfg_.planner.scorer) {
    case ScorerId::Hierarchical: scores = score_table(table, teacher.num_blocks(), cfg_.planner.alpha); break;
    case ScorerId::BksdmUnweighted: scores = bksdm_scores(table, teacher.num_blocks()); break;
    case ScorerId::KoalaCosine: {
      const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
      const auto train = ds.subset(Split::Train);
      const std::size_t n = std::min(cfg_.planner.calibration_batch, train.size());
      Rng rng(stage_seed(cfg_, "plan.calibration"));
      std::vector<float> rows;
      std::vector<std::size_t> labels;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = rng.index(train.size());
        const auto row = train.data.data().subspan(k * kGlyphDim, kGlyphDim);
        rows.insert(rows.end(), row.begin(), row.end());
        labels.push_back(train.labels[k]);
      }
      const auto batch = make_flow_batch(Tensor::from({n, kGlyphDim}, std::move(rows)), labels, rng);
      scores = koala_scores(teacher, batch.input);
      break;
    }
  }
  PlanConfig pc;
  pc.target_ratio = cfg_.planner.target_ratio;
  pc.r_thres = cfg_.planner.r_thres;
  pc.freeze_fraction = cfg_.student.freeze_fraction;
  const auto p = plan_hpp(scores, census(teacher), pc);
  write_stream(path(artifact::kScores), [&](std::ostream& out) {
    write_scores_csv(out, scores, cfg_.planner.scorer == ScorerId::KoalaCosine ? nullptr : &table);
  });
  write_text(path(artifact::kPlan), plan_to_json(p) + "\n");
}

void Pipeline::prune() {
  const auto teacher = model_from_checkpoint(load_artifact(path(artifact::kTeacher)));
  const auto p = plan_from_json(read_text(path(artifact::kPlan)));
  validate_plan(p, teacher);
  save_checkpoint(path(artifact::kPruned), model_checkpoint(apply_prune(teacher, p)));
}

void Pipeline::distill() {
  const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
  const auto teacher = model_from_checkpoint(load_artifact(path(artifact::kTeacher)));
  auto student = model_from_checkpoint(load_artifact(path(artifact::kPruned)));
  const auto p = plan_from_json(read_text(path(artifact::kPlan)));
  std::istringstream csv(read_text(path(artifact::kContribution)));
  const auto table = read_contribution_csv(csv);

  DistillConfig dc = cfg_.student.distill;
  dc.r_thres = cfg_.planner.r_thres;
  dc.seed = stage_seed(cfg_, "distill");
  const auto mask = freeze_mask(p, cfg_.student.freeze_fraction, cfg_.student.embeddings_frozen);
  std::optional<SensitivityWeights> weights;
  if (p.target_ratio >= dc.r_thres) weights = sensitivity_weights(table, p, mask, dc.zero_top_k, dc.eps);
  const auto result = distill_run(teacher, student, p, mask, weights, dc, ds);

  auto ckpt = model_checkpoint(student);
  ckpt.meta["plan"] = ojson::parse(plan_to_json(p));
  ckpt.meta["mask"] = {{"frozen_blocks", mask.frozen_blocks},
                       {"freeze_fraction", mask.freeze_fraction},
                       {"embeddings_frozen", mask.embeddings_frozen}};
  if (weights) {
    ojson w = ojson::object();
    for (const auto& [t, v] : weights->weights) w[std::to_string(t)] = v;
    ckpt.meta["sensitivity_weights"] = {{"weights", w}, {"zero_top_k", weights->zero_top_k}, {"eps", weights->eps}};
  }
  save_checkpoint(path(artifact::kStudent), ckpt);
  write_stream(path(artifact::kDistillLog),
               [&](std::ostream& out) { write_distill_log_csv(out, result, student.teacher_indices()); });
}

void Pipeline::quantize() {
  if (!cfg_.quant.enabled) return;
  const auto student = model_from_checkpoint(load_artifact(path(artifact::kStudent)));
  const auto qm = quantize_model(student, cfg_.quant.group_size);
  save_checkpoint(path(artifact::kQuantized), model_checkpoint(qm.model, &qm.tensors));
}

void Pipeline::eval() {
  const auto ds = dataset_from_checkpoint(load_artifact(path(artifact::kDataset)));
  const auto probe = probe_from_checkpoint(load_artifact(path(artifact::kProbe)));
  const auto val = ds.subset(Split::Val);
  const auto p = plan_from_json(read_text(path(artifact::kPlan)));
  const std::uint64_t seed = stage_seed(cfg_, "eval");

  ojson rows = ojson::array();
  auto add = [&](Variant v, const Model& m, const std::map<std::string, QTensor>* q) {
    const auto qr = quality(m, probe, val, cfg_.eval.budget.n_per_class, cfg_.eval.budget.steps, seed);
    rows.push_back({{"variant", std::string(variant_name(v))},
                    {"transformer_params", m.transformer_param_count()},
                    {"bytes", transformer_bytes(m, q)},
                    {"macs", forward_macs(m)},
                    {"probe_accuracy", qr.probe_accuracy},
                    {"mmd", qr.mmd}});
  };
  add(Variant::Original, model_from_checkpoint(load_artifact(path(artifact::kTeacher))), nullptr);
  add(Variant::HppOnly, model_from_checkpoint(load_artifact(path(artifact::kPruned))), nullptr);
  add(p.target_ratio >= cfg_.planner.r_thres ? Variant::SgDistill : Variant::PwpDistill,
      model_from_checkpoint(load_artifact(path(artifact::kStudent))), nullptr);
  if (cfg_.quant.enabled) {
    const auto qm = quantized_from_checkpoint(load_artifact(path(artifact::kQuantized)));
    add(Variant::Quant, qm.model, &qm.tensors);
  }
  ojson j;
  j["seed"] = seed;
  j["budget"] = budget_json(cfg_.eval.budget);
  j["variants"] = rows;
  write_text(path(artifact::kEval), j.dump(2) + "\n");
}

void Pipeline::report() {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path(artifact::kEval)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval.json: ") + e.what(), 0);
  }
  std::vector<EvaluatedVariant> variants;
  try {
    for (const auto& r : j.at("variants")) {
      const auto name = r.at("variant").get<std::string>();
      Variant v = Variant::Original;
      bool known = false;
      for (auto c : {Variant::Original, Variant::HppOnly, Variant::PwpDistill, Variant::SgDistill, Variant::Quant})
        if (variant_name(c) == name) v = c, known = true;
      if (!known) throw FormatError("eval.json: unknown variant '" + name + "'", 0);
      QualityReport q;
      q.probe_accuracy = r.at("probe_accuracy").get<double>();
      q.mmd = r.at("mmd").get<double>();
      variants.push_back({v, r.at("transformer_params").get<std::size_t>(), r.at("bytes").get<std::uint64_t>(),
                          r.at("macs").get<std::uint64_t>(), q});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval.json: ") + e.what(), 0);
  }
  RunReport rep;
  rep.rows = build_report_rows(std::move(variants));
  rep.quality_floor = cfg_.eval.quality_fraction * rep.rows.front().probe_accuracy;
  const auto& last = rep.rows.back();
  rep.final_variant = last.variant;
  rep.passed = last.probe_accuracy >= rep.quality_floor;
  write_stream(path(artifact::kReportCsv), [&](std::ostream& out) { write_report_csv(out, rep); });
  write_stream(path(artifact::kReportMd), [&](std::ostream& out) { write_report_markdown(out, rep); });
}

}  // namespace hprune
