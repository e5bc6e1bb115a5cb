#include "hprune/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "hprune/errors.hpp"

namespace hprune {

namespace {

constexpr std::string_view kScorerNames[] = {"hierarchical", "koala_cosine", "bksdm_unweighted"};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_table(const ContributionTable& table, std::size_t num_blocks) {
  if (table.entries.empty()) throw ContractError("score table: contribution table is empty");
  for (const auto& [spec, d] : table.entries) {
    if (spec.block_index >= num_blocks)
      throw ContractError("score table: block index " + std::to_string(spec.block_index) + " out of range");
    if (!std::isfinite(d)) throw ContractError("score table: non-finite ΔP for " + spec.key());
  }
}

struct Candidate {
  double score;
  std::size_t position;
  Removal removed;
};

// Highest score first; ties go to the later block, then to the earlier kind.
bool before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.position != b.position) return a.position > b.position;
  return a.removed < b.removed;
}

Subcomponent single_kind(Removal r) {
  for (auto s : kSubcomponents)
    if (r.removes(s)) return s;
  throw ContractError("plan: empty removal");
}

}  // namespace

std::string_view scorer_name(ScorerId id) { return kScorerNames[static_cast<std::size_t>(id)]; }

ScorerId parse_scorer(std::string_view name) {
  for (std::size_t k = 0; k < std::size(kScorerNames); ++k)
    if (kScorerNames[k] == name) return static_cast<ScorerId>(k);
  throw ContractError("unknown scorer '" + std::string(name) + "'");
}

double w_pos(std::size_t i, std::size_t num_blocks, double alpha) {
  if (i >= num_blocks)
    throw ContractError("w_pos: index " + std::to_string(i) + " out of range for " + std::to_string(num_blocks) +
                        " blocks");
  if (!(alpha > 0.0)) throw ContractError("w_pos: alpha must be positive");
  const double nb = static_cast<double>(num_blocks);
  return std::exp(alpha * (static_cast<double>(i) - nb) / nb);
}

ScoreTable score_table(const ContributionTable& table, std::size_t num_blocks, double alpha) {
  check_table(table, num_blocks);
  ScoreTable out;
  out.alpha = alpha;
  out.num_blocks = num_blocks;
  out.scorer = ScorerId::Hierarchical;
  for (const auto& [spec, d] : table.entries)
    out.entries.emplace(spec, -std::abs(d) * w_pos(spec.block_index, num_blocks, alpha));
  return out;
}

ScoreTable bksdm_scores(const ContributionTable& table, std::size_t num_blocks) {
  check_table(table, num_blocks);
  ScoreTable out;
  out.alpha = 0.0;
  out.num_blocks = num_blocks;
  out.scorer = ScorerId::BksdmUnweighted;
  for (const auto& [spec, d] : table.entries) out.entries.emplace(spec, -std::abs(d));
  return out;
}

ScoreTable koala_scores(const Model& teacher, const ForwardInput& calibration) {
  if (calibration.batch() == 0) throw ContractError("koala scores: empty calibration batch");
  if (teacher.num_blocks() == 0) throw ContractError("koala scores: model has no blocks");
  const auto out = forward(teacher, calibration, {}, true);
  const std::size_t batch = calibration.batch();
  const std::size_t row = out.embedded.numel() / batch;

  ScoreTable table;
  table.alpha = 0.0;
  table.num_blocks = teacher.num_blocks();
  table.scorer = ScorerId::KoalaCosine;
  for (std::size_t i = 0; i < teacher.num_blocks(); ++i) {
    const auto in = (i == 0 ? out.embedded : out.block_features[i - 1]).data();
    const auto res = out.block_features[i].data();
    double mean_cos = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      double dot = 0.0, na = 0.0, nr = 0.0;
      for (std::size_t k = b * row; k < (b + 1) * row; ++k) {
        dot += double(in[k]) * res[k];
        na += double(in[k]) * in[k];
        nr += double(res[k]) * res[k];
      }
      const double denom = std::sqrt(na) * std::sqrt(nr);
      mean_cos += denom > 0.0 ? dot / denom : 1.0;
    }
    mean_cos /= static_cast<double>(batch);
    table.entries.emplace(AblationSpec{i, Removal::whole_block()}, -(1.0 - mean_cos));
  }
  return table;
}

PrunePlan plan_hpp(const ScoreTable& scores, const ParamCensus& census, const PlanConfig& cfg) {
  const double r = cfg.target_ratio;
  if (!(r > 0.0 && r < 1.0)) throw ContractError("plan: target ratio must lie in (0, 1)");
  if (!(cfg.r_thres > 0.0 && cfg.r_thres < 1.0)) throw ContractError("plan: r_thres must lie in (0, 1)");
  if (!(cfg.freeze_fraction >= 0.0 && cfg.freeze_fraction <= 1.0))
    throw ContractError("plan: freeze fraction must lie in [0, 1]");
  if (scores.num_blocks != census.blocks.size())
    throw ContractError("plan: score table covers " + std::to_string(scores.num_blocks) + " blocks, model has " +
                        std::to_string(census.blocks.size()));
  if (census.transformer_total == 0) throw ContractError("plan: model has no transformer parameters");

  const double total = static_cast<double>(census.transformer_total);
  PrunePlan plan;
  plan.target_ratio = r;
  plan.r_thres = cfg.r_thres;
  plan.scorer = scores.scorer;

  std::vector<Candidate> blocks, parts;
  for (const auto& [spec, s] : scores.entries) {
    if (spec.removed.is_whole_block()) blocks.push_back({s, spec.block_index, spec.removed});
    else if (spec.removed.count() == 1) parts.push_back({s, spec.block_index, spec.removed});
  }
  std::sort(blocks.begin(), blocks.end(), before);
  std::sort(parts.begin(), parts.end(), before);

  std::size_t removed = 0;
  std::vector<bool> gone(census.blocks.size(), false);
  const double phase1_limit = std::min(r, cfg.r_thres);
  for (const auto& c : blocks) {
    const std::size_t size = census.blocks[c.position].total();
    if (static_cast<double>(removed + size) / total > phase1_limit) break;
    removed += size;
    gone[c.position] = true;
    plan.whole_blocks_removed.push_back(census.blocks[c.position].teacher_index);
  }

  if (plan.aggressive()) {
    const double boundary = cfg.freeze_fraction * static_cast<double>(scores.num_blocks);
    for (const auto& c : parts) {
      if (static_cast<double>(removed) / total >= r) break;
      const auto& bc = census.blocks[c.position];
      if (gone[c.position] || static_cast<double>(bc.teacher_index) < boundary) continue;
      const auto kind = single_kind(c.removed);
      const std::size_t size = bc.per_subcomponent[static_cast<std::size_t>(kind)];
      if (size == 0) continue;
      removed += size;
      plan.subcomponents_removed.emplace_back(bc.teacher_index, kind);
    }
    if (static_cast<double>(removed) / total < r) {
      const double max_ratio = static_cast<double>(removed) / total;
      throw PlanInfeasibleError("plan: target ratio " + fmt_double(r) + " unreachable, at most " +
                                    fmt_double(max_ratio) + " with the available candidates",
                                max_ratio);
    }
  }

  plan.achieved_ratio = static_cast<double>(removed) / total;
  for (std::size_t p = 0; p < census.blocks.size(); ++p)
    if (!gone[p]) plan.correspondence.push_back(census.blocks[p].teacher_index);
  return plan;
}

PrunePlan empty_plan(const Model& teacher) {
  PrunePlan plan;
  plan.r_thres = 1.0;
  plan.correspondence = teacher.teacher_indices();
  return plan;
}

void validate_plan(const PrunePlan& plan, const Model& teacher) {
  const auto& idx = teacher.teacher_indices();
  auto position = [&](std::size_t t) -> std::size_t {
    const auto it = std::find(idx.begin(), idx.end(), t);
    if (it == idx.end()) throw ContractError("plan: block " + std::to_string(t) + " is not in the model");
    return static_cast<std::size_t>(it - idx.begin());
  };
  std::set<std::size_t> whole;
  for (auto t : plan.whole_blocks_removed) {
    position(t);
    if (!whole.insert(t).second) throw ContractError("plan: block " + std::to_string(t) + " removed twice");
  }
  std::set<std::pair<std::size_t, Subcomponent>> parts;
  for (const auto& [t, s] : plan.subcomponents_removed) {
    const std::size_t p = position(t);
    if (whole.count(t)) throw ContractError("plan: block " + std::to_string(t) + " removed whole and in part");
    if (!parts.insert({t, s}).second || !teacher.blocks()[p].has(s))
      throw ContractError("plan: " + std::to_string(t) + ":" + std::string(subcomponent_name(s)) +
                          " is not removable");
  }
  std::vector<std::size_t> expect;
  for (auto t : idx)
    if (!whole.count(t)) expect.push_back(t);
  if (plan.correspondence != expect) throw ContractError("plan: correspondence does not match retained blocks");
}

Model apply_prune(const Model& teacher, const PrunePlan& plan) {
  validate_plan(plan, teacher);
  return teacher.prune(plan.whole_blocks_removed, plan.subcomponents_removed);
}

std::string plan_to_json(const PrunePlan& plan) {
  nlohmann::ordered_json j;
  j["whole_blocks_removed"] = plan.whole_blocks_removed;
  auto subs = nlohmann::ordered_json::array();
  for (const auto& [t, s] : plan.subcomponents_removed)
    subs.push_back({{"block", t}, {"kind", std::string(subcomponent_name(s))}});
  j["subcomponents_removed"] = subs;
  j["target_ratio"] = plan.target_ratio;
  j["achieved_ratio"] = plan.achieved_ratio;
  j["r_thres"] = plan.r_thres;
  j["correspondence"] = plan.correspondence;
  j["scorer_id"] = std::string(scorer_name(plan.scorer));
  return j.dump(2);
}

PrunePlan plan_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("plan json: ") + e.what(), e.byte);
  }
  try {
    PrunePlan plan;
    plan.whole_blocks_removed = j.at("whole_blocks_removed").get<std::vector<std::size_t>>();
    for (const auto& s : j.at("subcomponents_removed"))
      plan.subcomponents_removed.emplace_back(s.at("block").get<std::size_t>(),
                                              parse_subcomponent(s.at("kind").get<std::string>()));
    plan.target_ratio = j.at("target_ratio").get<double>();
    plan.achieved_ratio = j.at("achieved_ratio").get<double>();
    plan.r_thres = j.at("r_thres").get<double>();
    plan.correspondence = j.at("correspondence").get<std::vector<std::size_t>>();
    plan.scorer = parse_scorer(j.at("scorer_id").get<std::string>());
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan json: ") + e.what(), 0);
  } catch (const ContractError& e) {
    throw FormatError(std::string("plan json: ") + e.what(), 0);
  }
}

void write_scores_csv(std::ostream& out, const ScoreTable& scores, const ContributionTable* table) {
  out << "# scorer=" << scorer_name(scores.scorer) << " alpha=" << fmt_double(scores.alpha)
      << " num_blocks=" << scores.num_blocks << "\n";
  out << "block_index,removed_set,delta_p,score\n";
  for (const auto& [spec, s] : scores.entries) {
    out << spec.block_index << "," << spec.removed.name() << ",";
    if (table) {
      const auto it = table->entries.find(spec);
      if (it != table->entries.end()) out << fmt_double(it->second);
    }
    out << "," << fmt_double(s) << "\n";
  }
}

ScoreTable read_scores_csv(std::istream& in) {
  ScoreTable table;
  std::string line;
  std::size_t lineno = 0;
  std::uint64_t offset = 0, line_start = 0;
  auto fail = [&](const std::string& what) -> void {
    throw FormatError("scores csv line " + std::to_string(lineno) + ": " + what, line_start);
  };
  auto next = [&]() -> bool {
    line_start = offset;
    if (!std::getline(in, line)) return false;
    ++lineno;
    offset += line.size() + 1;
    return true;
  };
  if (!next() || line.rfind("# ", 0) != 0) fail("missing metadata line");
  {
    std::istringstream meta(line.substr(2));
    std::string kv;
    int found = 0;
    while (meta >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail("malformed metadata '" + kv + "'");
      const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      try {
        if (k == "scorer") table.scorer = parse_scorer(v), ++found;
        else if (k == "alpha") table.alpha = std::stod(v), ++found;
        else if (k == "num_blocks") table.num_blocks = std::stoull(v), ++found;
      } catch (const std::exception&) {
        fail("bad value for " + k);
      }
    }
    if (found != 3) fail("incomplete metadata");
  }
  if (!next() || line != "block_index,removed_set,delta_p,score") fail("missing column header");
  while (next()) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (line.back() == ',') cols.emplace_back();
    if (cols.size() != 4) fail("expected four columns");
    AblationSpec spec;
    double s = 0.0;
    try {
      spec.block_index = std::stoull(cols[0]);
      spec.removed = Removal::parse(cols[1]);
      s = std::stod(cols[3]);
    } catch (const std::exception& e) {
      fail(e.what());
    }
    if (!table.entries.emplace(spec, s).second) fail("duplicate entry " + spec.key());
  }
  return table;
}

}  // namespace hprune
