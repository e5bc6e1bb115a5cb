#pragma once

// Prunability scores and the two-phase position-weighted pruning plan.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hprune/contribution.hpp"
#include "hprune/model.hpp"

namespace hprune {

inline constexpr double kDefaultAlpha = 0.55;

enum class ScorerId : std::uint8_t { Hierarchical = 0, KoalaCosine, BksdmUnweighted };

std::string_view scorer_name(ScorerId id);
ScorerId parse_scorer(std::string_view name);

// exp(alpha * (i - |B|) / |B|). Throws ContractError for i >= num_blocks or alpha <= 0.
double w_pos(std::size_t i, std::size_t num_blocks, double alpha);

// Higher (closer to zero) means more prunable.
struct ScoreTable {
  std::map<AblationSpec, double> entries;
  double alpha = kDefaultAlpha;  // 0 for scorers without a positional factor
  std::size_t num_blocks = 0;
  ScorerId scorer = ScorerId::Hierarchical;

  bool operator==(const ScoreTable&) const = default;
};

// Score(i, c) = -|ΔP(i, c)| * w_pos(i).
ScoreTable score_table(const ContributionTable& table, std::size_t num_blocks, double alpha = kDefaultAlpha);

// Unweighted -|ΔP(i, c)| ranking.
ScoreTable bksdm_scores(const ContributionTable& table, std::size_t num_blocks);

// WholeBlock scores -(1 - cos) where cos is the image-stream input/output
// cosine similarity of each block, averaged over the rows of the batch.
ScoreTable koala_scores(const Model& teacher, const ForwardInput& calibration);

struct PlanConfig {
  double target_ratio = 0.25;
  double r_thres = 0.30;
  double freeze_fraction = 0.5;  // blocks below this depth are not split further
};

struct PrunePlan {
  std::vector<std::size_t> whole_blocks_removed;                          // teacher indices, removal order
  std::vector<std::pair<std::size_t, Subcomponent>> subcomponents_removed; // teacher indices, removal order
  double target_ratio = 0.0;
  double achieved_ratio = 0.0;
  double r_thres = 0.0;
  std::vector<std::size_t> correspondence;  // student position -> teacher index
  ScorerId scorer = ScorerId::Hierarchical;

  bool aggressive() const { return target_ratio >= r_thres; }
  bool operator==(const PrunePlan&) const = default;
};

// Phase 1 removes whole blocks in score order while the ratio stays within
// min(r, r_thres). Phase 2, when r >= r_thres, removes single subcomponents
// of retained blocks at or past the freeze boundary until the ratio reaches r.
// Throws PlanInfeasibleError when r cannot be reached.
PrunePlan plan_hpp(const ScoreTable& scores, const ParamCensus& census, const PlanConfig& cfg);

// The identity plan: nothing removed.
PrunePlan empty_plan(const Model& teacher);

// Throws ContractError unless the plan is consistent with `teacher`.
void validate_plan(const PrunePlan& plan, const Model& teacher);
Model apply_prune(const Model& teacher, const PrunePlan& plan);

std::string plan_to_json(const PrunePlan& plan);
// Throws FormatError on malformed input.
PrunePlan plan_from_json(std::string_view text);

// Contribution columns plus the score; delta_p is empty where the table has no entry.
void write_scores_csv(std::ostream& out, const ScoreTable& scores, const ContributionTable* table = nullptr);
ScoreTable read_scores_csv(std::istream& in);

}  // namespace hprune
