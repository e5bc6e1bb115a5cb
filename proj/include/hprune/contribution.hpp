#pragma once

// Ablate-and-measure contribution analysis: ΔP(i, c) for every block i and
// removed subset c.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <vector>

#include "hprune/data.hpp"
#include "hprune/model.hpp"

namespace hprune {

struct EvalBudget {
  std::size_t n_per_class = 32;
  std::size_t steps = 4;

  bool operator==(const EvalBudget&) const = default;
};

struct ContributionTable {
  double baseline_quality = 0.0;
  std::map<AblationSpec, double> entries;  // ΔP = baseline - ablated, signed
  EvalBudget budget;
  std::uint64_t seed = 0;

  // Throws ContractError when the entry is missing.
  double delta(std::size_t block, Removal removed) const;
  bool operator==(const ContributionTable&) const = default;
};

// The paired removals swept in addition to the single subcomponents.
const std::vector<Removal>& joint_removals();

// WholeBlock plus the five single removals for every block, optionally
// followed by the joint pairs.
std::vector<AblationSpec> default_specs(std::size_t num_blocks, bool include_joint);

// Probe accuracy of `teacher` under `ablations` with the shared budget and seed.
double evaluate_quality(const Model& teacher, std::span<const AblationSpec> ablations, const Probe& probe,
                        const GlyphDataset& real, const EvalBudget& budget, std::uint64_t seed);

double ablate_eval(const Model& teacher, const AblationSpec& spec, const Probe& probe, const GlyphDataset& real,
                   const EvalBudget& budget, std::uint64_t seed, double baseline_quality);

// Evaluates every spec (optionally on several threads) against a read-only
// teacher. Throws ContractError listing duplicated specs.
ContributionTable sweep(const Model& teacher, std::span<const AblationSpec> specs, const Probe& probe,
                        const GlyphDataset& real, const EvalBudget& budget, std::uint64_t seed,
                        std::size_t workers = 1);

void write_contribution_csv(std::ostream& out, const ContributionTable& table);
// Throws FormatError on malformed input.
ContributionTable read_contribution_csv(std::istream& in);

}  // namespace hprune
