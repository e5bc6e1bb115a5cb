#include "hprune/contribution.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "hprune/errors.hpp"

namespace hprune {

double ContributionTable::delta(std::size_t block, Removal removed) const {
  const auto it = entries.find(AblationSpec{block, removed});
  if (it == entries.end())
    throw ContractError("contribution table: no entry for block " + std::to_string(block) + " " + removed.name());
  return it->second;
}

const std::vector<Removal>& joint_removals() {
  static const std::vector<Removal> joint = {
      Removal::of({Subcomponent::Norm, Subcomponent::Mlp}),
      Removal::of({Subcomponent::Mlp, Subcomponent::ContextMlp}),
      Removal::of({Subcomponent::Norm, Subcomponent::ContextNorm}),
      Removal::of({Subcomponent::ContextNorm, Subcomponent::ContextMlp}),
  };
  return joint;
}

std::vector<AblationSpec> default_specs(std::size_t num_blocks, bool include_joint) {
  std::vector<AblationSpec> specs;
  for (std::size_t i = 0; i < num_blocks; ++i) specs.push_back({i, Removal::whole_block()});
  for (std::size_t i = 0; i < num_blocks; ++i)
    for (auto s : kSubcomponents) specs.push_back({i, Removal::of(s)});
  if (include_joint)
    for (std::size_t i = 0; i < num_blocks; ++i)
      for (const auto& r : joint_removals()) specs.push_back({i, r});
  return specs;
}

double evaluate_quality(const Model& teacher, std::span<const AblationSpec> ablations, const Probe& probe,
                        const GlyphDataset& real, const EvalBudget& budget, std::uint64_t seed) {
  return quality(teacher, probe, real, budget.n_per_class, budget.steps, seed, ablations).probe_accuracy;
}

double ablate_eval(const Model& teacher, const AblationSpec& spec, const Probe& probe, const GlyphDataset& real,
                   const EvalBudget& budget, std::uint64_t seed, double baseline_quality) {
  if (spec.block_index >= teacher.num_blocks())
    throw ContractError("ablate_eval: block index " + std::to_string(spec.block_index) + " out of range");
  const std::array<AblationSpec, 1> ab{spec};
  return baseline_quality - evaluate_quality(teacher, ab, probe, real, budget, seed);
}

ContributionTable sweep(const Model& teacher, std::span<const AblationSpec> specs, const Probe& probe,
                        const GlyphDataset& real, const EvalBudget& budget, std::uint64_t seed, std::size_t workers) {
  if (specs.empty()) throw ContractError("sweep: no ablation specs");
  std::set<AblationSpec> seen;
  std::string dups;
  for (const auto& s : specs) {
    if (s.block_index >= teacher.num_blocks())
      throw ContractError("sweep: block index " + std::to_string(s.block_index) + " out of range");
    if (!seen.insert(s).second) dups += (dups.empty() ? "" : ", ") + s.key();
  }
  if (!dups.empty()) throw ContractError("sweep: duplicate specs " + dups);

  ContributionTable table;
  table.budget = budget;
  table.seed = seed;
  table.baseline_quality = evaluate_quality(teacher, {}, probe, real, budget, seed);

  std::vector<double> deltas(specs.size());
  auto run = [&](std::size_t first) {
    for (std::size_t k = first; k < specs.size(); k += workers)
      deltas[k] = ablate_eval(teacher, specs[k], probe, real, budget, seed, table.baseline_quality);
  };
  workers = std::max<std::size_t>(1, std::min(workers, specs.size()));
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (std::size_t k = 0; k < specs.size(); ++k) table.entries.emplace(specs[k], deltas[k]);
  return table;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_contribution_csv(std::ostream& out, const ContributionTable& table) {
  out << "# baseline_quality=" << fmt_double(table.baseline_quality) << " n_per_class=" << table.budget.n_per_class
      << " steps=" << table.budget.steps << " seed=" << table.seed << "\n";
  out << "block_index,removed_set,delta_p\n";
  for (const auto& [spec, d] : table.entries)
    out << spec.block_index << "," << spec.removed.name() << "," << fmt_double(d) << "\n";
}

ContributionTable read_contribution_csv(std::istream& in) {
  ContributionTable table;
  std::string line;
  std::size_t lineno = 0;
  std::uint64_t offset = 0, line_start = 0;
  auto fail = [&](const std::string& what) -> void {
    throw FormatError("contribution csv line " + std::to_string(lineno) + ": " + what, line_start);
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
        if (k == "baseline_quality") table.baseline_quality = std::stod(v), ++found;
        else if (k == "n_per_class") table.budget.n_per_class = std::stoull(v), ++found;
        else if (k == "steps") table.budget.steps = std::stoull(v), ++found;
        else if (k == "seed") table.seed = std::stoull(v), ++found;
      } catch (const std::exception&) {
        fail("bad value for " + k);
      }
    }
    if (found != 4) fail("incomplete metadata");
  }
  if (!next() || line != "block_index,removed_set,delta_p") fail("missing column header");
  while (next()) {
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) fail("expected three columns");
    AblationSpec spec;
    double d = 0.0;
    try {
      spec.block_index = std::stoull(line.substr(0, c1));
      spec.removed = Removal::parse(line.substr(c1 + 1, c2 - c1 - 1));
      d = std::stod(line.substr(c2 + 1));
    } catch (const std::exception& e) {
      fail(e.what());
    }
    if (!table.entries.emplace(spec, d).second) fail("duplicate entry " + spec.key());
  }
  return table;
}

}  // namespace hprune
