#pragma once

// Synthetic 8x8 glyph dataset, a frozen probe classifier and the quality
// metrics built on them.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hprune/model.hpp"
#include "hprune/tensor.hpp"

namespace hprune {

inline constexpr std::size_t kGlyphSide = 8;
inline constexpr std::size_t kGlyphDim = kGlyphSide * kGlyphSide;
inline constexpr std::size_t kMaxGlyphClasses = 12;

enum class Split : std::uint8_t { Train = 0, Val = 1 };

struct GlyphDataset {
  Tensor data;                      // [N, 64], values in [-1, 1]
  std::vector<std::size_t> labels;  // N class ids
  std::vector<Split> split;         // N tags
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  // Rows of one split, optionally restricted to one class.
  GlyphDataset subset(Split which) const;
  Tensor rows_of_class(std::size_t cls) const;
};

// Noise-free template of class `cls` on the 8x8 grid, in {-1, +1}.
std::vector<float> glyph_template(std::size_t cls);

GlyphDataset gen_dataset(std::size_t num_classes, std::size_t per_class, std::uint64_t seed);

struct ProbeConfig {
  std::size_t hidden = 64;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  float learning_rate = 0.1f;
  double min_accuracy = 98.0;  // percent, on the validation split
};

class Probe {
 public:
  static Probe init(std::size_t num_classes, std::size_t hidden, std::uint64_t seed);

  // Logits [B, num_classes].
  Tensor logits(const Tensor& x) const;
  std::vector<std::size_t> predict(const Tensor& x) const;
  // Percent of rows classified as `labels`.
  double accuracy(const Tensor& x, std::span<const std::size_t> labels) const;

  std::size_t num_classes() const { return l2_.weight.dim(1); }
  std::vector<ParamRef> parameters() const;
  static Probe assemble(Linear l1, Linear l2);

 private:
  Linear l1_, l2_;
};

// Trains on the train split. Throws MetricUnusableError when the validation
// accuracy stays below cfg.min_accuracy.
Probe train_probe(const GlyphDataset& dataset, std::uint64_t seed, const ProbeConfig& cfg = {});

struct QualityReport {
  double probe_accuracy = 0.0;  // percent
  double mmd = 0.0;             // per-class RBF MMD^2 to real data, averaged
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;

  bool operator==(const QualityReport&) const = default;
};

// Median of pairwise Euclidean distances over the pooled rows of x and y.
double median_bandwidth(const Tensor& x, const Tensor& y);
// Biased (V-statistic) MMD^2 with k(a, b) = exp(-|a - b|^2 / (2 bw^2)).
double mmd2_rbf(const Tensor& x, const Tensor& y, double bandwidth);

// Per-sample noise seeds used by quality(); row j of class c uses index c * n + j.
std::uint64_t quality_sample_seed(std::uint64_t seed, std::size_t cls, std::size_t j, std::size_t n_per_class);

// Samples n_per_class per class with `steps` Euler steps and scores them
// against `real` (held-out data carrying every class).
QualityReport quality(const Model& model, const Probe& probe, const GlyphDataset& real, std::size_t n_per_class,
                      std::size_t steps, std::uint64_t seed, std::span<const AblationSpec> ablations = {});

}  // namespace hprune
