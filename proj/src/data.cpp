#include "hprune/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hprune/errors.hpp"
#include "hprune/rng.hpp"

namespace hprune {

namespace {

bool template_on(std::size_t cls, int r, int c) {
  switch (cls) {
    case 0: return r == 3 || r == 4;                              // horizontal bar
    case 1: return c == 3 || c == 4;                              // vertical bar
    case 2: return std::abs(r - c) <= 1;                          // diagonal
    case 3: return std::abs(r + c - 7) <= 1;                      // anti-diagonal
    case 4: {                                                     // ring
      const double d = std::hypot(r - 3.5, c - 3.5);
      return d >= 2.0 && d <= 3.3;
    }
    case 5: return ((r / 2) + (c / 2)) % 2 == 0;                  // 2x2 checker
    case 6: return r < 4 && c < 4;                                // corner blob
    case 7: return ((r == 3 || r == 4) && c >= 1 && c <= 6) ||    // plus
                   ((c == 3 || c == 4) && r >= 1 && r <= 6);
    case 8: return r == 0 || r == 7 || c == 0 || c == 7;          // frame
    case 9: return r >= 4 && c >= 4;                              // opposite blob
    case 10: return r == c || r + c == 7;                         // thin cross
    case 11: return (r + c) % 4 == 0;                             // stripes
    default: return false;
  }
}

}  // namespace

std::vector<float> glyph_template(std::size_t cls) {
  if (cls >= kMaxGlyphClasses) throw ContractError("glyph class " + std::to_string(cls) + " has no template");
  std::vector<float> g(kGlyphDim);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) g[static_cast<std::size_t>(r * 8 + c)] = template_on(cls, r, c) ? 1.0f : -1.0f;
  return g;
}

GlyphDataset GlyphDataset::subset(Split which) const {
  GlyphDataset out;
  out.num_classes = num_classes;
  std::vector<float> rows;
  for (std::size_t i = 0; i < size(); ++i) {
    if (split[i] != which) continue;
    const auto row = data.data().subspan(i * kGlyphDim, kGlyphDim);
    rows.insert(rows.end(), row.begin(), row.end());
    out.labels.push_back(labels[i]);
    out.split.push_back(which);
  }
  if (out.labels.empty()) throw ContractError("dataset: split is empty");
  out.data = Tensor::from({out.labels.size(), kGlyphDim}, std::move(rows));
  return out;
}

Tensor GlyphDataset::rows_of_class(std::size_t cls) const {
  std::vector<float> rows;
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] != cls) continue;
    const auto row = data.data().subspan(i * kGlyphDim, kGlyphDim);
    rows.insert(rows.end(), row.begin(), row.end());
    ++n;
  }
  if (n == 0) throw ContractError("dataset: no rows of class " + std::to_string(cls));
  return Tensor::from({n, kGlyphDim}, std::move(rows));
}

GlyphDataset gen_dataset(std::size_t num_classes, std::size_t per_class, std::uint64_t seed) {
  if (num_classes < 2 || num_classes > kMaxGlyphClasses)
    throw ContractError("gen_dataset: num_classes must be in [2, " + std::to_string(kMaxGlyphClasses) + "]");
  if (per_class < 8) throw ContractError("gen_dataset: per_class must be at least 8");
  Rng rng(seed);
  GlyphDataset ds;
  ds.num_classes = num_classes;
  std::vector<float> rows;
  rows.reserve(num_classes * per_class * kGlyphDim);
  for (std::size_t j = 0; j < per_class; ++j) {
    for (std::size_t cls = 0; cls < num_classes; ++cls) {
      const auto tpl = glyph_template(cls);
      const int dr = static_cast<int>(rng.index(3)) - 1;
      const int dc = static_cast<int>(rng.index(3)) - 1;
      for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 8; ++c) {
          const int sr = r - dr, sc = c - dc;
          const float base = (sr >= 0 && sr < 8 && sc >= 0 && sc < 8) ? tpl[static_cast<std::size_t>(sr * 8 + sc)] : -1.0f;
          rows.push_back(std::clamp(base + 0.05f * rng.normal(), -1.0f, 1.0f));
        }
      }
      ds.labels.push_back(cls);
      ds.split.push_back(j % 5 == 4 ? Split::Val : Split::Train);
    }
  }
  ds.data = Tensor::from({ds.labels.size(), kGlyphDim}, std::move(rows));
  return ds;
}

// ------------------------------------------------------------------ probe

Probe Probe::init(std::size_t num_classes, std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  auto randn = [&](std::size_t in, std::size_t out) {
    std::vector<float> d(in * out);
    for (auto& v : d) v = rng.normal() / std::sqrt(static_cast<float>(in));
    return Tensor::from({in, out}, std::move(d), true);
  };
  Probe p;
  p.l1_ = Linear{randn(kGlyphDim, hidden), Tensor::zeros({hidden}, true)};
  p.l2_ = Linear{randn(hidden, num_classes), Tensor::zeros({num_classes}, true)};
  return p;
}

Probe Probe::assemble(Linear l1, Linear l2) {
  if (l1.weight.rank() != 2 || l2.weight.rank() != 2 || l1.weight.dim(0) != kGlyphDim ||
      l1.weight.dim(1) != l2.weight.dim(0))
    throw ContractError("probe: inconsistent layer shapes");
  Probe p;
  p.l1_ = std::move(l1);
  p.l2_ = std::move(l2);
  return p;
}

Tensor Probe::logits(const Tensor& x) const { return l2_.forward(gelu(l1_.forward(x))); }

std::vector<std::size_t> Probe::predict(const Tensor& x) const {
  const Tensor l = logits(x);
  const std::size_t c = l.dim(1);
  std::vector<std::size_t> out(l.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = l.data().subspan(i * c, c);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double Probe::accuracy(const Tensor& x, std::span<const std::size_t> labels) const {
  const auto pred = predict(x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::vector<ParamRef> Probe::parameters() const {
  return {{"probe.l1.weight", l1_.weight, ParamGroup::Head, 0, 0, Subcomponent::Norm, true},
          {"probe.l1.bias", l1_.bias, ParamGroup::Head, 0, 0, Subcomponent::Norm, true},
          {"probe.l2.weight", l2_.weight, ParamGroup::Head, 0, 0, Subcomponent::Norm, true},
          {"probe.l2.bias", l2_.bias, ParamGroup::Head, 0, 0, Subcomponent::Norm, true}};
}

Probe train_probe(const GlyphDataset& dataset, std::uint64_t seed, const ProbeConfig& cfg) {
  const auto train = dataset.subset(Split::Train);
  const auto val = dataset.subset(Split::Val);
  Rng rng(derive_seed(seed, "probe.data"));
  Probe probe = Probe::init(dataset.num_classes, cfg.hidden, derive_seed(seed, "probe.init"));
  const auto params = probe.parameters();
  const std::size_t n = train.size(), C = dataset.num_classes;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, n - start);
      std::vector<float> x, onehot(b * C, 0.0f);
      for (std::size_t k = 0; k < b; ++k) {
        const std::size_t i = order[start + k];
        const auto row = train.data.data().subspan(i * kGlyphDim, kGlyphDim);
        x.insert(x.end(), row.begin(), row.end());
        onehot[k * C + train.labels[i]] = 1.0f;
      }
      Tape tape;
      TapeScope scope(tape);
      const Tensor logp = log_softmax(probe.logits(Tensor::from({b, kGlyphDim}, std::move(x))));
      const Tensor loss = scale(sum(mul(logp, Tensor::from({b, C}, std::move(onehot)))), -1.0f / float(b));
      tape.backward(loss);
      sgd_step(params, SgdConfig{cfg.learning_rate, 1.0f});
    }
  }
  for (const auto& p : params) Tensor(p.tensor).set_requires_grad(false);
  const double acc = probe.accuracy(val.data, val.labels);
  if (acc < cfg.min_accuracy)
    throw MetricUnusableError("probe: validation accuracy " + std::to_string(acc) + "% below floor " +
                              std::to_string(cfg.min_accuracy) + "%");
  return probe;
}

// ---------------------------------------------------------------- metrics

namespace {

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = double(a[k]) - b[k];
    s += d * d;
  }
  return s;
}

std::span<const float> row(const Tensor& t, std::size_t i) { return t.data().subspan(i * t.dim(1), t.dim(1)); }

}  // namespace

double median_bandwidth(const Tensor& x, const Tensor& y) {
  std::vector<std::span<const float>> rows;
  for (std::size_t i = 0; i < x.dim(0); ++i) rows.push_back(row(x, i));
  for (std::size_t i = 0; i < y.dim(0); ++i) rows.push_back(row(y, i));
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) d.push_back(std::sqrt(sq_dist(rows[i], rows[j])));
  if (d.empty()) throw ContractError("median_bandwidth: need at least two rows");
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med > 0.0 ? med : 1.0;
}

double mmd2_rbf(const Tensor& x, const Tensor& y, double bandwidth) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) throw DimensionError("mmd2: row widths differ");
  const double g = 1.0 / (2.0 * bandwidth * bandwidth);
  auto mean_k = [&](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(0); ++i)
      for (std::size_t j = 0; j < b.dim(0); ++j) s += std::exp(-g * sq_dist(row(a, i), row(b, j)));
    return s / (double(a.dim(0)) * double(b.dim(0)));
  };
  return std::max(0.0, mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y));
}

std::uint64_t quality_sample_seed(std::uint64_t seed, std::size_t cls, std::size_t j, std::size_t n_per_class) {
  return derive_seed(seed, static_cast<std::uint64_t>(cls * n_per_class + j));
}

QualityReport quality(const Model& model, const Probe& probe, const GlyphDataset& real, std::size_t n_per_class,
                      std::size_t steps, std::uint64_t seed, std::span<const AblationSpec> ablations) {
  if (n_per_class < 16) throw ContractError("quality: n_per_class must be at least 16");
  const std::size_t C = model.config().num_classes;
  if (probe.num_classes() != C) throw ContractError("quality: probe and model disagree on class count");
  std::vector<std::size_t> ys;
  std::vector<std::uint64_t> seeds;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < n_per_class; ++j) {
      ys.push_back(c);
      seeds.push_back(quality_sample_seed(seed, c, j, n_per_class));
    }
  const Tensor samples = sample_batch(model, ys, seeds, steps, ablations);
  QualityReport rep;
  rep.probe_accuracy = probe.accuracy(samples, ys);
  rep.n_samples = ys.size();
  rep.seed = seed;
  double mmd = 0.0;
  const std::size_t dim = samples.dim(1);
  for (std::size_t c = 0; c < C; ++c) {
    const Tensor gen = Tensor::from(
        {n_per_class, dim}, std::vector<float>(samples.data().begin() + std::ptrdiff_t(c * n_per_class * dim),
                                               samples.data().begin() + std::ptrdiff_t((c + 1) * n_per_class * dim)));
    const Tensor ref = real.rows_of_class(c);
    mmd += mmd2_rbf(gen, ref, median_bandwidth(gen, ref));
  }
  rep.mmd = mmd / double(C);
  return rep;
}

}  // namespace hprune
