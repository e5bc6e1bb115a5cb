#include "hprune/quant.hpp"

#include <algorithm>
#include <cmath>

#include "hprune/checkpoint.hpp"
#include "hprune/errors.hpp"

namespace hprune {

namespace {

constexpr int kScaleMantissaBits = 20;

// Keeps (code - zero_point) * scale exact in float for |code - zero_point| <= 15.
float round_mantissa(float s) {
  int e = 0;
  const double m = std::frexp(static_cast<double>(s), &e);
  return static_cast<float>(std::ldexp(std::round(std::ldexp(m, kScaleMantissaBits)), e - kScaleMantissaBits));
}

struct Group {
  float scale;
  float zp;
};

Group fit_group(std::span<const float> v, bool round_scale) {
  const auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
  const float mn = *mn_it, mx = *mx_it;
  float scale;
  if (mn == mx) {
    scale = mn == 0.0f ? 1.0f : std::abs(mn);
  } else {
    scale = (std::max(mx, 0.0f) - std::min(mn, 0.0f)) / 15.0f;
    if (round_scale) scale = round_mantissa(scale);
  }
  return {scale, std::clamp(std::round(-std::min(mn, 0.0f) / scale), 0.0f, 15.0f)};
}

void encode(std::span<const float> v, Group g, std::span<std::uint8_t> codes) {
  for (std::size_t i = 0; i < v.size(); ++i)
    codes[i] = static_cast<std::uint8_t>(std::clamp(std::round(v[i] / g.scale) + g.zp, 0.0f, 15.0f));
}

float decode(std::uint8_t code, Group g) { return (static_cast<float>(code) - g.zp) * g.scale; }

// The plain scale unless re-quantizing its reconstruction would move it; the
// mantissa-rounded scale makes every reconstruction exact and therefore stable.
Group choose_group(std::span<const float> v, std::span<std::uint8_t> codes) {
  const Group plain = fit_group(v, false);
  encode(v, plain, codes);
  std::vector<float> deq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) deq[i] = decode(codes[i], plain);
  const Group again = fit_group(deq, false);
  std::vector<std::uint8_t> codes2(v.size());
  encode(deq, again, codes2);
  bool stable = true;
  for (std::size_t i = 0; i < v.size() && stable; ++i) stable = decode(codes2[i], again) == deq[i];
  if (stable) return plain;
  const Group rounded = fit_group(v, true);
  encode(v, rounded, codes);
  return rounded;
}

}  // namespace

std::uint8_t QTensor::code(std::size_t i) const {
  const std::uint8_t byte = packed[i / 2];
  return i % 2 == 0 ? byte & 0x0F : byte >> 4;
}

std::size_t QTensor::payload_bytes() const { return packed.size() + 4 * scales.size() + zero_points.size(); }

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > 15) throw ContractError("pack: code " + std::to_string(codes[i]) + " exceeds 4 bits");
    out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? codes[i] : codes[i] << 4);
  }
  return out;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
  if (packed.size() < (count + 1) / 2) throw CorruptionError("unpack: packed buffer too short");
  std::vector<std::uint8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = i % 2 == 0 ? packed[i / 2] & 0x0F : packed[i / 2] >> 4;
  return out;
}

QTensor quantize_tensor(const Tensor& t, std::size_t group_size) {
  if (group_size < 2) throw ContractError("quantize: group size must be at least 2");
  const auto v = t.data();
  for (float x : v)
    if (!std::isfinite(x)) throw ContractError("quantize: non-finite input");
  QTensor q;
  q.shape = t.shape();
  q.group_size = group_size;
  const std::size_t n = v.size(), groups = q.num_groups();
  std::vector<std::uint8_t> codes(n);
  q.scales.resize(groups);
  q.zero_points.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t lo = g * group_size, hi = std::min(n, lo + group_size);
    const Group fit = choose_group(v.subspan(lo, hi - lo), std::span(codes).subspan(lo, hi - lo));
    q.scales[g] = fit.scale;
    q.zero_points[g] = static_cast<std::uint8_t>(fit.zp);
  }
  q.packed = pack_nibbles(codes);
  return q;
}

Tensor dequantize(const QTensor& q) {
  if (q.group_size < 2) throw CorruptionError("dequantize: group size below 2");
  const std::size_t n = q.numel(), groups = q.num_groups();
  if (q.scales.size() != groups || q.zero_points.size() != groups || q.packed.size() != (n + 1) / 2)
    throw CorruptionError("dequantize: layout does not match " + std::to_string(n) + " elements");
  std::vector<float> out(n);
  for (std::size_t g = 0; g < groups; ++g) {
    if (q.zero_points[g] > 15)
      throw CorruptionError("dequantize: zero point " + std::to_string(q.zero_points[g]) + " of group " +
                            std::to_string(g) + " out of range");
    if (!std::isfinite(q.scales[g])) throw CorruptionError("dequantize: non-finite scale in group " + std::to_string(g));
    const std::size_t lo = g * q.group_size, hi = std::min(n, lo + q.group_size);
    const float zp = q.zero_points[g];
    for (std::size_t i = lo; i < hi; ++i) out[i] = (static_cast<float>(q.code(i)) - zp) * q.scales[g];
  }
  return Tensor::from(q.shape, std::move(out));
}

bool is_quantized_param(const ParamRef& p) { return p.is_linear_weight && p.group != ParamGroup::Embedding; }

QuantizedModel quantize_model(const Model& model, std::size_t group_size) {
  QuantizedModel qm;
  qm.model = model.clone();
  qm.group_size = group_size;
  for (const auto& p : qm.model.parameters()) {
    if (!is_quantized_param(p)) continue;
    auto q = quantize_tensor(p.tensor, group_size);
    const Tensor d = dequantize(q);
    Tensor dst = p.tensor;
    std::copy(d.data().begin(), d.data().end(), dst.mutable_data().begin());
    qm.tensors.emplace(p.name, std::move(q));
  }
  return qm;
}

MemoryReport memory_report(const Model& original, const QuantizedModel& compressed) {
  const auto before = serialize_checkpoint(model_checkpoint(original, nullptr, true));
  const auto after = serialize_checkpoint(model_checkpoint(compressed.model, &compressed.tensors, true));
  const auto layout = checkpoint_layout(before);
  MemoryReport r;
  r.bytes_before = before.size();
  r.bytes_before_16 = layout.header_bytes + layout.payload_bytes / 2;
  r.bytes_after = after.size();
  r.reduction_percent = 100.0 * (1.0 - double(r.bytes_after) / double(r.bytes_before));
  r.reduction_percent_16 = 100.0 * (1.0 - double(r.bytes_after) / double(r.bytes_before_16));
  return r;
}

}  // namespace hprune
