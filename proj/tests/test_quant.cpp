#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "hprune/checkpoint.hpp"
#include "hprune/errors.hpp"
#include "hprune/quant.hpp"
#include "test_support.hpp"

using namespace hprune;

namespace {

std::vector<float> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ModelConfig tiny(std::size_t blocks) {
  ModelConfig c;
  c.num_blocks = blocks;
  c.d_model = 16;
  c.num_heads = 2;
  c.time_embed_dim = 8;
  return c;
}

// Largest per-group reconstruction error relative to the bound scale/2 + 1 ulp.
void expect_within_bound(const Tensor& t, const QTensor& q) {
  const auto d = dequantize(q);
  const auto a = t.data(), b = d.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float s = q.scales[i / q.group_size];
    const float ulp = std::nextafter(std::abs(a[i]), std::numeric_limits<float>::infinity()) - std::abs(a[i]);
    ASSERT_LE(std::abs(a[i] - b[i]), s / 2.0f + ulp) << "element " << i;
  }
}

}  // namespace

TEST(QuantTest, HandQuantizedGroup) {
  const auto t = Tensor::from({4}, {0.0f, 0.5f, 1.0f, 1.5f});
  const auto q = quantize_tensor(t, 4);
  EXPECT_NEAR(q.scales[0], 0.1f, 1e-6f);
  EXPECT_EQ(q.zero_points[0], 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(q.code(i), 5 * i);
  EXPECT_EQ(vec(dequantize(q)), vec(t));
}

TEST(QuantTest, HandDequantize) {
  QTensor q;
  q.shape = {4};
  q.group_size = 64;
  q.packed = pack_nibbles(std::vector<std::uint8_t>{0, 5, 10, 15});
  q.scales = {0.1f};
  q.zero_points = {0};
  const auto d = vec(dequantize(q));
  const std::vector<float> expect{0.0f, 0.5f, 1.0f, 1.5f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(d[i], expect[i], 1e-6f);

  q.packed = pack_nibbles(std::vector<std::uint8_t>{0, 0, 0, 0});
  for (float v : vec(dequantize(q))) EXPECT_EQ(v, 0.0f);
  q.zero_points = {16};
  EXPECT_THROW(dequantize(q), CorruptionError);
  q.zero_points = {0, 0};
  EXPECT_THROW(dequantize(q), CorruptionError);
}

TEST(QuantTest, ConstantAndZeroGroups) {
  for (float v : {0.7f, -0.7f, 0.0f, 3e-20f}) {
    const auto t = Tensor::full({8}, v);
    const auto q = quantize_tensor(t, 64);
    for (std::size_t i = 1; i < 8; ++i) EXPECT_EQ(q.code(i), q.code(0));
    EXPECT_EQ(vec(dequantize(q)), vec(t)) << v;
  }
  EXPECT_EQ(quantize_tensor(Tensor::full({8}, 0.0f), 64).scales[0], 1.0f);
}

TEST(QuantTest, RangeAwayFromZero) {
  const auto t = Tensor::from({4}, {10.0f, 10.25f, 10.5f, 11.0f});
  const auto q = quantize_tensor(t, 4);
  expect_within_bound(t, q);
}

TEST(QuantTest, RoundTripBoundOnRandomTensors) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(300);
    const float spread = std::pow(10.0f, float(rng.index(7)) - 3.0f);
    const auto t = test::random_tensor(rng, {n}, false, spread);
    const auto q = quantize_tensor(t, trial % 3 == 0 ? 16 : 64);
    EXPECT_EQ(q.num_groups(), (n + q.group_size - 1) / q.group_size);
    for (auto zp : q.zero_points) EXPECT_LE(zp, 15);
    expect_within_bound(t, q);
  }
}

TEST(QuantTest, IdempotentOnLattice) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = test::random_tensor(rng, {5, 37});
    const auto d = dequantize(quantize_tensor(t));
    const auto q2 = quantize_tensor(d);
    EXPECT_EQ(vec(dequantize(q2)), vec(d));
  }
}

TEST(QuantTest, PackingRoundTrip) {
  Rng rng(3);
  for (std::size_t n : {0u, 1u, 2u, 7u, 64u, 129u}) {
    std::vector<std::uint8_t> codes(n);
    for (auto& c : codes) c = static_cast<std::uint8_t>(rng.index(16));
    const auto packed = pack_nibbles(codes);
    EXPECT_EQ(packed.size(), (n + 1) / 2);
    if (n % 2 == 1) EXPECT_EQ(packed.back() >> 4, 0);
    EXPECT_EQ(unpack_nibbles(packed, n), codes);
  }
  EXPECT_THROW(pack_nibbles(std::vector<std::uint8_t>{16}), ContractError);
  EXPECT_THROW(unpack_nibbles(std::vector<std::uint8_t>{1}, 3), CorruptionError);
  EXPECT_THROW(quantize_tensor(Tensor::full({4}, 1.0f), 1), ContractError);
}

TEST(QuantTest, ModelForwardMatchesOfflineDequantization) {
  const auto m = Model::init(tiny(2), 4);
  const auto qm = quantize_model(m);
  auto offline = m.clone();
  std::size_t quantized = 0;
  for (const auto& p : offline.parameters()) {
    if (!is_quantized_param(p)) {
      EXPECT_EQ(qm.tensors.count(p.name), 0u);
      continue;
    }
    ++quantized;
    const auto d = dequantize(qm.tensors.at(p.name));
    Tensor dst = p.tensor;
    std::copy(d.data().begin(), d.data().end(), dst.mutable_data().begin());
  }
  EXPECT_EQ(quantized, qm.tensors.size());
  EXPECT_EQ(qm.tensors.count("embed.patch.weight"), 0u);
  EXPECT_EQ(qm.tensors.count("head.out.weight"), 1u);
  Rng rng(5);
  ForwardInput in{test::random_tensor(rng, {3, 64}), {0.1f, 0.5f, 0.9f}, {0, 3, 7}};
  EXPECT_EQ(vec(forward(qm.model, in).velocity), vec(forward(offline, in).velocity));
}

TEST(QuantTest, MatrixByteArithmetic) {
  Rng rng(6);
  const auto w = test::random_tensor(rng, {96, 80});
  Checkpoint f, q;
  f.tensors.push_back({"w", false, w, {}});
  q.tensors.push_back({"w", true, {}, quantize_tensor(w)});
  const auto fb = serialize_checkpoint(f), qb = serialize_checkpoint(q);
  const std::size_t mn = 96 * 80;
  EXPECT_EQ(checkpoint_layout(fb).payload_bytes, 4 * mn);
  EXPECT_EQ(checkpoint_layout(qb).payload_bytes, (mn + 1) / 2 + (mn + 63) / 64 * 5);
  const double reduction = 100.0 * (1.0 - double(checkpoint_layout(qb).payload_bytes) / double(4 * mn));
  EXPECT_NEAR(reduction, 85.546875, 1e-9);
}

TEST(QuantTest, MemoryReportFromSerializedSizes) {
  const auto m = Model::init(ModelConfig{}, 7);
  const auto student = m.prune(std::vector<std::size_t>{9, 10, 11}, {});
  const auto qm = quantize_model(student);
  const auto r = memory_report(m, qm);
  EXPECT_EQ(r.bytes_before, serialize_checkpoint(model_checkpoint(m, nullptr, true)).size());
  EXPECT_EQ(r.bytes_after, serialize_checkpoint(model_checkpoint(qm.model, &qm.tensors, true)).size());
  EXPECT_NEAR(r.reduction_percent, 100.0 * (1.0 - double(r.bytes_after) / double(r.bytes_before)), 1e-12);
  EXPECT_GE(r.reduction_percent, 88.0);
  EXPECT_GE(r.reduction_percent_16, 77.5);

  const auto unpruned = memory_report(m, quantize_model(m));
  EXPECT_GE(unpruned.reduction_percent, 80.0);
}
