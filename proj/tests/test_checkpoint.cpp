#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "hprune/checkpoint.hpp"
#include "hprune/errors.hpp"
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

std::uint64_t offset_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected FormatError";
  return ~0ull;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hprune_test_" + name);
}

}  // namespace

TEST(CheckpointTest, IdentityRoundTripAndLayout) {
  Checkpoint c;
  c.meta["note"] = "identity";
  c.tensors.push_back({"eye", false, Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), {}});
  const auto path = temp_path("eye.hprn");
  const auto written = save_checkpoint(path, c);
  EXPECT_EQ(written, std::filesystem::file_size(path));
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.meta["note"], "identity");
  EXPECT_EQ(vec(back.tensor("eye")), vec(c.tensors[0].f32));

  const auto bytes = serialize_checkpoint(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HPRN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[8 + i]) << (8 * i);
  EXPECT_EQ(bytes.size(), 16 + len + 36);
  // 1.0f little-endian at the start of the payload.
  EXPECT_EQ(bytes[16 + len + 3], 0x3F);
  EXPECT_EQ(bytes[16 + len + 2], 0x80);
  std::filesystem::remove(path);
}

TEST(CheckpointTest, EmptyDirectoryIsHeaderOnly) {
  const auto bytes = serialize_checkpoint(Checkpoint{});
  const auto layout = checkpoint_layout(bytes);
  EXPECT_EQ(layout.payload_bytes, 0u);
  EXPECT_EQ(layout.header_bytes, bytes.size());
  EXPECT_TRUE(parse_checkpoint(bytes).tensors.empty());
}

TEST(CheckpointTest, QuantizedRoundTripAndFaultConfinement) {
  Rng rng(1);
  const auto t = test::random_tensor(rng, {4, 64});
  Checkpoint c;
  c.tensors.push_back({"q", true, {}, quantize_tensor(t)});
  auto bytes = serialize_checkpoint(c);
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back.tensors[0].q4, c.tensors[0].q4);
  EXPECT_EQ(dtype_name(back.tensors[0]), "q4g64");

  const auto clean = vec(back.tensor("q"));
  const std::size_t payload = checkpoint_layout(bytes).header_bytes;
  for (std::size_t byte : {0u, 40u, 127u}) {
    auto corrupt = bytes;
    corrupt[payload + byte] ^= 0x5A;
    const auto bad = vec(parse_checkpoint(corrupt).tensor("q"));
    std::set<std::size_t> groups;
    for (std::size_t i = 0; i < bad.size(); ++i)
      if (bad[i] != clean[i]) groups.insert(i / 64);
    EXPECT_EQ(groups.size(), 1u) << byte;
    EXPECT_EQ(*groups.begin(), 2 * byte / 64);
  }
  auto zp = bytes;
  zp[bytes.size() - 1] = 200;
  EXPECT_THROW(parse_checkpoint(zp).tensor("q"), CorruptionError);
}

TEST(CheckpointTest, MalformedFilesReportOffsets) {
  Checkpoint c;
  c.tensors.push_back({"a", false, Tensor::full({2}, 1.0f), {}});
  const auto good = serialize_checkpoint(c);
  const std::size_t len = checkpoint_layout(good).header_bytes - 16;

  auto magic = good;
  magic[1] = 'X';
  EXPECT_EQ(offset_of([&] { parse_checkpoint(magic); }), 0u);
  auto version = good;
  version[4] = 9;
  EXPECT_EQ(offset_of([&] { parse_checkpoint(version); }), 4u);
  std::vector<std::uint8_t> truncated(good.begin(), good.end() - 3);
  EXPECT_EQ(offset_of([&] { parse_checkpoint(truncated); }), 16 + len);
  std::vector<std::uint8_t> short_header(good.begin(), good.begin() + 10);
  EXPECT_EQ(offset_of([&] { parse_checkpoint(short_header); }), 10u);
  auto huge = good;
  huge[15] = 0x7F;
  EXPECT_EQ(offset_of([&] { parse_checkpoint(huge); }), 8u);
  auto json = good;
  json[16] = '[';
  EXPECT_GE(offset_of([&] { parse_checkpoint(json); }), 16u);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(offset_of([&] { parse_checkpoint(trailing); }), 16 + len + 8);
  auto nan = good;
  nan[16 + len + 7] = 0x7F;
  nan[16 + len + 6] = 0xC0;
  EXPECT_EQ(offset_of([&] { parse_checkpoint(nan); }), 16 + len + 4);

  Checkpoint dup;
  dup.tensors.push_back({"a", false, Tensor::full({1}, 1.0f), {}});
  dup.tensors.push_back({"a", false, Tensor::full({1}, 1.0f), {}});
  EXPECT_THROW(serialize_checkpoint(dup), ContractError);
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist")), DependencyError);
}

TEST(CheckpointTest, ModelRoundTripIsBitwise) {
  const auto m = Model::init(tiny(4), 2);
  const auto pruned = m.prune(std::vector<std::size_t>{1},
                              std::vector<std::pair<std::size_t, Subcomponent>>{{3, Subcomponent::Mlp}, {2, Subcomponent::Norm}});
  for (const Model* model : {&m, &pruned}) {
    const auto bytes = serialize_checkpoint(model_checkpoint(*model));
    const auto back = model_from_checkpoint(parse_checkpoint(bytes));
    EXPECT_EQ(back.config(), model->config());
    EXPECT_EQ(back.teacher_indices(), model->teacher_indices());
    const auto a = model->parameters(), b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      EXPECT_EQ(vec(a[i].tensor), vec(b[i].tensor));
    }
    EXPECT_EQ(serialize_checkpoint(model_checkpoint(back)), bytes);
  }
  const auto blocks_only = model_checkpoint(m, nullptr, true);
  EXPECT_THROW(model_from_checkpoint(blocks_only), FormatError);
}

TEST(CheckpointTest, QuantizedModelRoundTrip) {
  const auto qm = quantize_model(Model::init(tiny(2), 3));
  const auto bytes = serialize_checkpoint(model_checkpoint(qm.model, &qm.tensors));
  const auto back = quantized_from_checkpoint(parse_checkpoint(bytes));
  EXPECT_EQ(back.tensors, qm.tensors);
  const auto a = qm.model.parameters(), b = back.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(vec(a[i].tensor), vec(b[i].tensor));
  EXPECT_EQ(serialize_checkpoint(model_checkpoint(back.model, &back.tensors)), bytes);
}

TEST(CheckpointTest, InconsistentModelIsRejected) {
  auto c = model_checkpoint(Model::init(tiny(2), 4));
  for (auto& e : c.tensors)
    if (e.name == "blocks.1.mlp.fc1.weight") e.f32 = Tensor::zeros({3, 3});
  EXPECT_THROW(model_from_checkpoint(c), FormatError);
  auto extra = model_checkpoint(Model::init(tiny(2), 4));
  extra.tensors.push_back({"stray", false, Tensor::zeros({1}), {}});
  EXPECT_THROW(model_from_checkpoint(extra), FormatError);
  auto cfg = model_checkpoint(Model::init(tiny(2), 4));
  cfg.meta["config"]["d_model"] = 15;
  EXPECT_THROW(model_from_checkpoint(cfg), FormatError);
}

TEST(CheckpointTest, ConfigJson) {
  const auto c = tiny(3);
  EXPECT_EQ(config_from_json(config_to_json(c)), c);
  EXPECT_THROW(config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"d_model", "wide"}}), ConfigError);
}
