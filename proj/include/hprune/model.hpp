#pragma once

// Toy dual-stream MMDiT trained as a rectified flow.
//
// Each block owns the five subcomponents that contribution analysis and
// pruning operate on. Image tokens are 2-D patches of a square sample;
// context tokens come from a learned per-class embedding. Timestep and class
// jointly drive adaptive layer-norm modulation.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hprune/rng.hpp"
#include "hprune/tensor.hpp"

namespace hprune {

struct ModelConfig {
  std::size_t num_blocks = 12;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t n_img_tokens = 16;
  std::size_t n_ctx_tokens = 4;
  std::size_t patch_dim = 4;
  std::size_t num_classes = 8;
  std::size_t time_embed_dim = 64;
  std::size_t mlp_ratio = 2;

  std::size_t sample_dim() const { return n_img_tokens * patch_dim; }
  std::size_t head_dim() const { return d_model / num_heads; }
  std::size_t mlp_hidden() const { return d_model * mlp_ratio; }
  // Side lengths: the sample is side×side, patches are patch×patch.
  std::size_t image_side() const;
  std::size_t patch_side() const;
  // Throws ContractError when the configuration is inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class Subcomponent : std::uint8_t { Norm = 0, ContextNorm, Attention, Mlp, ContextMlp };

inline constexpr std::array<Subcomponent, 5> kSubcomponents = {
    Subcomponent::Norm, Subcomponent::ContextNorm, Subcomponent::Attention, Subcomponent::Mlp,
    Subcomponent::ContextMlp};

std::string_view subcomponent_name(Subcomponent s);
Subcomponent parse_subcomponent(std::string_view name);

// A non-empty set of removed subcomponents, or the whole block.
class Removal {
 public:
  static Removal whole_block() { return Removal(kWholeBit); }
  static Removal of(std::initializer_list<Subcomponent> parts);
  static Removal of(Subcomponent part) { return of({part}); }
  // Inverse of name(): "WholeBlock" or kinds joined by '+'.
  static Removal parse(std::string_view text);

  bool is_whole_block() const noexcept { return bits_ == kWholeBit; }
  bool removes(Subcomponent s) const noexcept {
    return is_whole_block() || (bits_ & (1u << static_cast<unsigned>(s))) != 0;
  }
  std::size_t count() const noexcept;
  std::string name() const;
  std::uint8_t bits() const noexcept { return bits_; }

  auto operator<=>(const Removal&) const = default;

 private:
  static constexpr std::uint8_t kWholeBit = 0x80;
  explicit Removal(std::uint8_t bits) : bits_(bits) {}
  std::uint8_t bits_ = 0;
};

struct AblationSpec {
  std::size_t block_index = 0;  // position in the model's current block stack
  Removal removed = Removal::whole_block();

  std::string key() const;
  auto operator<=>(const AblationSpec&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const;
  std::size_t param_count() const { return weight.numel() + bias.numel(); }
};

struct AttentionParams {
  Linear qkv_img, qkv_ctx, out_img, out_ctx;
};

struct MlpParams {
  Linear fc1, fc2;
};

struct Block {
  std::optional<Linear> norm_mod;      // image shift/scale for both norms
  std::optional<Linear> ctx_norm_mod;  // context shift/scale for both norms
  std::optional<AttentionParams> attn;
  std::optional<MlpParams> mlp;
  std::optional<MlpParams> ctx_mlp;

  bool has(Subcomponent s) const;
  std::size_t param_count(Subcomponent s) const;
  std::size_t param_count() const;
};

struct Embeddings {
  Linear patch;      // patch_dim -> d
  Tensor pos;        // [n_img, d]
  Linear time1;      // time_embed_dim -> d
  Linear time2;      // d -> d
  Tensor class_ctx;  // [num_classes, n_ctx * d]
  Tensor class_pool; // [num_classes, d]
};

struct Head {
  Linear mod;  // d -> 2d (shift, scale)
  Linear out;  // d -> patch_dim
};

enum class ParamGroup { Embedding, Block, Head };

struct ParamRef {
  std::string name;
  Tensor tensor;  // shares storage with the model
  ParamGroup group;
  std::size_t block_position = 0;  // valid for ParamGroup::Block
  std::size_t teacher_index = 0;   // valid for ParamGroup::Block
  Subcomponent subcomponent = Subcomponent::Norm;
  bool is_linear_weight = false;  // weight or bias of a Linear
};

class Model {
 public:
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t num_blocks() const noexcept { return blocks_.size(); }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  std::vector<Block>& blocks() noexcept { return blocks_; }
  // Student block position -> original teacher block index.
  const std::vector<std::size_t>& teacher_indices() const noexcept { return teacher_indices_; }
  const Embeddings& embeddings() const noexcept { return embed_; }
  Embeddings& embeddings() noexcept { return embed_; }
  const Head& head() const noexcept { return head_; }
  Head& head() noexcept { return head_; }

  // Deterministic order: embeddings, blocks by position, head.
  std::vector<ParamRef> parameters() const;
  std::size_t transformer_param_count() const;
  std::size_t total_param_count() const;

  // Deep copy with independent storage.
  Model clone() const;

  // Structural deletion addressed by teacher index. Throws ContractError when
  // an index names a block or subcomponent that is not present.
  Model prune(std::span<const std::size_t> whole_blocks,
              std::span<const std::pair<std::size_t, Subcomponent>> subcomponents) const;

  // Assembles a model from explicit parts (used by checkpoint loading).
  static Model assemble(ModelConfig config, Embeddings embed, std::vector<Block> blocks,
                        std::vector<std::size_t> teacher_indices, Head head);

 private:
  ModelConfig config_;
  Embeddings embed_;
  std::vector<Block> blocks_;
  std::vector<std::size_t> teacher_indices_;
  Head head_;
};

struct ForwardInput {
  Tensor x_t;                    // [B, sample_dim]
  std::vector<float> t;          // B times in [0, 1]
  std::vector<std::size_t> y;    // B class ids
  std::size_t batch() const { return y.size(); }
};

struct ForwardOutput {
  Tensor velocity;                    // [B, sample_dim]
  Tensor embedded;                    // image stream entering block 0 (captured only)
  std::vector<Tensor> block_features; // image stream after each block, [B*n_img, d]
};

ForwardOutput forward(const Model& model, const ForwardInput& input, std::span<const AblationSpec> ablations = {},
                      bool capture_features = false);

// Pieces of the forward path, exposed so tests can compose them by hand.
Tensor timestep_features(std::span<const float> t, std::size_t dim);
Tensor conditioning(const Model& model, std::span<const float> t, std::span<const std::size_t> y);
Tensor embed_image(const Model& model, const Tensor& x_t);
Tensor embed_context(const Model& model, std::span<const std::size_t> y);
Tensor apply_head(const Model& model, const Tensor& image_stream, const Tensor& cond_act);
Tensor patchify(const ModelConfig& config, const Tensor& x);
Tensor unpatchify(const ModelConfig& config, const Tensor& patches, std::size_t batch);

// Rectified flow: x_t = (1 - t) x_0 + t ε, target v = ε - x_0.
struct FlowBatch {
  ForwardInput input;
  Tensor x0;
  Tensor noise;
  Tensor target;
};

FlowBatch make_flow_batch(const Tensor& x0, std::vector<std::size_t> y, Rng& rng);
Tensor flow_loss(const Model& model, const FlowBatch& batch);
Tensor flow_loss(const Model& model, const Tensor& x0, std::vector<std::size_t> y, std::uint64_t seed);

// Euler integration from t = 1 (noise drawn from `seed`) to t = 0.
Tensor sample(const Model& model, std::size_t y, std::size_t steps, std::uint64_t seed,
              std::span<const AblationSpec> ablations = {});
// Row j uses noise drawn from seeds[j]; identical to calling sample() per row.
Tensor sample_batch(const Model& model, std::span<const std::size_t> ys, std::span<const std::uint64_t> seeds,
                    std::size_t steps, std::span<const AblationSpec> ablations = {});
std::vector<float> sample_noise(std::size_t dim, std::uint64_t seed);

struct BlockCensus {
  std::size_t teacher_index = 0;
  std::array<std::size_t, 5> per_subcomponent{};
  std::size_t total() const;
};

struct ParamCensus {
  std::vector<BlockCensus> blocks;  // present blocks in position order
  std::size_t transformer_total = 0;
};

ParamCensus census(const Model& model);

// Multiply-accumulates of one single-sample forward pass (matmuls only).
std::uint64_t forward_macs(const Model& model);

// Plain SGD with a fixed learning rate and global-norm gradient clipping.
struct SgdConfig {
  float learning_rate = 0.05f;
  float clip_norm = 1.0f;
};

// Applies one update to every parameter that has a gradient, then clears
// gradients. Returns the pre-clip global gradient norm.
double sgd_step(std::span<const ParamRef> params, const SgdConfig& cfg);

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  SgdConfig sgd{};
  std::uint64_t seed = 0;
};

// Trains `model` in place on (samples [N, sample_dim], labels) with the flow loss.
std::vector<TrainLogRow> train_flow(Model& model, const Tensor& samples, std::span<const std::size_t> labels,
                                    const TrainConfig& cfg);

}  // namespace hprune
