#include "hprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "hprune/errors.hpp"

namespace hprune {

// ------------------------------------------------------------------ config

namespace {

std::size_t exact_sqrt(std::size_t n) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

}  // namespace

std::size_t ModelConfig::image_side() const { return exact_sqrt(sample_dim()); }
std::size_t ModelConfig::patch_side() const { return exact_sqrt(patch_dim); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ContractError("model config: " + m); };
  if (num_blocks == 0) fail("num_blocks must be positive");
  if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (n_img_tokens == 0 || n_ctx_tokens == 0 || patch_dim == 0) fail("token counts must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be positive and even");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (patch_side() == 0 || exact_sqrt(n_img_tokens) == 0 || image_side() == 0)
    fail("patches and the token grid must be square");
}

// ----------------------------------------------------------- subcomponents

std::string_view subcomponent_name(Subcomponent s) {
  switch (s) {
    case Subcomponent::Norm: return "Norm";
    case Subcomponent::ContextNorm: return "ContextNorm";
    case Subcomponent::Attention: return "Attention";
    case Subcomponent::Mlp: return "Mlp";
    case Subcomponent::ContextMlp: return "ContextMlp";
  }
  return "?";
}

Subcomponent parse_subcomponent(std::string_view name) {
  for (auto s : kSubcomponents)
    if (subcomponent_name(s) == name) return s;
  throw ContractError("unknown subcomponent '" + std::string(name) + "'");
}

Removal Removal::of(std::initializer_list<Subcomponent> parts) {
  std::uint8_t bits = 0;
  for (auto p : parts) bits |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(p));
  if (bits == 0) throw ContractError("removal: empty subcomponent set");
  return Removal(bits);
}

Removal Removal::parse(std::string_view text) {
  if (text == "WholeBlock") return whole_block();
  std::uint8_t bits = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto plus = text.find('+', start);
    const auto part = text.substr(start, plus == std::string_view::npos ? std::string_view::npos : plus - start);
    bits |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(parse_subcomponent(part)));
    if (plus == std::string_view::npos) break;
    start = plus + 1;
  }
  if (bits == 0) throw ContractError("removal: empty subcomponent set");
  return Removal(bits);
}

std::size_t Removal::count() const noexcept {
  if (is_whole_block()) return kSubcomponents.size();
  std::size_t n = 0;
  for (auto s : kSubcomponents) n += removes(s) ? 1 : 0;
  return n;
}

std::string Removal::name() const {
  if (is_whole_block()) return "WholeBlock";
  std::string out;
  for (auto s : kSubcomponents) {
    if (!removes(s)) continue;
    if (!out.empty()) out += '+';
    out += subcomponent_name(s);
  }
  return out;
}

std::string AblationSpec::key() const { return std::to_string(block_index) + ":" + removed.name(); }

// ------------------------------------------------------------- parameters

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

bool Block::has(Subcomponent s) const {
  switch (s) {
    case Subcomponent::Norm: return norm_mod.has_value();
    case Subcomponent::ContextNorm: return ctx_norm_mod.has_value();
    case Subcomponent::Attention: return attn.has_value();
    case Subcomponent::Mlp: return mlp.has_value();
    case Subcomponent::ContextMlp: return ctx_mlp.has_value();
  }
  return false;
}

std::size_t Block::param_count(Subcomponent s) const {
  switch (s) {
    case Subcomponent::Norm: return norm_mod ? norm_mod->param_count() : 0;
    case Subcomponent::ContextNorm: return ctx_norm_mod ? ctx_norm_mod->param_count() : 0;
    case Subcomponent::Attention:
      return attn ? attn->qkv_img.param_count() + attn->qkv_ctx.param_count() + attn->out_img.param_count() +
                        attn->out_ctx.param_count()
                  : 0;
    case Subcomponent::Mlp: return mlp ? mlp->fc1.param_count() + mlp->fc2.param_count() : 0;
    case Subcomponent::ContextMlp: return ctx_mlp ? ctx_mlp->fc1.param_count() + ctx_mlp->fc2.param_count() : 0;
  }
  return 0;
}

std::size_t Block::param_count() const {
  std::size_t n = 0;
  for (auto s : kSubcomponents) n += param_count(s);
  return n;
}

namespace {

Tensor randn(Rng& rng, Shape shape, float stddev) {
  std::vector<float> d(shape_numel(shape));
  for (auto& v : d) v = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(d), true);
}

Linear make_linear(Rng& rng, std::size_t in, std::size_t out, float gain = 1.0f) {
  return Linear{randn(rng, {in, out}, gain / std::sqrt(static_cast<float>(in))), Tensor::zeros({out}, true)};
}

Tensor copy_tensor(const Tensor& t) {
  if (!t.defined()) return t;
  return Tensor::from(t.shape(), std::vector<float>(t.data().begin(), t.data().end()), t.requires_grad());
}

Linear copy_linear(const Linear& l) { return Linear{copy_tensor(l.weight), copy_tensor(l.bias)}; }

Block copy_block(const Block& b) {
  Block c;
  if (b.norm_mod) c.norm_mod = copy_linear(*b.norm_mod);
  if (b.ctx_norm_mod) c.ctx_norm_mod = copy_linear(*b.ctx_norm_mod);
  if (b.attn)
    c.attn = AttentionParams{copy_linear(b.attn->qkv_img), copy_linear(b.attn->qkv_ctx), copy_linear(b.attn->out_img),
                             copy_linear(b.attn->out_ctx)};
  if (b.mlp) c.mlp = MlpParams{copy_linear(b.mlp->fc1), copy_linear(b.mlp->fc2)};
  if (b.ctx_mlp) c.ctx_mlp = MlpParams{copy_linear(b.ctx_mlp->fc1), copy_linear(b.ctx_mlp->fc2)};
  return c;
}

void push_linear(std::vector<ParamRef>& out, const std::string& prefix, const Linear& l, ParamRef base) {
  base.is_linear_weight = true;
  base.name = prefix + ".weight";
  base.tensor = l.weight;
  out.push_back(base);
  base.name = prefix + ".bias";
  base.tensor = l.bias;
  out.push_back(base);
}

}  // namespace

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Model m;
  m.config_ = config;
  const std::size_t d = config.d_model;
  m.embed_.patch = make_linear(rng, config.patch_dim, d);
  m.embed_.pos = randn(rng, {config.n_img_tokens, d}, 0.5f);
  m.embed_.time1 = make_linear(rng, config.time_embed_dim, d);
  m.embed_.time2 = make_linear(rng, d, d);
  m.embed_.class_ctx = randn(rng, {config.num_classes, config.n_ctx_tokens * d}, 1.0f);
  m.embed_.class_pool = randn(rng, {config.num_classes, d}, 1.0f);
  for (std::size_t i = 0; i < config.num_blocks; ++i) {
    Block b;
    b.norm_mod = make_linear(rng, d, 4 * d, 0.1f);
    b.ctx_norm_mod = make_linear(rng, d, 4 * d, 0.1f);
    b.attn = AttentionParams{make_linear(rng, d, 3 * d), make_linear(rng, d, 3 * d), make_linear(rng, d, d, 0.5f),
                             make_linear(rng, d, d, 0.5f)};
    b.mlp = MlpParams{make_linear(rng, d, config.mlp_hidden()), make_linear(rng, config.mlp_hidden(), d, 0.5f)};
    b.ctx_mlp = MlpParams{make_linear(rng, d, config.mlp_hidden()), make_linear(rng, config.mlp_hidden(), d, 0.5f)};
    m.blocks_.push_back(std::move(b));
    m.teacher_indices_.push_back(i);
  }
  m.head_.mod = make_linear(rng, d, 2 * d, 0.1f);
  m.head_.out = make_linear(rng, d, config.patch_dim);
  return m;
}

Model Model::assemble(ModelConfig config, Embeddings embed, std::vector<Block> blocks,
                      std::vector<std::size_t> teacher_indices, Head head) {
  config.validate();
  if (blocks.size() != teacher_indices.size()) throw ContractError("assemble: correspondence size mismatch");
  Model m;
  m.config_ = config;
  m.embed_ = std::move(embed);
  m.blocks_ = std::move(blocks);
  m.teacher_indices_ = std::move(teacher_indices);
  m.head_ = std::move(head);
  return m;
}

std::vector<ParamRef> Model::parameters() const {
  std::vector<ParamRef> out;
  ParamRef e;
  e.group = ParamGroup::Embedding;
  push_linear(out, "embed.patch", embed_.patch, e);
  out.push_back({"embed.pos", embed_.pos, ParamGroup::Embedding});
  push_linear(out, "embed.time1", embed_.time1, e);
  push_linear(out, "embed.time2", embed_.time2, e);
  out.push_back({"embed.class_ctx", embed_.class_ctx, ParamGroup::Embedding});
  out.push_back({"embed.class_pool", embed_.class_pool, ParamGroup::Embedding});
  for (std::size_t p = 0; p < blocks_.size(); ++p) {
    const auto& b = blocks_[p];
    const std::string prefix = "blocks." + std::to_string(teacher_indices_[p]);
    ParamRef base;
    base.group = ParamGroup::Block;
    base.block_position = p;
    base.teacher_index = teacher_indices_[p];
    auto with = [&](Subcomponent s) {
      ParamRef r = base;
      r.subcomponent = s;
      return r;
    };
    if (b.norm_mod) push_linear(out, prefix + ".norm_mod", *b.norm_mod, with(Subcomponent::Norm));
    if (b.ctx_norm_mod) push_linear(out, prefix + ".ctx_norm_mod", *b.ctx_norm_mod, with(Subcomponent::ContextNorm));
    if (b.attn) {
      const auto r = with(Subcomponent::Attention);
      push_linear(out, prefix + ".attn.qkv_img", b.attn->qkv_img, r);
      push_linear(out, prefix + ".attn.qkv_ctx", b.attn->qkv_ctx, r);
      push_linear(out, prefix + ".attn.out_img", b.attn->out_img, r);
      push_linear(out, prefix + ".attn.out_ctx", b.attn->out_ctx, r);
    }
    if (b.mlp) {
      push_linear(out, prefix + ".mlp.fc1", b.mlp->fc1, with(Subcomponent::Mlp));
      push_linear(out, prefix + ".mlp.fc2", b.mlp->fc2, with(Subcomponent::Mlp));
    }
    if (b.ctx_mlp) {
      push_linear(out, prefix + ".ctx_mlp.fc1", b.ctx_mlp->fc1, with(Subcomponent::ContextMlp));
      push_linear(out, prefix + ".ctx_mlp.fc2", b.ctx_mlp->fc2, with(Subcomponent::ContextMlp));
    }
  }
  ParamRef h;
  h.group = ParamGroup::Head;
  push_linear(out, "head.mod", head_.mod, h);
  push_linear(out, "head.out", head_.out, h);
  return out;
}

std::size_t Model::transformer_param_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.param_count();
  return n;
}

std::size_t Model::total_param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Model Model::clone() const {
  Model m;
  m.config_ = config_;
  m.embed_ = Embeddings{copy_linear(embed_.patch), copy_tensor(embed_.pos),       copy_linear(embed_.time1),
                        copy_linear(embed_.time2), copy_tensor(embed_.class_ctx), copy_tensor(embed_.class_pool)};
  for (const auto& b : blocks_) m.blocks_.push_back(copy_block(b));
  m.teacher_indices_ = teacher_indices_;
  m.head_ = Head{copy_linear(head_.mod), copy_linear(head_.out)};
  return m;
}

Model Model::prune(std::span<const std::size_t> whole_blocks,
                   std::span<const std::pair<std::size_t, Subcomponent>> subcomponents) const {
  auto position_of = [&](std::size_t teacher_index) {
    const auto it = std::find(teacher_indices_.begin(), teacher_indices_.end(), teacher_index);
    if (it == teacher_indices_.end())
      throw ContractError("prune: block " + std::to_string(teacher_index) + " is not present in the model");
    return static_cast<std::size_t>(it - teacher_indices_.begin());
  };
  std::set<std::size_t> drop;
  for (auto i : whole_blocks) {
    position_of(i);
    if (!drop.insert(i).second) throw ContractError("prune: block " + std::to_string(i) + " listed twice");
  }
  Model m = clone();
  for (const auto& [i, s] : subcomponents) {
    if (drop.count(i)) throw ContractError("prune: subcomponent of removed block " + std::to_string(i));
    auto& b = m.blocks_[position_of(i)];
    if (!b.has(s))
      throw ContractError("prune: " + std::string(subcomponent_name(s)) + " of block " + std::to_string(i) +
                          " already removed");
    switch (s) {
      case Subcomponent::Norm: b.norm_mod.reset(); break;
      case Subcomponent::ContextNorm: b.ctx_norm_mod.reset(); break;
      case Subcomponent::Attention: b.attn.reset(); break;
      case Subcomponent::Mlp: b.mlp.reset(); break;
      case Subcomponent::ContextMlp: b.ctx_mlp.reset(); break;
    }
  }
  std::vector<Block> kept;
  std::vector<std::size_t> kept_idx;
  for (std::size_t p = 0; p < m.blocks_.size(); ++p) {
    if (drop.count(m.teacher_indices_[p])) continue;
    kept.push_back(std::move(m.blocks_[p]));
    kept_idx.push_back(m.teacher_indices_[p]);
  }
  m.blocks_ = std::move(kept);
  m.teacher_indices_ = std::move(kept_idx);
  return m;
}

// ---------------------------------------------------------------- forward

Tensor timestep_features(std::span<const float> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<float> out(t.size() * dim);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = 1000.0 * static_cast<double>(t[b]) * freq;
      out[b * dim + k] = static_cast<float>(std::cos(arg));
      out[b * dim + half + k] = static_cast<float>(std::sin(arg));
    }
  }
  return Tensor::from({t.size(), dim}, std::move(out));
}

Tensor conditioning(const Model& model, std::span<const float> t, std::span<const std::size_t> y) {
  const auto& e = model.embeddings();
  const Tensor temb = e.time2.forward(silu(e.time1.forward(timestep_features(t, model.config().time_embed_dim))));
  return add(temb, gather_rows(e.class_pool, std::vector<std::size_t>(y.begin(), y.end())));
}

Tensor patchify(const ModelConfig& c, const Tensor& x) {
  const std::size_t b = x.dim(0), p = c.patch_side(), g = c.image_side() / p;
  const Tensor grid = permute(reshape(x, {b, g, p, g, p}), {0, 1, 3, 2, 4});
  return reshape(grid, {b * c.n_img_tokens, c.patch_dim});
}

Tensor unpatchify(const ModelConfig& c, const Tensor& patches, std::size_t batch) {
  const std::size_t p = c.patch_side(), g = c.image_side() / p;
  const Tensor grid = permute(reshape(patches, {batch, g, g, p, p}), {0, 1, 3, 2, 4});
  return reshape(grid, {batch, c.sample_dim()});
}

Tensor embed_image(const Model& model, const Tensor& x_t) {
  const auto& c = model.config();
  const std::size_t b = x_t.dim(0);
  const Tensor tokens = model.embeddings().patch.forward(patchify(c, x_t));
  const Tensor with_pos = add(reshape(tokens, {b, c.n_img_tokens, c.d_model}), model.embeddings().pos);
  return reshape(with_pos, {b * c.n_img_tokens, c.d_model});
}

Tensor embed_context(const Model& model, std::span<const std::size_t> y) {
  const auto& c = model.config();
  const Tensor rows = gather_rows(model.embeddings().class_ctx, std::vector<std::size_t>(y.begin(), y.end()));
  return reshape(rows, {y.size() * c.n_ctx_tokens, c.d_model});
}

namespace {

// LN(x) * (1 + scale) + shift with per-sample modulation repeated over tokens.
Tensor modulate(const Tensor& x, const Tensor& mod, std::size_t chunk, std::size_t d, std::size_t tokens) {
  const Tensor shift = repeat_rows(slice(mod, 1, 2 * chunk * d, d), tokens);
  const Tensor scl = repeat_rows(slice(mod, 1, (2 * chunk + 1) * d, d), tokens);
  const Tensor n = layer_norm(x);
  return add(add(n, mul(n, scl)), shift);
}

Tensor to_heads(const Tensor& img, const Tensor& ctx, const ModelConfig& c, std::size_t b) {
  const std::size_t d = c.d_model, T = c.n_img_tokens + c.n_ctx_tokens;
  const Tensor joint =
      concat({reshape(img, {b, c.n_img_tokens, d}), reshape(ctx, {b, c.n_ctx_tokens, d})}, 1);
  const Tensor split = permute(reshape(joint, {b, T, c.num_heads, c.head_dim()}), {0, 2, 1, 3});
  return reshape(split, {b * c.num_heads, T, c.head_dim()});
}

std::pair<Tensor, Tensor> joint_attention(const AttentionParams& a, const Tensor& h_img, const Tensor& h_ctx,
                                          const ModelConfig& c, std::size_t b) {
  const std::size_t d = c.d_model, T = c.n_img_tokens + c.n_ctx_tokens;
  const Tensor qkv_i = a.qkv_img.forward(h_img);
  const Tensor qkv_c = a.qkv_ctx.forward(h_ctx);
  const Tensor q = to_heads(slice(qkv_i, 1, 0, d), slice(qkv_c, 1, 0, d), c, b);
  const Tensor k = to_heads(slice(qkv_i, 1, d, d), slice(qkv_c, 1, d, d), c, b);
  const Tensor v = to_heads(slice(qkv_i, 1, 2 * d, d), slice(qkv_c, 1, 2 * d, d), c, b);
  const Tensor att = softmax(scale(matmul(q, k, true), 1.0f / std::sqrt(static_cast<float>(c.head_dim()))));
  const Tensor o = matmul(att, v);
  const Tensor merged = reshape(permute(reshape(o, {b, c.num_heads, T, c.head_dim()}), {0, 2, 1, 3}), {b, T, d});
  const Tensor o_img = reshape(slice(merged, 1, 0, c.n_img_tokens), {b * c.n_img_tokens, d});
  const Tensor o_ctx = reshape(slice(merged, 1, c.n_img_tokens, c.n_ctx_tokens), {b * c.n_ctx_tokens, d});
  return {a.out_img.forward(o_img), a.out_ctx.forward(o_ctx)};
}

Tensor mlp_forward(const MlpParams& m, const Tensor& x) { return m.fc2.forward(gelu(m.fc1.forward(x))); }

struct Bypass {
  bool whole = false;
  std::array<bool, 5> removed{};
  bool off(Subcomponent s) const { return whole || removed[static_cast<std::size_t>(s)]; }
};

void run_block(const Block& blk, const Bypass& bypass, const ModelConfig& c, std::size_t b, const Tensor& cond_act,
               Tensor& img, Tensor& ctx) {
  if (bypass.whole) return;
  const std::size_t d = c.d_model;
  const bool norm = blk.norm_mod && !bypass.off(Subcomponent::Norm);
  const bool ctx_norm = blk.ctx_norm_mod && !bypass.off(Subcomponent::ContextNorm);
  const Tensor mod_img = norm ? blk.norm_mod->forward(cond_act) : Tensor();
  const Tensor mod_ctx = ctx_norm ? blk.ctx_norm_mod->forward(cond_act) : Tensor();

  if (blk.attn && !bypass.off(Subcomponent::Attention)) {
    const Tensor h_img = norm ? modulate(img, mod_img, 0, d, c.n_img_tokens) : img;
    const Tensor h_ctx = ctx_norm ? modulate(ctx, mod_ctx, 0, d, c.n_ctx_tokens) : ctx;
    auto [o_img, o_ctx] = joint_attention(*blk.attn, h_img, h_ctx, c, b);
    img = add(img, o_img);
    ctx = add(ctx, o_ctx);
  }
  if (blk.mlp && !bypass.off(Subcomponent::Mlp)) {
    const Tensor h = norm ? modulate(img, mod_img, 1, d, c.n_img_tokens) : img;
    img = add(img, mlp_forward(*blk.mlp, h));
  }
  if (blk.ctx_mlp && !bypass.off(Subcomponent::ContextMlp)) {
    const Tensor h = ctx_norm ? modulate(ctx, mod_ctx, 1, d, c.n_ctx_tokens) : ctx;
    ctx = add(ctx, mlp_forward(*blk.ctx_mlp, h));
  }
}

}  // namespace

Tensor apply_head(const Model& model, const Tensor& image_stream, const Tensor& cond_act) {
  const auto& c = model.config();
  const std::size_t b = cond_act.dim(0);
  const Tensor mod = model.head().mod.forward(cond_act);
  const Tensor h = modulate(image_stream, mod, 0, c.d_model, c.n_img_tokens);
  return unpatchify(c, model.head().out.forward(h), b);
}

ForwardOutput forward(const Model& model, const ForwardInput& input, std::span<const AblationSpec> ablations,
                      bool capture_features) {
  const auto& c = model.config();
  const std::size_t b = input.batch();
  if (b == 0) throw ContractError("forward: empty batch");
  if (input.t.size() != b) throw ContractError("forward: need one time per sample");
  if (input.x_t.shape() != Shape{b, c.sample_dim()})
    throw DimensionError("forward: x_t must be " + shape_str({b, c.sample_dim()}) + ", got " +
                         shape_str(input.x_t.shape()));
  for (float t : input.t)
    if (!(t >= 0.0f && t <= 1.0f)) throw ContractError("forward: time " + std::to_string(t) + " outside [0, 1]");
  for (auto y : input.y)
    if (y >= c.num_classes) throw ContractError("forward: class id " + std::to_string(y) + " out of range");

  std::vector<Bypass> bypass(model.num_blocks());
  for (const auto& a : ablations) {
    if (a.block_index >= model.num_blocks())
      throw ContractError("forward: ablation block index " + std::to_string(a.block_index) + " out of range");
    auto& bp = bypass[a.block_index];
    if (a.removed.is_whole_block()) bp.whole = true;
    for (auto s : kSubcomponents)
      if (a.removed.removes(s)) bp.removed[static_cast<std::size_t>(s)] = true;
  }

  const Tensor cond_act = silu(conditioning(model, input.t, input.y));
  Tensor img = embed_image(model, input.x_t);
  Tensor ctx = embed_context(model, input.y);
  ForwardOutput out;
  if (capture_features) out.embedded = img;
  for (std::size_t i = 0; i < model.num_blocks(); ++i) {
    run_block(model.blocks()[i], bypass[i], c, b, cond_act, img, ctx);
    if (capture_features) out.block_features.push_back(img);
  }
  out.velocity = apply_head(model, img, cond_act);
  return out;
}

// ------------------------------------------------------------------- flow

FlowBatch make_flow_batch(const Tensor& x0, std::vector<std::size_t> y, Rng& rng) {
  const std::size_t b = y.size();
  if (b == 0) throw ContractError("flow batch: empty batch");
  if (x0.rank() != 2 || x0.dim(0) != b) throw DimensionError("flow batch: x0 must be [B, sample_dim]");
  const std::size_t n = x0.dim(1);
  FlowBatch fb;
  fb.input.t.resize(b);
  for (auto& t : fb.input.t) t = rng.uniform();
  std::vector<float> eps(b * n), xt(b * n), target(b * n);
  for (auto& e : eps) e = rng.normal();
  const auto x = x0.data();
  for (std::size_t i = 0; i < b; ++i) {
    const float t = fb.input.t[i];
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      xt[k] = (1.0f - t) * x[k] + t * eps[k];
      target[k] = eps[k] - x[k];
    }
  }
  fb.x0 = x0;
  fb.noise = Tensor::from({b, n}, std::move(eps));
  fb.input.x_t = Tensor::from({b, n}, std::move(xt));
  fb.target = Tensor::from({b, n}, std::move(target));
  fb.input.y = std::move(y);
  return fb;
}

Tensor flow_loss(const Model& model, const FlowBatch& batch) {
  const auto out = forward(model, batch.input);
  return squared_error(out.velocity, batch.target, batch.input.batch());
}

Tensor flow_loss(const Model& model, const Tensor& x0, std::vector<std::size_t> y, std::uint64_t seed) {
  Rng rng(seed);
  return flow_loss(model, make_flow_batch(x0, std::move(y), rng));
}

std::vector<float> sample_noise(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> eps(dim);
  for (auto& e : eps) e = rng.normal();
  return eps;
}

Tensor sample_batch(const Model& model, std::span<const std::size_t> ys, std::span<const std::uint64_t> seeds,
                    std::size_t steps, std::span<const AblationSpec> ablations) {
  if (steps == 0) throw ContractError("sample: steps must be at least 1");
  if (ys.size() != seeds.size() || ys.empty()) throw ContractError("sample: need one seed per class id");
  const std::size_t n = model.config().sample_dim(), b = ys.size();
  std::vector<float> x;
  x.reserve(b * n);
  for (auto s : seeds) {
    const auto eps = sample_noise(n, s);
    x.insert(x.end(), eps.begin(), eps.end());
  }
  ForwardInput in;
  in.y.assign(ys.begin(), ys.end());
  const float dt = 1.0f / static_cast<float>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const float t = 1.0f - static_cast<float>(k) * dt;
    in.t.assign(b, t);
    in.x_t = Tensor::from({b, n}, x);
    const Tensor vel = forward(model, in, ablations).velocity;
    const auto v = vel.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] -= dt * v[i];
      if (!std::isfinite(x[i]))
        throw EvaluationError("sample: non-finite value for seed " + std::to_string(seeds[i / n]));
    }
  }
  return Tensor::from({b, n}, std::move(x));
}

Tensor sample(const Model& model, std::size_t y, std::size_t steps, std::uint64_t seed,
              std::span<const AblationSpec> ablations) {
  const std::array<std::size_t, 1> ys{y};
  const std::array<std::uint64_t, 1> seeds{seed};
  const Tensor s = sample_batch(model, ys, seeds, steps, ablations);
  return reshape(s, {model.config().sample_dim()});
}

// ------------------------------------------------------------- accounting

std::size_t BlockCensus::total() const {
  std::size_t n = 0;
  for (auto v : per_subcomponent) n += v;
  return n;
}

ParamCensus census(const Model& model) {
  ParamCensus c;
  for (std::size_t p = 0; p < model.num_blocks(); ++p) {
    BlockCensus bc;
    bc.teacher_index = model.teacher_indices()[p];
    for (auto s : kSubcomponents) bc.per_subcomponent[static_cast<std::size_t>(s)] = model.blocks()[p].param_count(s);
    c.transformer_total += bc.total();
    c.blocks.push_back(bc);
  }
  return c;
}

std::uint64_t forward_macs(const Model& model) {
  const auto& c = model.config();
  const std::uint64_t d = c.d_model, ni = c.n_img_tokens, nc = c.n_ctx_tokens, T = ni + nc, h = c.mlp_hidden();
  std::uint64_t macs = ni * c.patch_dim * d + c.time_embed_dim * d + d * d;
  for (const auto& b : model.blocks()) {
    if (b.norm_mod) macs += d * 4 * d;
    if (b.ctx_norm_mod) macs += d * 4 * d;
    if (b.attn) macs += (ni + nc) * d * 3 * d + 2 * T * T * d + (ni + nc) * d * d;
    if (b.mlp) macs += ni * 2 * d * h;
    if (b.ctx_mlp) macs += nc * 2 * d * h;
  }
  macs += d * 2 * d + ni * d * c.patch_dim;
  return macs;
}

// --------------------------------------------------------------- training

double sgd_step(std::span<const ParamRef> params, const SgdConfig& cfg) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg.clip_norm > 0.0f && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  const double lr = static_cast<double>(cfg.learning_rate) * clip;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(w[i] - lr * g[i]);
    t.zero_grad();
  }
  return norm;
}

std::vector<TrainLogRow> train_flow(Model& model, const Tensor& samples, std::span<const std::size_t> labels,
                                    const TrainConfig& cfg) {
  const std::size_t n = labels.size(), dim = model.config().sample_dim();
  if (n == 0 || samples.shape() != Shape{n, dim}) throw ContractError("train_flow: samples must be [N, sample_dim]");
  Rng rng(cfg.seed);
  const auto params = model.parameters();
  std::vector<TrainLogRow> log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<float> x0;
    std::vector<std::size_t> y;
    x0.reserve(cfg.batch_size * dim);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t k = rng.index(n);
      const auto row = samples.data().subspan(k * dim, dim);
      x0.insert(x0.end(), row.begin(), row.end());
      y.push_back(labels[k]);
    }
    const FlowBatch fb = make_flow_batch(Tensor::from({cfg.batch_size, dim}, std::move(x0)), std::move(y), rng);
    double loss = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      const Tensor l = flow_loss(model, fb);
      loss = l.item();
      if (!std::isfinite(loss)) throw DivergenceError("train_flow: non-finite loss", step);
      tape.backward(l);
    }
    const double gn = sgd_step(params, cfg.sgd);
    log.push_back({step, loss, gn});
  }
  return log;
}

}  // namespace hprune
