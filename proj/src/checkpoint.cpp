#include "hprune/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "hprune/errors.hpp"

namespace hprune {

namespace {

constexpr char kMagic[4] = {'H', 'P', 'R', 'N'};
constexpr std::size_t kFixedHeader = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t at, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> v) {
  for (float f : v) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(std::span<const std::uint8_t> b, std::size_t at, std::size_t n) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(b, at + 4 * i, 4)));
  return v;
}

std::size_t f32_bytes(const Shape& s) { return 4 * shape_numel(s); }

std::size_t q4_bytes(const Shape& s, std::size_t g) {
  const std::size_t n = shape_numel(s), groups = (n + g - 1) / g;
  return (n + 1) / 2 + 5 * groups;
}

// Returns the group size of a "q4g<g>" tag, or 0 for f32.
std::size_t parse_dtype(const std::string& tag) {
  if (tag == "f32") return 0;
  std::size_t g = 0;
  if (tag.rfind("q4g", 0) == 0) {
    const auto* first = tag.data() + 3;
    const auto* last = tag.data() + tag.size();
    const auto [p, ec] = std::from_chars(first, last, g);
    if (ec == std::errc() && p == last && g >= 2) return g;
  }
  throw ContractError("unknown dtype '" + tag + "'");
}

Tensor copy_of(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<float>(t.data().begin(), t.data().end()), true);
}

}  // namespace

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

Tensor Checkpoint::tensor(std::string_view name) const {
  const auto* e = find(name);
  if (!e) throw ContractError("checkpoint: no tensor named '" + std::string(name) + "'");
  return e->quantized ? dequantize(e->q4) : e->f32;
}

std::string dtype_name(const CheckpointEntry& e) {
  return e.quantized ? "q4g" + std::to_string(e.q4.group_size) : "f32";
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::set<std::string> names;
  std::vector<std::uint8_t> payload;
  auto dir = nlohmann::ordered_json::array();
  for (const auto& e : ckpt.tensors) {
    if (!names.insert(e.name).second) throw ContractError("checkpoint: duplicate tensor name '" + e.name + "'");
    const std::size_t offset = payload.size();
    Shape shape;
    if (e.quantized) {
      const auto& q = e.q4;
      if (q.packed.size() != (q.numel() + 1) / 2 || q.scales.size() != q.num_groups() ||
          q.zero_points.size() != q.num_groups())
        throw ContractError("checkpoint: malformed q4 tensor '" + e.name + "'");
      shape = q.shape;
      payload.insert(payload.end(), q.packed.begin(), q.packed.end());
      put_floats(payload, q.scales);
      payload.insert(payload.end(), q.zero_points.begin(), q.zero_points.end());
    } else {
      if (!e.f32.defined()) throw ContractError("checkpoint: tensor '" + e.name + "' is undefined");
      shape = e.f32.shape();
      put_floats(payload, e.f32.data());
    }
    nlohmann::ordered_json d;
    d["name"] = e.name;
    d["dtype"] = dtype_name(e);
    d["shape"] = shape;
    d["offset"] = offset;
    d["length"] = payload.size() - offset;
    dir.push_back(std::move(d));
  }
  nlohmann::ordered_json header;
  header["meta"] = ckpt.meta;
  header["tensors"] = std::move(dir);
  const std::string json = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kFixedHeader + json.size() + payload.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, json.size());
  out.insert(out.end(), json.begin(), json.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

CheckpointLayout checkpoint_layout(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFixedHeader) throw FormatError("checkpoint: truncated header", bytes.size());
  const std::uint64_t len = get_le(bytes, 8, 8);
  if (len > bytes.size() - kFixedHeader) throw FormatError("checkpoint: metadata length exceeds file", 8);
  return {kFixedHeader + len, bytes.size() - kFixedHeader - len};
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("checkpoint: truncated magic", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic", 0);
  if (bytes.size() < 8) throw FormatError("checkpoint: truncated version", bytes.size());
  const auto version = get_le(bytes, 4, 4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto layout = checkpoint_layout(bytes);
  const std::size_t base = layout.header_bytes;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kFixedHeader, bytes.begin() + static_cast<std::ptrdiff_t>(base));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: bad metadata json: ") + e.what(),
                      kFixedHeader + (e.byte > 0 ? e.byte - 1 : 0));
  }

  Checkpoint ckpt;
  struct Span {
    std::uint64_t offset, length;
  };
  std::vector<Span> spans;
  try {
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array())
      throw FormatError("checkpoint: metadata lacks a tensor directory", kFixedHeader);
    ckpt.meta = header.value("meta", nlohmann::ordered_json::object());
    std::set<std::string> names;
    for (const auto& d : header["tensors"]) {
      CheckpointEntry e;
      e.name = d.at("name").get<std::string>();
      if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor '" + e.name + "'", kFixedHeader);
      const Shape shape = d.at("shape").get<Shape>();
      const auto off = d.at("offset").get<std::uint64_t>();
      const auto len = d.at("length").get<std::uint64_t>();
      std::size_t g = 0;
      try {
        g = parse_dtype(d.at("dtype").get<std::string>());
      } catch (const ContractError& err) {
        throw FormatError(std::string("checkpoint: ") + err.what(), kFixedHeader);
      }
      const std::size_t expect = g ? q4_bytes(shape, g) : f32_bytes(shape);
      if (len != expect)
        throw FormatError("checkpoint: tensor '" + e.name + "' has length " + std::to_string(len) + ", expected " +
                              std::to_string(expect),
                          base + off);
      if (off > layout.payload_bytes || len > layout.payload_bytes - off)
        throw FormatError("checkpoint: tensor '" + e.name + "' extends past the payload", base + std::min<std::uint64_t>(off, layout.payload_bytes));
      const std::size_t at = base + off;
      if (g) {
        e.quantized = true;
        auto& q = e.q4;
        q.shape = shape;
        q.group_size = g;
        const std::size_t nb = (q.numel() + 1) / 2, groups = q.num_groups();
        q.packed.assign(bytes.begin() + at, bytes.begin() + at + nb);
        q.scales = get_floats(bytes, at + nb, groups);
        q.zero_points.assign(bytes.begin() + at + nb + 4 * groups, bytes.begin() + at + nb + 5 * groups);
      } else {
        auto v = get_floats(bytes, at, shape_numel(shape));
        for (std::size_t i = 0; i < v.size(); ++i)
          if (!std::isfinite(v[i])) throw FormatError("checkpoint: non-finite value in '" + e.name + "'", at + 4 * i);
        e.f32 = Tensor::from(shape, std::move(v));
      }
      spans.push_back({off, len});
      ckpt.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed tensor directory: ") + e.what(), kFixedHeader);
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.offset < b.offset; });
  std::uint64_t end = 0;
  for (const auto& s : spans) {
    if (s.offset < end) throw FormatError("checkpoint: overlapping tensors", base + s.offset);
    end = s.offset + s.length;
  }
  if (end != layout.payload_bytes) throw FormatError("checkpoint: unreferenced trailing payload", base + end);
  return ckpt;
}

std::uint64_t save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write to " + path.string() + " failed");
  return bytes.size();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("checkpoint: cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"num_blocks", c.num_blocks},     {"d_model", c.d_model},
          {"num_heads", c.num_heads},       {"n_img_tokens", c.n_img_tokens},
          {"n_ctx_tokens", c.n_ctx_tokens}, {"patch_dim", c.patch_dim},
          {"num_classes", c.num_classes},   {"time_embed_dim", c.time_embed_dim},
          {"mlp_ratio", c.mlp_ratio}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (!j.is_object()) throw ConfigError("model config must be an object");
    for (const auto& [k, v] : j.items()) {
      const std::size_t n = v.get<std::size_t>();
      if (k == "num_blocks") c.num_blocks = n;
      else if (k == "d_model") c.d_model = n;
      else if (k == "num_heads") c.num_heads = n;
      else if (k == "n_img_tokens") c.n_img_tokens = n;
      else if (k == "n_ctx_tokens") c.n_ctx_tokens = n;
      else if (k == "patch_dim") c.patch_dim = n;
      else if (k == "num_classes") c.num_classes = n;
      else if (k == "time_embed_dim") c.time_embed_dim = n;
      else if (k == "mlp_ratio") c.mlp_ratio = n;
      else throw ConfigError("model config: unknown field '" + k + "'");
    }
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

Checkpoint model_checkpoint(const Model& model, const std::map<std::string, QTensor>* quantized, bool blocks_only) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = blocks_only ? "transformer_blocks" : "model";
  ckpt.meta["config"] = config_to_json(model.config());
  ckpt.meta["teacher_indices"] = model.teacher_indices();
  for (const auto& p : model.parameters()) {
    if (blocks_only && p.group != ParamGroup::Block) continue;
    CheckpointEntry e;
    e.name = p.name;
    const auto it = quantized ? quantized->find(p.name) : decltype(quantized->end()){};
    if (quantized && it != quantized->end()) {
      e.quantized = true;
      e.q4 = it->second;
    } else {
      e.f32 = p.tensor.detach();
    }
    ckpt.tensors.push_back(std::move(e));
  }
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  try {
    if (ckpt.meta.value("kind", "") != "model") throw FormatError("checkpoint: not a model checkpoint", 0);
    const ModelConfig cfg = config_from_json(ckpt.meta.at("config"));
    const auto indices = ckpt.meta.at("teacher_indices").get<std::vector<std::size_t>>();
    std::set<std::string> used;
    auto get = [&](const std::string& name) {
      used.insert(name);
      return copy_of(ckpt.tensor(name));
    };
    auto has = [&](const std::string& name) { return ckpt.find(name + ".weight") != nullptr; };
    auto linear = [&](const std::string& name) { return Linear{get(name + ".weight"), get(name + ".bias")}; };

    Embeddings embed{linear("embed.patch"), get("embed.pos"),       linear("embed.time1"),
                     linear("embed.time2"), get("embed.class_ctx"), get("embed.class_pool")};
    std::vector<Block> blocks;
    for (auto t : indices) {
      const std::string prefix = "blocks." + std::to_string(t);
      Block b;
      if (has(prefix + ".norm_mod")) b.norm_mod = linear(prefix + ".norm_mod");
      if (has(prefix + ".ctx_norm_mod")) b.ctx_norm_mod = linear(prefix + ".ctx_norm_mod");
      if (has(prefix + ".attn.qkv_img"))
        b.attn = AttentionParams{linear(prefix + ".attn.qkv_img"), linear(prefix + ".attn.qkv_ctx"),
                                 linear(prefix + ".attn.out_img"), linear(prefix + ".attn.out_ctx")};
      if (has(prefix + ".mlp.fc1")) b.mlp = MlpParams{linear(prefix + ".mlp.fc1"), linear(prefix + ".mlp.fc2")};
      if (has(prefix + ".ctx_mlp.fc1"))
        b.ctx_mlp = MlpParams{linear(prefix + ".ctx_mlp.fc1"), linear(prefix + ".ctx_mlp.fc2")};
      blocks.push_back(std::move(b));
    }
    Head head{linear("head.mod"), linear("head.out")};
    for (const auto& e : ckpt.tensors)
      if (!used.count(e.name)) throw FormatError("checkpoint: unexpected tensor '" + e.name + "'", 0);
    Model m = Model::assemble(cfg, std::move(embed), std::move(blocks), indices, std::move(head));
    ModelConfig one = cfg;
    one.num_blocks = 1;
    std::map<std::string, Shape> expect;
    for (const auto& p : Model::init(one, 0).parameters()) expect[p.name] = p.tensor.shape();
    for (const auto& p : m.parameters()) {
      std::string key = p.name;
      if (p.group == ParamGroup::Block) key = "blocks.0" + key.substr(key.find('.', 7));
      if (expect.at(key) != p.tensor.shape())
        throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(p.tensor.shape()), 0);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), 0);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), 0);
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), 0);
  }
}

QuantizedModel quantized_from_checkpoint(const Checkpoint& ckpt) {
  QuantizedModel qm;
  qm.model = model_from_checkpoint(ckpt);
  for (const auto& e : ckpt.tensors)
    if (e.quantized) {
      qm.group_size = e.q4.group_size;
      qm.tensors.emplace(e.name, e.q4);
    }
  return qm;
}

Checkpoint probe_checkpoint(const Probe& probe) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "probe";
  for (const auto& p : probe.parameters()) ckpt.tensors.push_back({p.name, false, p.tensor.detach(), {}});
  return ckpt;
}

Probe probe_from_checkpoint(const Checkpoint& ckpt) {
  try {
    if (ckpt.meta.value("kind", "") != "probe") throw FormatError("checkpoint: not a probe checkpoint", 0);
    auto frozen = [&](const std::string& n) { return ckpt.tensor(n).detach(); };
    return Probe::assemble(Linear{frozen("probe.l1.weight"), frozen("probe.l1.bias")},
                           Linear{frozen("probe.l2.weight"), frozen("probe.l2.bias")});
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), 0);
  }
}

}  // namespace hprune
