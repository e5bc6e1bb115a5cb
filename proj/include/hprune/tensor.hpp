#pragma once

// Dense float tensors with tape-based reverse-mode differentiation.
//
// Tensors are immutable once created. Operations executed while a Tape is
// active on the current thread (see TapeScope) are recorded whenever one of
// their inputs requires a gradient; Tape::backward then walks the records in
// reverse and accumulates gradients into every tensor that requires one.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hprune {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl;
struct TensorAccess;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  // Leaf constructors. Non-finite values are rejected.
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const;
  std::size_t numel() const;
  std::span<const float> data() const;
  float item() const;

  bool requires_grad() const;
  // Only valid on leaves; a frozen leaf never receives a gradient.
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  // Copy of the values as a fresh leaf without gradient.
  Tensor detach() const;

  // In-place update of a leaf's values. Reserved for optimizers running
  // between tapes; throws if the tensor was produced by a recorded op.
  std::span<float> mutable_data();

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  friend struct detail::TensorAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

enum class OpKind {
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Reshape,
  Permute,
  Concat,
  Slice,
  GatherRows,
  RepeatRows,
  Softmax,
  LogSoftmax,
  LayerNorm,
  Gelu,
  Silu,
  Sum,
  Mean,
};

std::string_view op_name(OpKind kind);
// Throws UnsupportedOpError for unknown names.
OpKind parse_op_kind(std::string_view name);
const std::vector<OpKind>& all_op_kinds();

struct OpAttrs {
  int axis = -1;                      // Concat, Slice
  float scalar = 1.0f;                // Scale
  bool transpose_b = false;           // MatMul: a @ b^T
  Shape shape;                        // Reshape
  std::vector<std::size_t> perm;      // Permute
  std::size_t start = 0;              // Slice
  std::size_t length = 0;             // Slice
  std::size_t repeats = 1;            // RepeatRows
  std::vector<std::size_t> indices;   // GatherRows
  float eps = 1e-5f;                  // LayerNorm
};

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// Convenience wrappers over apply().
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::vector<std::size_t> perm);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor gather_rows(const Tensor& table, std::vector<std::size_t> indices);
Tensor repeat_rows(const Tensor& a, std::size_t repeats);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Sum of squared differences divided by `rows`.
Tensor squared_error(const Tensor& a, const Tensor& b, std::size_t rows);

struct TapeRecord {
  OpKind kind;
  OpAttrs attrs;
  std::vector<Tensor> inputs;
  Tensor output;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<TapeRecord>& records() const noexcept { return records_; }

  // Accumulates d(loss)/d(x) into every recorded tensor that requires a
  // gradient, then consumes the tape.
  void backward(const Tensor& loss);
  void clear();

  // Number of records visited by the last backward pass.
  std::size_t last_visit_count() const noexcept { return last_visits_; }

 private:
  friend struct detail::TensorAccess;
  void record(TapeRecord rec);

  std::vector<TapeRecord> records_;
  std::size_t last_visits_ = 0;
};

// Makes `tape` the active tape of the calling thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope();

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

// Backward on the active tape.
void backward(const Tensor& loss);

// Checked mode: when enabled on the calling thread, every op output is
// verified finite as well (leaves are always checked).
void set_checked_outputs(bool enabled) noexcept;

// Per-thread count of multiply-accumulates executed by MatMul forwards.
std::uint64_t& matmul_mac_counter() noexcept;

struct GradCheckReport {
  // Per input: max relative error, or nullopt for inputs without gradient.
  std::vector<std::optional<double>> max_rel_error;
  bool pass = false;
};

// Compares analytic gradients of sum(w ⊙ apply(kind, inputs)) for a fixed
// random weighting w against central differences. Inputs whose
// requires_grad flag is false are treated as frozen.
GradCheckReport grad_check(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs,
                           float step, double tol);

}  // namespace hprune
