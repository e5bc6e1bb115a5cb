#include "hprune/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hprune/errors.hpp"
#include "hprune/rng.hpp"

namespace hprune {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until a gradient is accumulated
  const Tape* tape = nullptr;  // set for tensors produced by a recorded op
};

struct TensorAccess {
  static TensorImpl& impl(const Tensor& t) { return *t.impl_; }
  static Tensor make(Shape shape, std::vector<float> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }
  static void record(Tape& tape, TapeRecord rec) { tape.record(std::move(rec)); }
};

}  // namespace detail

using detail::TensorAccess;
using detail::TensorImpl;

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_mac_counter = 0;

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapF = Eigen::Map<const RowMatF>;
using MapF = Eigen::Map<RowMatF>;

TensorImpl& impl_of(const Tensor& t) { return TensorAccess::impl(t); }

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined input tensor");
}

[[noreturn]] void dim_error(std::string_view op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

std::string shapes_str(std::span<const Tensor> inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) s += " and ";
    s += shape_str(inputs[i].shape());
  }
  return s;
}

void check_finite(std::span<const float> values, std::string_view what) {
  for (float v : values) {
    if (!std::isfinite(v)) throw ContractError(std::string(what) + ": non-finite value");
  }
}

std::vector<float>& grad_buffer(const Tensor& t) {
  auto& impl = impl_of(t);
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0f);
  return impl.grad;
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) dim_error(op, "axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

// Elementwise broadcasting: the smaller operand, with leading singleton axes
// stripped, must equal the trailing axes of the larger one.
struct Broadcast {
  Shape out_shape;
  std::size_t na = 0;
  std::size_t nb = 0;
};

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, std::string_view op) {
  Broadcast bc;
  bc.na = a.numel();
  bc.nb = b.numel();
  if (a.shape() == b.shape()) {
    bc.out_shape = a.shape();
    return bc;
  }
  if (bc.nb <= bc.na && is_suffix(strip_leading_ones(b.shape()), a.shape())) {
    bc.out_shape = a.shape();
    return bc;
  }
  if (bc.na <= bc.nb && is_suffix(strip_leading_ones(a.shape()), b.shape())) {
    bc.out_shape = b.shape();
    return bc;
  }
  dim_error(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " are not broadcastable");
}

// Accumulates a (possibly broadcast) gradient into `target` of length n.
void accumulate_reduced(std::vector<float>& target, std::span<const double> values) {
  const std::size_t n = target.size();
  if (values.size() == n) {
    for (std::size_t i = 0; i < n; ++i) target[i] += static_cast<float>(values[i]);
    return;
  }
  std::vector<double> acc(n, 0.0);
  for (std::size_t k = 0; k < values.size(); ++k) acc[k % n] += values[k];
  for (std::size_t i = 0; i < n; ++i) target[i] += static_cast<float>(acc[i]);
}

struct MatMulDims {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  Shape out_shape;
};

MatMulDims matmul_dims(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto fail = [&] {
    dim_error("matmul", "shapes " + shape_str(sa) + " and " + shape_str(sb) + (transpose_b ? " (b transposed)" : "") +
                            " are incompatible");
  };
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3)) fail();
  MatMulDims d;
  const std::size_t off = sa.size() - 2;
  if (off == 1) {
    if (sa[0] != sb[0]) fail();
    d.batch = sa[0];
  }
  d.m = sa[off];
  d.k = sa[off + 1];
  const std::size_t bk = transpose_b ? sb[off + 1] : sb[off];
  d.n = transpose_b ? sb[off] : sb[off + 1];
  if (bk != d.k) fail();
  if (off == 1) d.out_shape = {d.batch, d.m, d.n};
  else d.out_shape = {d.m, d.n};
  return d;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Maps every output linear index of a permutation to its input index.
std::vector<std::size_t> permute_index_map(const Shape& in_shape, const std::vector<std::size_t>& perm) {
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = strides_of(in_shape);
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t i = rank; i-- > 0;) {
      const std::size_t stride = in_strides[perm[i]];
      if (++idx[i] < out_shape[i]) {
        src += stride;
        break;
      }
      src -= (out_shape[i] - 1) * stride;
      idx[i] = 0;
    }
  }
  return map;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_tanh(double x) {
  const float u = static_cast<float>(kGeluC * (x + 0.044715 * x * x * x));
  if (u > 10.0f) return 1.0;
  if (u < -10.0f) return -1.0;
  return 1.0 - 2.0 / (static_cast<double>(std::exp(2.0f * u)) + 1.0);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + gelu_tanh(x)); }

double gelu_deriv(double x) {
  const double th = gelu_tanh(x);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(static_cast<float>(-x))); }

// ---------------------------------------------------------------- forward

Tensor make_output(Shape shape, std::vector<float> data) { return TensorAccess::make(std::move(shape), std::move(data)); }

std::size_t expect_inputs(std::span<const Tensor> inputs, std::size_t n, std::string_view op) {
  if (inputs.size() != n)
    throw ContractError(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                        std::to_string(inputs.size()));
  return n;
}

Tensor forward_elementwise(OpKind kind, std::span<const Tensor> in) {
  const auto name = op_name(kind);
  expect_inputs(in, 2, name);
  const auto bc = broadcast_shapes(in[0], in[1], name);
  const auto a = in[0].data();
  const auto b = in[1].data();
  const std::size_t n = shape_numel(bc.out_shape);
  std::vector<float> out(n);
  const std::size_t inner = std::min(bc.na, bc.nb);
  for (std::size_t base = 0; base < n; base += inner) {
    const float* x = a.data() + (bc.na == n ? base : 0);
    const float* y = b.data() + (bc.nb == n ? base : 0);
    float* o = out.data() + base;
    switch (kind) {
      case OpKind::Add: for (std::size_t k = 0; k < inner; ++k) o[k] = x[k] + y[k]; break;
      case OpKind::Sub: for (std::size_t k = 0; k < inner; ++k) o[k] = x[k] - y[k]; break;
      default: for (std::size_t k = 0; k < inner; ++k) o[k] = x[k] * y[k]; break;
    }
  }
  return make_output(bc.out_shape, std::move(out));
}

Tensor forward_matmul(std::span<const Tensor> in, const OpAttrs& attrs) {
  expect_inputs(in, 2, "matmul");
  const auto d = matmul_dims(in[0], in[1], attrs.transpose_b);
  std::vector<float> out(d.batch * d.m * d.n);
  const float* pa = in[0].data().data();
  const float* pb = in[1].data().data();
  thread_local RowMatD A, B, C;
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    A = ConstMapF(pa + bi * d.m * d.k, d.m, d.k).cast<double>();
    if (attrs.transpose_b) {
      B = ConstMapF(pb + bi * d.n * d.k, d.n, d.k).cast<double>();
      C.noalias() = A * B.transpose();
    } else {
      B = ConstMapF(pb + bi * d.k * d.n, d.k, d.n).cast<double>();
      C.noalias() = A * B;
    }
    MapF(out.data() + bi * d.m * d.n, d.m, d.n) = C.cast<float>();
  }
  g_mac_counter += d.batch * d.m * d.k * d.n;
  return make_output(d.out_shape, std::move(out));
}

Tensor forward_rowwise(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
  const auto name = op_name(kind);
  if (kind == OpKind::LayerNorm) {
    if (in.size() != 1 && in.size() != 3) throw ContractError("layer_norm: expected 1 or 3 inputs");
  } else {
    expect_inputs(in, 1, name);
  }
  const auto& x = in[0];
  if (x.rank() == 0) dim_error(name, "scalar input");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  if (kind == OpKind::LayerNorm && in.size() == 3) {
    if (in[1].numel() != d || in[2].numel() != d)
      dim_error(name, "gamma/beta must have " + std::to_string(d) + " elements, got " + shapes_str(in));
  }
  const auto xs = x.data();
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xs.data() + r * d;
    float* o = out.data() + r * d;
    if (kind == OpKind::LayerNorm) {
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(attrs.eps));
      for (std::size_t j = 0; j < d; ++j) {
        double v = (row[j] - mu) * inv;
        if (in.size() == 3) v = v * in[1].data()[j] + in[2].data()[j];
        o[j] = static_cast<float>(v);
      }
    } else {
      double mx = row[0];
      for (std::size_t j = 1; j < d; ++j) mx = std::max<double>(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += std::exp(static_cast<float>(row[j] - mx));
      if (kind == OpKind::Softmax) {
        for (std::size_t j = 0; j < d; ++j) o[j] = static_cast<float>(std::exp(static_cast<float>(row[j] - mx)) / z);
      } else {
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) o[j] = static_cast<float>(row[j] - lse);
      }
    }
  }
  return make_output(x.shape(), std::move(out));
}

Tensor forward_impl(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs) {
  for (const auto& t : in) require_defined(t, op_name(kind));
  switch (kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
      return forward_elementwise(kind, in);
    case OpKind::Scale: {
      expect_inputs(in, 1, "scale");
      std::vector<float> out(in[0].data().begin(), in[0].data().end());
      for (auto& v : out) v *= attrs.scalar;
      return make_output(in[0].shape(), std::move(out));
    }
    case OpKind::MatMul:
      return forward_matmul(in, attrs);
    case OpKind::Reshape: {
      expect_inputs(in, 1, "reshape");
      if (shape_numel(attrs.shape) != in[0].numel())
        dim_error("reshape", "cannot reshape " + shape_str(in[0].shape()) + " to " + shape_str(attrs.shape));
      return make_output(attrs.shape, std::vector<float>(in[0].data().begin(), in[0].data().end()));
    }
    case OpKind::Permute: {
      expect_inputs(in, 1, "permute");
      const auto& s = in[0].shape();
      auto sorted = attrs.perm;
      std::sort(sorted.begin(), sorted.end());
      std::vector<std::size_t> iota(s.size());
      std::iota(iota.begin(), iota.end(), 0);
      if (sorted != iota) dim_error("permute", "invalid permutation for shape " + shape_str(s));
      Shape out_shape(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[attrs.perm[i]];
      const auto map = permute_index_map(s, attrs.perm);
      std::vector<float> out(map.size());
      const auto x = in[0].data();
      for (std::size_t o = 0; o < map.size(); ++o) out[o] = x[map[o]];
      return make_output(out_shape, std::move(out));
    }
    case OpKind::Concat: {
      if (in.empty()) throw ContractError("concat: no inputs");
      const auto& s0 = in[0].shape();
      const std::size_t axis = normalize_axis(attrs.axis, s0.size(), "concat");
      Shape out_shape = s0;
      out_shape[axis] = 0;
      for (const auto& t : in) {
        const auto& s = t.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        if (!ok) dim_error("concat", "shapes " + shapes_str(in) + " differ off the concat axis");
        out_shape[axis] += s[axis];
      }
      const std::size_t outer = prod(s0, 0, axis);
      const std::size_t inner = prod(s0, axis + 1, s0.size());
      std::vector<float> out;
      out.reserve(shape_numel(out_shape));
      for (std::size_t o = 0; o < outer; ++o) {
        for (const auto& t : in) {
          const std::size_t len = t.shape()[axis] * inner;
          const float* src = t.data().data() + o * len;
          out.insert(out.end(), src, src + len);
        }
      }
      return make_output(out_shape, std::move(out));
    }
    case OpKind::Slice: {
      expect_inputs(in, 1, "slice");
      const auto& s = in[0].shape();
      const std::size_t axis = normalize_axis(attrs.axis, s.size(), "slice");
      if (attrs.length == 0 || attrs.start + attrs.length > s[axis])
        dim_error("slice", "range [" + std::to_string(attrs.start) + ", " + std::to_string(attrs.start + attrs.length) +
                               ") out of bounds for " + shape_str(s));
      Shape out_shape = s;
      out_shape[axis] = attrs.length;
      const std::size_t outer = prod(s, 0, axis);
      const std::size_t inner = prod(s, axis + 1, s.size());
      std::vector<float> out;
      out.reserve(shape_numel(out_shape));
      for (std::size_t o = 0; o < outer; ++o) {
        const float* src = in[0].data().data() + (o * s[axis] + attrs.start) * inner;
        out.insert(out.end(), src, src + attrs.length * inner);
      }
      return make_output(out_shape, std::move(out));
    }
    case OpKind::GatherRows: {
      expect_inputs(in, 1, "gather_rows");
      const auto& s = in[0].shape();
      if (s.empty()) dim_error("gather_rows", "scalar table");
      const std::size_t inner = in[0].numel() / s[0];
      Shape out_shape = s;
      out_shape[0] = attrs.indices.size();
      std::vector<float> out;
      out.reserve(shape_numel(out_shape));
      for (std::size_t idx : attrs.indices) {
        if (idx >= s[0]) dim_error("gather_rows", "index " + std::to_string(idx) + " out of range for " + shape_str(s));
        const float* src = in[0].data().data() + idx * inner;
        out.insert(out.end(), src, src + inner);
      }
      return make_output(out_shape, std::move(out));
    }
    case OpKind::RepeatRows: {
      expect_inputs(in, 1, "repeat_rows");
      const auto& s = in[0].shape();
      if (s.empty() || attrs.repeats == 0) dim_error("repeat_rows", "invalid input " + shape_str(s));
      const std::size_t inner = in[0].numel() / s[0];
      Shape out_shape = s;
      out_shape[0] *= attrs.repeats;
      std::vector<float> out;
      out.reserve(shape_numel(out_shape));
      for (std::size_t r = 0; r < s[0]; ++r) {
        const float* src = in[0].data().data() + r * inner;
        for (std::size_t k = 0; k < attrs.repeats; ++k) out.insert(out.end(), src, src + inner);
      }
      return make_output(out_shape, std::move(out));
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax:
    case OpKind::LayerNorm:
      return forward_rowwise(kind, in, attrs);
    case OpKind::Gelu:
    case OpKind::Silu: {
      expect_inputs(in, 1, op_name(kind));
      std::vector<float> out(in[0].numel());
      const auto x = in[0].data();
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        out[i] = static_cast<float>(kind == OpKind::Gelu ? gelu_value(v) : v * sigmoid(v));
      }
      return make_output(in[0].shape(), std::move(out));
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      expect_inputs(in, 1, op_name(kind));
      double acc = 0.0;
      for (float v : in[0].data()) acc += v;
      if (kind == OpKind::Mean) acc /= static_cast<double>(in[0].numel());
      return make_output({1}, {static_cast<float>(acc)});
    }
  }
  throw UnsupportedOpError("apply: unsupported op kind " + std::to_string(static_cast<int>(kind)));
}

// --------------------------------------------------------------- backward

void backward_record(const TapeRecord& rec, std::span<const float> gout) {
  const auto& in = rec.inputs;
  auto wants = [&](std::size_t i) { return in[i].requires_grad(); };
  switch (rec.kind) {
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul: {
      const auto a = in[0].data();
      const auto b = in[1].data();
      const std::size_t na = a.size(), nb = b.size();
      const std::size_t n = gout.size();
      for (std::size_t which = 0; which < 2; ++which) {
        if (!wants(which)) continue;
        auto& target = grad_buffer(in[which]);
        const std::size_t nt = target.size();
        const float sign = rec.kind == OpKind::Sub && which == 1 ? -1.0f : 1.0f;
        const std::span<const float> other = which == 0 ? b : a;
        const std::size_t no = which == 0 ? nb : na;
        auto term = [&](std::size_t k) -> double {
          if (rec.kind == OpKind::Mul) return double(gout[k]) * other[no == n ? k : k % no];
          return sign * gout[k];
        };
        if (nt == n) {
          if (rec.kind == OpKind::Mul && no == n) {
            for (std::size_t k = 0; k < n; ++k) target[k] += static_cast<float>(double(gout[k]) * other[k]);
          } else {
            for (std::size_t k = 0; k < n; ++k) target[k] += static_cast<float>(term(k));
          }
        } else {
          std::vector<double> acc(nt, 0.0);
          for (std::size_t base = 0; base < n; base += nt)
            for (std::size_t j = 0; j < nt; ++j) acc[j] += term(base + j);
          for (std::size_t j = 0; j < nt; ++j) target[j] += static_cast<float>(acc[j]);
        }
      }
      return;
    }
    case OpKind::Scale: {
      if (!wants(0)) return;
      auto& g = grad_buffer(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * rec.attrs.scalar;
      return;
    }
    case OpKind::MatMul: {
      const auto d = matmul_dims(in[0], in[1], rec.attrs.transpose_b);
      const float* pa = in[0].data().data();
      const float* pb = in[1].data().data();
      thread_local RowMatD G, X, R;
      for (std::size_t bi = 0; bi < d.batch; ++bi) {
        G = ConstMapF(gout.data() + bi * d.m * d.n, d.m, d.n).cast<double>();
        if (wants(0)) {
          if (rec.attrs.transpose_b) {
            X = ConstMapF(pb + bi * d.n * d.k, d.n, d.k).cast<double>();
            R.noalias() = G * X;
          } else {
            X = ConstMapF(pb + bi * d.k * d.n, d.k, d.n).cast<double>();
            R.noalias() = G * X.transpose();
          }
          auto& buf = grad_buffer(in[0]);
          MapF(buf.data() + bi * d.m * d.k, d.m, d.k) += R.cast<float>();
        }
        if (wants(1)) {
          X = ConstMapF(pa + bi * d.m * d.k, d.m, d.k).cast<double>();
          auto& buf = grad_buffer(in[1]);
          if (rec.attrs.transpose_b) {
            R.noalias() = G.transpose() * X;  // [n, k]
            MapF(buf.data() + bi * d.n * d.k, d.n, d.k) += R.cast<float>();
          } else {
            R.noalias() = X.transpose() * G;  // [k, n]
            MapF(buf.data() + bi * d.k * d.n, d.k, d.n) += R.cast<float>();
          }
        }
      }
      return;
    }
    case OpKind::Reshape: {
      if (!wants(0)) return;
      auto& g = grad_buffer(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
      return;
    }
    case OpKind::Permute: {
      if (!wants(0)) return;
      const auto map = permute_index_map(in[0].shape(), rec.attrs.perm);
      auto& g = grad_buffer(in[0]);
      for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += gout[o];
      return;
    }
    case OpKind::Concat: {
      const auto& s0 = in[0].shape();
      const std::size_t axis = normalize_axis(rec.attrs.axis, s0.size(), "concat");
      const std::size_t outer = prod(s0, 0, axis);
      const std::size_t inner = prod(s0, axis + 1, s0.size());
      std::size_t out_row = 0;
      for (const auto& t : in) out_row += t.shape()[axis] * inner;
      std::size_t offset = 0;
      for (const auto& t : in) {
        const std::size_t len = t.shape()[axis] * inner;
        if (t.requires_grad()) {
          auto& g = grad_buffer(t);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < len; ++j) g[o * len + j] += gout[o * out_row + offset + j];
        }
        offset += len;
      }
      return;
    }
    case OpKind::Slice: {
      if (!wants(0)) return;
      const auto& s = in[0].shape();
      const std::size_t axis = normalize_axis(rec.attrs.axis, s.size(), "slice");
      const std::size_t outer = prod(s, 0, axis);
      const std::size_t inner = prod(s, axis + 1, s.size());
      const std::size_t len = rec.attrs.length * inner;
      auto& g = grad_buffer(in[0]);
      for (std::size_t o = 0; o < outer; ++o) {
        float* dst = g.data() + (o * s[axis] + rec.attrs.start) * inner;
        for (std::size_t j = 0; j < len; ++j) dst[j] += gout[o * len + j];
      }
      return;
    }
    case OpKind::GatherRows: {
      if (!wants(0)) return;
      const std::size_t inner = in[0].numel() / in[0].shape()[0];
      std::vector<double> acc(in[0].numel(), 0.0);
      for (std::size_t r = 0; r < rec.attrs.indices.size(); ++r)
        for (std::size_t j = 0; j < inner; ++j) acc[rec.attrs.indices[r] * inner + j] += gout[r * inner + j];
      auto& g = grad_buffer(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>(acc[i]);
      return;
    }
    case OpKind::RepeatRows: {
      if (!wants(0)) return;
      const std::size_t rows = in[0].shape()[0];
      const std::size_t inner = in[0].numel() / rows;
      auto& g = grad_buffer(in[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < inner; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < rec.attrs.repeats; ++k) acc += gout[(r * rec.attrs.repeats + k) * inner + j];
          g[r * inner + j] += static_cast<float>(acc);
        }
      }
      return;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      if (!wants(0)) return;
      const std::size_t d = in[0].shape().back();
      const std::size_t rows = in[0].numel() / d;
      const auto y = rec.output.data();
      auto& g = grad_buffer(in[0]);
      for (std::size_t r = 0; r < rows; ++r) {
        const float* yr = y.data() + r * d;
        const float* gr = gout.data() + r * d;
        if (rec.kind == OpKind::Softmax) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * yr[j];
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += static_cast<float>(yr[j] * (gr[j] - dot));
        } else {
          double gs = 0.0;
          for (std::size_t j = 0; j < d; ++j) gs += gr[j];
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += static_cast<float>(gr[j] - std::exp(yr[j]) * gs);
        }
      }
      return;
    }
    case OpKind::LayerNorm: {
      const auto& x = in[0];
      const std::size_t d = x.shape().back();
      const std::size_t rows = x.numel() / d;
      const bool affine = in.size() == 3;
      std::vector<double> ggamma(affine ? d : 0, 0.0), gbeta(affine ? d : 0, 0.0);
      std::vector<double> xhat(d), dxhat(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const float* row = x.data().data() + r * d;
        const float* gr = gout.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(rec.attrs.eps));
        double mean_dx = 0.0, mean_dxx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (row[j] - mu) * inv;
          dxhat[j] = affine ? gr[j] * static_cast<double>(in[1].data()[j]) : gr[j];
          mean_dx += dxhat[j];
          mean_dxx += dxhat[j] * xhat[j];
          if (affine) {
            ggamma[j] += gr[j] * xhat[j];
            gbeta[j] += gr[j];
          }
        }
        mean_dx /= static_cast<double>(d);
        mean_dxx /= static_cast<double>(d);
        if (x.requires_grad()) {
          auto& g = grad_buffer(x);
          for (std::size_t j = 0; j < d; ++j)
            g[r * d + j] += static_cast<float>(inv * (dxhat[j] - mean_dx - xhat[j] * mean_dxx));
        }
      }
      if (affine) {
        if (in[1].requires_grad()) accumulate_reduced(grad_buffer(in[1]), ggamma);
        if (in[2].requires_grad()) accumulate_reduced(grad_buffer(in[2]), gbeta);
      }
      return;
    }
    case OpKind::Gelu:
    case OpKind::Silu: {
      if (!wants(0)) return;
      const auto x = in[0].data();
      auto& g = grad_buffer(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        double dv;
        if (rec.kind == OpKind::Gelu) {
          dv = gelu_deriv(v);
        } else {
          const double s = sigmoid(v);
          dv = s * (1.0 + v * (1.0 - s));
        }
        g[i] += static_cast<float>(gout[i] * dv);
      }
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      if (!wants(0)) return;
      auto& g = grad_buffer(in[0]);
      const double v = rec.kind == OpKind::Mean ? gout[0] / static_cast<double>(g.size()) : gout[0];
      for (auto& x : g) x += static_cast<float>(v);
      return;
    }
  }
}

thread_local bool g_checked_outputs = false;

}  // namespace

// ------------------------------------------------------------------ Tensor

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  for (auto s : shape)
    if (s == 0) throw DimensionError("tensor: zero extent in shape " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(data.size()));
  check_finite(data, "tensor");
  Tensor t = TensorAccess::make(std::move(shape), std::move(data));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) throw DimensionError("dim: axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::rank() const { return shape().size(); }
std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  if (impl_->tape) throw ContractError("set_requires_grad: only leaves can change their gradient flag");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::has_grad() const { return defined() && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return TensorAccess::make(impl_->shape, impl_->data);
}

std::span<float> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  if (impl_->tape) throw ContractError("mutable_data: tensor participates in a tape");
  return impl_->data;
}

// -------------------------------------------------------------------- ops

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Silu: return "silu";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
  }
  return "unknown";
}

const std::vector<OpKind>& all_op_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::Add,        OpKind::Sub,     OpKind::Mul,     OpKind::Scale,      OpKind::MatMul,     OpKind::Reshape,
      OpKind::Permute,    OpKind::Concat,  OpKind::Slice,   OpKind::GatherRows, OpKind::RepeatRows, OpKind::Softmax,
      OpKind::LogSoftmax, OpKind::LayerNorm, OpKind::Gelu,  OpKind::Silu,       OpKind::Sum,        OpKind::Mean};
  return kinds;
}

OpKind parse_op_kind(std::string_view name) {
  for (auto k : all_op_kinds())
    if (op_name(k) == name) return k;
  throw UnsupportedOpError("unsupported op kind '" + std::string(name) + "'");
}

Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  Tensor out = forward_impl(kind, inputs, attrs);
  if (g_checked_outputs) check_finite(out.data(), op_name(kind));
  Tape* tape = g_active_tape;
  if (!tape) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  impl_of(out).requires_grad = true;
  TensorAccess::record(*tape, TapeRecord{kind, attrs, std::vector<Tensor>(inputs.begin(), inputs.end()), out});
  return out;
}

namespace {
Tensor apply1(OpKind kind, const Tensor& a, const OpAttrs& attrs = {}) {
  const std::array<Tensor, 1> in{a};
  return hprune::apply(kind, in, attrs);
}
Tensor apply2(OpKind kind, const Tensor& a, const Tensor& b, const OpAttrs& attrs = {}) {
  const std::array<Tensor, 2> in{a, b};
  return hprune::apply(kind, in, attrs);
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return apply2(OpKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply2(OpKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply2(OpKind::Mul, a, b); }

Tensor scale(const Tensor& a, float s) {
  OpAttrs at;
  at.scalar = s;
  return apply1(OpKind::Scale, a, at);
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  OpAttrs at;
  at.transpose_b = transpose_b;
  return apply2(OpKind::MatMul, a, b, at);
}

Tensor reshape(const Tensor& a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return apply1(OpKind::Reshape, a, at);
}

Tensor permute(const Tensor& a, std::vector<std::size_t> perm) {
  OpAttrs at;
  at.perm = std::move(perm);
  return apply1(OpKind::Permute, a, at);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  OpAttrs at;
  at.axis = axis;
  return hprune::apply(OpKind::Concat, parts, at);
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  OpAttrs at;
  at.axis = axis;
  at.start = start;
  at.length = length;
  return apply1(OpKind::Slice, a, at);
}

Tensor gather_rows(const Tensor& table, std::vector<std::size_t> indices) {
  OpAttrs at;
  at.indices = std::move(indices);
  return apply1(OpKind::GatherRows, table, at);
}

Tensor repeat_rows(const Tensor& a, std::size_t repeats) {
  OpAttrs at;
  at.repeats = repeats;
  return apply1(OpKind::RepeatRows, a, at);
}

Tensor softmax(const Tensor& a) { return apply1(OpKind::Softmax, a); }
Tensor log_softmax(const Tensor& a) { return apply1(OpKind::LogSoftmax, a); }
Tensor layer_norm(const Tensor& a) { return apply1(OpKind::LayerNorm, a); }

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta) {
  const std::array<Tensor, 3> in{a, gamma, beta};
  return hprune::apply(OpKind::LayerNorm, in);
}

Tensor gelu(const Tensor& a) { return apply1(OpKind::Gelu, a); }
Tensor silu(const Tensor& a) { return apply1(OpKind::Silu, a); }
Tensor sum(const Tensor& a) { return apply1(OpKind::Sum, a); }
Tensor mean(const Tensor& a) { return apply1(OpKind::Mean, a); }

Tensor squared_error(const Tensor& a, const Tensor& b, std::size_t rows) {
  const Tensor d = sub(a, b);
  return scale(sum(mul(d, d)), 1.0f / static_cast<float>(rows));
}

// -------------------------------------------------------------------- tape

Tape::~Tape() { clear(); }

void Tape::record(TapeRecord rec) {
  impl_of(rec.output).tape = this;
  records_.push_back(std::move(rec));
}

void Tape::clear() {
  for (auto& r : records_) impl_of(r.output).tape = nullptr;
  records_.clear();
}

void Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw ContractError("backward: loss must be a 1-element tensor, got " + shape_str(loss.shape()));
  if (impl_of(loss).tape != this) throw NoGraphError("backward: loss was not produced under this tape");
  grad_buffer(loss)[0] += 1.0f;
  last_visits_ = 0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    ++last_visits_;
    const auto& out = impl_of(it->output);
    if (out.grad.empty()) continue;
    backward_record(*it, out.grad);
  }
  clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!g_active_tape) throw NoGraphError("backward: no active tape");
  g_active_tape->backward(loss);
}

std::uint64_t& matmul_mac_counter() noexcept { return g_mac_counter; }

void set_checked_outputs(bool enabled) noexcept { g_checked_outputs = enabled; }

// -------------------------------------------------------------- grad check

GradCheckReport grad_check(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs, float step, double tol) {
  if (std::find(all_op_kinds().begin(), all_op_kinds().end(), kind) == all_op_kinds().end())
    throw UnsupportedOpError("grad_check: op kind " + std::to_string(static_cast<int>(kind)) + " is not differentiable");
  for (const auto& t : inputs) {
    require_defined(t, "grad_check");
    if (t.numel() > 64) throw ContractError("grad_check: inputs limited to 64 elements");
  }
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) {
    leaves.push_back(Tensor::from(t.shape(), std::vector<float>(t.data().begin(), t.data().end()), t.requires_grad()));
  }

  const Tensor probe_out = forward_impl(kind, leaves, attrs);
  std::vector<float> wdata(probe_out.numel());
  Rng rng(0x5eed5eedULL);
  for (auto& w : wdata) w = rng.uniform() * 2.0f - 1.0f;
  const Tensor weights = Tensor::from(probe_out.shape(), wdata);

  auto weighted_loss = [&](std::span<const Tensor> in) {
    const Tensor out = forward_impl(kind, in, attrs);
    double acc = 0.0;
    for (std::size_t k = 0; k < out.numel(); ++k) acc += static_cast<double>(out.data()[k]) * wdata[k];
    return acc;
  };

  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor out = hprune::apply(kind, leaves, attrs);
    if (out.requires_grad()) tape.backward(sum(mul(out, weights)));
  }

  GradCheckReport report;
  report.pass = true;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (!leaves[i].requires_grad()) {
      report.max_rel_error.push_back(std::nullopt);
      continue;
    }
    std::vector<float> analytic(leaves[i].numel(), 0.0f);
    if (leaves[i].has_grad()) analytic.assign(leaves[i].grad().begin(), leaves[i].grad().end());
    std::vector<double> numeric(analytic.size());
    for (std::size_t e = 0; e < analytic.size(); ++e) {
      auto perturbed = [&](float delta, float& actual) {
        std::vector<Tensor> in(leaves.begin(), leaves.end());
        std::vector<float> vals(leaves[i].data().begin(), leaves[i].data().end());
        vals[e] += delta;
        actual = vals[e];
        in[i] = Tensor::from(leaves[i].shape(), std::move(vals));
        return weighted_loss(in);
      };
      float xp = 0.0f, xm = 0.0f;
      const double lp = perturbed(step, xp);
      const double lm = perturbed(-step, xm);
      numeric[e] = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
    }
    double max_diff = 0.0, max_mag = 1e-6;
    for (std::size_t e = 0; e < analytic.size(); ++e) {
      max_diff = std::max(max_diff, std::abs(analytic[e] - numeric[e]));
      max_mag = std::max({max_mag, std::abs(static_cast<double>(analytic[e])), std::abs(numeric[e])});
    }
    const double rel = max_diff / max_mag;
    report.max_rel_error.push_back(rel);
    if (!(rel <= tol)) report.pass = false;
  }
  return report;
}

}  // namespace hprune
