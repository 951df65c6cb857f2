#include "constcl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace constcl {

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
    s[i] = s[i + 1] * shape[i + 1];
  return s;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::MatMul: return "matmul";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
    case OpKind::Relu: return "relu";
    case OpKind::Softmax: return "softmax";
    case OpKind::L2Norm: return "l2_normalize";
    case OpKind::Im2Col: return "im2col";
    case OpKind::TakeRows: return "take_rows";
    case OpKind::LinComb: return "lincomb";
  }
  return "?";
}

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F64;
  std::vector<float> d32;
  std::vector<double> d64;

  OpKind op = OpKind::Leaf;
  OpAttrs attrs;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  bool trainable = false;
  bool needs_grad = false;
  std::string name;

  int64_t numel() const { return numel_of(shape); }
};

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <class T>
std::vector<T>& buf(TensorImpl& t);
template <>
std::vector<float>& buf<float>(TensorImpl& t) { return t.d32; }
template <>
std::vector<double>& buf<double>(TensorImpl& t) { return t.d64; }

template <class T>
const std::vector<T>& cbuf(const TensorImpl& t);
template <>
const std::vector<float>& cbuf<float>(const TensorImpl& t) { return t.d32; }
template <>
const std::vector<double>& cbuf<double>(const TensorImpl& t) { return t.d64; }

template <class F>
decltype(auto) with_dtype(DType dt, F&& f) {
  if (dt == DType::F32) return f(float{});
  return f(double{});
}

// Row-major walk over `shape` maintaining a second flat index defined by
// per-axis strides (plus a constant offset); fn(i, mapped) per element.
template <class F>
void for_each_mapped(const Shape& shape, const std::vector<int64_t>& mapped_strides,
                     int64_t offset, F&& fn) {
  const int64_t rank = static_cast<int64_t>(shape.size());
  const int64_t n = numel_of(shape);
  if (rank == 0) {
    if (n > 0) fn(0, offset);
    return;
  }
  std::vector<int64_t> c(static_cast<size_t>(rank), 0);
  int64_t mapped = offset;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, mapped);
    for (int64_t d = rank - 1; d >= 0; --d) {
      mapped += mapped_strides[static_cast<size_t>(d)];
      if (++c[static_cast<size_t>(d)] < shape[static_cast<size_t>(d)]) break;
      mapped -= mapped_strides[static_cast<size_t>(d)] * shape[static_cast<size_t>(d)];
      c[static_cast<size_t>(d)] = 0;
    }
  }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dt) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dt;
  with_dtype(dt, [&]<class T>(T) { buf<T>(*impl).assign(static_cast<size_t>(impl->numel()), T(0)); });
  return impl;
}

std::shared_ptr<TensorImpl> make_node(OpKind op, Shape shape, DType dt,
                                      std::vector<std::shared_ptr<TensorImpl>> parents,
                                      OpAttrs attrs = {}) {
  auto impl = make_impl(std::move(shape), dt);
  impl->op = op;
  impl->attrs = std::move(attrs);
  for (const auto& p : parents) impl->needs_grad = impl->needs_grad || p->needs_grad;
  impl->parents = std::move(parents);
  return impl;
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    fail(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
         dtype_name(b.dtype()));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor");
}

}  // namespace

// ---------------------------------------------------------------- Tensor API

Tensor Tensor::zeros(Shape shape, DType dt) { return Tensor(make_impl(std::move(shape), dt)); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  auto impl = make_impl(std::move(shape), dt);
  with_dtype(dt, [&]<class T>(T) {
    auto& b = buf<T>(*impl);
    std::fill(b.begin(), b.end(), static_cast<T>(value));
  });
  return Tensor(impl);
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from_f64(Shape shape, std::span<const double> values, DType dt) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    fail("from_f64: shape " + shape_str(shape) + " wants " + std::to_string(numel_of(shape)) +
         " values, got " + std::to_string(values.size()));
  auto impl = make_impl(std::move(shape), dt);
  with_dtype(dt, [&]<class T>(T) {
    auto& b = buf<T>(*impl);
    for (size_t i = 0; i < values.size(); ++i) b[i] = static_cast<T>(values[i]);
  });
  return Tensor(impl);
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    fail("from_f32: shape/value count mismatch");
  auto impl = make_impl(std::move(shape), DType::F32);
  std::copy(values.begin(), values.end(), impl->d32.begin());
  return Tensor(impl);
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(impl_->shape.size()); }
int64_t Tensor::numel() const { return impl_->numel(); }
DType Tensor::dtype() const { return impl_->dtype; }

double Tensor::item() const {
  if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
  return at(0);
}

double Tensor::at(int64_t flat) const {
  return impl_->dtype == DType::F32 ? static_cast<double>(impl_->d32[flat]) : impl_->d64[flat];
}

std::vector<double> Tensor::to_f64() const {
  std::vector<double> out(static_cast<size_t>(numel()));
  for (int64_t i = 0; i < numel(); ++i) out[i] = at(i);
  return out;
}

std::span<const float> Tensor::data_f32() const {
  if (impl_->dtype != DType::F32) fail("data_f32 on f64 tensor");
  return impl_->d32;
}

std::span<const double> Tensor::data_f64() const {
  if (impl_->dtype != DType::F64) fail("data_f64 on f32 tensor");
  return impl_->d64;
}

Tensor Tensor::detach() const {
  auto impl = make_impl(impl_->shape, impl_->dtype);
  impl->d32 = impl_->d32;
  impl->d64 = impl_->d64;
  return Tensor(impl);
}

Tensor Tensor::astype(DType dt) const {
  if (dt == impl_->dtype) return detach();
  auto v = to_f64();
  return from_f64(impl_->shape, v, dt);
}

void Tensor::mark_trainable(std::string name) {
  if (impl_->op != OpKind::Leaf) fail("mark_trainable: not a leaf tensor");
  impl_->trainable = true;
  impl_->needs_grad = true;
  impl_->name = std::move(name);
}

bool Tensor::trainable() const { return impl_->trainable; }
const std::string& Tensor::name() const { return impl_->name; }

void Tensor::overwrite_data(std::span<const double> values) const {
  if (static_cast<int64_t>(values.size()) != numel()) fail("overwrite_data: size mismatch");
  with_dtype(impl_->dtype, [&]<class T>(T) {
    auto& b = buf<T>(*impl_);
    for (size_t i = 0; i < values.size(); ++i) b[i] = static_cast<T>(values[i]);
  });
}

void Tensor::overwrite_data_raw(const Tensor& src) const {
  if (src.dtype() != dtype() || src.numel() != numel()) fail("overwrite_data_raw: mismatch");
  impl_->d32 = src.impl_->d32;
  impl_->d64 = src.impl_->d64;
}

// ------------------------------------------------------------- elementwise

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(OpKind op, BinKind k, const Tensor& a, const Tensor& b) {
  check_defined(op_name(op), a);
  check_defined(op_name(op), b);
  check_same_dtype(op_name(op), a, b);
  const bool b_small = is_suffix(b.shape(), a.shape());
  const bool a_small = is_suffix(a.shape(), b.shape());
  if (!b_small && !a_small)
    fail(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  const Tensor& big = b_small ? a : b;
  auto node = make_node(op, big.shape(), a.dtype(), {a.impl(), b.impl()});
  with_dtype(a.dtype(), [&]<class T>(T) {
    const auto& pa = cbuf<T>(*a.impl());
    const auto& pb = cbuf<T>(*b.impl());
    auto& out = buf<T>(*node);
    const int64_t n = node->numel();
    const int64_t na = a.numel() ? a.numel() : 1;
    const int64_t nb = b.numel() ? b.numel() : 1;
    int64_t ia = 0, ib = 0;  // the smaller operand wraps over its suffix block
    for (int64_t i = 0; i < n; ++i) {
      T x = pa[ia], y = pb[ib];
      switch (k) {
        case BinKind::Add: out[i] = x + y; break;
        case BinKind::Sub: out[i] = x - y; break;
        case BinKind::Mul: out[i] = x * y; break;
        case BinKind::Div: out[i] = x / y; break;
      }
      if (++ia == na) ia = 0;
      if (++ib == nb) ib = 0;
    }
  });
  return Tensor(node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(OpKind::Add, BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(OpKind::Sub, BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(OpKind::Mul, BinKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(OpKind::Div, BinKind::Div, a, b); }

Tensor scale(const Tensor& x, double s) { return mul(x, Tensor::scalar(s, x.dtype())); }

// ------------------------------------------------------------------ matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", a);
  check_defined("matmul", b);
  check_same_dtype("matmul", a, b);
  if (a.rank() != 2 || b.rank() != 2)
    fail("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    fail("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto node = make_node(OpKind::MatMul, {m, n}, a.dtype(), {a.impl(), b.impl()});
  with_dtype(a.dtype(), [&]<class T>(T) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> A(cbuf<T>(*a.impl()).data(), m, k);
    Eigen::Map<const Mat> B(cbuf<T>(*b.impl()).data(), k, n);
    Eigen::Map<Mat> C(buf<T>(*node).data(), m, n);
    C.noalias() = A * B;
  });
  return Tensor(node);
}

// ------------------------------------------------------------------- unary

namespace {

template <class FwdF32, class FwdF64>
Tensor unary_op(OpKind op, const Tensor& x, FwdF32 f32fn, FwdF64 f64fn) {
  check_defined(op_name(op), x);
  auto node = make_node(op, x.shape(), x.dtype(), {x.impl()});
  if (x.dtype() == DType::F32) {
    const auto& in = x.impl()->d32;
    auto& out = node->d32;
    for (size_t i = 0; i < in.size(); ++i) out[i] = f32fn(in[i]);
  } else {
    const auto& in = x.impl()->d64;
    auto& out = node->d64;
    for (size_t i = 0; i < in.size(); ++i) out[i] = f64fn(in[i]);
  }
  return Tensor(node);
}

}  // namespace

Tensor exp(const Tensor& x) {
  return unary_op(OpKind::Exp, x, [](float v) { return std::exp(v); },
                  [](double v) { return std::exp(v); });
}
Tensor log(const Tensor& x) {
  return unary_op(OpKind::Log, x, [](float v) { return std::log(v); },
                  [](double v) { return std::log(v); });
}
Tensor sqrt(const Tensor& x) {
  return unary_op(OpKind::Sqrt, x, [](float v) { return std::sqrt(v); },
                  [](double v) { return std::sqrt(v); });
}
Tensor relu(const Tensor& x) {
  return unary_op(OpKind::Relu, x, [](float v) { return v > 0.f ? v : 0.f; },
                  [](double v) { return v > 0.0 ? v : 0.0; });
}

// -------------------------------------------------------------- reductions

namespace {

std::vector<int64_t> normalize_axes(const char* op, std::vector<int64_t> axes, int64_t rank) {
  if (axes.empty()) {
    axes.resize(static_cast<size_t>(rank));
    for (int64_t i = 0; i < rank; ++i) axes[static_cast<size_t>(i)] = i;
    return axes;
  }
  std::sort(axes.begin(), axes.end());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= rank)
      fail(std::string(op) + ": axis " + std::to_string(axes[i]) + " out of range for rank " +
           std::to_string(rank));
    if (i > 0 && axes[i] == axes[i - 1]) fail(std::string(op) + ": duplicate axis");
  }
  return axes;
}

Tensor reduce_op(OpKind op, const Tensor& x, std::vector<int64_t> axes) {
  check_defined(op_name(op), x);
  axes = normalize_axes(op_name(op), std::move(axes), x.rank());
  Shape out_shape;
  std::vector<bool> reduced(static_cast<size_t>(x.rank()), false);
  for (int64_t a : axes) reduced[static_cast<size_t>(a)] = true;
  for (int64_t i = 0; i < x.rank(); ++i)
    if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(x.shape()[static_cast<size_t>(i)]);
  OpAttrs attrs;
  attrs.axes = axes;
  auto node = make_node(op, out_shape, x.dtype(), {x.impl()}, attrs);

  const auto out_strides = row_major_strides(out_shape);
  int64_t rcount = 1;
  for (int64_t a : axes) rcount *= x.shape()[static_cast<size_t>(a)];
  std::vector<int64_t> mapped(static_cast<size_t>(x.rank()), 0);
  {
    size_t od = 0;
    for (int64_t d = 0; d < x.rank(); ++d)
      if (!reduced[static_cast<size_t>(d)]) mapped[static_cast<size_t>(d)] = out_strides[od++];
  }

  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for_each_mapped(x.shape(), mapped, 0, [&](int64_t i, int64_t oi) { out[oi] += in[i]; });
    if (op == OpKind::Mean) {
      const T inv = static_cast<T>(1.0 / static_cast<double>(rcount));
      for (auto& v : out) v *= inv;
    }
  });
  return Tensor(node);
}

}  // namespace

Tensor sum(const Tensor& x, std::vector<int64_t> axes) {
  return reduce_op(OpKind::Sum, x, std::move(axes));
}
Tensor mean(const Tensor& x, std::vector<int64_t> axes) {
  return reduce_op(OpKind::Mean, x, std::move(axes));
}

// ------------------------------------------------------- shape manipulation

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined("reshape", x);
  if (numel_of(shape) != x.numel())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  OpAttrs attrs;
  attrs.shape = shape;
  auto node = make_node(OpKind::Reshape, shape, x.dtype(), {x.impl()}, attrs);
  node->d32 = x.impl()->d32;
  node->d64 = x.impl()->d64;
  return Tensor(node);
}

Tensor transpose(const Tensor& x, std::vector<int64_t> perm) {
  check_defined("transpose", x);
  if (static_cast<int64_t>(perm.size()) != x.rank()) fail("transpose: perm rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] < 0 || perm[i] >= x.rank() || seen[static_cast<size_t>(perm[i])])
      fail("transpose: invalid permutation");
    seen[static_cast<size_t>(perm[i])] = true;
    out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
  }
  OpAttrs attrs;
  attrs.axes = perm;
  auto node = make_node(OpKind::Transpose, out_shape, x.dtype(), {x.impl()}, attrs);
  const auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> mapped(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) mapped[d] = in_strides[static_cast<size_t>(perm[d])];
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for_each_mapped(out_shape, mapped, 0, [&](int64_t i, int64_t src) { out[i] = in[src]; });
  });
  return Tensor(node);
}

Tensor slice(const Tensor& x, std::vector<int64_t> starts, std::vector<int64_t> stops) {
  check_defined("slice", x);
  if (static_cast<int64_t>(starts.size()) != x.rank() ||
      static_cast<int64_t>(stops.size()) != x.rank())
    fail("slice: starts/stops must cover every axis");
  Shape out_shape(starts.size());
  for (size_t d = 0; d < starts.size(); ++d) {
    if (starts[d] < 0 || stops[d] > x.shape()[d] || starts[d] >= stops[d])
      fail("slice: axis " + std::to_string(d) + " range [" + std::to_string(starts[d]) + "," +
           std::to_string(stops[d]) + ") out of bounds for extent " +
           std::to_string(x.shape()[d]));
    out_shape[d] = stops[d] - starts[d];
  }
  OpAttrs attrs;
  attrs.starts = starts;
  attrs.stops = stops;
  auto node = make_node(OpKind::Slice, out_shape, x.dtype(), {x.impl()}, attrs);
  const auto in_strides = row_major_strides(x.shape());
  int64_t offset = 0;
  for (size_t d = 0; d < starts.size(); ++d) offset += starts[d] * in_strides[d];
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for_each_mapped(out_shape, in_strides, offset, [&](int64_t i, int64_t src) { out[i] = in[src]; });
  });
  return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) fail("concat: empty input list");
  const Tensor& first = xs.front();
  check_defined("concat", first);
  if (axis < 0 || axis >= first.rank()) fail("concat: axis out of range");
  Shape out_shape = first.shape();
  std::vector<std::shared_ptr<TensorImpl>> parents;
  parents.reserve(xs.size());
  int64_t total_axis = 0;
  for (const auto& x : xs) {
    check_defined("concat", x);
    check_same_dtype("concat", first, x);
    if (x.rank() != first.rank()) fail("concat: rank mismatch");
    for (int64_t d = 0; d < x.rank(); ++d)
      if (d != axis && x.shape()[static_cast<size_t>(d)] != first.shape()[static_cast<size_t>(d)])
        fail("concat: extent mismatch on axis " + std::to_string(d));
    total_axis += x.shape()[static_cast<size_t>(axis)];
    parents.push_back(x.impl());
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;
  OpAttrs attrs;
  attrs.axes = {axis};
  auto node = make_node(OpKind::Concat, out_shape, first.dtype(), parents, attrs);

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < first.rank(); ++d) inner *= out_shape[static_cast<size_t>(d)];
  with_dtype(first.dtype(), [&]<class T>(T) {
    auto& out = buf<T>(*node);
    int64_t axis_off = 0;
    for (const auto& x : xs) {
      const auto& in = cbuf<T>(*x.impl());
      const int64_t ax = x.shape()[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o)
        std::copy(in.begin() + o * ax * inner, in.begin() + (o + 1) * ax * inner,
                  out.begin() + (o * total_axis + axis_off) * inner);
      axis_off += ax;
    }
  });
  return Tensor(node);
}

// ------------------------------------------------- softmax / l2 normalize

namespace {

void axis_split(const Shape& shape, int64_t axis, int64_t& outer, int64_t& extent, int64_t& inner) {
  outer = 1;
  inner = 1;
  extent = shape[static_cast<size_t>(axis)];
  for (int64_t d = 0; d < axis; ++d) outer *= shape[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < shape.size(); ++d) inner *= shape[d];
}

}  // namespace

Tensor softmax(const Tensor& x, int64_t axis) {
  check_defined("softmax", x);
  if (axis < 0 || axis >= x.rank())
    fail("softmax: axis " + std::to_string(axis) + " out of range for rank " +
         std::to_string(x.rank()));
  OpAttrs attrs;
  attrs.axes = {axis};
  auto node = make_node(OpKind::Softmax, x.shape(), x.dtype(), {x.impl()}, attrs);
  int64_t outer, extent, inner;
  axis_split(x.shape(), axis, outer, extent, inner);
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * extent * inner + i;
        T m = in[base];
        for (int64_t a = 1; a < extent; ++a) m = std::max(m, in[base + a * inner]);
        T denom = T(0);
        for (int64_t a = 0; a < extent; ++a) {
          const T e = std::exp(in[base + a * inner] - m);
          out[base + a * inner] = e;
          denom += e;
        }
        for (int64_t a = 0; a < extent; ++a) out[base + a * inner] /= denom;
      }
  });
  return Tensor(node);
}

Tensor l2_normalize(const Tensor& x, int64_t axis, double eps) {
  check_defined("l2_normalize", x);
  if (axis < 0 || axis >= x.rank())
    fail("l2_normalize: axis " + std::to_string(axis) + " out of range for rank " +
         std::to_string(x.rank()));
  OpAttrs attrs;
  attrs.axes = {axis};
  attrs.eps = eps;
  auto node = make_node(OpKind::L2Norm, x.shape(), x.dtype(), {x.impl()}, attrs);
  int64_t outer, extent, inner;
  axis_split(x.shape(), axis, outer, extent, inner);
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * extent * inner + i;
        double nsq = 0;
        for (int64_t a = 0; a < extent; ++a) {
          const double v = static_cast<double>(in[base + a * inner]);
          nsq += v * v;
        }
        const double denom = std::max(std::sqrt(nsq), eps);
        for (int64_t a = 0; a < extent; ++a)
          out[base + a * inner] = static_cast<T>(in[base + a * inner] / denom);
      }
  });
  return Tensor(node);
}

// ------------------------------------------------------------------ im2col

Tensor im2col(const Tensor& x, std::span<const int64_t> kernel, std::span<const int64_t> stride,
              std::span<const int64_t> pad) {
  check_defined("im2col", x);
  if (x.rank() != 5) fail("im2col: expects [N,T,H,W,C], got " + shape_str(x.shape()));
  if (kernel.size() != 3 || stride.size() != 3 || pad.size() != 3)
    fail("im2col: kernel/stride/pad must each have 3 entries");
  const int64_t N = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3],
                C = x.shape()[4];
  const int64_t kt = kernel[0], kh = kernel[1], kw = kernel[2];
  const int64_t st = stride[0], sh = stride[1], sw = stride[2];
  const int64_t pt = pad[0], ph = pad[1], pw = pad[2];
  const int64_t To = (T + 2 * pt - kt) / st + 1;
  const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  const int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  if (To < 1 || Ho < 1 || Wo < 1)
    fail("im2col: kernel " + std::to_string(kt) + "x" + std::to_string(kh) + "x" +
         std::to_string(kw) + " does not fit input " + shape_str(x.shape()));
  OpAttrs attrs;
  attrs.ints = {kt, kh, kw, st, sh, sw, pt, ph, pw};
  auto node =
      make_node(OpKind::Im2Col, {N * To * Ho * Wo, kt * kh * kw * C}, x.dtype(), {x.impl()}, attrs);
  with_dtype(x.dtype(), [&]<class T_>(T_) {
    const auto& in = cbuf<T_>(*x.impl());
    auto& out = buf<T_>(*node);
    int64_t row = 0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t to = 0; to < To; ++to)
        for (int64_t ho = 0; ho < Ho; ++ho)
          for (int64_t wo = 0; wo < Wo; ++wo, ++row) {
            T_* dst = out.data() + row * kt * kh * kw * C;
            for (int64_t a = 0; a < kt; ++a) {
              const int64_t tsrc = to * st - pt + a;
              for (int64_t b = 0; b < kh; ++b) {
                const int64_t hsrc = ho * sh - ph + b;
                for (int64_t c = 0; c < kw; ++c, dst += C) {
                  const int64_t wsrc = wo * sw - pw + c;
                  if (tsrc < 0 || tsrc >= T || hsrc < 0 || hsrc >= H || wsrc < 0 || wsrc >= W)
                    continue;  // stays zero
                  const T_* src = in.data() + (((n * T + tsrc) * H + hsrc) * W + wsrc) * C;
                  std::copy(src, src + C, dst);
                }
              }
            }
          }
  });
  return Tensor(node);
}

// ----------------------------------------------------------------- gathers

Tensor take_rows(const Tensor& x, std::span<const int64_t> indices) {
  check_defined("take_rows", x);
  if (x.rank() < 1) fail("take_rows: rank-0 input");
  const int64_t rows = x.shape()[0];
  const int64_t rest = rows ? x.numel() / rows : 0;
  for (int64_t idx : indices)
    if (idx < 0 || idx >= rows)
      fail("take_rows: index " + std::to_string(idx) + " out of range [0," + std::to_string(rows) +
           ")");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int64_t>(indices.size());
  OpAttrs attrs;
  attrs.ints.assign(indices.begin(), indices.end());
  auto node = make_node(OpKind::TakeRows, out_shape, x.dtype(), {x.impl()}, attrs);
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for (size_t i = 0; i < indices.size(); ++i)
      std::copy(in.begin() + indices[i] * rest, in.begin() + (indices[i] + 1) * rest,
                out.begin() + static_cast<int64_t>(i) * rest);
  });
  return Tensor(node);
}

Tensor lincomb_rows(const Tensor& x, std::span<const int64_t> indices,
                    std::span<const double> weights, int64_t channels) {
  check_defined("lincomb", x);
  if (indices.size() != weights.size()) fail("lincomb: indices/weights size mismatch");
  if (channels <= 0 || x.numel() % channels != 0)
    fail("lincomb: channels " + std::to_string(channels) + " does not divide " +
         std::to_string(x.numel()));
  const int64_t V = x.numel() / channels;
  for (int64_t idx : indices)
    if (idx < 0 || idx >= V) fail("lincomb: voxel index out of range");
  OpAttrs attrs;
  attrs.ints.assign(indices.begin(), indices.end());
  attrs.floats.assign(weights.begin(), weights.end());
  auto node = make_node(OpKind::LinComb, {channels}, x.dtype(), {x.impl()}, attrs);
  with_dtype(x.dtype(), [&]<class T>(T) {
    const auto& in = cbuf<T>(*x.impl());
    auto& out = buf<T>(*node);
    for (size_t i = 0; i < indices.size(); ++i) {
      const T w = static_cast<T>(weights[i]);
      const T* src = in.data() + indices[i] * channels;
      for (int64_t c = 0; c < channels; ++c) out[c] += w * src[c];
    }
  });
  return Tensor(node);
}

// ---------------------------------------------------------------- op_apply

Tensor op_apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto want = [&](size_t n) {
    if (inputs.size() != n)
      fail(std::string(op_name(kind)) + ": expects " + std::to_string(n) + " inputs, got " +
           std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::Sub: want(2); return sub(inputs[0], inputs[1]);
    case OpKind::Mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::Div: want(2); return div(inputs[0], inputs[1]);
    case OpKind::MatMul: want(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Exp: want(1); return exp(inputs[0]);
    case OpKind::Log: want(1); return log(inputs[0]);
    case OpKind::Sqrt: want(1); return sqrt(inputs[0]);
    case OpKind::Relu: want(1); return relu(inputs[0]);
    case OpKind::Sum: want(1); return sum(inputs[0], attrs.axes);
    case OpKind::Mean: want(1); return mean(inputs[0], attrs.axes);
    case OpKind::Reshape: want(1); return reshape(inputs[0], attrs.shape);
    case OpKind::Transpose: want(1); return transpose(inputs[0], attrs.axes);
    case OpKind::Slice: want(1); return slice(inputs[0], attrs.starts, attrs.stops);
    case OpKind::Concat: return concat(inputs, attrs.axes.empty() ? 0 : attrs.axes[0]);
    case OpKind::Softmax:
      want(1);
      return softmax(inputs[0], attrs.axes.empty() ? 0 : attrs.axes[0]);
    case OpKind::L2Norm:
      want(1);
      return l2_normalize(inputs[0], attrs.axes.empty() ? 0 : attrs.axes[0], attrs.eps);
    case OpKind::Im2Col: {
      want(1);
      if (attrs.ints.size() != 9) fail("im2col: attrs.ints must be {k,k,k,s,s,s,p,p,p}");
      std::span<const int64_t> v(attrs.ints);
      return im2col(inputs[0], v.subspan(0, 3), v.subspan(3, 3), v.subspan(6, 3));
    }
    case OpKind::TakeRows: want(1); return take_rows(inputs[0], attrs.ints);
    case OpKind::LinComb:
      want(1);
      return lincomb_rows(inputs[0], attrs.ints, attrs.floats,
                          attrs.shape.empty() ? 0 : attrs.shape[0]);
    case OpKind::Leaf: fail("op_apply: leaf is not an operation");
  }
  fail("op_apply: unknown kind");
}

// ---------------------------------------------------------------- backward

namespace {

// Accumulates `g` (shaped like `big`) into the gradient of an operand whose
// shape is a suffix of big's: sums over the expanded leading axes.
template <class T>
void reduce_into(const std::vector<T>& g, std::vector<T>& acc, T sign) {
  const size_t nb = acc.size() ? acc.size() : 1;
  size_t j = 0;
  for (size_t i = 0; i < g.size(); ++i) {
    acc[j] += sign * g[i];
    if (++j == nb) j = 0;
  }
}

struct BackCtx {
  std::unordered_map<const TensorImpl*, Tensor> grads;

  Tensor& grad_for(const std::shared_ptr<TensorImpl>& t) {
    auto it = grads.find(t.get());
    if (it == grads.end())
      it = grads.emplace(t.get(), Tensor::zeros(t->shape, t->dtype)).first;
    return it->second;
  }

  template <class T>
  std::vector<T>& gbuf(const std::shared_ptr<TensorImpl>& t) {
    return buf<T>(const_cast<TensorImpl&>(*grad_for(t).id()));
  }
};

template <class T>
void backward_node(TensorImpl* node, const std::vector<T>& g, BackCtx& ctx) {
  auto wants = [&](size_t i) { return node->parents[i]->needs_grad; };
  switch (node->op) {
    case OpKind::Leaf:
      return;
    case OpKind::Add:
    case OpKind::Sub: {
      const T sign = node->op == OpKind::Add ? T(1) : T(-1);
      if (wants(0)) reduce_into(g, ctx.gbuf<T>(node->parents[0]), T(1));
      if (wants(1)) reduce_into(g, ctx.gbuf<T>(node->parents[1]), sign);
      return;
    }
    case OpKind::Mul: {
      const auto& a = cbuf<T>(*node->parents[0]);
      const auto& b = cbuf<T>(*node->parents[1]);
      const size_t na = a.size() ? a.size() : 1, nb = b.size() ? b.size() : 1;
      if (wants(0)) {
        auto& ga = ctx.gbuf<T>(node->parents[0]);
        size_t ia = 0, ib = 0;
        for (size_t i = 0; i < g.size(); ++i) {
          ga[ia] += g[i] * b[ib];
          if (++ia == na) ia = 0;
          if (++ib == nb) ib = 0;
        }
      }
      if (wants(1)) {
        auto& gb = ctx.gbuf<T>(node->parents[1]);
        size_t ia = 0, ib = 0;
        for (size_t i = 0; i < g.size(); ++i) {
          gb[ib] += g[i] * a[ia];
          if (++ia == na) ia = 0;
          if (++ib == nb) ib = 0;
        }
      }
      return;
    }
    case OpKind::Div: {
      const auto& a = cbuf<T>(*node->parents[0]);
      const auto& b = cbuf<T>(*node->parents[1]);
      const size_t na = a.size() ? a.size() : 1, nb = b.size() ? b.size() : 1;
      if (wants(0)) {
        auto& ga = ctx.gbuf<T>(node->parents[0]);
        size_t ia = 0, ib = 0;
        for (size_t i = 0; i < g.size(); ++i) {
          ga[ia] += g[i] / b[ib];
          if (++ia == na) ia = 0;
          if (++ib == nb) ib = 0;
        }
      }
      if (wants(1)) {
        auto& gb = ctx.gbuf<T>(node->parents[1]);
        size_t ia = 0, ib = 0;
        for (size_t i = 0; i < g.size(); ++i) {
          const T bv = b[ib];
          gb[ib] -= g[i] * a[ia] / (bv * bv);
          if (++ia == na) ia = 0;
          if (++ib == nb) ib = 0;
        }
      }
      return;
    }
    case OpKind::MatMul: {
      const int64_t m = node->parents[0]->shape[0], k = node->parents[0]->shape[1],
                    n = node->parents[1]->shape[1];
      using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
      Eigen::Map<const Mat> G(g.data(), m, n);
      Eigen::Map<const Mat> A(cbuf<T>(*node->parents[0]).data(), m, k);
      Eigen::Map<const Mat> B(cbuf<T>(*node->parents[1]).data(), k, n);
      if (wants(0)) {
        Eigen::Map<Mat> GA(ctx.gbuf<T>(node->parents[0]).data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (wants(1)) {
        Eigen::Map<Mat> GB(ctx.gbuf<T>(node->parents[1]).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
      return;
    }
    case OpKind::Exp: {
      if (!wants(0)) return;
      const auto& y = cbuf<T>(*node);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
      return;
    }
    case OpKind::Log: {
      if (!wants(0)) return;
      const auto& x = cbuf<T>(*node->parents[0]);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
      return;
    }
    case OpKind::Sqrt: {
      if (!wants(0)) return;
      const auto& y = cbuf<T>(*node);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * T(0.5) / y[i];
      return;
    }
    case OpKind::Relu: {
      if (!wants(0)) return;
      const auto& x = cbuf<T>(*node->parents[0]);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      // derivative at exactly 0 is 0 (one-sided subgradient)
      for (size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) gx[i] += g[i];
      return;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      if (!wants(0)) return;
      const auto& parent = node->parents[0];
      const auto out_strides = row_major_strides(node->shape);
      std::vector<bool> reduced(parent->shape.size(), false);
      int64_t rcount = 1;
      for (int64_t a : node->attrs.axes) {
        reduced[static_cast<size_t>(a)] = true;
        rcount *= parent->shape[static_cast<size_t>(a)];
      }
      const T scl = node->op == OpKind::Mean ? static_cast<T>(1.0 / static_cast<double>(rcount))
                                             : T(1);
      std::vector<int64_t> mapped(parent->shape.size(), 0);
      {
        size_t od = 0;
        for (size_t d = 0; d < parent->shape.size(); ++d)
          if (!reduced[d]) mapped[d] = out_strides[od++];
      }
      auto& gx = ctx.gbuf<T>(parent);
      for_each_mapped(parent->shape, mapped, 0,
                      [&](int64_t i, int64_t oi) { gx[i] += g[static_cast<size_t>(oi)] * scl; });
      return;
    }
    case OpKind::Reshape: {
      if (!wants(0)) return;
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      return;
    }
    case OpKind::Transpose: {
      if (!wants(0)) return;
      const auto& perm = node->attrs.axes;
      const auto in_strides = row_major_strides(node->parents[0]->shape);
      std::vector<int64_t> mapped(perm.size());
      for (size_t d = 0; d < perm.size(); ++d)
        mapped[d] = in_strides[static_cast<size_t>(perm[d])];
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for_each_mapped(node->shape, mapped, 0,
                      [&](int64_t i, int64_t src) { gx[src] += g[static_cast<size_t>(i)]; });
      return;
    }
    case OpKind::Slice: {
      if (!wants(0)) return;
      const auto& starts = node->attrs.starts;
      const auto in_strides = row_major_strides(node->parents[0]->shape);
      int64_t offset = 0;
      for (size_t d = 0; d < starts.size(); ++d) offset += starts[d] * in_strides[d];
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      for_each_mapped(node->shape, in_strides, offset,
                      [&](int64_t i, int64_t src) { gx[src] += g[static_cast<size_t>(i)]; });
      return;
    }
    case OpKind::Concat: {
      const int64_t axis = node->attrs.axes[0];
      const int64_t rank = static_cast<int64_t>(node->shape.size());
      int64_t outer = 1, inner = 1;
      for (int64_t d = 0; d < axis; ++d) outer *= node->shape[static_cast<size_t>(d)];
      for (int64_t d = axis + 1; d < rank; ++d) inner *= node->shape[static_cast<size_t>(d)];
      const int64_t total_axis = node->shape[static_cast<size_t>(axis)];
      int64_t axis_off = 0;
      for (size_t pi = 0; pi < node->parents.size(); ++pi) {
        const auto& p = node->parents[pi];
        const int64_t ax = p->shape[static_cast<size_t>(axis)];
        if (p->needs_grad) {
          auto& gx = ctx.gbuf<T>(p);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t a = 0; a < ax; ++a)
              for (int64_t in = 0; in < inner; ++in)
                gx[(o * ax + a) * inner + in] += g[(o * total_axis + axis_off + a) * inner + in];
        }
        axis_off += ax;
      }
      return;
    }
    case OpKind::Softmax: {
      if (!wants(0)) return;
      const auto& y = cbuf<T>(*node);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      int64_t outer, extent, inner;
      axis_split(node->shape, node->attrs.axes[0], outer, extent, inner);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * extent * inner + i;
          T dot = T(0);
          for (int64_t a = 0; a < extent; ++a) dot += g[base + a * inner] * y[base + a * inner];
          for (int64_t a = 0; a < extent; ++a)
            gx[base + a * inner] += y[base + a * inner] * (g[base + a * inner] - dot);
        }
      return;
    }
    case OpKind::L2Norm: {
      if (!wants(0)) return;
      const auto& x = cbuf<T>(*node->parents[0]);
      const auto& y = cbuf<T>(*node);
      auto& gx = ctx.gbuf<T>(node->parents[0]);
      const double eps = node->attrs.eps;
      int64_t outer, extent, inner;
      axis_split(node->shape, node->attrs.axes[0], outer, extent, inner);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * extent * inner + i;
          double nsq = 0;
          for (int64_t a = 0; a < extent; ++a) {
            const double v = static_cast<double>(x[base + a * inner]);
            nsq += v * v;
          }
          const double r = std::sqrt(nsq);
          if (r > eps) {
            T dot = T(0);
            for (int64_t a = 0; a < extent; ++a) dot += g[base + a * inner] * y[base + a * inner];
            const T inv = static_cast<T>(1.0 / r);
            for (int64_t a = 0; a < extent; ++a)
              gx[base + a * inner] += (g[base + a * inner] - y[base + a * inner] * dot) * inv;
          } else {
            const T inv = static_cast<T>(1.0 / eps);
            for (int64_t a = 0; a < extent; ++a) gx[base + a * inner] += g[base + a * inner] * inv;
          }
        }
      return;
    }
    case OpKind::Im2Col: {
      if (!wants(0)) return;
      const auto& p = node->parents[0];
      const int64_t N = p->shape[0], Tt = p->shape[1], H = p->shape[2], W = p->shape[3],
                    C = p->shape[4];
      const auto& a = node->attrs.ints;
      const int64_t kt = a[0], kh = a[1], kw = a[2], st = a[3], sh = a[4], sw = a[5], pt = a[6],
                    ph = a[7], pw = a[8];
      const int64_t To = (Tt + 2 * pt - kt) / st + 1;
      const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
      const int64_t Wo = (W + 2 * pw - kw) / sw + 1;
      auto& gx = ctx.gbuf<T>(p);
      int64_t row = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t to = 0; to < To; ++to)
          for (int64_t ho = 0; ho < Ho; ++ho)
            for (int64_t wo = 0; wo < Wo; ++wo, ++row) {
              const T* src = g.data() + row * kt * kh * kw * C;
              for (int64_t aa = 0; aa < kt; ++aa) {
                const int64_t tsrc = to * st - pt + aa;
                for (int64_t b = 0; b < kh; ++b) {
                  const int64_t hsrc = ho * sh - ph + b;
                  for (int64_t c = 0; c < kw; ++c, src += C) {
                    const int64_t wsrc = wo * sw - pw + c;
                    if (tsrc < 0 || tsrc >= Tt || hsrc < 0 || hsrc >= H || wsrc < 0 || wsrc >= W)
                      continue;
                    T* dst = gx.data() + (((n * Tt + tsrc) * H + hsrc) * W + wsrc) * C;
                    for (int64_t ch = 0; ch < C; ++ch) dst[ch] += src[ch];
                  }
                }
              }
            }
      return;
    }
    case OpKind::TakeRows: {
      if (!wants(0)) return;
      const auto& p = node->parents[0];
      const int64_t rows = p->shape[0];
      const int64_t rest = rows ? p->numel() / rows : 0;
      auto& gx = ctx.gbuf<T>(p);
      for (size_t i = 0; i < node->attrs.ints.size(); ++i) {
        const int64_t r = node->attrs.ints[i];
        for (int64_t j = 0; j < rest; ++j)
          gx[r * rest + j] += g[static_cast<int64_t>(i) * rest + j];
      }
      return;
    }
    case OpKind::LinComb: {
      if (!wants(0)) return;
      const auto& p = node->parents[0];
      const int64_t C = node->shape[0];
      auto& gx = ctx.gbuf<T>(p);
      for (size_t i = 0; i < node->attrs.ints.size(); ++i) {
        const T w = static_cast<T>(node->attrs.floats[i]);
        T* dst = gx.data() + node->attrs.ints[i] * C;
        for (int64_t c = 0; c < C; ++c) dst[c] += w * g[c];
      }
      return;
    }
  }
}

}  // namespace

bool GradMap::contains(const Tensor& leaf) const { return grads_.count(leaf.id()) > 0; }
bool GradMap::touched(const Tensor& leaf) const { return touched_.count(leaf.id()) > 0; }

const Tensor& GradMap::at(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end())
    fail("GradMap: no gradient for leaf '" + leaf.name() + "'");
  return it->second;
}

GradMap backward(const Tensor& loss, std::span<const Tensor> leaves) {
  check_defined("backward", loss);
  if (loss.numel() != 1)
    fail("backward: root must be scalar, got shape " + shape_str(loss.shape()));

  // Post-order DFS for a fixed topological order (deterministic accumulation).
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> seen;
  {
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    TensorImpl* root = const_cast<TensorImpl*>(loss.id());
    if (root->needs_grad) {
      stack.push_back({root, 0});
      seen.insert(root);
      while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
          TensorImpl* next = node->parents[child].get();
          ++child;
          if (next->needs_grad && seen.insert(next).second) stack.push_back({next, 0});
        } else {
          topo.push_back(node);
          stack.pop_back();
        }
      }
    }
  }

  BackCtx ctx;
  if (!topo.empty()) {
    auto root_grad = Tensor::full(loss.shape(), 1.0, loss.dtype());
    ctx.grads.emplace(loss.id(), root_grad);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      TensorImpl* node = *it;
      auto git = ctx.grads.find(node);
      if (git == ctx.grads.end()) continue;  // no gradient flowed here
      if (node->dtype == DType::F32)
        backward_node<float>(node, git->second.impl()->d32, ctx);
      else
        backward_node<double>(node, git->second.impl()->d64, ctx);
    }
  }

  GradMap out;
  for (TensorImpl* node : topo)
    if (node->op == OpKind::Leaf && node->trainable) out.touched_.insert(node);
  for (const Tensor& leaf : leaves) {
    if (!leaf.trainable()) fail("backward: leaf '" + leaf.name() + "' is not marked trainable");
    auto it = ctx.grads.find(leaf.id());
    if (it != ctx.grads.end())
      out.grads_.emplace(leaf.id(), it->second);
    else
      out.grads_.emplace(leaf.id(), Tensor::zeros(leaf.shape(), leaf.dtype()));
  }
  // Also expose gradients of touched trainable leaves not in the requested list.
  for (TensorImpl* node : topo)
    if (node->op == OpKind::Leaf && node->trainable && !out.grads_.count(node)) {
      auto it = ctx.grads.find(node);
      out.grads_.emplace(node, it != ctx.grads.end()
                                   ? it->second
                                   : Tensor::zeros(node->shape, node->dtype));
    }
  return out;
}

GradMap backward(const Tensor& loss, const std::vector<Tensor>& leaves) {
  return backward(loss, std::span<const Tensor>(leaves));
}

}  // namespace constcl
