#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace constcl {

enum class DType : uint8_t { F32 = 1, F64 = 2 };

const char* dtype_name(DType dt);
inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Exp,
  Log,
  Sqrt,
  Sum,
  Mean,
  Reshape,
  Transpose,
  Slice,
  Concat,
  Relu,
  Softmax,
  L2Norm,
  Im2Col,
  TakeRows,
  LinComb,
};

const char* op_name(OpKind kind);

// Per-op attributes. Which fields are read depends on the op:
//   Sum/Mean:   axes (empty = reduce all)
//   Softmax/L2Norm: axes[0], L2Norm also eps
//   Transpose:  axes = permutation
//   Reshape:    shape
//   Slice:      starts/stops per axis
//   Concat:     axes[0]
//   Im2Col:     ints = {kt,kh,kw, st,sh,sw, pt,ph,pw}
//   TakeRows:   ints = row indices
//   LinComb:    ints = flat voxel indices, floats = weights
struct OpAttrs {
  std::vector<int64_t> axes;
  std::vector<int64_t> starts;
  std::vector<int64_t> stops;
  Shape shape;
  double eps = 1e-12;
  std::vector<int64_t> ints;
  std::vector<double> floats;
};

struct TensorImpl;

// Dense row-major n-d array participating in a reverse-mode graph. Copies are
// shallow (shared impl). Data is treated as immutable once the tensor has been
// used as an input to another op; `overwrite_data` is reserved for parameter
// updates between training steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt);
  static Tensor full(Shape shape, double value, DType dt);
  static Tensor scalar(double value, DType dt);
  static Tensor from_f64(Shape shape, std::span<const double> values, DType dt = DType::F64);
  static Tensor from_f32(Shape shape, std::span<const float> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t rank() const;
  int64_t numel() const;
  DType dtype() const;

  double item() const;              // requires numel()==1
  double at(int64_t flat) const;    // value at flat index, widened to double
  std::vector<double> to_f64() const;
  std::span<const float> data_f32() const;
  std::span<const double> data_f64() const;

  Tensor detach() const;            // leaf copy of the data, no graph record
  Tensor astype(DType dt) const;    // leaf copy, converted

  void mark_trainable(std::string name);  // call before using in a graph
  bool trainable() const;
  const std::string& name() const;

  // Parameter update path (leaves only, between steps).
  void overwrite_data(std::span<const double> values) const;
  void overwrite_data_raw(const Tensor& same_dtype_source) const;

  const TensorImpl* id() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Graph-building ops. Binary elementwise ops accept equal shapes or one
// operand whose shape is a suffix of the other's (leading-axis expansion);
// anything else throws std::invalid_argument naming the op and shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<int64_t> axes = {});
Tensor mean(const Tensor& x, std::vector<int64_t> axes = {});
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::vector<int64_t> perm);
Tensor slice(const Tensor& x, std::vector<int64_t> starts, std::vector<int64_t> stops);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
Tensor softmax(const Tensor& x, int64_t axis);
Tensor l2_normalize(const Tensor& x, int64_t axis, double eps = 1e-12);
// input [N,T,H,W,C] -> [N*T'*H'*W', kt*kh*kw*C] patch matrix (zero padded)
Tensor im2col(const Tensor& x, std::span<const int64_t> kernel, std::span<const int64_t> stride,
              std::span<const int64_t> pad);
Tensor take_rows(const Tensor& x, std::span<const int64_t> indices);
// out[c] = sum_i weights[i] * x.flat[indices[i]*C + c], x viewed as [V, C]
Tensor lincomb_rows(const Tensor& x, std::span<const int64_t> indices,
                    std::span<const double> weights, int64_t channels);

Tensor op_apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// scale by a plain constant (mul with a scalar tensor of matching dtype)
Tensor scale(const Tensor& x, double s);

class GradMap {
 public:
  bool contains(const Tensor& leaf) const;
  // true when the leaf participated in the differentiated graph
  bool touched(const Tensor& leaf) const;
  const Tensor& at(const Tensor& leaf) const;
  size_t size() const { return grads_.size(); }

 private:
  friend GradMap backward(const Tensor&, std::span<const Tensor>);
  std::unordered_map<const TensorImpl*, Tensor> grads_;
  std::unordered_set<const TensorImpl*> touched_;
};

// Reverse-mode sweep from a scalar loss. Every tensor in `leaves` gets an
// entry; leaves the graph never reaches map to zero gradients (untouched).
GradMap backward(const Tensor& loss, std::span<const Tensor> leaves);
GradMap backward(const Tensor& loss, const std::vector<Tensor>& leaves);

}  // namespace constcl
