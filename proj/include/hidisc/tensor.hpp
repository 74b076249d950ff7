#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hidisc {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense f32 tensor, row-major. Tensors created by ops on a Tape carry links
// to their inputs and a closure that scatters the output gradient back into
// them. Leaves have no parents; parameters are leaves with requires_grad.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until first accumulation

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;
  int node_id = -1;  // position on the owning tape, -1 for leaves

  // Scalar reductions keep their f64 accumulator alongside the f32 value;
  // grad_check reads it so finite differences are not limited by the final
  // rounding step. Propagated through scale/add of scalars.
  bool has_shadow = false;
  double shadow = 0.0;
  double scalar_value() const { return has_shadow ? shadow : data[0]; }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  bool is_scalar() const { return size() == 1; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() { grad.clear(); }

  static TensorPtr leaf(Shape shape, std::vector<float> data,
                        bool requires_grad = false);
  static TensorPtr zeros(Shape shape, bool requires_grad = false);
  static TensorPtr full(Shape shape, float value, bool requires_grad = false);
  static TensorPtr scalar(float value);
};

// Define-by-run gradient tape. Records op outputs in creation order; the
// backward pass walks them once in reverse. A tape is single use.
class Tape {
 public:
  TensorPtr record(TensorPtr t);

  // Populates grad for every requires_grad tensor reachable from loss.
  // loss must be scalar; the tape is consumed afterwards.
  void backward(const TensorPtr& loss);

  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<TensorPtr> nodes_;
  bool consumed_ = false;
};

// ---- Primitives. Output requires_grad iff any input does. Every forward
// result is checked finite; non-finite values raise std::runtime_error.

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
// Adds bias (shape [n]) to every row of x (shape [m, n]).
TensorPtr add_bias(Tape& tape, const TensorPtr& x, const TensorPtr& bias);
// Multiplies column j of x (shape [m, n]) by s[j] (shape [n]).
TensorPtr col_scale(Tape& tape, const TensorPtr& x, const TensorPtr& s);
TensorPtr scale(Tape& tape, const TensorPtr& x, float s);
TensorPtr relu(Tape& tape, const TensorPtr& x);
TensorPtr log_op(Tape& tape, const TensorPtr& x);
TensorPtr exp_op(Tape& tape, const TensorPtr& x);
TensorPtr reduce_sum(Tape& tape, const TensorPtr& x);
TensorPtr reduce_mean(Tape& tape, const TensorPtr& x);
// Row-wise softmax over a [m, n] tensor, log-sum-exp stabilized.
TensorPtr softmax_cross_rows(Tape& tape, const TensorPtr& x);
// Unit-normalizes each row of a [n, d] tensor. Rows with norm <= eps raise.
TensorPtr l2_normalize(Tape& tape, const TensorPtr& x, double eps = 1e-12);
// Same data, new shape (numel must agree); gradient passes through.
TensorPtr reshape_view(Tape& tape, const TensorPtr& x, Shape shape);
// Patch extraction for a [b, h, w, c] image batch: output row t = flattened
// kh*kw*c window at output position t, stride/pad as given. Feeding the
// result to matmul with a [kh*kw*c, oc] weight is a convolution.
TensorPtr im2col(Tape& tape, const TensorPtr& x, int b, int h, int w, int c,
                 int kh, int kw, int stride, int pad);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for the scalar function f at x, using step h.
double grad_check(
    const std::function<TensorPtr(Tape&, const TensorPtr&)>& f,
    const TensorPtr& x, double h = 1e-3);

}  // namespace hidisc
