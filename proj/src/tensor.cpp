#include "hidisc/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace hidisc {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

TensorPtr Tensor::leaf(Shape shape, std::vector<float> data, bool requires_grad) {
  auto n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

TensorPtr Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data.assign(static_cast<std::size_t>(n), value);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::scalar(float value) { return leaf({1}, {value}); }

TensorPtr Tape::record(TensorPtr t) {
  if (consumed_) throw std::runtime_error("recording onto a consumed tape");
  t->node_id = static_cast<int>(nodes_.size());
  nodes_.push_back(t);
  return t;
}

void Tape::backward(const TensorPtr& loss) {
  if (consumed_) throw std::runtime_error("backward on a consumed tape");
  if (!loss->is_scalar())
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss->shape));
  if (loss->node_id < 0)
    throw std::invalid_argument("backward requires a tensor recorded on this tape");
  consumed_ = true;
  loss->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Tensor& node = **it;
    if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
  }
}

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (float v : t.data)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op) + " produced a non-finite value");
}

TensorPtr make_node(Tape& tape, Shape shape, std::vector<float> data,
                    std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backward_fn, const char* op) {
  auto t = Tensor::leaf(std::move(shape), std::move(data));
  check_finite(*t, op);
  for (const auto& p : parents)
    if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) {
    t->parents = std::move(parents);
    t->backward_fn = std::move(backward_fn);
  }
  return tape.record(std::move(t));
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->shape) + " vs " + shape_str(b->shape));
}

void require_matrix(const TensorPtr& x, const char* op) {
  if (x->shape.size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(x->shape));
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a->shape[1] != b->shape[0])
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a->shape) + " vs " + shape_str(b->shape));
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  double last_acc = 0.0;
  for (int i = 0; i < m; ++i) {
    const float* arow = a->data.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t)
        acc += static_cast<double>(arow[t]) * b->data[static_cast<std::size_t>(t) * n + j];
      out[static_cast<std::size_t>(i) * n + j] = static_cast<float>(acc);
      last_acc = acc;
    }
  }
  auto node = make_node(
      tape, {m, n}, std::move(out), {a, b},
      [m, k, n](Tensor& node) {
        const auto& a = node.parents[0];
        const auto& b = node.parents[1];
        if (a->requires_grad) {
          a->ensure_grad();
          // dA = dC . B^T
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j)
                acc += static_cast<double>(node.grad[static_cast<std::size_t>(i) * n + j]) *
                       b->data[static_cast<std::size_t>(t) * n + j];
              a->grad[static_cast<std::size_t>(i) * k + t] += static_cast<float>(acc);
            }
        }
        if (b->requires_grad) {
          b->ensure_grad();
          // dB = A^T . dC
          for (int t = 0; t < k; ++t)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i)
                acc += static_cast<double>(a->data[static_cast<std::size_t>(i) * k + t]) *
                       node.grad[static_cast<std::size_t>(i) * n + j];
              b->grad[static_cast<std::size_t>(t) * n + j] += static_cast<float>(acc);
            }
        }
      },
      "matmul");
  if (m == 1 && n == 1) {
    node->has_shadow = true;
    node->shadow = last_acc;
  }
  return node;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
  auto node = make_node(
      tape, a->shape, std::move(out), {a, b},
      [](Tensor& node) {
        for (auto& p : node.parents)
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i];
          }
      },
      "add");
  if (node->is_scalar()) {
    node->has_shadow = true;
    node->shadow = a->scalar_value() + b->scalar_value();
  }
  return node;
}

TensorPtr add_bias(Tape& tape, const TensorPtr& x, const TensorPtr& bias) {
  require_matrix(x, "add_bias");
  if (bias->shape.size() != 1 || bias->shape[0] != x->shape[1])
    throw std::invalid_argument("add_bias: bias shape " + shape_str(bias->shape) +
                                " does not match matrix " + shape_str(x->shape));
  const int m = x->shape[0], n = x->shape[1];
  std::vector<float> out(x->data.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          x->data[static_cast<std::size_t>(i) * n + j] + bias->data[j];
  return make_node(
      tape, x->shape, std::move(out), {x, bias},
      [m, n](Tensor& node) {
        const auto& x = node.parents[0];
        const auto& bias = node.parents[1];
        if (x->requires_grad) {
          x->ensure_grad();
          for (std::size_t i = 0; i < node.grad.size(); ++i) x->grad[i] += node.grad[i];
        }
        if (bias->requires_grad) {
          bias->ensure_grad();
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += node.grad[static_cast<std::size_t>(i) * n + j];
            bias->grad[j] += static_cast<float>(acc);
          }
        }
      },
      "add_bias");
}

TensorPtr col_scale(Tape& tape, const TensorPtr& x, const TensorPtr& s) {
  require_matrix(x, "col_scale");
  if (s->shape.size() != 1 || s->shape[0] != x->shape[1])
    throw std::invalid_argument("col_scale: scale shape " + shape_str(s->shape) +
                                " does not match matrix " + shape_str(x->shape));
  const int m = x->shape[0], n = x->shape[1];
  std::vector<float> out(x->data.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          x->data[static_cast<std::size_t>(i) * n + j] * s->data[j];
  return make_node(
      tape, x->shape, std::move(out), {x, s},
      [m, n](Tensor& node) {
        const auto& x = node.parents[0];
        const auto& s = node.parents[1];
        if (x->requires_grad) {
          x->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              x->grad[static_cast<std::size_t>(i) * n + j] +=
                  node.grad[static_cast<std::size_t>(i) * n + j] * s->data[j];
        }
        if (s->requires_grad) {
          s->ensure_grad();
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
              acc += static_cast<double>(node.grad[static_cast<std::size_t>(i) * n + j]) *
                     x->data[static_cast<std::size_t>(i) * n + j];
            s->grad[j] += static_cast<float>(acc);
          }
        }
      },
      "col_scale");
}

TensorPtr scale(Tape& tape, const TensorPtr& x, float s) {
  std::vector<float> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] * s;
  auto node = make_node(
      tape, x->shape, std::move(out), {x},
      [s](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i] * s;
      },
      "scale");
  if (node->is_scalar()) {
    node->has_shadow = true;
    node->shadow = x->scalar_value() * static_cast<double>(s);
  }
  return node;
}

TensorPtr relu(Tape& tape, const TensorPtr& x) {
  std::vector<float> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->data[i] > 0.0f ? x->data[i] : 0.0f;
  return make_node(
      tape, x->shape, std::move(out), {x},
      [](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          if (p->data[i] > 0.0f) p->grad[i] += node.grad[i];
      },
      "relu");
}

TensorPtr log_op(Tape& tape, const TensorPtr& x) {
  std::vector<float> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x->data[i] <= 0.0f)
      throw std::domain_error("log of non-positive value " + std::to_string(x->data[i]));
    out[i] = std::log(x->data[i]);
  }
  return make_node(
      tape, x->shape, std::move(out), {x},
      [](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i] / p->data[i];
      },
      "log");
}

TensorPtr exp_op(Tape& tape, const TensorPtr& x) {
  std::vector<float> out(x->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x->data[i]);
  return make_node(
      tape, x->shape, std::move(out), {x},
      [](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          p->grad[i] += node.grad[i] * node.data[i];
      },
      "exp");
}

TensorPtr reduce_sum(Tape& tape, const TensorPtr& x) {
  double acc = 0.0;
  for (float v : x->data) acc += v;
  auto node = make_node(
      tape, {1}, {static_cast<float>(acc)}, {x},
      [](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += node.grad[0];
      },
      "reduce_sum");
  node->has_shadow = true;
  node->shadow = acc;
  return node;
}

TensorPtr reduce_mean(Tape& tape, const TensorPtr& x) {
  double acc = 0.0;
  for (float v : x->data) acc += v;
  const double inv = 1.0 / static_cast<double>(x->data.size());
  auto node = make_node(
      tape, {1}, {static_cast<float>(acc * inv)}, {x},
      [inv](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const float g = static_cast<float>(node.grad[0] * inv);
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
      },
      "reduce_mean");
  node->has_shadow = true;
  node->shadow = acc * inv;
  return node;
}

TensorPtr softmax_cross_rows(Tape& tape, const TensorPtr& x) {
  require_matrix(x, "softmax_cross_rows");
  const int m = x->shape[0], n = x->shape[1];
  std::vector<float> out(x->data.size());
  for (int i = 0; i < m; ++i) {
    const float* row = x->data.data() + static_cast<std::size_t>(i) * n;
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] =
          static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / denom);
  }
  return make_node(
      tape, x->shape, std::move(out), {x},
      [m, n](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const float* y = node.data.data() + static_cast<std::size_t>(i) * n;
          const float* gy = node.grad.data() + static_cast<std::size_t>(i) * n;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
          for (int j = 0; j < n; ++j)
            p->grad[static_cast<std::size_t>(i) * n + j] +=
                static_cast<float>(y[j] * (gy[j] - dot));
        }
      },
      "softmax_cross_rows");
}

TensorPtr l2_normalize(Tape& tape, const TensorPtr& x, double eps) {
  require_matrix(x, "l2_normalize");
  const int m = x->shape[0], n = x->shape[1];
  std::vector<float> out(x->data.size());
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const float* row = x->data.data() + static_cast<std::size_t>(i) * n;
    double sq = 0.0;
    for (int j = 0; j < n; ++j) sq += static_cast<double>(row[j]) * row[j];
    double norm = std::sqrt(sq);
    if (norm <= eps)
      throw std::domain_error("l2_normalize: degenerate row " + std::to_string(i) +
                              " with norm " + std::to_string(norm));
    norms[static_cast<std::size_t>(i)] = norm;
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(i) * n + j] = static_cast<float>(row[j] / norm);
  }
  return make_node(
      tape, x->shape, std::move(out), {x},
      [m, n, norms](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        // Per row: dx = (I - y y^T) / ||x|| . dy
        for (int i = 0; i < m; ++i) {
          const float* y = node.data.data() + static_cast<std::size_t>(i) * n;
          const float* gy = node.grad.data() + static_cast<std::size_t>(i) * n;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
          const double inv_norm = 1.0 / norms[static_cast<std::size_t>(i)];
          for (int j = 0; j < n; ++j)
            p->grad[static_cast<std::size_t>(i) * n + j] +=
                static_cast<float>((gy[j] - dot * y[j]) * inv_norm);
        }
      },
      "l2_normalize");
}

TensorPtr reshape_view(Tape& tape, const TensorPtr& x, Shape shape) {
  if (shape_numel(shape) != x->size())
    throw std::invalid_argument("reshape_view: cannot reshape " + shape_str(x->shape) +
                                " to " + shape_str(shape));
  return make_node(
      tape, std::move(shape), x->data, {x},
      [](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i];
      },
      "reshape_view");
}

TensorPtr im2col(Tape& tape, const TensorPtr& x, int b, int h, int w, int c,
                 int kh, int kw, int stride, int pad) {
  if (x->size() != static_cast<std::int64_t>(b) * h * w * c)
    throw std::invalid_argument("im2col: tensor of shape " + shape_str(x->shape) +
                                " is not [b,h,w,c] = [" + std::to_string(b) + "," +
                                std::to_string(h) + "," + std::to_string(w) + "," +
                                std::to_string(c) + "]");
  if (stride <= 0 || kh <= 0 || kw <= 0) throw std::invalid_argument("im2col: bad kernel/stride");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("im2col: kernel larger than padded input");
  const int cols = kh * kw * c;
  std::vector<float> out(static_cast<std::size_t>(b) * oh * ow * cols, 0.0f);
  auto in_at = [&](int bi, int y, int xx, int ch) -> std::size_t {
    return ((static_cast<std::size_t>(bi) * h + y) * w + xx) * c + ch;
  };
  std::size_t r = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox, ++r) {
        float* dst = out.data() + r * cols;
        int q = 0;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            for (int ch = 0; ch < c; ++ch, ++q) {
              int y = oy * stride - pad + ky;
              int xx = ox * stride - pad + kx;
              if (y >= 0 && y < h && xx >= 0 && xx < w) dst[q] = x->data[in_at(bi, y, xx, ch)];
            }
      }
  return make_node(
      tape, {b * oh * ow, cols}, std::move(out), {x},
      [b, h, w, c, kh, kw, stride, pad, oh, ow, cols](Tensor& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        std::size_t r = 0;
        for (int bi = 0; bi < b; ++bi)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox, ++r) {
              const float* g = node.grad.data() + r * cols;
              int q = 0;
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx)
                  for (int ch = 0; ch < c; ++ch, ++q) {
                    int y = oy * stride - pad + ky;
                    int xx = ox * stride - pad + kx;
                    if (y >= 0 && y < h && xx >= 0 && xx < w)
                      p->grad[((static_cast<std::size_t>(bi) * h + y) * w + xx) * c + ch] += g[q];
                  }
            }
      },
      "im2col");
}

double grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f,
                  const TensorPtr& x, double h) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  auto probe = Tensor::leaf(x->shape, x->data, true);
  Tape tape;
  auto loss = f(tape, probe);
  if (!loss->is_scalar())
    throw std::invalid_argument("grad_check: f must return a scalar");
  tape.backward(loss);
  std::vector<float> analytic = probe->grad.empty()
                                    ? std::vector<float>(probe->data.size(), 0.0f)
                                    : probe->grad;
  auto eval = [&](const std::vector<float>& point) {
    Tape t;
    auto p = Tensor::leaf(x->shape, point, false);
    auto out = f(t, p);
    double v = out->scalar_value();
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite probe value");
    return v;
  };
  double max_rel = 0.0;
  std::vector<float> point = x->data;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const float orig = point[i];
    const float hi = static_cast<float>(orig + h);
    const float lo = static_cast<float>(orig - h);
    point[i] = hi;
    double up = eval(point);
    point[i] = lo;
    double down = eval(point);
    point[i] = orig;
    // divide by the step actually realized in f32, not the nominal one
    double numeric = (up - down) / (static_cast<double>(hi) - lo);
    double a = analytic[i];
    double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace hidisc
