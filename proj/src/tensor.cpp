#include "cclm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cclm {

namespace {

std::string g_backward_fault;
std::atomic<uint32_t> g_next_tape_id{1};

struct AxisSpan {
  int64_t outer;
  int64_t n;
  int64_t inner;
};

AxisSpan axis_span(const Shape& shape, int axis) {
  AxisSpan s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class S>
std::vector<S>& ensure_grad(std::vector<std::vector<S>>& grads, int node, int64_t numel) {
  auto& g = grads[static_cast<size_t>(node)];
  if (g.empty()) g.assign(static_cast<size_t>(numel), S(0));
  return g;
}

[[noreturn]] void fail(const char* op, const std::string& what) {
  throw std::runtime_error(std::string(op) + ": " + what);
}

void check_axis(const char* op, const Shape& shape, int axis) {
  if (axis < 0 || static_cast<size_t>(axis) >= shape.size()) {
    fail(op, "invalid axis " + std::to_string(axis) + " for shape " + shape_str(shape));
  }
}

void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::runtime_error("tensor shape has nonpositive extent " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void set_backward_fault(const std::string& op_name) { g_backward_fault = op_name; }
void clear_backward_fault() { g_backward_fault.clear(); }

// ---------------------------------------------------------------- TensorT

template <class S>
S TensorT<S>::at(std::initializer_list<int> idx) const {
  int64_t flat = 0;
  size_t k = 0;
  for (int i : idx) {
    flat = flat * shape[k] + i;
    ++k;
  }
  return (*data)[static_cast<size_t>(flat)];
}

template <class S>
TensorT<S> TensorT<S>::from(Shape shape, std::vector<S> values) {
  const int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw std::runtime_error("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  TensorT t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<S>>(std::move(values));
  return t;
}

template <class S>
TensorT<S> TensorT<S>::zeros(Shape shape) {
  return full(std::move(shape), S(0));
}

template <class S>
TensorT<S> TensorT<S>::full(Shape shape, S v) {
  const int64_t n = shape_numel(shape);
  TensorT t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<S>>(static_cast<size_t>(n), v);
  return t;
}

template <class S>
const TensorT<S>& GradMapT<S>::at(int node) const {
  auto it = grads_.find(node);
  if (it == grads_.end()) {
    throw std::out_of_range("GradMap: no gradient recorded for node " + std::to_string(node));
  }
  return it->second;
}

// ------------------------------------------------------------------ TapeT

template <class S>
TapeT<S>::TapeT() : id_(g_next_tape_id.fetch_add(1)) {}

template <class S>
void TapeT<S>::check_same_tape(const char* op, const Tensor& t) const {
  if (t.requires_grad && t.node < 0) {
    fail(op, "input requires grad but is not registered on a tape");
  }
  if (t.node >= 0 && t.tape_id != id_) {
    fail(op, "input belongs to a different tape");
  }
}

template <class S>
TensorT<S> TapeT<S>::make_output(const char* op, Shape shape, bool any_grad) {
  Tensor out = Tensor::zeros(std::move(shape));
  if (any_grad) {
    out.requires_grad = true;
    out.node = static_cast<int>(nodes_.size());
    out.tape_id = id_;
    Node n;
    n.op = op;
    n.out_shape = out.shape;
    n.out_numel = out.numel();
    nodes_.push_back(std::move(n));
  }
  return out;
}

template <class S>
void TapeT<S>::set_backward(Tensor& out, const char* op,
                            std::function<void(const std::vector<S>&, std::vector<std::vector<S>>&)> fn) {
  if (out.node < 0) return;
  if (!g_backward_fault.empty() && g_backward_fault == op) {
    auto inner = std::move(fn);
    fn = [inner](const std::vector<S>& gout, std::vector<std::vector<S>>& grads) {
      std::vector<S> corrupted(gout);
      for (auto& v : corrupted) v = v * S(1.5) + S(0.125);
      inner(corrupted, grads);
    };
  }
  nodes_[static_cast<size_t>(out.node)].backward = std::move(fn);
}

template <class S>
TensorT<S> TapeT<S>::leaf(Tensor value) {
  if (!value.defined()) throw std::runtime_error("leaf: undefined tensor");
  value.requires_grad = true;
  value.node = static_cast<int>(nodes_.size());
  value.tape_id = id_;
  Node n;
  n.op = "leaf";
  n.out_shape = value.shape;
  n.out_numel = value.numel();
  nodes_.push_back(std::move(n));
  return value;
}

template <class S>
TensorT<S> TapeT<S>::leaf(Shape shape, std::shared_ptr<std::vector<S>> data) {
  if (!data || shape_numel(shape) != static_cast<int64_t>(data->size())) {
    throw std::runtime_error("leaf: data does not fill shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(data);
  return leaf(std::move(t));
}

// ---- elementwise ----

template <class S>
TensorT<S> TapeT<S>::add(const Tensor& a, const Tensor& b) {
  check_same_tape("add", a);
  check_same_tape("add", b);
  check_same_shape("add", a.shape, b.shape);
  Tensor out = make_output("add", a.shape, a.node >= 0 || b.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  const int an = a.node, bn = b.node;
  set_backward(out, "add", [an, bn, n](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, n);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    }
    if (bn >= 0) {
      auto& gb = ensure_grad(grads, bn, n);
      for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::sub(const Tensor& a, const Tensor& b) {
  check_same_tape("sub", a);
  check_same_tape("sub", b);
  check_same_shape("sub", a.shape, b.shape);
  Tensor out = make_output("sub", a.shape, a.node >= 0 || b.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  const int an = a.node, bn = b.node;
  set_backward(out, "sub", [an, bn, n](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, n);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    }
    if (bn >= 0) {
      auto& gb = ensure_grad(grads, bn, n);
      for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] -= g[static_cast<size_t>(i)];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::mul(const Tensor& a, const Tensor& b) {
  check_same_tape("mul", a);
  check_same_tape("mul", b);
  check_same_shape("mul", a.shape, b.shape);
  Tensor out = make_output("mul", a.shape, a.node >= 0 || b.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  const int an = a.node, bn = b.node;
  auto da = a.data, db = b.data;
  set_backward(out, "mul", [an, bn, n, da, db](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, n);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*db)[static_cast<size_t>(i)];
    }
    if (bn >= 0) {
      auto& gb = ensure_grad(grads, bn, n);
      for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*da)[static_cast<size_t>(i)];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::scale(const Tensor& a, S c) {
  check_same_tape("scale", a);
  Tensor out = make_output("scale", a.shape, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  const int an = a.node;
  set_backward(out, "scale", [an, n, c](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * c;
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::mul_scalar(const Tensor& a, const Tensor& s) {
  check_same_tape("mul_scalar", a);
  check_same_tape("mul_scalar", s);
  if (s.numel() != 1) fail("mul_scalar", "scalar operand has shape " + shape_str(s.shape));
  Tensor out = make_output("mul_scalar", a.shape, a.node >= 0 || s.node >= 0);
  const int64_t n = a.numel();
  const S c = s.value();
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  const int an = a.node, sn = s.node;
  auto da = a.data;
  set_backward(out, "mul_scalar", [an, sn, n, c, da](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, n);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * c;
    }
    if (sn >= 0) {
      auto& gs = ensure_grad(grads, sn, 1);
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i)
        acc += static_cast<double>(g[static_cast<size_t>(i)]) * static_cast<double>((*da)[static_cast<size_t>(i)]);
      gs[0] += static_cast<S>(acc);
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::add_bias(const Tensor& a, const Tensor& bias) {
  check_same_tape("add_bias", a);
  check_same_tape("add_bias", bias);
  if (a.shape.size() != 2 || bias.shape.size() != 1 || bias.shape[0] != a.shape[1]) {
    fail("add_bias", "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(bias.shape));
  }
  Tensor out = make_output("add_bias", a.shape, a.node >= 0 || bias.node >= 0);
  const int64_t rows = a.shape[0], cols = a.shape[1];
  const S* pa = a.ptr();
  const S* pb = bias.ptr();
  S* po = out.mut();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) po[r * cols + c] = pa[r * cols + c] + pb[c];
  const int an = a.node, bn = bias.node;
  set_backward(out, "add_bias", [an, bn, rows, cols](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, rows * cols);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bn >= 0) {
      auto& gb = ensure_grad(grads, bn, cols);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) gb[static_cast<size_t>(c)] += g[static_cast<size_t>(r * cols + c)];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::exp(const Tensor& a) {
  check_same_tape("exp", a);
  Tensor out = make_output("exp", a.shape, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  const int an = a.node;
  auto dout = out.data;
  set_backward(out, "exp", [an, n, dout](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*dout)[static_cast<size_t>(i)];
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::log(const Tensor& a) {
  check_same_tape("log", a);
  Tensor out = make_output("log", a.shape, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  const int an = a.node;
  auto da = a.data;
  set_backward(out, "log", [an, n, da](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] / (*da)[static_cast<size_t>(i)];
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::gelu(const Tensor& a) {
  check_same_tape("gelu", a);
  Tensor out = make_output("gelu", a.shape, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.mut();
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c3 = 0.044715;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(pa[i]);
    const double t = std::tanh(k * (x + c3 * x * x * x));
    po[i] = static_cast<S>(0.5 * x * (1.0 + t));
  }
  const int an = a.node;
  auto da = a.data;
  set_backward(out, "gelu", [an, n, da](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) {
      const double x = static_cast<double>((*da)[static_cast<size_t>(i)]);
      const double inner = k * (x + c3 * x * x * x);
      const double t = std::tanh(inner);
      const double dinner = k * (1.0 + 3.0 * c3 * x * x);
      const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
      ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * static_cast<S>(dy);
    }
  });
  return out;
}

// ---- shape ----

template <class S>
TensorT<S> TapeT<S>::reshape(const Tensor& a, Shape new_shape) {
  check_same_tape("reshape", a);
  if (shape_numel(new_shape) != a.numel()) {
    fail("reshape", "cannot reshape " + shape_str(a.shape) + " to " + shape_str(new_shape));
  }
  Tensor out = make_output("reshape", new_shape, a.node >= 0);
  *out.data = *a.data;
  const int an = a.node;
  const int64_t n = a.numel();
  set_backward(out, "reshape", [an, n](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::transpose(const Tensor& a) {
  check_same_tape("transpose", a);
  if (a.shape.size() != 2) fail("transpose", "expected 2-D input, got " + shape_str(a.shape));
  const int64_t rows = a.shape[0], cols = a.shape[1];
  Tensor out = make_output("transpose", {a.shape[1], a.shape[0]}, a.node >= 0);
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) po[c * rows + r] = pa[r * cols + c];
  const int an = a.node;
  set_backward(out, "transpose", [an, rows, cols](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, rows * cols);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) ga[static_cast<size_t>(r * cols + c)] += g[static_cast<size_t>(c * rows + r)];
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const Shape& base = parts[0].shape;
  check_axis("concat", base, axis);
  bool any_grad = false;
  int total_axis = 0;
  for (const auto& p : parts) {
    check_same_tape("concat", p);
    if (p.shape.size() != base.size()) {
      fail("concat", "rank mismatch " + shape_str(base) + " vs " + shape_str(p.shape));
    }
    for (size_t i = 0; i < base.size(); ++i) {
      if (static_cast<int>(i) != axis && p.shape[i] != base[i]) {
        fail("concat", "shape mismatch " + shape_str(base) + " vs " + shape_str(p.shape));
      }
    }
    total_axis += p.shape[static_cast<size_t>(axis)];
    any_grad = any_grad || p.node >= 0;
  }
  Shape out_shape = base;
  out_shape[static_cast<size_t>(axis)] = total_axis;
  Tensor out = make_output("concat", out_shape, any_grad);
  const AxisSpan span = axis_span(out_shape, axis);
  S* po = out.mut();

  struct PartInfo {
    int node;
    int64_t n_axis;
    int64_t offset;
    int64_t numel;
  };
  std::vector<PartInfo> infos;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t pn = p.shape[static_cast<size_t>(axis)];
    const S* pp = p.ptr();
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t a2 = 0; a2 < pn; ++a2) {
        const S* src = pp + (o * pn + a2) * span.inner;
        S* dst = po + (o * span.n + offset + a2) * span.inner;
        std::copy(src, src + span.inner, dst);
      }
    }
    infos.push_back({p.node, pn, offset, p.numel()});
    offset += pn;
  }
  set_backward(out, "concat", [infos, span](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    for (const auto& info : infos) {
      if (info.node < 0) continue;
      auto& gp = ensure_grad(grads, info.node, info.numel);
      for (int64_t o = 0; o < span.outer; ++o) {
        for (int64_t a2 = 0; a2 < info.n_axis; ++a2) {
          const S* src = g.data() + (o * span.n + info.offset + a2) * span.inner;
          S* dst = gp.data() + (o * info.n_axis + a2) * span.inner;
          for (int64_t i = 0; i < span.inner; ++i) dst[i] += src[i];
        }
      }
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::slice(const Tensor& a, int axis, int start, int len) {
  check_same_tape("slice", a);
  check_axis("slice", a.shape, axis);
  const int extent = a.shape[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > extent) {
    fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of bounds for axis " + std::to_string(axis) + " of " + shape_str(a.shape));
  }
  Shape out_shape = a.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out = make_output("slice", out_shape, a.node >= 0);
  const AxisSpan span = axis_span(a.shape, axis);
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t o = 0; o < span.outer; ++o) {
    for (int64_t a2 = 0; a2 < len; ++a2) {
      const S* src = pa + (o * span.n + start + a2) * span.inner;
      std::copy(src, src + span.inner, po + (o * len + a2) * span.inner);
    }
  }
  const int an = a.node;
  const int64_t numel = a.numel();
  set_backward(out, "slice", [an, span, start, len, numel](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, numel);
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t a2 = 0; a2 < len; ++a2) {
        const S* src = g.data() + (o * len + a2) * span.inner;
        S* dst = ga.data() + (o * span.n + start + a2) * span.inner;
        for (int64_t i = 0; i < span.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

// ---- linear algebra ----

template <class S>
TensorT<S> TapeT<S>::matmul(const Tensor& a, const Tensor& b) {
  check_same_tape("matmul", a);
  check_same_tape("matmul", b);
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    fail("matmul", "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = make_output("matmul", {a.shape[0], b.shape[1]}, a.node >= 0 || b.node >= 0);
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < m; ++i) {
    S* orow = po + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S av = pa[i * k + kk];
      const S* brow = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const int an = a.node, bn = b.node;
  auto da = a.data, db = b.data;
  set_backward(out, "matmul", [an, bn, m, k, n, da, db](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    if (an >= 0) {
      auto& ga = ensure_grad(grads, an, m * k);
      const S* pb2 = db->data();
      for (int64_t i = 0; i < m; ++i) {
        const S* grow = g.data() + i * n;
        S* garow = ga.data() + i * k;
        for (int64_t j = 0; j < n; ++j) {
          const S gv = grow[j];
          const S* bcol = pb2 + j;  // column j, stride n
          for (int64_t kk = 0; kk < k; ++kk) garow[kk] += gv * bcol[kk * n];
        }
      }
    }
    if (bn >= 0) {
      auto& gb = ensure_grad(grads, bn, k * n);
      const S* pa2 = da->data();
      for (int64_t i = 0; i < m; ++i) {
        const S* grow = g.data() + i * n;
        const S* arow = pa2 + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const S av = arow[kk];
          S* gbrow = gb.data() + kk * n;
          for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

// ---- reductions ----

template <class S>
TensorT<S> TapeT<S>::sum(const Tensor& a) {
  check_same_tape("sum", a);
  Tensor out = make_output("sum", {1}, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(pa[i]);
  out.mut()[0] = static_cast<S>(acc);
  const int an = a.node;
  set_backward(out, "sum", [an, n](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[0];
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::mean(const Tensor& a) {
  check_same_tape("mean", a);
  Tensor out = make_output("mean", {1}, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(pa[i]);
  out.mut()[0] = static_cast<S>(acc / static_cast<double>(n));
  const int an = a.node;
  set_backward(out, "mean", [an, n](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    const S gv = g[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += gv;
  });
  return out;
}

// ---- axis ops ----

template <class S>
TensorT<S> TapeT<S>::softmax(const Tensor& a, int axis) {
  check_same_tape("softmax", a);
  check_axis("softmax", a.shape, axis);
  Tensor out = make_output("softmax", a.shape, a.node >= 0);
  const AxisSpan span = axis_span(a.shape, axis);
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t o = 0; o < span.outer; ++o) {
    for (int64_t i = 0; i < span.inner; ++i) {
      const int64_t base = o * span.n * span.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < span.n; ++j) mx = std::max(mx, static_cast<double>(pa[base + j * span.inner]));
      double denom = 0.0;
      for (int64_t j = 0; j < span.n; ++j) denom += std::exp(static_cast<double>(pa[base + j * span.inner]) - mx);
      for (int64_t j = 0; j < span.n; ++j) {
        po[base + j * span.inner] = static_cast<S>(std::exp(static_cast<double>(pa[base + j * span.inner]) - mx) / denom);
      }
    }
  }
  const int an = a.node;
  auto dout = out.data;
  set_backward(out, "softmax", [an, span, dout](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, span.outer * span.n * span.inner);
    const S* p = dout->data();
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t i = 0; i < span.inner; ++i) {
        const int64_t base = o * span.n * span.inner + i;
        double dot = 0.0;
        for (int64_t j = 0; j < span.n; ++j) {
          const int64_t ix = base + j * span.inner;
          dot += static_cast<double>(g[static_cast<size_t>(ix)]) * static_cast<double>(p[ix]);
        }
        for (int64_t j = 0; j < span.n; ++j) {
          const int64_t ix = base + j * span.inner;
          ga[static_cast<size_t>(ix)] += p[ix] * (g[static_cast<size_t>(ix)] - static_cast<S>(dot));
        }
      }
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::layer_norm(const Tensor& a, int axis, S eps, const Tensor& gamma, const Tensor& beta) {
  check_same_tape("layer_norm", a);
  check_axis("layer_norm", a.shape, axis);
  const AxisSpan span = axis_span(a.shape, axis);
  const bool affine = gamma.defined() || beta.defined();
  if (affine && gamma.defined() != beta.defined()) {
    fail("layer_norm", "gamma and beta must both be given or both omitted");
  }
  if (affine) {
    check_same_tape("layer_norm", gamma);
    check_same_tape("layer_norm", beta);
    if (gamma.shape != Shape{a.shape[static_cast<size_t>(axis)]} || beta.shape != gamma.shape) {
      fail("layer_norm", "affine shape mismatch " + shape_str(gamma.shape) + " vs axis extent " +
                             std::to_string(a.shape[static_cast<size_t>(axis)]));
    }
  }
  const bool any_grad = a.node >= 0 || (affine && (gamma.node >= 0 || beta.node >= 0));
  Tensor out = make_output("layer_norm", a.shape, any_grad);
  const S* pa = a.ptr();
  const S* pg = affine ? gamma.ptr() : nullptr;
  const S* pbeta = affine ? beta.ptr() : nullptr;
  S* po = out.mut();
  const int64_t slices = span.outer * span.inner;
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(slices) * 2);  // mean, rstd
  int64_t sidx = 0;
  for (int64_t o = 0; o < span.outer; ++o) {
    for (int64_t i = 0; i < span.inner; ++i, ++sidx) {
      const int64_t base = o * span.n * span.inner + i;
      double m = 0.0;
      for (int64_t j = 0; j < span.n; ++j) m += static_cast<double>(pa[base + j * span.inner]);
      m /= static_cast<double>(span.n);
      double v = 0.0;
      for (int64_t j = 0; j < span.n; ++j) {
        const double d = static_cast<double>(pa[base + j * span.inner]) - m;
        v += d * d;
      }
      v /= static_cast<double>(span.n);
      const double rstd = 1.0 / std::sqrt(v + static_cast<double>(eps));
      (*stats)[static_cast<size_t>(sidx) * 2] = m;
      (*stats)[static_cast<size_t>(sidx) * 2 + 1] = rstd;
      for (int64_t j = 0; j < span.n; ++j) {
        const double xhat = (static_cast<double>(pa[base + j * span.inner]) - m) * rstd;
        double y = xhat;
        if (affine) y = xhat * static_cast<double>(pg[j]) + static_cast<double>(pbeta[j]);
        po[base + j * span.inner] = static_cast<S>(y);
      }
    }
  }
  const int an = a.node;
  const int gn = affine ? gamma.node : -1;
  const int bn = affine ? beta.node : -1;
  auto da = a.data;
  auto dgamma = affine ? gamma.data : nullptr;
  set_backward(out, "layer_norm", [an, gn, bn, span, da, dgamma, stats](const std::vector<S>& g,
                                                                        std::vector<std::vector<S>>& grads) {
    const S* pa2 = da->data();
    const int64_t numel = span.outer * span.n * span.inner;
    std::vector<S>* ga = an >= 0 ? &ensure_grad(grads, an, numel) : nullptr;
    std::vector<S>* gg = gn >= 0 ? &ensure_grad(grads, gn, span.n) : nullptr;
    std::vector<S>* gb = bn >= 0 ? &ensure_grad(grads, bn, span.n) : nullptr;
    int64_t sidx = 0;
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t i = 0; i < span.inner; ++i, ++sidx) {
        const int64_t base = o * span.n * span.inner + i;
        const double m = (*stats)[static_cast<size_t>(sidx) * 2];
        const double rstd = (*stats)[static_cast<size_t>(sidx) * 2 + 1];
        double sum_gx = 0.0, sum_gxx = 0.0;
        for (int64_t j = 0; j < span.n; ++j) {
          const int64_t ix = base + j * span.inner;
          const double xhat = (static_cast<double>(pa2[ix]) - m) * rstd;
          const double gy = static_cast<double>(g[static_cast<size_t>(ix)]);
          const double gxhat = dgamma ? gy * static_cast<double>((*dgamma)[static_cast<size_t>(j)]) : gy;
          sum_gx += gxhat;
          sum_gxx += gxhat * xhat;
          if (gg) (*gg)[static_cast<size_t>(j)] += static_cast<S>(gy * xhat);
          if (gb) (*gb)[static_cast<size_t>(j)] += static_cast<S>(gy);
        }
        if (ga) {
          const double inv_n = 1.0 / static_cast<double>(span.n);
          for (int64_t j = 0; j < span.n; ++j) {
            const int64_t ix = base + j * span.inner;
            const double xhat = (static_cast<double>(pa2[ix]) - m) * rstd;
            const double gy = static_cast<double>(g[static_cast<size_t>(ix)]);
            const double gxhat = dgamma ? gy * static_cast<double>((*dgamma)[static_cast<size_t>(j)]) : gy;
            const double dx = rstd * (gxhat - inv_n * sum_gx - xhat * inv_n * sum_gxx);
            (*ga)[static_cast<size_t>(ix)] += static_cast<S>(dx);
          }
        }
      }
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::l2_normalize(const Tensor& a, int axis, S eps) {
  check_same_tape("l2_normalize", a);
  check_axis("l2_normalize", a.shape, axis);
  const AxisSpan span = axis_span(a.shape, axis);
  Tensor out = make_output("l2_normalize", a.shape, a.node >= 0);
  const S* pa = a.ptr();
  S* po = out.mut();
  const int64_t slices = span.outer * span.inner;
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(slices));
  int64_t sidx = 0;
  for (int64_t o = 0; o < span.outer; ++o) {
    for (int64_t i = 0; i < span.inner; ++i, ++sidx) {
      const int64_t base = o * span.n * span.inner + i;
      double sq = 0.0;
      for (int64_t j = 0; j < span.n; ++j) {
        const double x = static_cast<double>(pa[base + j * span.inner]);
        sq += x * x;
      }
      const double norm = std::max(std::sqrt(sq), static_cast<double>(eps));
      (*norms)[static_cast<size_t>(sidx)] = norm;
      for (int64_t j = 0; j < span.n; ++j) {
        po[base + j * span.inner] = static_cast<S>(static_cast<double>(pa[base + j * span.inner]) / norm);
      }
    }
  }
  const int an = a.node;
  auto da = a.data;
  const double deps = static_cast<double>(eps);
  set_backward(out, "l2_normalize", [an, span, da, norms, deps](const std::vector<S>& g,
                                                                std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, span.outer * span.n * span.inner);
    const S* pa2 = da->data();
    int64_t sidx = 0;
    for (int64_t o = 0; o < span.outer; ++o) {
      for (int64_t i = 0; i < span.inner; ++i, ++sidx) {
        const int64_t base = o * span.n * span.inner + i;
        const double norm = (*norms)[static_cast<size_t>(sidx)];
        if (norm <= deps) {
          // Below the floor the map is x / eps, which is linear.
          for (int64_t j = 0; j < span.n; ++j) {
            const int64_t ix = base + j * span.inner;
            ga[static_cast<size_t>(ix)] += static_cast<S>(static_cast<double>(g[static_cast<size_t>(ix)]) / deps);
          }
          continue;
        }
        double dot = 0.0;
        for (int64_t j = 0; j < span.n; ++j) {
          const int64_t ix = base + j * span.inner;
          dot += static_cast<double>(g[static_cast<size_t>(ix)]) * static_cast<double>(pa2[ix]);
        }
        const double n3 = norm * norm * norm;
        for (int64_t j = 0; j < span.n; ++j) {
          const int64_t ix = base + j * span.inner;
          const double dx = static_cast<double>(g[static_cast<size_t>(ix)]) / norm -
                            static_cast<double>(pa2[ix]) * dot / n3;
          ga[static_cast<size_t>(ix)] += static_cast<S>(dx);
        }
      }
    }
  });
  return out;
}

// ---- lookup / masking / losses ----

template <class S>
TensorT<S> TapeT<S>::embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  check_same_tape("embedding_gather", table);
  if (table.shape.size() != 2) fail("embedding_gather", "table must be 2-D, got " + shape_str(table.shape));
  const int vocab = table.shape[0], dim = table.shape[1];
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      fail("embedding_gather", "id " + std::to_string(id) + " out of range [0," + std::to_string(vocab) + ")");
    }
  }
  if (ids.empty()) fail("embedding_gather", "no ids");
  Tensor out = make_output("embedding_gather", {static_cast<int>(ids.size()), dim}, table.node >= 0);
  const S* pt = table.ptr();
  S* po = out.mut();
  for (size_t r = 0; r < ids.size(); ++r) {
    std::copy(pt + static_cast<int64_t>(ids[r]) * dim, pt + (static_cast<int64_t>(ids[r]) + 1) * dim,
              po + static_cast<int64_t>(r) * dim);
  }
  const int tn = table.node;
  const int64_t tnumel = table.numel();
  auto ids_copy = ids;
  set_backward(out, "embedding_gather", [tn, tnumel, dim, ids_copy](const std::vector<S>& g,
                                                                    std::vector<std::vector<S>>& grads) {
    auto& gt = ensure_grad(grads, tn, tnumel);
    for (size_t r = 0; r < ids_copy.size(); ++r) {
      S* dst = gt.data() + static_cast<int64_t>(ids_copy[r]) * dim;
      const S* src = g.data() + static_cast<int64_t>(r) * dim;
      for (int j = 0; j < dim; ++j) dst[j] += src[j];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::masked_fill(const Tensor& a, const Mask& mask, S value) {
  check_same_tape("masked_fill", a);
  if (static_cast<int64_t>(mask.size()) != a.numel()) {
    fail("masked_fill", "mask has " + std::to_string(mask.size()) + " entries for shape " + shape_str(a.shape));
  }
  Tensor out = make_output("masked_fill", a.shape, a.node >= 0);
  const int64_t n = a.numel();
  const S* pa = a.ptr();
  S* po = out.mut();
  for (int64_t i = 0; i < n; ++i) po[i] = mask[static_cast<size_t>(i)] ? value : pa[i];
  const int an = a.node;
  auto mask_copy = std::make_shared<Mask>(mask);
  set_backward(out, "masked_fill", [an, n, mask_copy](const std::vector<S>& g, std::vector<std::vector<S>>& grads) {
    auto& ga = ensure_grad(grads, an, n);
    for (int64_t i = 0; i < n; ++i) {
      if (!(*mask_copy)[static_cast<size_t>(i)]) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    }
  });
  return out;
}

template <class S>
TensorT<S> TapeT<S>::cross_entropy_from_logits(const Tensor& logits, const std::vector<int>& targets,
                                               int ignore_index) {
  check_same_tape("cross_entropy_from_logits", logits);
  if (logits.shape.size() != 2) {
    fail("cross_entropy_from_logits", "logits must be 2-D, got " + shape_str(logits.shape));
  }
  const int64_t rows = logits.shape[0], cols = logits.shape[1];
  if (static_cast<int64_t>(targets.size()) != rows) {
    fail("cross_entropy_from_logits", std::to_string(targets.size()) + " targets for " +
                                          std::to_string(rows) + " rows");
  }
  int64_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= cols) {
      fail("cross_entropy_from_logits", "target " + std::to_string(t) + " out of range [0," +
                                            std::to_string(cols) + ")");
    }
    ++count;
  }
  if (count == 0) return Tensor::scalar(S(0));  // no valid targets: constant zero, no gradient
  Tensor out = make_output("cross_entropy_from_logits", {1}, logits.node >= 0);
  const S* pl = logits.ptr();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (targets[static_cast<size_t>(r)] == ignore_index) continue;
    const S* row = pl + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int64_t j = 0; j < cols; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(denom);
    total += lse - static_cast<double>(row[targets[static_cast<size_t>(r)]]);
  }
  out.mut()[0] = static_cast<S>(total / static_cast<double>(count));
  const int ln = logits.node;
  auto dl = logits.data;
  auto targets_copy = targets;
  set_backward(out, "cross_entropy_from_logits",
               [ln, rows, cols, count, dl, targets_copy, ignore_index](const std::vector<S>& g,
                                                                       std::vector<std::vector<S>>& grads) {
                 auto& gl = ensure_grad(grads, ln, rows * cols);
                 const S* pl2 = dl->data();
                 const double gscale = static_cast<double>(g[0]) / static_cast<double>(count);
                 for (int64_t r = 0; r < rows; ++r) {
                   const int t = targets_copy[static_cast<size_t>(r)];
                   if (t == ignore_index) continue;
                   const S* row = pl2 + r * cols;
                   double mx = -std::numeric_limits<double>::infinity();
                   for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                   double denom = 0.0;
                   for (int64_t j = 0; j < cols; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
                   S* grow = gl.data() + r * cols;
                   for (int64_t j = 0; j < cols; ++j) {
                     const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
                     const double onehot = (j == t) ? 1.0 : 0.0;
                     grow[j] += static_cast<S>(gscale * (p - onehot));
                   }
                 }
               });
  return out;
}

// ---- backward ----

template <class S>
GradMapT<S> TapeT<S>::backward(const Tensor& loss) const {
  if (loss.numel() != 1) {
    throw std::runtime_error("backward: loss must be scalar, got shape " + shape_str(loss.shape));
  }
  if (loss.node < 0) throw std::runtime_error("backward: loss does not require grad");
  if (loss.tape_id != id_) throw std::runtime_error("backward: loss belongs to a different tape");
  std::vector<std::vector<S>> grads(nodes_.size());
  grads[static_cast<size_t>(loss.node)] = {S(1)};
  for (int i = loss.node; i >= 0; --i) {
    const auto& g = grads[static_cast<size_t>(i)];
    if (g.empty()) continue;
    const auto& node = nodes_[static_cast<size_t>(i)];
    if (node.backward) node.backward(g, grads);
  }
  std::unordered_map<int, TensorT<S>> out;
  for (size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].empty()) continue;
    out.emplace(static_cast<int>(i), TensorT<S>::from(nodes_[i].out_shape, std::move(grads[i])));
  }
  return GradMapT<S>(std::move(out));
}

template struct TensorT<float>;
template struct TensorT<double>;
template class TapeT<float>;
template class TapeT<double>;
template class GradMapT<float>;
template class GradMapT<double>;

}  // namespace cclm
