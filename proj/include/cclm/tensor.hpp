#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace cclm {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor. Data is shared so tapes can retain operand values
// for the backward pass without copies. A tensor is recorded on a tape
// (node >= 0) iff it requires grad.
template <class S>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<S>> data;
  bool requires_grad = false;
  int node = -1;
  uint32_t tape_id = 0;

  TensorT() = default;

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  bool defined() const { return static_cast<bool>(data); }
  const S* ptr() const { return data->data(); }
  S* mut() { return data->data(); }
  S value() const { return (*data)[0]; }
  S at(std::initializer_list<int> idx) const;

  static TensorT from(Shape shape, std::vector<S> values);
  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, S v);
  static TensorT scalar(S v) { return from({1}, {v}); }
};

// Gradient buffers produced by one backward pass, keyed by tape node id.
template <class S>
class GradMapT {
 public:
  GradMapT() = default;
  explicit GradMapT(std::unordered_map<int, TensorT<S>> grads) : grads_(std::move(grads)) {}

  bool contains(int node) const { return grads_.count(node) > 0; }
  // Gradient of the loss w.r.t. the tensor recorded at `node`.
  const TensorT<S>& at(int node) const;
  size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<int, TensorT<S>> grads_;
};

// Test-only fault injection: gradients flowing out of the named op are
// perturbed, so a finite-difference check over that op must fail.
void set_backward_fault(const std::string& op_name);
void clear_backward_fault();

// Reverse-mode tape. Records one node per differentiable op output in
// topological order; backward() replays the recorded rules in reverse.
// A tape and its tensors belong to a single thread.
template <class S>
class TapeT {
 public:
  using Tensor = TensorT<S>;
  using Mask = std::vector<uint8_t>;

  TapeT();
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers a differentiation target. Leaf data is aliased, not copied.
  Tensor leaf(Tensor value);
  Tensor leaf(Shape shape, std::shared_ptr<std::vector<S>> data);

  size_t num_nodes() const { return nodes_.size(); }

  // ---- elementwise / arithmetic ----
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, S c);
  // out = a * s[0]; s is a 1-element tensor (used for learnable scalars).
  Tensor mul_scalar(const Tensor& a, const Tensor& s);
  // out[i][j] = a[i][j] + bias[j] for 2-D a and 1-D bias.
  Tensor add_bias(const Tensor& a, const Tensor& bias);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor gelu(const Tensor& a);

  // ---- shape ----
  Tensor reshape(const Tensor& a, Shape new_shape);
  Tensor transpose(const Tensor& a);
  Tensor concat(const std::vector<Tensor>& parts, int axis);
  Tensor slice(const Tensor& a, int axis, int start, int len);

  // ---- linear algebra ----
  Tensor matmul(const Tensor& a, const Tensor& b);

  // ---- reductions ----
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);

  // ---- normalization / activations over an axis ----
  Tensor softmax(const Tensor& a, int axis);
  // Pre-affine normalization over `axis`; gamma/beta are optional 1-D affine
  // parameters of length shape[axis] (pass undefined tensors to skip).
  Tensor layer_norm(const Tensor& a, int axis, S eps, const Tensor& gamma, const Tensor& beta);
  Tensor l2_normalize(const Tensor& a, int axis, S eps = static_cast<S>(1e-8));

  // ---- lookup / masking / losses ----
  Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids);
  Tensor masked_fill(const Tensor& a, const Mask& mask, S value);
  // Mean of -log softmax(row)[target] over rows whose target != ignore_index.
  // Returns a scalar; 0 when no row has a valid target.
  Tensor cross_entropy_from_logits(const Tensor& logits, const std::vector<int>& targets,
                                   int ignore_index = -1);

  // Gradients of a scalar loss w.r.t. every recorded node reachable from it.
  // Does not mutate the tape; calling twice gives bitwise-identical results.
  GradMapT<S> backward(const Tensor& loss) const;

 private:
  struct Node {
    std::string op;
    Shape out_shape;
    int64_t out_numel = 0;
    // Accumulates input gradients given this node's output gradient.
    std::function<void(const std::vector<S>& gout, std::vector<std::vector<S>>& grads)> backward;
  };

  Tensor make_output(const char* op, Shape shape, bool any_grad);
  void set_backward(Tensor& out, const char* op,
                    std::function<void(const std::vector<S>&, std::vector<std::vector<S>>&)> fn);
  void check_same_tape(const char* op, const Tensor& t) const;

  std::vector<Node> nodes_;
  uint32_t id_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using GradMap = GradMapT<float>;

using TensorD = TensorT<double>;
using TapeD = TapeT<double>;
using GradMapD = GradMapT<double>;

extern template struct TensorT<float>;
extern template struct TensorT<double>;
extern template class TapeT<float>;
extern template class TapeT<double>;
extern template class GradMapT<float>;
extern template class GradMapT<double>;

}  // namespace cclm
