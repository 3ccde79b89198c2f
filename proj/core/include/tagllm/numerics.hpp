#pragma once

// Minimal reverse-mode tensor core: dense row-major 1-D/2-D arrays, a fixed
// set of differentiable ops, AdamW and a warmup+cosine schedule.
//
// A BasicTensor is a handle onto a shared node; copying the handle aliases
// the node (use clone() for a deep copy). Ops build a graph only when at
// least one input requires grad, and backward() releases the graph it walks.
// Everything is instantiated for float (training) and double (gradient
// checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tagllm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty == absent
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> values,
                               bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // Only leaves may be written in place; writing an interior node would
  // silently invalidate the graph.
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void clear_grad();
  bool is_leaf() const;

  BasicTensor clone() const;   // deep copy, same requires_grad
  BasicTensor detach() const;  // deep copy, no grad

  detail::Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Disables graph construction on this thread for its lifetime (evaluation
// and decoding paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace ops {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
// a: m x n, bias: n, the only broadcast the backbone needs.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& a, const BasicTensor<T>& bias);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
// Tanh approximation of GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
// Row-wise normalization of an m x n input with gain/bias of length n.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, double eps);
// Gathers rows of table (V x d); gradient is scatter-added into table.
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const std::int32_t> ids);
// Concatenation along the sequence (row) axis.
template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> parts);
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin,
                          std::size_t end);
template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x,
                           std::span<const std::size_t> rows);
// Multi-head scaled dot-product attention with a causal mask applied inside
// each segment. q, k, v are N x d (heads laid out contiguously along d);
// segment_offsets is [0, n_1, n_1+n_2, ..., N].
template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q,
                                const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::size_t n_heads,
                                std::span<const std::size_t> segment_offsets);
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
// Mean over positions weighted by mask of -log softmax(logits)[target].
// Targets at zero-mask positions are ignored (may be -1).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits,
                             std::span<const std::int32_t> targets,
                             std::span<const T> mask);
template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

}  // namespace ops

// Populates .grad of every requires_grad tensor reachable from loss and
// releases the graph.
template <typename T>
void backward(const BasicTensor<T>& loss);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam. Parameters whose grad is absent at step time
// are skipped (their moments and step count are left untouched).
template <typename T>
class AdamW {
 public:
  struct Slot {
    BasicTensor<T> param;
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t steps = 0;
  };

  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void add_param(BasicTensor<T> param);
  void step() { step(config_.lr); }
  void step(double lr);
  void zero_grad();

  const AdamWConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  std::span<const Slot> slots() const { return slots_; }

 private:
  AdamWConfig config_;
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

// Linear ramp 0 -> base_lr over warmup_fraction * total_steps, then cosine
// decay to 0 at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps,
                 double warmup_fraction, double base_lr);

#define TAGLLM_NUMERICS_EXTERN(T)                                              \
  extern template class BasicTensor<T>;                                       \
  extern template class AdamW<T>;                                             \
  extern template void backward<T>(const BasicTensor<T>&);

TAGLLM_NUMERICS_EXTERN(float)
TAGLLM_NUMERICS_EXTERN(double)
#undef TAGLLM_NUMERICS_EXTERN

}  // namespace tagllm
