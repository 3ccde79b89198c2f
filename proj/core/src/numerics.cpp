#include "tagllm/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tagllm/error.hpp"

namespace tagllm {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

[[noreturn]] void dim_error(const std::string& what) {
  throw Error(ErrorCode::dimension, what);
}

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 2) {
    dim_error("tensor rank must be 1 or 2, got " + shape_string(shape));
  }
  for (auto e : shape) {
    if (e == 0) dim_error("tensor extents must be positive, got " + shape_string(shape));
  }
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (const T& v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::numeric, std::string("non-finite value produced by ") + op);
    }
  }
}

template <typename T>
std::size_t rows_of(const detail::Node<T>& n) {
  return n.shape[0];
}
template <typename T>
std::size_t cols_of(const detail::Node<T>& n) {
  return n.shape.size() == 2 ? n.shape[1] : 1;
}

template <typename T>
std::vector<T>& ensure_grad(detail::Node<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

// Wraps computed values in a node; wires the graph only when needed.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                           std::vector<NodePtr<T>> parents,
                           std::function<void(detail::Node<T>&)> backward_fn) {
  check_finite(op, value);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool needs = grad_enabled() && std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr<T>& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
const detail::Node<T>& require(const BasicTensor<T>& t, const char* op) {
  if (!t.defined()) dim_error(std::string(op) + ": undefined tensor");
  return *t.node();
}

}  // namespace

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- BasicTensor

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  validate_shape(shape);
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> values,
                                         bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    dim_error("data length " + std::to_string(values.size()) + " does not match shape " +
              shape_string(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return require(*this, "shape").shape;
}
template <typename T>
std::size_t BasicTensor<T>::rows() const {
  return rows_of(require(*this, "rows"));
}
template <typename T>
std::size_t BasicTensor<T>::cols() const {
  return cols_of(require(*this, "cols"));
}
template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return require(*this, "numel").value.size();
}
template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  return require(*this, "data").value;
}
template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!is_leaf()) throw Error(ErrorCode::state, "mutable_data on a non-leaf tensor");
  return node_->value;
}
template <typename T>
T BasicTensor<T>::item() const {
  const auto& n = require(*this, "item");
  if (n.value.size() != 1) dim_error("item() on tensor of shape " + shape_string(n.shape));
  return n.value[0];
}
template <typename T>
T BasicTensor<T>::at(std::size_t row, std::size_t col) const {
  const auto& n = require(*this, "at");
  if (row >= rows_of(n) || col >= cols_of(n)) dim_error("at(): index out of range");
  return n.value[row * cols_of(n) + col];
}
template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}
template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw Error(ErrorCode::state, "set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}
template <typename T>
bool BasicTensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}
template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw Error(ErrorCode::state, "gradient is absent");
  return node_->grad;
}
template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!has_grad()) throw Error(ErrorCode::state, "gradient is absent");
  return node_->grad;
}
template <typename T>
void BasicTensor<T>::clear_grad() {
  if (node_) node_->grad.clear();
}
template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return node_ && !node_->backward;
}
template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  const auto& n = require(*this, "clone");
  return from_data(n.shape, n.value, n.requires_grad);
}
template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  const auto& n = require(*this, "detach");
  return from_data(n.shape, n.value, false);
}

// ------------------------------------------------------------------------ ops

namespace ops {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& na = require(a, "matmul");
  const auto& nb = require(b, "matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    dim_error("matmul: cannot multiply " + shape_string(na.shape) + " by " +
              shape_string(nb.shape));
  }
  const auto m = na.shape[0], k = na.shape[1], n = nb.shape[1];
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(na.value.data(), m, k) * ConstMatMap<T>(nb.value.data(), k, n);
  return make_result<T>("matmul", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [m, k, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          ConstMatMap<T> g(self.grad.data(), m, n);
                          if (pa.requires_grad) {
                            MatMap<T>(ensure_grad(pa).data(), m, k).noalias() +=
                                g * ConstMatMap<T>(pb.value.data(), k, n).transpose();
                          }
                          if (pb.requires_grad) {
                            MatMap<T>(ensure_grad(pb).data(), k, n).noalias() +=
                                ConstMatMap<T>(pa.value.data(), m, k).transpose() * g;
                          }
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& na = require(a, "add");
  const auto& nb = require(b, "add");
  if (na.shape != nb.shape) {
    dim_error("add: shape mismatch " + shape_string(na.shape) + " vs " + shape_string(nb.shape));
  }
  std::vector<T> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] + nb.value[i];
  return make_result<T>("add", na.shape, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<T>& self) {
                          for (auto& p : self.parents) {
                            if (!p->requires_grad) continue;
                            auto& g = ensure_grad(*p);
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& a, const BasicTensor<T>& bias) {
  const auto& na = require(a, "add_bias");
  const auto& nb = require(bias, "add_bias");
  const auto m = rows_of(na), n = cols_of(na);
  if (na.shape.size() != 2 || nb.value.size() != n) {
    dim_error("add_bias: bias of shape " + shape_string(nb.shape) + " does not match " +
              shape_string(na.shape));
  }
  std::vector<T> out(na.value);
  for (std::size_t r = 0; r < m; ++r) {
    T* row = out.data() + r * n;
    for (std::size_t c = 0; c < n; ++c) row[c] += nb.value[c];
  }
  return make_result<T>("add_bias", na.shape, std::move(out), {a.node_ptr(), bias.node_ptr()},
                        [m, n](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = ensure_grad(pa);
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = ensure_grad(pb);
                            for (std::size_t r = 0; r < m; ++r) {
                              const T* row = self.grad.data() + r * n;
                              for (std::size_t c = 0; c < n; ++c) g[c] += row[c];
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& na = require(a, "mul");
  const auto& nb = require(b, "mul");
  if (na.shape != nb.shape) {
    dim_error("mul: shape mismatch " + shape_string(na.shape) + " vs " + shape_string(nb.shape));
  }
  std::vector<T> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * nb.value[i];
  return make_result<T>("mul", na.shape, std::move(out), {a.node_ptr(), b.node_ptr()},
                        [](detail::Node<T>& self) {
                          auto& pa = *self.parents[0];
                          auto& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& g = ensure_grad(pa);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pb.value[i];
                          }
                          if (pb.requires_grad) {
                            auto& g = ensure_grad(pb);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * pa.value[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  const auto& na = require(a, "scale");
  std::vector<T> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * factor;
  return make_result<T>("scale", na.shape, std::move(out), {a.node_ptr()},
                        [factor](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                        });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  const auto& nx = require(x, "gelu");
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a3 = T(0.044715);
  std::vector<T> out(nx.value.size());
  std::vector<T> th(nx.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = nx.value[i];
    th[i] = std::tanh(c * (v + a3 * v * v * v));
    out[i] = T(0.5) * v * (T(1) + th[i]);
  }
  return make_result<T>("gelu", nx.shape, std::move(out), {x.node_ptr()},
                        [th = std::move(th)](detail::Node<T>& self) {
                          auto& p = *self.parents[0];
                          auto& g = ensure_grad(p);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T v = p.value[i];
                            const T t = th[i];
                            const T dinner = c * (T(1) + T(3) * a3 * v * v);
                            const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dinner;
                            g[i] += self.grad[i] * d;
                          }
                        });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, double eps) {
  const auto& nx = require(x, "layer_norm");
  const auto& ng = require(gain, "layer_norm");
  const auto& nb = require(bias, "layer_norm");
  const auto m = rows_of(nx), n = cols_of(nx);
  if (nx.shape.size() != 2 || ng.value.size() != n || nb.value.size() != n) {
    dim_error("layer_norm: gain/bias do not match input " + shape_string(nx.shape));
  }
  std::vector<T> out(nx.value.size());
  std::vector<T> xhat(nx.value.size());
  std::vector<T> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = nx.value.data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    const T rs = T(1) / std::sqrt(var + T(eps));
    rstd[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (row[c] - mean) * rs;
      xhat[r * n + c] = h;
      out[r * n + c] = h * ng.value[c] + nb.value[c];
    }
  }
  return make_result<T>(
      "layer_norm", nx.shape, std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          auto& g = ensure_grad(pg);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c] * xhat[r * n + c];
        }
        if (pb.requires_grad) {
          auto& g = ensure_grad(pb);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
        }
        if (px.requires_grad) {
          auto& g = ensure_grad(px);
          std::vector<T> dh(n);
          for (std::size_t r = 0; r < m; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t c = 0; c < n; ++c) {
              dh[c] = self.grad[r * n + c] * pg.value[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * xhat[r * n + c];
            }
            mean_dh /= T(n);
            mean_dh_h /= T(n);
            for (std::size_t c = 0; c < n; ++c) {
              g[r * n + c] += rstd[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const std::int32_t> ids) {
  const auto& nt = require(table, "embedding");
  if (nt.shape.size() != 2) dim_error("embedding: table must be 2-D");
  if (ids.empty()) dim_error("embedding: empty id list");
  const auto vocab = nt.shape[0], d = nt.shape[1];
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  std::vector<T> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
      throw Error(ErrorCode::value, "embedding: id " + std::to_string(idv[i]) +
                                        " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(nt.value.data() + static_cast<std::size_t>(idv[i]) * d, d, out.data() + i * d);
  }
  const auto count = idv.size();
  return make_result<T>("embedding", {count, d}, std::move(out), {table.node_ptr()},
                        [d, idv = std::move(idv)](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          for (std::size_t i = 0; i < idv.size(); ++i) {
                            T* dst = g.data() + static_cast<std::size_t>(idv[i]) * d;
                            const T* src = self.grad.data() + i * d;
                            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                          }
                        });
}

template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> parts) {
  if (parts.empty()) dim_error("concat_rows: no inputs");
  const auto n = require(parts[0], "concat_rows").shape.size() == 2 ? parts[0].cols() : 0;
  std::size_t total = 0;
  std::vector<NodePtr<T>> parents;
  std::vector<std::size_t> row_offsets;
  for (const auto& p : parts) {
    const auto& np = require(p, "concat_rows");
    if (np.shape.size() != 2 || np.shape[1] != n) {
      dim_error("concat_rows: column mismatch at " + shape_string(np.shape));
    }
    row_offsets.push_back(total);
    total += np.shape[0];
    parents.push_back(p.node_ptr());
  }
  std::vector<T> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>("concat_rows", {total, n}, std::move(out), std::move(parents),
                        [n, row_offsets = std::move(row_offsets)](detail::Node<T>& self) {
                          for (std::size_t i = 0; i < self.parents.size(); ++i) {
                            auto& p = *self.parents[i];
                            if (!p.requires_grad) continue;
                            auto& g = ensure_grad(p);
                            const T* src = self.grad.data() + row_offsets[i] * n;
                            for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
                          }
                        });
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  const auto& nx = require(x, "slice_rows");
  if (nx.shape.size() != 2 || begin >= end || end > nx.shape[0]) {
    dim_error("slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") of " + shape_string(nx.shape));
  }
  const auto n = nx.shape[1];
  std::vector<T> out(nx.value.begin() + static_cast<std::ptrdiff_t>(begin * n),
                     nx.value.begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result<T>("slice_rows", {end - begin, n}, std::move(out), {x.node_ptr()},
                        [begin, n](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          T* dst = g.data() + begin * n;
                          for (std::size_t j = 0; j < self.grad.size(); ++j) dst[j] += self.grad[j];
                        });
}

template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  const auto& nx = require(x, "select_rows");
  if (nx.shape.size() != 2 || rows.empty()) dim_error("select_rows: need a 2-D input and rows");
  const auto n = nx.shape[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= nx.shape[0]) {
      dim_error("select_rows: row " + std::to_string(idx[i]) + " out of range for " +
                shape_string(nx.shape));
    }
    std::copy_n(nx.value.data() + idx[i] * n, n, out.data() + i * n);
  }
  const auto count = idx.size();
  return make_result<T>("select_rows", {count, n}, std::move(out), {x.node_ptr()},
                        [n, idx = std::move(idx)](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            T* dst = g.data() + idx[i] * n;
                            const T* src = self.grad.data() + i * n;
                            for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                          }
                        });
}

template <typename T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k,
                                const BasicTensor<T>& v, std::size_t n_heads,
                                std::span<const std::size_t> segment_offsets) {
  const auto& nq = require(q, "causal_attention");
  const auto& nk = require(k, "causal_attention");
  const auto& nv = require(v, "causal_attention");
  if (nq.shape.size() != 2 || nq.shape != nk.shape || nq.shape != nv.shape) {
    dim_error("causal_attention: q/k/v shapes differ");
  }
  const auto N = nq.shape[0], d = nq.shape[1];
  if (n_heads == 0 || d % n_heads != 0) dim_error("causal_attention: d not divisible by heads");
  std::vector<std::size_t> seg(segment_offsets.begin(), segment_offsets.end());
  if (seg.size() < 2 || seg.front() != 0 || seg.back() != N ||
      !std::is_sorted(seg.begin(), seg.end())) {
    dim_error("causal_attention: segment offsets must run 0..N (N=" + std::to_string(N) +
              ", last offset " + std::to_string(seg.empty() ? 0 : seg.back()) + ")");
  }
  const auto dh = d / n_heads;
  const T sc = T(1) / std::sqrt(T(dh));

  // Probabilities per (segment, head) stored back to back.
  std::vector<std::size_t> prob_offsets;
  std::size_t prob_total = 0;
  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    const auto len = seg[s + 1] - seg[s];
    prob_offsets.push_back(prob_total);
    prob_total += n_heads * len * len;
  }
  std::vector<T> probs(prob_total, T(0));
  std::vector<T> out(N * d, T(0));

  for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
    const auto off = seg[s];
    const auto len = seg[s + 1] - off;
    if (len == 0) continue;
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStridedMap<T> Q(nq.value.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> K(nk.value.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> V(nv.value.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      MatMap<T> P(probs.data() + prob_offsets[s] + h * len * len, len, len);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < len; ++i) {
        T mx = P(i, 0);
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, P(i, j));
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          z += P(i, j);
        }
        const T inv = T(1) / z;
        for (std::size_t j = 0; j <= i; ++j) P(i, j) *= inv;
        for (std::size_t j = i + 1; j < len; ++j) P(i, j) = T(0);
      }
      StridedMap<T> O(out.data() + off * d + h * dh, len, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  }

  return make_result<T>(
      "causal_attention", {N, d}, std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [d, dh, n_heads, sc, seg = std::move(seg), prob_offsets = std::move(prob_offsets),
       probs = std::move(probs)](detail::Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        T* gq = pq.requires_grad ? ensure_grad(pq).data() : nullptr;
        T* gk = pk.requires_grad ? ensure_grad(pk).data() : nullptr;
        T* gv = pv.requires_grad ? ensure_grad(pv).data() : nullptr;
        RowMat<T> dP, dS;
        for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
          const auto off = seg[s];
          const auto len = seg[s + 1] - off;
          if (len == 0) continue;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const auto base = off * d + h * dh;
            ConstStridedMap<T> Q(pq.value.data() + base, len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> K(pk.value.data() + base, len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> V(pv.value.data() + base, len, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> dO(self.grad.data() + base, len, dh, Eigen::OuterStride<>(d));
            ConstMatMap<T> P(probs.data() + prob_offsets[s] + h * len * len, len, len);
            if (gv) {
              StridedMap<T>(gv + base, len, dh, Eigen::OuterStride<>(d)).noalias() +=
                  P.transpose() * dO;
            }
            if (!gq && !gk) continue;
            dP.noalias() = dO * V.transpose();
            dS.resize(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(len));
            for (std::size_t i = 0; i < len; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
              for (std::size_t j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
              for (std::size_t j = i + 1; j < len; ++j) dS(i, j) = T(0);
            }
            if (gq) {
              StridedMap<T>(gq + base, len, dh, Eigen::OuterStride<>(d)).noalias() += dS * K;
            }
            if (gk) {
              StridedMap<T>(gk + base, len, dh, Eigen::OuterStride<>(d)).noalias() +=
                  dS.transpose() * Q;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto& nx = require(x, "softmax");
  if (axis >= nx.shape.size()) {
    dim_error("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(nx.shape));
  }
  check_finite("softmax input", nx.value);
  const auto m = rows_of(nx), n = cols_of(nx);
  // Reduce along the axis: (count, length, stride) describes every lane.
  const bool along_cols = (nx.shape.size() == 1) || axis == 1;
  const std::size_t lanes = nx.shape.size() == 1 ? 1 : (along_cols ? m : n);
  const std::size_t len = nx.shape.size() == 1 ? nx.value.size() : (along_cols ? n : m);
  const std::size_t stride = along_cols ? 1 : n;
  const std::size_t lane_step = along_cols ? len : 1;
  std::vector<T> out(nx.value.size());
  for (std::size_t l = 0; l < lanes; ++l) {
    const std::size_t base = l * lane_step;
    T mx = nx.value[base];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, nx.value[base + i * stride]);
    T z = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const T e = std::exp(nx.value[base + i * stride] - mx);
      out[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= z;
  }
  return make_result<T>("softmax", nx.shape, std::move(out), {x.node_ptr()},
                        [lanes, len, stride, lane_step](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          for (std::size_t l = 0; l < lanes; ++l) {
                            const std::size_t base = l * lane_step;
                            T dot = 0;
                            for (std::size_t i = 0; i < len; ++i) {
                              const auto idx = base + i * stride;
                              dot += self.grad[idx] * self.value[idx];
                            }
                            for (std::size_t i = 0; i < len; ++i) {
                              const auto idx = base + i * stride;
                              g[idx] += self.value[idx] * (self.grad[idx] - dot);
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> targets,
                             std::span<const T> mask) {
  const auto& nl = require(logits, "cross_entropy");
  if (nl.shape.size() != 2) dim_error("cross_entropy: logits must be n x V");
  const auto n = nl.shape[0], V = nl.shape[1];
  if (targets.size() != n || mask.size() != n) {
    dim_error("cross_entropy: targets/mask length must equal " + std::to_string(n));
  }
  check_finite("cross_entropy input", nl.value);
  T wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] < T(0)) throw Error(ErrorCode::value, "cross_entropy: negative mask weight");
    if (mask[i] != T(0)) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
        throw Error(ErrorCode::value, "cross_entropy: target " + std::to_string(targets[i]) +
                                          " outside [0," + std::to_string(V) + ")");
      }
      wsum += mask[i];
    }
  }
  if (wsum == T(0)) throw Error(ErrorCode::value, "cross_entropy: mask is all zero");
  std::vector<T> probs(nl.value.size(), T(0));
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<T> w(mask.begin(), mask.end());
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == T(0)) continue;
    const T* row = nl.value.data() + i * V;
    T mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::size_t j = 0; j < V; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[i * V + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] /= z;
    const T logp = row[static_cast<std::size_t>(tg[i])] - mx - std::log(z);
    loss -= static_cast<double>(w[i]) * static_cast<double>(logp);
  }
  loss /= static_cast<double>(wsum);
  return make_result<T>(
      "cross_entropy", {1}, {static_cast<T>(loss)}, {logits.node_ptr()},
      [n, V, wsum, probs = std::move(probs), tg = std::move(tg),
       w = std::move(w)](detail::Node<T>& self) {
        auto& g = ensure_grad(*self.parents[0]);
        const T go = self.grad[0] / wsum;
        for (std::size_t i = 0; i < n; ++i) {
          if (w[i] == T(0)) continue;
          const T f = go * w[i];
          for (std::size_t j = 0; j < V; ++j) g[i * V + j] += f * probs[i * V + j];
          g[i * V + static_cast<std::size_t>(tg[i])] -= f;
        }
      });
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  const auto& np = require(pred, "mse");
  const auto& nt = require(target, "mse");
  if (np.shape != nt.shape) {
    dim_error("mse: shape mismatch " + shape_string(np.shape) + " vs " + shape_string(nt.shape));
  }
  const auto count = np.value.size();
  double acc = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const double e = static_cast<double>(np.value[i]) - static_cast<double>(nt.value[i]);
    acc += e * e;
  }
  return make_result<T>("mse", {1}, {static_cast<T>(acc / static_cast<double>(count))},
                        {pred.node_ptr(), target.node_ptr()}, [count](detail::Node<T>& self) {
                          auto& pp = *self.parents[0];
                          auto& pt = *self.parents[1];
                          const T f = T(2) * self.grad[0] / T(count);
                          if (pp.requires_grad) {
                            auto& g = ensure_grad(pp);
                            for (std::size_t i = 0; i < count; ++i)
                              g[i] += f * (pp.value[i] - pt.value[i]);
                          }
                          if (pt.requires_grad) {
                            auto& g = ensure_grad(pt);
                            for (std::size_t i = 0; i < count; ++i)
                              g[i] -= f * (pp.value[i] - pt.value[i]);
                          }
                        });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const auto& nx = require(x, "sum");
  double acc = 0;
  for (const T& v : nx.value) acc += static_cast<double>(v);
  return make_result<T>("sum", {1}, {static_cast<T>(acc)}, {x.node_ptr()},
                        [](detail::Node<T>& self) {
                          auto& g = ensure_grad(*self.parents[0]);
                          for (auto& e : g) e += self.grad[0];
                        });
}

}  // namespace ops

// ------------------------------------------------------------------- backward

template <typename T>
void backward(const BasicTensor<T>& loss) {
  auto* root = loss.node();
  if (!root) throw Error(ErrorCode::state, "backward on undefined tensor");
  if (root->value.size() != 1) {
    dim_error("backward: loss must be scalar, got " + shape_string(root->shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  // Releasing a node's parents below may drop the last owner of a node still
  // waiting in `order`; hold them until the walk is done.
  std::vector<NodePtr<T>> keep_alive;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* p = node->parents[next++].get();
      if (p->requires_grad && p->backward && !visited.count(p)) {
        visited.insert(p);
        keep_alive.push_back(node->parents[next - 1]);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  ensure_grad(*root);
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
    if (node != root) node->grad.clear();
    node->backward = nullptr;
    node->parents.clear();
  }
}

// ---------------------------------------------------------------------- AdamW

template <typename T>
void AdamW<T>::add_param(BasicTensor<T> param) {
  if (!param.defined() || !param.is_leaf()) {
    throw Error(ErrorCode::state, "AdamW: parameters must be defined leaf tensors");
  }
  Slot slot;
  slot.m.assign(param.numel(), T(0));
  slot.v.assign(param.numel(), T(0));
  slot.param = std::move(param);
  slots_.push_back(std::move(slot));
}

template <typename T>
void AdamW<T>::step(double lr) {
  const bool any = std::any_of(slots_.begin(), slots_.end(),
                               [](const Slot& s) { return s.param.has_grad(); });
  if (!any) throw Error(ErrorCode::state, "AdamW: no parameter has a gradient");
  ++steps_;
  for (auto& slot : slots_) {
    if (!slot.param.has_grad()) continue;
    ++slot.steps;
    const auto g = slot.param.grad();
    for (const T& e : g) {
      if (!std::isfinite(e)) throw Error(ErrorCode::numeric, "AdamW: non-finite gradient");
    }
    auto p = slot.param.mutable_data();
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.steps));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.steps));
    const T decay = static_cast<T>(1.0 - lr * config_.weight_decay);
    for (std::size_t i = 0; i < p.size(); ++i) {
      slot.m[i] = static_cast<T>(b1 * slot.m[i] + (1.0 - b1) * g[i]);
      slot.v[i] = static_cast<T>(b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i]);
      const double mhat = slot.m[i] / c1;
      const double vhat = slot.v[i] / c2;
      p[i] = static_cast<T>(p[i] * decay - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& slot : slots_) slot.param.clear_grad();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double warmup_fraction,
                 double base_lr) {
  if (total_steps <= 0) throw Error(ErrorCode::value, "cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw Error(ErrorCode::value, "cosine_lr: step outside [0,total_steps]");
  }
  const double warmup = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  if (span <= 0) return 0.0;
  const double progress = (s - warmup) / span;
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

#define TAGLLM_NUMERICS_INSTANTIATE(T)                                                      \
  template class BasicTensor<T>;                                                           \
  template class AdamW<T>;                                                                 \
  template void backward<T>(const BasicTensor<T>&);                                        \
  template BasicTensor<T> ops::matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> ops::add<T>(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> ops::add_bias<T>(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> ops::mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> ops::scale<T>(const BasicTensor<T>&, T);                          \
  template BasicTensor<T> ops::gelu<T>(const BasicTensor<T>&);                              \
  template BasicTensor<T> ops::layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                             const BasicTensor<T>&, double);                \
  template BasicTensor<T> ops::embedding<T>(const BasicTensor<T>&,                          \
                                            std::span<const std::int32_t>);                 \
  template BasicTensor<T> ops::concat_rows<T>(std::span<const BasicTensor<T>>);             \
  template BasicTensor<T> ops::slice_rows<T>(const BasicTensor<T>&, std::size_t,            \
                                             std::size_t);                                  \
  template BasicTensor<T> ops::select_rows<T>(const BasicTensor<T>&,                        \
                                              std::span<const std::size_t>);                \
  template BasicTensor<T> ops::causal_attention<T>(                                         \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t,     \
      std::span<const std::size_t>);                                                        \
  template BasicTensor<T> ops::softmax<T>(const BasicTensor<T>&, std::size_t);              \
  template BasicTensor<T> ops::cross_entropy<T>(                                            \
      const BasicTensor<T>&, std::span<const std::int32_t>, std::span<const T>);            \
  template BasicTensor<T> ops::mse<T>(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> ops::sum<T>(const BasicTensor<T>&);

TAGLLM_NUMERICS_INSTANTIATE(float)
TAGLLM_NUMERICS_INSTANTIATE(double)

}  // namespace tagllm
