#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "remedi/rng.hpp"

namespace remedi {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;  // row-major
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
};

// Dense 64-bit tensor with value semantics over shared storage. Immutable
// after creation except for gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  const double* data() const { return impl_->data.data(); }
  double* data() { return impl_->data.data(); }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const;                      // scalar tensors only
  double at(int i) const { return impl_->data[static_cast<size_t>(i)]; }
  double at(int i, int j) const;            // rank-2 only
  double& mut(int i) { return impl_->data[static_cast<size_t>(i)]; }
  double& mut(int i, int j);

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return impl_ && impl_->grad.has_value(); }
  const std::vector<double>& grad() const;
  std::vector<double>& ensure_grad();       // allocates zeros on first use
  void zero_grad();                          // zeroes if present
  void clear_grad() { impl_->grad.reset(); }

  Tensor clone() const;                      // deep value copy, no grad
  Tensor reshaped(Shape shape) const;        // same data, new shape (copy)

  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

enum class OpKind {
  MatMul,
  MatVec,
  Add,
  Sub,
  Mul,
  Scale,
  Gelu,
  Log,
  Sigmoid,
  Softmax,
  LayerNorm,
  CrossEntropy,
  KlDiv,
  Embedding,
  AddRowwise,
  CausalAttention,
  Dropout,
  Row,
  Index,
  RowSplice,
  Sum,
};

// Define-by-run tape. Rebuilt per forward pass; confined to one thread.
class Graph {
 public:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    std::vector<uint8_t> input_needs_grad;  // requires_grad captured at record time
    Tensor out;
    std::vector<double> saved;  // op-specific context (softmax probs, norms, ...)
    std::vector<int> iargs;
    double darg = 0.0;

    bool needs(size_t i) const { return input_needs_grad[i] != 0; }
  };

  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  size_t node_count() const { return nodes_.size(); }
  int kl_clamp_events() const { return kl_clamp_events_; }
  void note_kl_clamp() { ++kl_clamp_events_; }

  void push(Node&& node) { nodes_.push_back(std::move(node)); }

  // Reverse sweep from a scalar loss; accumulates into requires_grad leaves
  // and consumes the tape.
  void backward(const Tensor& loss);
  void reset() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
  int kl_clamp_events_ = 0;
};

// --- ops -------------------------------------------------------------
// Each op computes eagerly and registers itself on g when recording is on
// and some input requires grad.

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor matvec(Graph& g, const Tensor& a, const Tensor& x);

// Elementwise family. add/sub/mul accept equal shapes or a scalar on either
// side; nothing broader.
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& x, double c);
Tensor gelu(Graph& g, const Tensor& x);
Tensor log_op(Graph& g, const Tensor& x);  // elementwise natural log, x > 0
Tensor sigmoid(Graph& g, const Tensor& x);

Tensor softmax(Graph& g, const Tensor& x, int axis);
Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& targets);
Tensor kl_div(Graph& g, const Tensor& p, const Tensor& q);

Tensor embedding(Graph& g, const Tensor& table, const std::vector<int>& ids);
Tensor add_rowwise(Graph& g, const Tensor& x, const Tensor& bias);

// Multi-head causal self-attention over rows packed as [batch*seq, d_model].
Tensor causal_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                        int batch, int seq_len, int n_heads);

Tensor dropout(Graph& g, const Tensor& x, double rate, Rng& rng);

Tensor row(Graph& g, const Tensor& x, int i);
Tensor index(Graph& g, const Tensor& v, int i);
Tensor row_splice(Graph& g, const Tensor& x, const Tensor& replacement, int i);
Tensor sum(Graph& g, const Tensor& x);

// --- plain value helpers (no autodiff) --------------------------------
double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& x);
int argmax(const Tensor& v);
bool bitwise_equal(const Tensor& a, const Tensor& b);

constexpr double kGeluCubicCoeff = 0.044715;  // tanh-approximation constant
constexpr double kKlClampFloor = 1e-12;

}  // namespace remedi
