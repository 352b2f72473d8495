#include "remedi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>

namespace remedi {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

bool is_scalar_shape(const Shape& s) { return shape_numel(s) == 1; }

// C[m x n] (+)= A[m x k] * B[k x n]; deterministic row-split parallelism.
void gemm_acc(const double* a, int m, int k, const double* b, int n, double* c, bool accumulate) {
  CMap A(a, m, k), B(b, k, n);
  MMap C(c, m, n);
  if (static_cast<int64_t>(m) * k * n >= 1 << 21) {
#pragma omp parallel for schedule(static)
    for (int blk = 0; blk < 4; ++blk) {
      int r0 = static_cast<int>(static_cast<int64_t>(m) * blk / 4);
      int r1 = static_cast<int>(static_cast<int64_t>(m) * (blk + 1) / 4);
      if (r1 > r0) {
        if (accumulate)
          C.middleRows(r0, r1 - r0).noalias() += A.middleRows(r0, r1 - r0) * B;
        else
          C.middleRows(r0, r1 - r0).noalias() = A.middleRows(r0, r1 - r0) * B;
      }
    }
  } else {
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  }
}

void gemm_at_b_acc(const double* a, int m, int k, const double* b, int n, double* c) {
  // C[k x n] += A^T[k x m] * B[m x n]
  CMap A(a, m, k), B(b, m, n);
  MMap C(c, k, n);
  C.noalias() += A.transpose() * B;
}

void gemm_a_bt_acc(const double* a, int m, int k, const double* b, int n, double* c) {
  // C[m x n] += A[m x k] * B^T[k x n] where b is [n x k]
  CMap A(a, m, k), B(b, n, k);
  MMap C(c, m, n);
  if (static_cast<int64_t>(m) * k * n >= 1 << 21) {
#pragma omp parallel for schedule(static)
    for (int blk = 0; blk < 4; ++blk) {
      int r0 = static_cast<int>(static_cast<int64_t>(m) * blk / 4);
      int r1 = static_cast<int>(static_cast<int64_t>(m) * (blk + 1) / 4);
      if (r1 > r0) C.middleRows(r0, r1 - r0).noalias() += A.middleRows(r0, r1 - r0) * B.transpose();
    }
  } else {
    C.noalias() += A * B.transpose();
  }
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// --- Tensor ------------------------------------------------------------

static void validate_shape(const Shape& shape) {
  for (int d : shape) {
    if (d < 1) throw std::invalid_argument("tensor dimensions must be >= 1, got " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = rng.normal(0.0, stddev);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(int i, int j) const {
  return impl_->data[static_cast<size_t>(i) * dim(1) + j];
}

double& Tensor::mut(int i, int j) {
  return impl_->data[static_cast<size_t>(i) * dim(1) + j];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

std::vector<double>& Tensor::ensure_grad() {
  if (!impl_->grad) impl_->grad.emplace(impl_->data.size(), 0.0);
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) shape_error("reshape", impl_->shape, shape);
  Tensor t = clone();
  t.impl_->shape = std::move(shape);
  return t;
}

// --- op plumbing ---------------------------------------------------------

namespace {

bool want_tape(const Graph& g, std::initializer_list<const Tensor*> ins) {
  if (!g.recording()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

void record(Graph& g, OpKind kind, std::vector<Tensor> inputs, Tensor& out,
            std::vector<double> saved = {}, std::vector<int> iargs = {}, double darg = 0.0) {
  out.set_requires_grad(true);
  Graph::Node node;
  node.kind = kind;
  node.input_needs_grad.reserve(inputs.size());
  for (const Tensor& t : inputs) node.input_needs_grad.push_back(t.requires_grad() ? 1 : 0);
  node.inputs = std::move(inputs);
  node.out = out;
  node.saved = std::move(saved);
  node.iargs = std::move(iargs);
  node.darg = darg;
  g.push(std::move(node));
}

void acc(std::vector<double>& dst, const std::vector<double>& src, double scale = 1.0) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace

// --- matmul / matvec -----------------------------------------------------

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_acc(a.data(), m, k, b.data(), n, out.data(), false);
  if (want_tape(g, {&a, &b})) record(g, OpKind::MatMul, {a, b}, out);
  return out;
}

Tensor matvec(Graph& g, const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0)) shape_error("matvec", a.shape(), x.shape());
  int m = a.dim(0), k = a.dim(1);
  Tensor out = Tensor::zeros({m});
  CMap A(a.data(), m, k);
  Eigen::Map<const Eigen::VectorXd> X(x.data(), k);
  Eigen::Map<Eigen::VectorXd> Y(out.data(), m);
  Y.noalias() = A * X;
  if (want_tape(g, {&a, &x})) record(g, OpKind::MatVec, {a, x}, out);
  return out;
}

// --- elementwise -----------------------------------------------------------

namespace {

enum class EwMode { Equal, ScalarLeft, ScalarRight };

EwMode ew_mode(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return EwMode::Equal;
  if (is_scalar_shape(a.shape())) return EwMode::ScalarLeft;
  if (is_scalar_shape(b.shape())) return EwMode::ScalarRight;
  shape_error(op, a.shape(), b.shape());
}

template <typename F>
Tensor ew_binary(const std::string& name, const Tensor& a, const Tensor& b, F f, EwMode mode) {
  const Shape& out_shape = mode == EwMode::ScalarLeft ? b.shape() : a.shape();
  Tensor out = Tensor::zeros(out_shape);
  int64_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  switch (mode) {
    case EwMode::Equal:
      for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
      break;
    case EwMode::ScalarLeft:
      for (int64_t i = 0; i < n; ++i) po[i] = f(pa[0], pb[i]);
      break;
    case EwMode::ScalarRight:
      for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[0]);
      break;
  }
  (void)name;
  return out;
}

}  // namespace

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode("add", a, b);
  Tensor out = ew_binary("add", a, b, [](double x, double y) { return x + y; }, mode);
  if (want_tape(g, {&a, &b})) record(g, OpKind::Add, {a, b}, out, {}, {static_cast<int>(mode)});
  return out;
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode("sub", a, b);
  Tensor out = ew_binary("sub", a, b, [](double x, double y) { return x - y; }, mode);
  if (want_tape(g, {&a, &b})) record(g, OpKind::Sub, {a, b}, out, {}, {static_cast<int>(mode)});
  return out;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode("mul", a, b);
  Tensor out = ew_binary("mul", a, b, [](double x, double y) { return x * y; }, mode);
  if (want_tape(g, {&a, &b})) record(g, OpKind::Mul, {a, b}, out, {}, {static_cast<int>(mode)});
  return out;
}

Tensor scale(Graph& g, const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = c * x.data()[i];
  if (want_tape(g, {&x})) record(g, OpKind::Scale, {x}, out, {}, {}, c);
  return out;
}

Tensor gelu(Graph& g, const Tensor& x) {
  static const double kSqrt2OverPi = std::sqrt(2.0 / 3.14159265358979323846);
  Tensor out = Tensor::zeros(x.shape());
  int64_t n = x.size();
  const double* px = x.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (n >= 16384)
  for (int64_t i = 0; i < n; ++i) {
    double v = px[i];
    double u = kSqrt2OverPi * (v + kGeluCubicCoeff * v * v * v);
    double t = 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0);  // tanh via one exp
    po[i] = 0.5 * v * (1.0 + t);
  }
  if (want_tape(g, {&x})) record(g, OpKind::Gelu, {x}, out);
  return out;
}

Tensor log_op(Graph& g, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    if (x.data()[i] <= 0.0)
      throw std::domain_error("log: input must be positive, got " + std::to_string(x.data()[i]));
    out.data()[i] = std::log(x.data()[i]);
  }
  if (want_tape(g, {&x})) record(g, OpKind::Log, {x}, out);
  return out;
}

Tensor sigmoid(Graph& g, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = x.data()[i];
    out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  if (want_tape(g, {&x})) record(g, OpKind::Sigmoid, {x}, out);
  return out;
}

// --- softmax ----------------------------------------------------------------

Tensor softmax(Graph& g, const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  int64_t outer = 1, inner = 1;
  int n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) collapse(2) if (outer * inner >= 64)
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const double* src = px + o * n * inner + in;
      double* dst = po + o * n * inner + in;
      double mx = src[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, src[static_cast<int64_t>(i) * inner]);
      double z = 0.0;
      for (int i = 0; i < n; ++i) {
        double e = std::exp(src[static_cast<int64_t>(i) * inner] - mx);
        dst[static_cast<int64_t>(i) * inner] = e;
        z += e;
      }
      double invz = 1.0 / z;
      for (int i = 0; i < n; ++i) dst[static_cast<int64_t>(i) * inner] *= invz;
    }
  }
  if (want_tape(g, {&x})) record(g, OpKind::Softmax, {x}, out, {}, {axis});
  return out;
}

// --- layer norm -------------------------------------------------------------

Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d) shape_error("layer_norm gain", x.shape(), gain.shape());
  if (bias.rank() != 1 || bias.dim(0) != d) shape_error("layer_norm bias", x.shape(), bias.shape());
  int64_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> saved(static_cast<size_t>(rows) * 2);  // mean, rstd per row
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (rows >= 64)
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double* yr = po + r * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += xr[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = xr[i] - mean;
      var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + eps);
    saved[static_cast<size_t>(r) * 2] = mean;
    saved[static_cast<size_t>(r) * 2 + 1] = rstd;
    for (int i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * rstd * pg[i] + pb[i];
  }
  if (want_tape(g, {&x, &gain, &bias}))
    record(g, OpKind::LayerNorm, {x, gain, bias}, out, std::move(saved), {d});
  return out;
}

// --- cross entropy ------------------------------------------------------------

Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(n) + " rows");
  for (int t : targets) {
    if (t < 0 || t >= v)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(v));
  }
  bool tape = want_tape(g, {&logits});
  std::vector<double> probs;
  if (tape) probs.resize(static_cast<size_t>(n) * v);
  const double* pl = logits.data();
  std::vector<double> row_nll(static_cast<size_t>(n));
#pragma omp parallel for schedule(static) if (n >= 64)
  for (int r = 0; r < n; ++r) {
    const double* lr = pl + static_cast<int64_t>(r) * v;
    double mx = lr[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, lr[i]);
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += std::exp(lr[i] - mx);
    row_nll[static_cast<size_t>(r)] = mx + std::log(z) - lr[targets[static_cast<size_t>(r)]];
    if (tape) {
      double invz = 1.0 / z;
      double* pr = probs.data() + static_cast<int64_t>(r) * v;
      for (int i = 0; i < v; ++i) pr[i] = std::exp(lr[i] - mx) * invz;
    }
  }
  double total = 0.0;
  for (double x : row_nll) total += x;
  Tensor out = Tensor::scalar(total / n);
  if (tape) {
    std::vector<int> iargs(targets.begin(), targets.end());
    record(g, OpKind::CrossEntropy, {logits}, out, std::move(probs), std::move(iargs));
  }
  return out;
}

// --- KL divergence -------------------------------------------------------------

Tensor kl_div(Graph& g, const Tensor& p, const Tensor& q) {
  if (p.rank() != 1 || q.rank() != 1 || p.dim(0) != q.dim(0)) shape_error("kl_div", p.shape(), q.shape());
  int n = p.dim(0);
  double sp = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    if (p.at(i) < 0.0 || q.at(i) < 0.0)
      throw std::invalid_argument("kl_div: inputs must be nonnegative distributions");
    sp += p.at(i);
    sq += q.at(i);
  }
  if (std::abs(sp - 1.0) > 1e-9 || std::abs(sq - 1.0) > 1e-9)
    throw std::invalid_argument("kl_div: inputs must sum to 1 (got " + std::to_string(sp) + ", " +
                                std::to_string(sq) + ")");
  double total = 0.0;
  bool clamped = false;
  for (int i = 0; i < n; ++i) {
    double pi = p.at(i);
    if (pi == 0.0) continue;  // 0 * ln(0/q) := 0
    double qi = q.at(i);
    if (qi < kKlClampFloor) {
      qi = kKlClampFloor;
      clamped = true;
    }
    total += pi * std::log(pi / qi);
  }
  if (clamped) g.note_kl_clamp();
  Tensor out = Tensor::scalar(total);
  if (want_tape(g, {&p, &q})) record(g, OpKind::KlDiv, {p, q}, out);
  return out;
}

// --- embedding / rowwise ---------------------------------------------------------

Tensor embedding(Graph& g, const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
  int v = table.dim(0), d = table.dim(1);
  int n = static_cast<int>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= v)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(v));
  }
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    std::copy_n(table.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d, d,
                out.data() + static_cast<int64_t>(i) * d);
  if (want_tape(g, {&table})) record(g, OpKind::Embedding, {table}, out, {}, std::vector<int>(ids.begin(), ids.end()));
  return out;
}

Tensor add_rowwise(Graph& g, const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) shape_error("add_rowwise", x.shape(), bias.shape());
  int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros({n, d});
  const double* px = x.data();
  const double* pb = bias.data();
  double* po = out.data();
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(n) * d >= 16384)
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < d; ++i) po[static_cast<int64_t>(r) * d + i] = px[static_cast<int64_t>(r) * d + i] + pb[i];
  if (want_tape(g, {&x, &bias})) record(g, OpKind::AddRowwise, {x, bias}, out);
  return out;
}

// --- causal attention -------------------------------------------------------------

Tensor causal_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                        int batch, int seq_len, int n_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) shape_error("causal_attention", q.shape(), k.shape());
  if (q.rank() != 2 || q.dim(0) != batch * seq_len)
    throw std::invalid_argument("causal_attention: expected " + std::to_string(batch * seq_len) + " rows, got " +
                                shape_str(q.shape()));
  int d = q.dim(1);
  if (d % n_heads != 0) throw std::invalid_argument("causal_attention: d_model not divisible by n_heads");
  int dh = d / n_heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = Tensor::zeros({batch * seq_len, d});
  // softmax probabilities per (batch, head): [T x T], lower triangular
  std::vector<double> probs(static_cast<size_t>(batch) * n_heads * seq_len * seq_len, 0.0);

#pragma omp parallel for schedule(static) collapse(2)
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      const double* pq = q.data();
      const double* pk = k.data();
      const double* pv = v.data();
      double* po = out.data();
      double* pp = probs.data() + (static_cast<size_t>(b) * n_heads + h) * seq_len * seq_len;
      int64_t row0 = static_cast<int64_t>(b) * seq_len;
      int col0 = h * dh;
      for (int i = 0; i < seq_len; ++i) {
        const double* qi = pq + (row0 + i) * d + col0;
        double* pi = pp + static_cast<int64_t>(i) * seq_len;
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) {
          const double* kj = pk + (row0 + j) * d + col0;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          pi[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        double invz = 1.0 / z;
        double* oi = po + (row0 + i) * d + col0;
        for (int j = 0; j <= i; ++j) {
          pi[j] *= invz;
          const double* vj = pv + (row0 + j) * d + col0;
          for (int c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }
  if (want_tape(g, {&q, &k, &v}))
    record(g, OpKind::CausalAttention, {q, k, v}, out, std::move(probs), {batch, seq_len, n_heads});
  return out;
}

// --- dropout ------------------------------------------------------------------

Tensor dropout(Graph& g, const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  int64_t n = x.size();
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> mask(static_cast<size_t>(n));
  double keep = 1.0 - rate;
  for (int64_t i = 0; i < n; ++i) {
    mask[static_cast<size_t>(i)] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    out.data()[i] = x.data()[i] * mask[static_cast<size_t>(i)];
  }
  if (want_tape(g, {&x})) record(g, OpKind::Dropout, {x}, out, std::move(mask));
  return out;
}

// --- slicing -------------------------------------------------------------------

Tensor row(Graph& g, const Tensor& x, int i) {
  if (x.rank() != 2) throw std::invalid_argument("row: expected rank-2 tensor, got " + shape_str(x.shape()));
  if (i < 0 || i >= x.dim(0)) throw std::out_of_range("row: index " + std::to_string(i) + " out of " + std::to_string(x.dim(0)));
  int m = x.dim(1);
  Tensor out = Tensor::zeros({m});
  std::copy_n(x.data() + static_cast<int64_t>(i) * m, m, out.data());
  if (want_tape(g, {&x})) record(g, OpKind::Row, {x}, out, {}, {i});
  return out;
}

Tensor index(Graph& g, const Tensor& v, int i) {
  if (v.rank() != 1) throw std::invalid_argument("index: expected rank-1 tensor, got " + shape_str(v.shape()));
  if (i < 0 || i >= v.dim(0)) throw std::out_of_range("index: " + std::to_string(i) + " out of " + std::to_string(v.dim(0)));
  Tensor out = Tensor::scalar(v.at(i));
  if (want_tape(g, {&v})) record(g, OpKind::Index, {v}, out, {}, {i});
  return out;
}

Tensor row_splice(Graph& g, const Tensor& x, const Tensor& replacement, int i) {
  if (x.rank() != 2 || replacement.rank() != 1 || replacement.dim(0) != x.dim(1))
    shape_error("row_splice", x.shape(), replacement.shape());
  if (i < 0 || i >= x.dim(0))
    throw std::out_of_range("row_splice: row " + std::to_string(i) + " out of " + std::to_string(x.dim(0)));
  Tensor out = x.clone();
  std::copy_n(replacement.data(), replacement.dim(0), out.data() + static_cast<int64_t>(i) * x.dim(1));
  if (want_tape(g, {&x, &replacement})) record(g, OpKind::RowSplice, {x, replacement}, out, {}, {i});
  return out;
}

Tensor sum(Graph& g, const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  if (want_tape(g, {&x})) record(g, OpKind::Sum, {x}, out);
  return out;
}

// --- backward -----------------------------------------------------------------

namespace {

void backward_node(Graph& g, Graph::Node& node) {
  // Zero-init grads of differentiable inputs so disconnected leaves still
  // end up with explicit zero gradients. Differentiability was captured when
  // the op was recorded.
  for (size_t i = 0; i < node.inputs.size(); ++i)
    if (node.needs(i)) node.inputs[i].ensure_grad();
  if (!node.out.has_grad()) return;
  const std::vector<double>& go = node.out.grad();

  switch (node.kind) {
    case OpKind::MatMul: {
      Tensor &a = node.inputs[0], &b = node.inputs[1];
      int m = a.dim(0), k = a.dim(1), n = b.dim(1);
      if (node.needs(0)) gemm_a_bt_acc(go.data(), m, n, b.data(), k, a.ensure_grad().data());
      if (node.needs(1)) gemm_at_b_acc(a.data(), m, k, go.data(), n, b.ensure_grad().data());
      break;
    }
    case OpKind::MatVec: {
      Tensor &a = node.inputs[0], &x = node.inputs[1];
      int m = a.dim(0), k = a.dim(1);
      if (node.needs(0)) {
        double* da = a.ensure_grad().data();
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < k; ++c) da[static_cast<int64_t>(r) * k + c] += go[static_cast<size_t>(r)] * x.at(c);
      }
      if (node.needs(1)) {
        double* dx = x.ensure_grad().data();
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < k; ++c) dx[c] += go[static_cast<size_t>(r)] * a.at(r, c);
      }
      break;
    }
    case OpKind::Add:
    case OpKind::Sub: {
      double sign_b = node.kind == OpKind::Sub ? -1.0 : 1.0;
      Tensor &a = node.inputs[0], &b = node.inputs[1];
      auto mode = static_cast<EwMode>(node.iargs[0]);
      if (node.needs(0)) {
        auto& da = a.ensure_grad();
        if (mode == EwMode::ScalarLeft) {
          for (double v : go) da[0] += v;
        } else {
          acc(da, go);
        }
      }
      if (node.needs(1)) {
        auto& db = b.ensure_grad();
        if (mode == EwMode::ScalarRight) {
          for (double v : go) db[0] += sign_b * v;
        } else {
          acc(db, go, sign_b);
        }
      }
      break;
    }
    case OpKind::Mul: {
      Tensor &a = node.inputs[0], &b = node.inputs[1];
      auto mode = static_cast<EwMode>(node.iargs[0]);
      int64_t n = node.out.size();
      if (node.needs(0)) {
        auto& da = a.ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          double bv = mode == EwMode::ScalarRight ? b.at(0) : b.at(static_cast<int>(i));
          if (mode == EwMode::ScalarLeft)
            da[0] += go[static_cast<size_t>(i)] * b.at(static_cast<int>(i));
          else
            da[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * bv;
        }
      }
      if (node.needs(1)) {
        auto& db = b.ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          double av = mode == EwMode::ScalarLeft ? a.at(0) : a.at(static_cast<int>(i));
          if (mode == EwMode::ScalarRight)
            db[0] += go[static_cast<size_t>(i)] * a.at(static_cast<int>(i));
          else
            db[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * av;
        }
      }
      break;
    }
    case OpKind::Scale: {
      Tensor& x = node.inputs[0];
      if (node.needs(0)) acc(x.ensure_grad(), go, node.darg);
      break;
    }
    case OpKind::Gelu: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      static const double kSqrt2OverPi = std::sqrt(2.0 / 3.14159265358979323846);
      auto& dx = x.ensure_grad();
      int64_t n = x.size();
      for (int64_t i = 0; i < n; ++i) {
        double v = x.at(static_cast<int>(i));
        double u = kSqrt2OverPi * (v + kGeluCubicCoeff * v * v * v);
        double t = 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0);
        double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubicCoeff * v * v);
        dx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
      break;
    }
    case OpKind::Log: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      auto& dx = x.ensure_grad();
      for (int64_t i = 0; i < x.size(); ++i)
        dx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] / x.at(static_cast<int>(i));
      break;
    }
    case OpKind::Sigmoid: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      auto& dx = x.ensure_grad();
      const double* y = node.out.data();
      for (int64_t i = 0; i < x.size(); ++i)
        dx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::Softmax: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      int axis = node.iargs[0];
      int64_t outer = 1, inner = 1;
      int n = x.dim(axis);
      for (int i = 0; i < axis; ++i) outer *= x.dim(i);
      for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
      auto& dx = x.ensure_grad();
      const double* y = node.out.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n * inner + in;
          double dotv = 0.0;
          for (int i = 0; i < n; ++i) {
            int64_t at = base + static_cast<int64_t>(i) * inner;
            dotv += go[static_cast<size_t>(at)] * y[at];
          }
          for (int i = 0; i < n; ++i) {
            int64_t at = base + static_cast<int64_t>(i) * inner;
            dx[static_cast<size_t>(at)] += y[at] * (go[static_cast<size_t>(at)] - dotv);
          }
        }
      }
      break;
    }
    case OpKind::LayerNorm: {
      Tensor &x = node.inputs[0], &gain = node.inputs[1], &bias = node.inputs[2];
      int d = node.iargs[0];
      int64_t rows = x.size() / d;
      const double* px = x.data();
      const double* pg = gain.data();
      double* dx = node.needs(0) ? x.ensure_grad().data() : nullptr;
      double* dg = node.needs(1) ? gain.ensure_grad().data() : nullptr;
      double* db = node.needs(2) ? bias.ensure_grad().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        double mean = node.saved[static_cast<size_t>(r) * 2];
        double rstd = node.saved[static_cast<size_t>(r) * 2 + 1];
        const double* xr = px + r * d;
        const double* gr = go.data() + r * d;
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
        for (int i = 0; i < d; ++i) {
          double xhat = (xr[i] - mean) * rstd;
          double dxhat = gr[i] * pg[i];
          m1 += dxhat;
          m2 += dxhat * xhat;
          if (dg) dg[i] += gr[i] * xhat;
          if (db) db[i] += gr[i];
        }
        m1 /= d;
        m2 /= d;
        if (dx) {
          for (int i = 0; i < d; ++i) {
            double xhat = (xr[i] - mean) * rstd;
            double dxhat = gr[i] * pg[i];
            dx[r * d + i] += rstd * (dxhat - m1 - xhat * m2);
          }
        }
      }
      break;
    }
    case OpKind::CrossEntropy: {
      Tensor& logits = node.inputs[0];
      if (!node.needs(0)) break;
      int n = logits.dim(0), v = logits.dim(1);
      double g0 = go[0] / n;
      auto& dl = logits.ensure_grad();
      const double* probs = node.saved.data();
#pragma omp parallel for schedule(static) if (n >= 64)
      for (int r = 0; r < n; ++r) {
        const double* pr = probs + static_cast<int64_t>(r) * v;
        double* dr = dl.data() + static_cast<int64_t>(r) * v;
        for (int i = 0; i < v; ++i) dr[i] += g0 * pr[i];
        dr[node.iargs[static_cast<size_t>(r)]] -= g0;
      }
      break;
    }
    case OpKind::KlDiv: {
      Tensor &p = node.inputs[0], &q = node.inputs[1];
      int n = p.dim(0);
      double g0 = go[0];
      double* dp = node.needs(0) ? p.ensure_grad().data() : nullptr;
      double* dq = node.needs(1) ? q.ensure_grad().data() : nullptr;
      for (int i = 0; i < n; ++i) {
        double pi = p.at(i);
        if (pi == 0.0) continue;
        double qi = q.at(i);
        bool clamped = qi < kKlClampFloor;
        double qc = clamped ? kKlClampFloor : qi;
        if (dp) dp[i] += g0 * (std::log(pi / qc) + 1.0);
        if (dq && !clamped) dq[i] += g0 * (-pi / qc);
      }
      break;
    }
    case OpKind::Embedding: {
      Tensor& table = node.inputs[0];
      if (!node.needs(0)) break;
      int d = table.dim(1);
      auto& dt = table.ensure_grad();
      for (size_t i = 0; i < node.iargs.size(); ++i) {
        const double* src = go.data() + static_cast<int64_t>(i) * d;
        double* dst = dt.data() + static_cast<int64_t>(node.iargs[i]) * d;
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
      break;
    }
    case OpKind::AddRowwise: {
      Tensor &x = node.inputs[0], &bias = node.inputs[1];
      int n = node.out.dim(0), d = node.out.dim(1);
      if (node.needs(0)) acc(x.ensure_grad(), go);
      if (node.needs(1)) {
        auto& db = bias.ensure_grad();
        for (int r = 0; r < n; ++r)
          for (int i = 0; i < d; ++i) db[static_cast<size_t>(i)] += go[static_cast<size_t>(r) * d + i];
      }
      break;
    }
    case OpKind::CausalAttention: {
      Tensor &q = node.inputs[0], &k = node.inputs[1], &v = node.inputs[2];
      int batch = node.iargs[0], seq_len = node.iargs[1], n_heads = node.iargs[2];
      int d = q.dim(1), dh = d / n_heads;
      double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
      double* dq = node.needs(0) ? q.ensure_grad().data() : nullptr;
      double* dk = node.needs(1) ? k.ensure_grad().data() : nullptr;
      double* dv = node.needs(2) ? v.ensure_grad().data() : nullptr;
#pragma omp parallel for schedule(static) collapse(2)
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < n_heads; ++h) {
          const double* pq = q.data();
          const double* pk = k.data();
          const double* pv = v.data();
          const double* pp = node.saved.data() + (static_cast<size_t>(b) * n_heads + h) * seq_len * seq_len;
          int64_t row0 = static_cast<int64_t>(b) * seq_len;
          int col0 = h * dh;
          std::vector<double> ds(static_cast<size_t>(seq_len));
          for (int i = 0; i < seq_len; ++i) {
            const double* goi = go.data() + (row0 + i) * d + col0;
            const double* pi = pp + static_cast<int64_t>(i) * seq_len;
            // dP_ij = dOut_i . V_j ; dV_j += P_ij * dOut_i
            double dot_dp_p = 0.0;
            for (int j = 0; j <= i; ++j) {
              const double* vj = pv + (row0 + j) * d + col0;
              double dpij = 0.0;
              for (int c = 0; c < dh; ++c) dpij += goi[c] * vj[c];
              ds[static_cast<size_t>(j)] = dpij;
              dot_dp_p += dpij * pi[j];
              if (dv) {
                double* dvj = dv + (row0 + j) * d + col0;
                for (int c = 0; c < dh; ++c) dvj[c] += pi[j] * goi[c];
              }
            }
            // softmax backward, then scores -> q, k
            const double* qi = pq + (row0 + i) * d + col0;
            for (int j = 0; j <= i; ++j) {
              double dsij = pi[j] * (ds[static_cast<size_t>(j)] - dot_dp_p) * inv_sqrt;
              const double* kj = pk + (row0 + j) * d + col0;
              if (dq) {
                double* dqi = dq + (row0 + i) * d + col0;
                for (int c = 0; c < dh; ++c) dqi[c] += dsij * kj[c];
              }
              if (dk) {
                double* dkj = dk + (row0 + j) * d + col0;
                for (int c = 0; c < dh; ++c) dkj[c] += dsij * qi[c];
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::Dropout: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      auto& dx = x.ensure_grad();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += go[i] * node.saved[i];
      break;
    }
    case OpKind::Row: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      int i = node.iargs[0], m = x.dim(1);
      auto& dx = x.ensure_grad();
      for (int c = 0; c < m; ++c) dx[static_cast<size_t>(i) * m + c] += go[static_cast<size_t>(c)];
      break;
    }
    case OpKind::Index: {
      Tensor& v = node.inputs[0];
      if (!node.needs(0)) break;
      v.ensure_grad()[static_cast<size_t>(node.iargs[0])] += go[0];
      break;
    }
    case OpKind::RowSplice: {
      Tensor &x = node.inputs[0], &r = node.inputs[1];
      int i = node.iargs[0], m = x.dim(1);
      if (node.needs(0)) {
        auto& dx = x.ensure_grad();
        for (int rr = 0; rr < x.dim(0); ++rr) {
          if (rr == i) continue;
          for (int c = 0; c < m; ++c) dx[static_cast<size_t>(rr) * m + c] += go[static_cast<size_t>(rr) * m + c];
        }
      }
      if (node.needs(1)) {
        auto& dr = r.ensure_grad();
        for (int c = 0; c < m; ++c) dr[static_cast<size_t>(c)] += go[static_cast<size_t>(i) * m + c];
      }
      break;
    }
    case OpKind::Sum: {
      Tensor& x = node.inputs[0];
      if (!node.needs(0)) break;
      auto& dx = x.ensure_grad();
      for (auto& v : dx) v += go[0];
      break;
    }
  }
  (void)g;
}

}  // namespace

void Graph::backward(const Tensor& loss) {
  if (!recording_) throw std::logic_error("backward on a non-recording graph");
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  TensorImpl* li = loss.impl();
  if (!li->grad) li->grad.emplace(1, 0.0);
  (*li->grad)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) backward_node(*this, *it);
  nodes_.clear();
}

// --- helpers ------------------------------------------------------------------

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) shape_error("dot", a.shape(), b.shape());
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double l2_norm(const Tensor& x) { return std::sqrt(dot(x, x)); }

int argmax(const Tensor& v) {
  int best = 0;
  for (int64_t i = 1; i < v.size(); ++i)
    if (v.data()[i] > v.data()[best]) best = static_cast<int>(i);
  return best;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace remedi
