#include "fhmr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fhmr {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

}  // namespace

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  require(numel_of(shape) == static_cast<int64_t>(values.size()),
          "tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = static_cast<size_t>(numel_of(shape));
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, "tensor: axis out of range");
  return node_->shape[static_cast<size_t>(axis)];
}

double Tensor::item() const {
  require(numel() == 1, "item() on tensor with shape " + shape_str(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }
Tensor Tensor::clone() const { return Tensor(node_->shape, node_->value, node_->requires_grad); }

void Tensor::backward() const {
  require(numel() == 1, "backward() requires a single-element tensor");
  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return out;
  auto* node = out.node_.get();
  node->requires_grad = true;
  for (auto& t : inputs) node->inputs.push_back(t.defined() ? t.node_ : std::make_shared<Node>());
  node->backward = std::move(backward);
  return out;
}

namespace ops {

namespace {

Node& in(Node& self, size_t i) { return *self.inputs[i]; }

// Maps an output flat index to an operand flat index under broadcasting.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& operand, const Shape& out) {
    n_ = numel_of(operand);
    const int64_t nout = numel_of(out);
    if (operand == out) {
      kind_ = Kind::kSame;
    } else if (n_ == 1) {
      kind_ = Kind::kScalar;
    } else {
      const size_t ro = out.size(), ra = operand.size();
      // Operand equal to a trailing block of out (after dropping leading 1s)
      // cycles with period n_.
      size_t lead = 0;
      while (lead < ra && operand[lead] == 1) ++lead;
      const size_t len = ra - lead;
      if (len <= ro && std::equal(operand.begin() + static_cast<std::ptrdiff_t>(lead), operand.end(),
                                  out.end() - static_cast<std::ptrdiff_t>(len))) {
        kind_ = Kind::kSuffix;
        return;
      }
      // Leading dims equal to out's, trailing dims all 1: blocks of size nout/n_.
      bool prefix = ra == ro;
      size_t k = 0;
      while (prefix && k < ra && operand[k] == out[k]) ++k;
      for (size_t i = k; prefix && i < ra; ++i) prefix = operand[i] == 1;
      if (prefix) {
        kind_ = Kind::kPrefix;
        block_ = nout / n_;
        return;
      }
      kind_ = Kind::kGeneral;
      map_.resize(static_cast<size_t>(nout));
      std::vector<int64_t> strides(ro, 0);
      int64_t s = 1;
      for (size_t i = 0; i < ra; ++i) {
        const size_t oi = ro - 1 - i;
        const int64_t d = operand[ra - 1 - i];
        strides[oi] = d == 1 ? 0 : s;
        s *= d;
      }
      std::vector<int64_t> counter(ro, 0);
      int64_t idx = 0;
      for (int64_t flat = 0; flat < nout; ++flat) {
        map_[static_cast<size_t>(flat)] = idx;
        for (size_t ax = ro; ax-- > 0;) {
          counter[ax]++;
          idx += strides[ax];
          if (counter[ax] < out[ax]) break;
          idx -= strides[ax] * counter[ax];
          counter[ax] = 0;
        }
      }
    }
  }

  int64_t operator()(int64_t i) const {
    switch (kind_) {
      case Kind::kSame: return i;
      case Kind::kScalar: return 0;
      case Kind::kSuffix: return i % n_;
      case Kind::kPrefix: return i / block_;
      default: return map_[static_cast<size_t>(i)];
    }
  }

 private:
  enum class Kind { kSame, kScalar, kSuffix, kPrefix, kGeneral };
  Kind kind_ = Kind::kSame;
  int64_t n_ = 1;
  int64_t block_ = 1;
  std::vector<int64_t> map_;
};

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    require(da == db || da == 1 || db == 1,
            "broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, GradA ga, GradB gb) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  const int64_t n = numel_of(out);
  auto ia = std::make_shared<BroadcastIndex>(a.shape(), out);
  auto ib = std::make_shared<BroadcastIndex>(b.shape(), out);
  std::vector<double> v(static_cast<size_t>(n));
  const auto av = a.values();
  const auto bv = b.values();
  for (int64_t i = 0; i < n; ++i) v[i] = fwd(av[(*ia)(i)], bv[(*ib)(i)]);
  return make_op_result(std::move(out), std::move(v), {a, b}, [ia, ib, ga, gb](Node& self) {
    const auto& A = in(self, 0).value;
    const auto& B = in(self, 1).value;
    const int64_t n = static_cast<int64_t>(self.value.size());
    if (in(self, 0).requires_grad) {
      auto& g = in(self, 0).ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const auto x = (*ia)(i), y = (*ib)(i);
        g[x] += self.grad[i] * ga(A[x], B[y], self.value[i]);
      }
    }
    if (in(self, 1).requires_grad) {
      auto& g = in(self, 1).ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const auto x = (*ia)(i), y = (*ib)(i);
        g[y] += self.grad[i] * gb(A[x], B[y], self.value[i]);
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (auto& x : v) x = fwd(x);
  return make_op_result(a.shape(), std::move(v), {a}, [deriv](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    const auto& x = in(self, 0).value;
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(x[i], self.value[i]);
  });
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "axis out of range");
  return axis;
}

// Splits a shape around an axis into (outer, axis extent, inner) counts.
struct AxisSplit {
  int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> v(static_cast<size_t>(n * m));
  MapMat(v.data(), n, m).noalias() = MapConstMat(a.values().data(), n, k) * MapConstMat(b.values().data(), k, m);
  return make_op_result({n, m}, std::move(v), {a, b}, [n, k, m](Node& self) {
    MapConstMat g(self.grad.data(), n, m);
    if (in(self, 0).requires_grad) {
      MapMat(in(self, 0).ensure_grad().data(), n, k).noalias() +=
          g * MapConstMat(in(self, 1).value.data(), k, m).transpose();
    }
    if (in(self, 1).requires_grad) {
      MapMat(in(self, 1).ensure_grad().data(), k, m).noalias() +=
          MapConstMat(in(self, 0).value.data(), n, k).transpose() * g;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t bs = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
  std::vector<double> v(static_cast<size_t>(bs * n * m));
  for (int64_t i = 0; i < bs; ++i) {
    MapMat(v.data() + i * n * m, n, m).noalias() =
        MapConstMat(a.values().data() + i * n * k, n, k) * MapConstMat(b.values().data() + i * k * m, k, m);
  }
  return make_op_result({bs, n, m}, std::move(v), {a, b}, [bs, n, k, m](Node& self) {
    for (int64_t i = 0; i < bs; ++i) {
      MapConstMat g(self.grad.data() + i * n * m, n, m);
      if (in(self, 0).requires_grad) {
        MapMat(in(self, 0).ensure_grad().data() + i * n * k, n, k).noalias() +=
            g * MapConstMat(in(self, 1).value.data() + i * k * m, k, m).transpose();
      }
      if (in(self, 1).requires_grad) {
        MapMat(in(self, 1).ensure_grad().data() + i * k * m, k, m).noalias() +=
            MapConstMat(in(self, 0).value.data() + i * n * k, n, k).transpose() * g;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2 && x.dim(-1) == w.dim(0), "linear: input width " + shape_str(x.shape()) +
                                                      " does not match weight " + shape_str(w.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor flat = reshape(x, {x.numel() / w.dim(0), w.dim(0)});
  Tensor y = matmul(flat, w);
  if (b.defined()) y = add(y, b);
  return reshape(y, out_shape);
}

Tensor reshape(const Tensor& a, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = a.numel() / known;
  require(numel_of(shape) == a.numel(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> v(a.values().begin(), a.values().end());
  return make_op_result(std::move(shape), std::move(v), {a}, [](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
  const int r = a.rank();
  require(static_cast<int>(dims.size()) == r, "permute: rank mismatch");
  Shape out(r);
  std::vector<int64_t> in_strides(r), out_strides(r);
  int64_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_strides[i] = s;
    s *= a.shape()[i];
  }
  for (int i = 0; i < r; ++i) out[i] = a.shape()[dims[i]];
  // For each output flat index, the source flat index.
  const int64_t n = a.numel();
  auto src = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
  std::vector<int64_t> counter(r, 0);
  int64_t idx = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    (*src)[flat] = idx;
    for (int ax = r - 1; ax >= 0; --ax) {
      counter[ax]++;
      idx += in_strides[dims[ax]];
      if (counter[ax] < out[ax]) break;
      idx -= in_strides[dims[ax]] * counter[ax];
      counter[ax] = 0;
    }
  }
  std::vector<double> v(static_cast<size_t>(n));
  const auto av = a.values();
  for (int64_t i = 0; i < n; ++i) v[i] = av[(*src)[i]];
  return make_op_result(std::move(out), std::move(v), {a}, [src](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) g[(*src)[i]] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r);
  Shape out = parts[0].shape();
  out[axis] = 0;
  std::vector<int64_t> extents;
  for (const auto& p : parts) {
    require(p.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      require(i == axis || p.shape()[i] == parts[0].shape()[i],
              "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    extents.push_back(p.shape()[axis]);
    out[axis] += p.shape()[axis];
  }
  const AxisSplit sp = split_at(out, axis);
  std::vector<double> v(static_cast<size_t>(numel_of(out)));
  int64_t offset = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].values();
    const int64_t chunk = extents[p] * sp.inner;
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, v.data() + o * sp.extent * sp.inner + offset);
    }
    offset += chunk;
  }
  return make_op_result(std::move(out), std::move(v), parts, [sp, extents](Node& self) {
    int64_t offset = 0;
    for (size_t p = 0; p < extents.size(); ++p) {
      const int64_t chunk = extents[p] * sp.inner;
      if (self.inputs[p]->requires_grad) {
        auto& g = self.inputs[p]->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const double* src = self.grad.data() + o * sp.extent * sp.inner + offset;
          double* dst = g.data() + o * chunk;
          for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t end) {
  axis = normalize_axis(axis, a.rank());
  require(0 <= start && start <= end && end <= a.shape()[axis], "slice: range out of bounds");
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out = a.shape();
  out[axis] = end - start;
  const int64_t chunk = (end - start) * sp.inner;
  std::vector<double> v(static_cast<size_t>(numel_of(out)));
  const auto av = a.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.data() + o * sp.extent * sp.inner + start * sp.inner, chunk, v.data() + o * chunk);
  }
  return make_op_result(std::move(out), std::move(v), {a}, [sp, start, chunk](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      double* dst = g.data() + o * sp.extent * sp.inner + start * sp.inner;
      const double* src = self.grad.data() + o * chunk;
      for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

Tensor index_rows(const Tensor& a, const std::vector<int64_t>& rows) {
  require(a.rank() >= 1, "index_rows: scalar input");
  const int64_t row = a.numel() / a.dim(0);
  Shape out = a.shape();
  out[0] = static_cast<int64_t>(rows.size());
  std::vector<double> v(static_cast<size_t>(numel_of(out)));
  const auto av = a.values();
  for (size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.dim(0), "index_rows: index out of range");
    std::copy_n(av.data() + rows[i] * row, row, v.data() + static_cast<int64_t>(i) * row);
  }
  return make_op_result(std::move(out), std::move(v), {a}, [rows, row](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i) {
      const double* src = self.grad.data() + static_cast<int64_t>(i) * row;
      double* dst = g.data() + rows[i] * row;
      for (int64_t j = 0; j < row; ++j) dst[j] += src[j];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double x : a.values()) s += x;
  return make_op_result({}, {s}, {a}, [](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (auto& x : g) x += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out = a.shape();
  out.erase(out.begin() + axis);
  std::vector<double> v(static_cast<size_t>(sp.outer * sp.inner), 0.0);
  const auto av = a.values();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t e = 0; e < sp.extent; ++e)
      for (int64_t i = 0; i < sp.inner; ++i) v[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i];
  return make_op_result(std::move(out), std::move(v), {a}, [sp](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t e = 0; e < sp.extent; ++e)
        for (int64_t i = 0; i < sp.inner; ++i) g[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor mean_axis(const Tensor& a, int axis) {
  const int64_t extent = a.dim(axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(extent));
}

Tensor max_axis(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.rank());
  const AxisSplit sp = split_at(a.shape(), axis);
  require(sp.extent > 0, "max_axis: empty axis");
  Shape out = a.shape();
  out.erase(out.begin() + axis);
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(sp.outer * sp.inner));
  std::vector<double> v(static_cast<size_t>(sp.outer * sp.inner));
  const auto av = a.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      int64_t best = o * sp.extent * sp.inner + i;
      for (int64_t e = 1; e < sp.extent; ++e) {
        const int64_t idx = (o * sp.extent + e) * sp.inner + i;
        if (av[idx] > av[best]) best = idx;
      }
      (*argmax)[o * sp.inner + i] = best;
      v[o * sp.inner + i] = av[best];
    }
  }
  return make_op_result(std::move(out), std::move(v), {a}, [argmax](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[i];
  });
}

Tensor normalize_last(const Tensor& a) {
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  std::vector<double> v(a.values().begin(), a.values().end());
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    const double n = std::max(std::sqrt(s), 1e-12);
    (*norms)[r] = n;
    for (int64_t j = 0; j < d; ++j) v[r * d + j] /= n;
  }
  return make_op_result(a.shape(), std::move(v), {a}, [norms, d, rows](Node& self) {
    auto& g = in(self, 0).ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += y[j] * gy[j];
      for (int64_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / (*norms)[r];
    }
  });
}

Tensor cross_last(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape() && a.dim(-1) == 3, "cross_last: expects matching [...,3] inputs");
  const int64_t rows = a.numel() / 3;
  std::vector<double> v(static_cast<size_t>(a.numel()));
  const auto x = a.values();
  const auto y = b.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = x.data() + 3 * r;
    const double* q = y.data() + 3 * r;
    v[3 * r + 0] = p[1] * q[2] - p[2] * q[1];
    v[3 * r + 1] = p[2] * q[0] - p[0] * q[2];
    v[3 * r + 2] = p[0] * q[1] - p[1] * q[0];
  }
  return make_op_result(a.shape(), std::move(v), {a, b}, [rows](Node& self) {
    const auto& x = in(self, 0).value;
    const auto& y = in(self, 1).value;
    // d(p x q) contracted with g: grad_p = q x g, grad_q = g x p.
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = x.data() + 3 * r;
      const double* q = y.data() + 3 * r;
      const double* g = self.grad.data() + 3 * r;
      if (in(self, 0).requires_grad) {
        auto& gp = in(self, 0).ensure_grad();
        gp[3 * r + 0] += q[1] * g[2] - q[2] * g[1];
        gp[3 * r + 1] += q[2] * g[0] - q[0] * g[2];
        gp[3 * r + 2] += q[0] * g[1] - q[1] * g[0];
      }
      if (in(self, 1).requires_grad) {
        auto& gq = in(self, 1).ensure_grad();
        gq[3 * r + 0] += g[1] * p[2] - g[2] * p[1];
        gq[3 * r + 1] += g[2] * p[0] - g[0] * p[2];
        gq[3 * r + 2] += g[0] * p[1] - g[1] * p[0];
      }
    }
  });
}

namespace {

struct ConvDims {
  int64_t channels, height, width, kh, kw, out_h, out_w;
  int stride, padding;
};

// Unfolds image[C,H,W] into columns[C*kh*kw, out_h*out_w].
void im2col(const double* image, const ConvDims& d, double* cols) {
  const int64_t npix = d.out_h * d.out_w;
  for (int64_t c = 0; c < d.channels; ++c) {
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        double* row = cols + ((c * d.kh + ky) * d.kw + kx) * npix;
        for (int64_t oy = 0; oy < d.out_h; ++oy) {
          const int64_t iy = oy * d.stride - d.padding + ky;
          for (int64_t ox = 0; ox < d.out_w; ++ox) {
            const int64_t ix = ox * d.stride - d.padding + kx;
            row[oy * d.out_w + ox] = (iy >= 0 && iy < d.height && ix >= 0 && ix < d.width)
                                         ? image[(c * d.height + iy) * d.width + ix]
                                         : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into image[C,H,W].
void col2im(const double* cols, const ConvDims& d, double* image) {
  const int64_t npix = d.out_h * d.out_w;
  for (int64_t c = 0; c < d.channels; ++c) {
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const double* row = cols + ((c * d.kh + ky) * d.kw + kx) * npix;
        for (int64_t oy = 0; oy < d.out_h; ++oy) {
          const int64_t iy = oy * d.stride - d.padding + ky;
          if (iy < 0 || iy >= d.height) continue;
          for (int64_t ox = 0; ox < d.out_w; ++ox) {
            const int64_t ix = ox * d.stride - d.padding + kx;
            if (ix < 0 || ix >= d.width) continue;
            image[(c * d.height + iy) * d.width + ix] += row[oy * d.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geo) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
          "conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const int64_t n = x.dim(0), co = w.dim(0);
  ConvDims d{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), 0, 0, geo.stride, geo.padding};
  d.out_h = (d.height + 2 * d.padding - d.kh) / d.stride + 1;
  d.out_w = (d.width + 2 * d.padding - d.kw) / d.stride + 1;
  require(d.out_h > 0 && d.out_w > 0, "conv2d: kernel larger than padded input");
  const int64_t krows = d.channels * d.kh * d.kw, npix = d.out_h * d.out_w;
  std::vector<double> v(static_cast<size_t>(n * co * npix));
  std::vector<double> cols(static_cast<size_t>(krows * npix));
  MapConstMat wm(w.values().data(), co, krows);
  for (int64_t i = 0; i < n; ++i) {
    im2col(x.values().data() + i * d.channels * d.height * d.width, d, cols.data());
    MapMat out(v.data() + i * co * npix, co, npix);
    out.noalias() = wm * MapConstMat(cols.data(), krows, npix);
    if (b.defined()) out.colwise() += Eigen::Map<const Eigen::VectorXd>(b.values().data(), co);
  }
  const bool has_bias = b.defined();
  return make_op_result({n, co, d.out_h, d.out_w}, std::move(v), {x, w, b}, [d, n, co, krows, npix,
                                                                            has_bias](Node& self) {
    Node& X = in(self, 0);
    Node& W = in(self, 1);
    std::vector<double> cols(static_cast<size_t>(krows * npix));
    const int64_t img = d.channels * d.height * d.width;
    for (int64_t i = 0; i < n; ++i) {
      MapConstMat g(self.grad.data() + i * co * npix, co, npix);
      if (W.requires_grad) {
        im2col(X.value.data() + i * img, d, cols.data());
        MapMat(W.ensure_grad().data(), co, krows).noalias() += g * MapConstMat(cols.data(), krows, npix).transpose();
      }
      if (X.requires_grad) {
        MapMat(cols.data(), krows, npix).noalias() = MapConstMat(W.value.data(), co, krows).transpose() * g;
        col2im(cols.data(), d, X.ensure_grad().data() + i * img);
      }
      // Plain loop: Eigen's vectorized sums peel by address, which would make
      // the result depend on heap alignment.
      if (has_bias && in(self, 2).requires_grad) {
        auto& gb = in(self, 2).ensure_grad();
        for (int64_t c = 0; c < co; ++c) {
          const double* src = self.grad.data() + (i * co + c) * npix;
          double s = 0;
          for (int64_t p = 0; p < npix; ++p) s += src[p];
          gb[c] += s;
        }
      }
    }
  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geo) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(0),
          "conv_transpose2d: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(1);
  // Geometry of the adjoint convolution that maps the output back onto x.
  ConvDims d{co, 0, 0, w.dim(2), w.dim(3), h, wd, geo.stride, geo.padding};
  d.height = (h - 1) * geo.stride - 2 * geo.padding + d.kh;
  d.width = (wd - 1) * geo.stride - 2 * geo.padding + d.kw;
  require(d.height > 0 && d.width > 0, "conv_transpose2d: empty output");
  const int64_t krows = co * d.kh * d.kw, npix = h * wd, out_img = co * d.height * d.width;
  std::vector<double> v(static_cast<size_t>(n * out_img), 0.0);
  std::vector<double> cols(static_cast<size_t>(krows * npix));
  MapConstMat wm(w.values().data(), ci, krows);
  for (int64_t i = 0; i < n; ++i) {
    MapMat(cols.data(), krows, npix).noalias() = wm.transpose() * MapConstMat(x.values().data() + i * ci * npix, ci, npix);
    col2im(cols.data(), d, v.data() + i * out_img);
    if (b.defined()) {
      for (int64_t c = 0; c < co; ++c) {
        double* plane = v.data() + i * out_img + c * d.height * d.width;
        for (int64_t p = 0; p < d.height * d.width; ++p) plane[p] += b.values()[c];
      }
    }
  }
  const bool has_bias = b.defined();
  return make_op_result({n, co, d.height, d.width}, std::move(v), {x, w, b},
                        [d, n, ci, co, krows, npix, out_img, has_bias](Node& self) {
                          Node& X = in(self, 0);
                          Node& W = in(self, 1);
                          std::vector<double> cols(static_cast<size_t>(krows * npix));
                          for (int64_t i = 0; i < n; ++i) {
                            im2col(self.grad.data() + i * out_img, d, cols.data());
                            MapConstMat gc(cols.data(), krows, npix);
                            if (X.requires_grad) {
                              MapMat(X.ensure_grad().data() + i * ci * npix, ci, npix).noalias() +=
                                  MapConstMat(W.value.data(), ci, krows) * gc;
                            }
                            if (W.requires_grad) {
                              MapMat(W.ensure_grad().data(), ci, krows).noalias() +=
                                  MapConstMat(X.value.data() + i * ci * npix, ci, npix) * gc.transpose();
                            }
                            if (has_bias && in(self, 2).requires_grad) {
                              auto& gb = in(self, 2).ensure_grad();
                              const int64_t plane = d.height * d.width;
                              for (int64_t c = 0; c < co; ++c) {
                                const double* src = self.grad.data() + i * out_img + c * plane;
                                double s = 0;
                                for (int64_t p = 0; p < plane; ++p) s += src[p];
                                gb[c] += s;
                              }
                            }
                          }
                        });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum, double eps) {
  require(x.rank() == 4 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
          "batch_norm2d: input " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const int64_t count = n * plane;
  std::vector<double> mu(static_cast<size_t>(c)), var(static_cast<size_t>(c));
  const auto xv = x.values();
  if (training) {
    require(count > 1, "batch_norm2d: need more than one value per channel in training mode");
    for (int64_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < plane; ++p) s += xv[(i * c + ch) * plane + p];
      mu[ch] = s / count;
      double q = 0;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < plane; ++p) {
          const double dlt = xv[(i * c + ch) * plane + p] - mu[ch];
          q += dlt * dlt;
        }
      var[ch] = q / count;
      auto rm = running_mean.mutable_values();
      auto rv = running_var.mutable_values();
      rm[ch] = (1 - momentum) * rm[ch] + momentum * mu[ch];
      rv[ch] = (1 - momentum) * rv[ch] + momentum * var[ch] * count / (count - 1);
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.values()[ch];
      var[ch] = running_var.values()[ch];
    }
  }
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
  std::vector<double> v(static_cast<size_t>(x.numel()));
  for (int64_t ch = 0; ch < c; ++ch) {
    (*inv_std)[ch] = 1.0 / std::sqrt(var[ch] + eps);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < plane; ++p) {
        const int64_t idx = (i * c + ch) * plane + p;
        (*xhat)[idx] = (xv[idx] - mu[ch]) * (*inv_std)[ch];
        v[idx] = gamma.values()[ch] * (*xhat)[idx] + beta.values()[ch];
      }
  }
  return make_op_result(x.shape(), std::move(v), {x, gamma, beta},
                        [inv_std, xhat, n, c, plane, count, training](Node& self) {
                          Node& X = in(self, 0);
                          Node& G = in(self, 1);
                          Node& B = in(self, 2);
                          for (int64_t ch = 0; ch < c; ++ch) {
                            double sg = 0, sgx = 0;
                            for (int64_t i = 0; i < n; ++i)
                              for (int64_t p = 0; p < plane; ++p) {
                                const int64_t idx = (i * c + ch) * plane + p;
                                sg += self.grad[idx];
                                sgx += self.grad[idx] * (*xhat)[idx];
                              }
                            if (G.requires_grad) G.ensure_grad()[ch] += sgx;
                            if (B.requires_grad) B.ensure_grad()[ch] += sg;
                            if (X.requires_grad) {
                              auto& gx = X.ensure_grad();
                              const double k = G.value[ch] * (*inv_std)[ch];
                              for (int64_t i = 0; i < n; ++i)
                                for (int64_t p = 0; p < plane; ++p) {
                                  const int64_t idx = (i * c + ch) * plane + p;
                                  if (training) {
                                    gx[idx] += k * (self.grad[idx] - sg / count - (*xhat)[idx] * sgx / count);
                                  } else {
                                    gx[idx] += k * self.grad[idx];
                                  }
                                }
                            }
                          }
                        });
}

}  // namespace ops
}  // namespace fhmr
