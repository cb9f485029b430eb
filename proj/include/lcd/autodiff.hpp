#pragma once

// Reverse-mode automatic differentiation over shaped double tensors.
//
// A Tape records primitive applications define-by-run; a Var is a handle to
// one recorded value. Every tensor is viewed as a row-major matrix for the
// purposes of the primitives: rank 0 is 1x1, rank 1 [c] is 1xc, rank 2 [r,c]
// is rxc. Higher ranks are not needed by the loss and are rejected.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lcd::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel(shape_), 0.0) {
    check_rank();
  }
  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + to_string(shape_) + " holds " +
                                  std::to_string(numel(shape_)) + " values, got " +
                                  std::to_string(data_.size()));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor filled(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1)
      throw std::invalid_argument("tensor: item() on shape " + to_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

 private:
  void check_rank() const {
    if (shape_.size() > 2)
      throw std::invalid_argument("tensor: rank > 2 unsupported, shape " + to_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  scale,
  shift,
  square,
  sqrt,
  exp,
  log,
  relu,
  matmul,
  concat,
  max_rows,
  sum,
  row_norm,
  gather_rows,
  broadcast_rows,
  slice_rows,
  reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::relu: return "relu";
    case Op::matmul: return "matmul";
    case Op::concat: return "concat";
    case Op::max_rows: return "max_rows";
    case Op::sum: return "sum";
    case Op::row_norm: return "row_norm";
    case Op::gather_rows: return "gather_rows";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::slice_rows: return "slice_rows";
    case Op::reshape: return "reshape";
  }
  return "?";
}

// Op parameters that are not tensors. `constant` serves scale/shift;
// `indices` carries gather rows, the [begin,end) of slice_rows, the row count
// of broadcast_rows, or the target shape of reshape. Indices are constants:
// no gradient flows through them.
struct Attrs {
  double constant = 0.0;
  std::vector<std::size_t> indices;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradMap = std::map<std::string, Tensor, std::less<>>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap view(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

// How the second operand of an elementwise binary op lines up with the first.
enum class Broadcast { same, scalar, row };

inline Broadcast classify(const Tensor& a, const Tensor& b, Op op) {
  if (a.size() == b.size() && a.rows() == b.rows() && a.cols() == b.cols())
    return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  throw std::invalid_argument(std::string(op_name(op)) + ": cannot broadcast " +
                              to_string(b.shape()) + " onto " + to_string(a.shape()));
}

// Calls fn(i, j) for every element i of `a` and its partner j in `b`.
template <typename Fn>
void for_each_pair(const Tensor& a, const Tensor& b, Op op, Fn&& fn) {
  switch (classify(a, b, op)) {
    case Broadcast::same:
      for (std::size_t i = 0; i < a.size(); ++i) fn(i, i);
      return;
    case Broadcast::scalar:
      for (std::size_t i = 0; i < a.size(); ++i) fn(i, std::size_t{0});
      return;
    case Broadcast::row: {
      const std::size_t rows = a.rows(), cols = a.cols();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) fn(r * cols + c, c);
      return;
    }
  }
}

}  // namespace detail

class Tape {
 public:
  // In strict mode every recorded op rejects non-finite inputs.
  explicit Tape(bool strict = false) : strict_(strict) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool strict() const { return strict_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value) { return push_leaf(std::move(value), {}, false); }

  // Differentiable leaf. Named leaves are reported by backward().
  Var variable(std::string name, Tensor value) {
    if (name.empty()) throw std::invalid_argument("tape: variable name must be nonempty");
    return push_leaf(std::move(value), std::move(name), true);
  }

  Var record(Op op, std::span<const Var> inputs, Attrs attrs = {}) {
    if (op == Op::leaf) throw std::invalid_argument("tape: leaves are created by constant/variable");
    const std::size_t arity = expected_arity(op);
    if (inputs.size() != arity)
      throw std::invalid_argument(std::string(op_name(op)) + ": expects " + std::to_string(arity) +
                                  " inputs, got " + std::to_string(inputs.size()));
    Node node;
    node.op = op;
    node.attrs = std::move(attrs);
    for (std::size_t k = 0; k < arity; ++k) {
      if (inputs[k].tape() != this)
        throw std::invalid_argument(std::string(op_name(op)) + ": input belongs to another tape");
      node.in[k] = static_cast<std::int64_t>(inputs[k].id());
      const Node& src = nodes_[inputs[k].id()];
      node.requires_grad = node.requires_grad || src.requires_grad;
      if (strict_ && !src.value.all_finite())
        throw std::domain_error(std::string(op_name(op)) + ": non-finite input (strict mode)");
    }
    evaluate(node);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient accumulated by the last backward(); zeros when unreached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  // Recompute every non-leaf value from the current leaves, in recording order.
  void replay() {
    for (auto& node : nodes_)
      if (node.op != Op::leaf) evaluate(node);
  }

  // Replace the value of a leaf (same shape); call replay() to propagate.
  void set_leaf(Var v, Tensor value) {
    Node& n = nodes_.at(v.id());
    if (n.op != Op::leaf) throw std::invalid_argument("tape: set_leaf on a non-leaf");
    if (n.value.shape() != value.shape())
      throw std::invalid_argument("tape: set_leaf shape " + to_string(value.shape()) + " vs " +
                                  to_string(n.value.shape()));
    n.value = std::move(value);
  }

  // Piecewise regime of the recorded function: relu masks, max-pool argmaxes and
  // gather indices. Two evaluations with equal signatures lie on the same smooth piece.
  std::vector<std::size_t> regime() const {
    std::vector<std::size_t> sig;
    for (const auto& n : nodes_) {
      if (n.op == Op::max_rows) sig.insert(sig.end(), n.argmax.begin(), n.argmax.end());
      if (n.op == Op::gather_rows) sig.insert(sig.end(), n.attrs.indices.begin(), n.attrs.indices.end());
      if (n.op == Op::relu) {
        const auto& x = nodes_[n.in[0]].value;
        for (double v : x.data()) sig.push_back(v > 0.0 ? 1 : 0);
      }
    }
    return sig;
  }

  GradMap backward(Var root) {
    if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    Node& r = nodes_.at(root.id());
    if (r.value.size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  to_string(r.value.shape()));
    for (auto& n : nodes_) n.has_grad = false;
    if (r.requires_grad) {
      touch(r)[0] = 1.0;
      for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.op != Op::leaf && n.requires_grad && n.has_grad) pullback(n);
      }
    }
    GradMap out;
    for (const auto& n : nodes_) {
      if (n.op != Op::leaf || n.name.empty()) continue;
      Tensor g = n.has_grad ? n.grad : Tensor(n.value.shape());
      auto [it, inserted] = out.emplace(n.name, g);
      if (!inserted) {
        for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::leaf;
    std::int64_t in[2] = {-1, -1};
    Attrs attrs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> argmax;
    std::string name;
  };

  static std::size_t expected_arity(Op op) {
    switch (op) {
      case Op::add:
      case Op::sub:
      case Op::mul:
      case Op::div:
      case Op::matmul:
      case Op::concat:
        return 2;
      case Op::leaf:
        return 0;
      default:
        return 1;
    }
  }

  Var push_leaf(Tensor value, std::string name, bool requires_grad) {
    if (strict_ && !value.all_finite())
      throw std::domain_error("leaf: non-finite value (strict mode)");
    Node node;
    node.value = std::move(value);
    node.name = std::move(name);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  std::span<double> touch(Node& n) {
    if (!n.has_grad) {
      if (n.grad.shape() != n.value.shape()) {
        n.grad = Tensor(n.value.shape());
      } else {
        std::fill(n.grad.data().begin(), n.grad.data().end(), 0.0);
      }
      n.has_grad = true;
    }
    return n.grad.data();
  }

  // Gradient buffer of input k, or empty when that input needs no gradient.
  std::span<double> input_grad(const Node& n, int k) {
    Node& src = nodes_[n.in[k]];
    if (!src.requires_grad) return {};
    return touch(src);
  }

  void evaluate(Node& n) {
    using detail::view;
    const Tensor& a = nodes_[n.in[0]].value;
    const char* name = op_name(n.op);
    auto unary = [&](auto fn) {
      Tensor out(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
      n.value = std::move(out);
    };
    auto binary = [&](auto fn) {
      const Tensor& b = nodes_[n.in[1]].value;
      Tensor out(a.shape());
      detail::for_each_pair(a, b, n.op, [&](std::size_t i, std::size_t j) { out[i] = fn(a[i], b[j]); });
      n.value = std::move(out);
    };
    switch (n.op) {
      case Op::leaf:
        return;
      case Op::add: return binary([](double x, double y) { return x + y; });
      case Op::sub: return binary([](double x, double y) { return x - y; });
      case Op::mul: return binary([](double x, double y) { return x * y; });
      case Op::div: return binary([](double x, double y) { return x / y; });
      case Op::neg: return unary([](double x) { return -x; });
      case Op::scale: {
        const double c = n.attrs.constant;
        return unary([c](double x) { return c * x; });
      }
      case Op::shift: {
        const double c = n.attrs.constant;
        return unary([c](double x) { return x + c; });
      }
      case Op::square: return unary([](double x) { return x * x; });
      case Op::sqrt: return unary([](double x) { return std::sqrt(x); });
      case Op::exp: return unary([](double x) { return std::exp(x); });
      case Op::log: return unary([](double x) { return std::log(x); });
      case Op::relu: return unary([](double x) { return x > 0.0 ? x : 0.0; });
      case Op::matmul: {
        const Tensor& b = nodes_[n.in[1]].value;
        if (a.cols() != b.rows())
          throw std::invalid_argument("matmul: inner dimensions differ, " + to_string(a.shape()) +
                                      " x " + to_string(b.shape()));
        Tensor out({a.rows(), b.cols()});
        view(out).noalias() = view(a) * view(b);
        n.value = std::move(out);
        return;
      }
      case Op::concat: {
        const Tensor& b = nodes_[n.in[1]].value;
        if (a.rows() != b.rows() || (a.rank() == 2) != (b.rank() == 2))
          throw std::invalid_argument("concat: row mismatch, " + to_string(a.shape()) + " and " +
                                      to_string(b.shape()));
        const std::size_t ca = a.cols(), cb = b.cols(), rows = a.rows();
        Shape shape = a.rank() == 2 ? Shape{rows, ca + cb} : Shape{ca + cb};
        Tensor out(shape);
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(&a.data()[r * ca], ca, &out.data()[r * (ca + cb)]);
          std::copy_n(&b.data()[r * cb], cb, &out.data()[r * (ca + cb) + ca]);
        }
        n.value = std::move(out);
        return;
      }
      case Op::max_rows: {
        const std::size_t rows = a.rows(), cols = a.cols();
        Tensor out({1, cols});
        n.argmax.assign(cols, 0);
        for (std::size_t c = 0; c < cols; ++c) out[c] = a[c];
        for (std::size_t r = 1; r < rows; ++r) {
          const double* row = &a.data()[r * cols];
          for (std::size_t c = 0; c < cols; ++c) {
            if (row[c] > out[c]) {
              out[c] = row[c];
              n.argmax[c] = r;
            }
          }
        }
        n.value = std::move(out);
        return;
      }
      case Op::sum: {
        double s = 0.0;
        for (double v : a.data()) s += v;
        n.value = Tensor::scalar(s);
        return;
      }
      case Op::row_norm: {
        const std::size_t rows = a.rows(), cols = a.cols();
        Tensor out({rows, 1});
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c] * a[r * cols + c];
          out[r] = std::sqrt(s);
        }
        n.value = std::move(out);
        return;
      }
      case Op::gather_rows: {
        const auto& idx = n.attrs.indices;
        const std::size_t cols = a.cols();
        Tensor out({idx.size(), cols});
        for (std::size_t r = 0; r < idx.size(); ++r) {
          if (idx[r] >= a.rows())
            throw std::invalid_argument("gather_rows: index " + std::to_string(idx[r]) +
                                        " out of range for " + to_string(a.shape()));
          std::copy_n(&a.data()[idx[r] * cols], cols, &out.data()[r * cols]);
        }
        n.value = std::move(out);
        return;
      }
      case Op::broadcast_rows: {
        if (a.rows() != 1 || n.attrs.indices.size() != 1)
          throw std::invalid_argument("broadcast_rows: expects a single row, got " +
                                      to_string(a.shape()));
        const std::size_t rows = n.attrs.indices[0], cols = a.cols();
        Tensor out({rows, cols});
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data().data(), cols, &out.data()[r * cols]);
        n.value = std::move(out);
        return;
      }
      case Op::slice_rows: {
        const auto& ix = n.attrs.indices;
        if (ix.size() != 2 || ix[0] > ix[1] || ix[1] > a.rows())
          throw std::invalid_argument("slice_rows: bad range for " + to_string(a.shape()));
        const std::size_t cols = a.cols();
        Tensor out({ix[1] - ix[0], cols});
        std::copy_n(&a.data()[ix[0] * cols], (ix[1] - ix[0]) * cols, out.data().data());
        n.value = std::move(out);
        return;
      }
      case Op::reshape: {
        Shape shape(n.attrs.indices.begin(), n.attrs.indices.end());
        if (numel(shape) != a.size())
          throw std::invalid_argument("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
        n.value = Tensor(shape, std::vector<double>(a.data().begin(), a.data().end()));
        return;
      }
    }
    throw std::logic_error(std::string("tape: unhandled op ") + name);
  }

  void pullback(Node& n) {
    using detail::view;
    const Tensor& a = nodes_[n.in[0]].value;
    const std::span<const double> up = n.grad.data();

    auto unary = [&](auto dfn) {
      auto ga = input_grad(n, 0);
      if (ga.empty()) return;
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += up[i] * dfn(a[i], n.value[i]);
    };
    // d(out)/da and d(out)/db for elementwise binaries, reduced for broadcast b.
    auto binary = [&](auto da, auto db) {
      const Tensor& b = nodes_[n.in[1]].value;
      auto ga = input_grad(n, 0);
      auto gb = input_grad(n, 1);
      if (!ga.empty())
        detail::for_each_pair(a, b, n.op, [&](std::size_t i, std::size_t j) { ga[i] += up[i] * da(a[i], b[j]); });
      if (!gb.empty())
        detail::for_each_pair(a, b, n.op, [&](std::size_t i, std::size_t j) { gb[j] += up[i] * db(a[i], b[j]); });
    };

    switch (n.op) {
      case Op::leaf:
        return;
      case Op::add:
        return binary([](double, double) { return 1.0; }, [](double, double) { return 1.0; });
      case Op::sub:
        return binary([](double, double) { return 1.0; }, [](double, double) { return -1.0; });
      case Op::mul:
        return binary([](double, double y) { return y; }, [](double x, double) { return x; });
      case Op::div:
        return binary([](double, double y) { return 1.0 / y; },
                      [](double x, double y) { return -x / (y * y); });
      case Op::neg: return unary([](double, double) { return -1.0; });
      case Op::scale: {
        const double c = n.attrs.constant;
        return unary([c](double, double) { return c; });
      }
      case Op::shift: return unary([](double, double) { return 1.0; });
      case Op::square: return unary([](double x, double) { return 2.0 * x; });
      case Op::sqrt: return unary([](double, double y) { return 0.5 / y; });
      case Op::exp: return unary([](double, double y) { return y; });
      case Op::log: return unary([](double x, double) { return 1.0 / x; });
      case Op::relu: return unary([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
      case Op::matmul: {
        const Tensor& b = nodes_[n.in[1]].value;
        auto g = detail::ConstMap(up.data(), static_cast<Eigen::Index>(a.rows()),
                                  static_cast<Eigen::Index>(b.cols()));
        if (auto ga = input_grad(n, 0); !ga.empty()) {
          detail::MutMap(ga.data(), static_cast<Eigen::Index>(a.rows()),
                         static_cast<Eigen::Index>(a.cols()))
              .noalias() += g * view(b).transpose();
        }
        if (auto gb = input_grad(n, 1); !gb.empty()) {
          detail::MutMap(gb.data(), static_cast<Eigen::Index>(b.rows()),
                         static_cast<Eigen::Index>(b.cols()))
              .noalias() += view(a).transpose() * g;
        }
        return;
      }
      case Op::concat: {
        const Tensor& b = nodes_[n.in[1]].value;
        const std::size_t ca = a.cols(), cb = b.cols(), rows = a.rows();
        auto ga = input_grad(n, 0);
        auto gb = input_grad(n, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!ga.empty())
            for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += up[r * (ca + cb) + c];
          if (!gb.empty())
            for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += up[r * (ca + cb) + ca + c];
        }
        return;
      }
      case Op::max_rows: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        const std::size_t cols = a.cols();
        for (std::size_t c = 0; c < cols; ++c) ga[n.argmax[c] * cols + c] += up[c];
        return;
      }
      case Op::sum: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        for (auto& g : ga) g += up[0];
        return;
      }
      case Op::row_norm: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        const std::size_t rows = a.rows(), cols = a.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          const double norm = n.value[r];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += up[r] * a[r * cols + c] / norm;
        }
        return;
      }
      case Op::gather_rows: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        const auto& idx = n.attrs.indices;
        const std::size_t cols = a.cols();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t c = 0; c < cols; ++c) ga[idx[r] * cols + c] += up[r * cols + c];
        return;
      }
      case Op::broadcast_rows: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        const std::size_t rows = n.attrs.indices[0], cols = a.cols();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) ga[c] += up[r * cols + c];
        return;
      }
      case Op::slice_rows: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        const std::size_t offset = n.attrs.indices[0] * a.cols();
        for (std::size_t i = 0; i < up.size(); ++i) ga[offset + i] += up[i];
        return;
      }
      case Op::reshape: {
        auto ga = input_grad(n, 0);
        if (ga.empty()) return;
        for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
        return;
      }
    }
  }

  bool strict_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("var: unbound handle");
  return tape_->value(*this);
}

// ---------------------------------------------------------------------------
// Primitive wrappers

namespace detail {
inline Var rec(Op op, Var a, Attrs attrs = {}) {
  const Var in[] = {a};
  return a.tape()->record(op, in, std::move(attrs));
}
inline Var rec(Op op, Var a, Var b) {
  const Var in[] = {a, b};
  return a.tape()->record(op, in);
}
}  // namespace detail

inline Var add(Var a, Var b) { return detail::rec(Op::add, a, b); }
inline Var sub(Var a, Var b) { return detail::rec(Op::sub, a, b); }
inline Var mul(Var a, Var b) { return detail::rec(Op::mul, a, b); }
inline Var div(Var a, Var b) { return detail::rec(Op::div, a, b); }
inline Var neg(Var a) { return detail::rec(Op::neg, a); }
inline Var scale(Var a, double c) { return detail::rec(Op::scale, a, Attrs{c, {}}); }
inline Var shift(Var a, double c) { return detail::rec(Op::shift, a, Attrs{c, {}}); }
inline Var square(Var a) { return detail::rec(Op::square, a); }
inline Var sqrt(Var a) { return detail::rec(Op::sqrt, a); }
inline Var exp(Var a) { return detail::rec(Op::exp, a); }
inline Var log(Var a) { return detail::rec(Op::log, a); }
inline Var relu(Var a) { return detail::rec(Op::relu, a); }
inline Var matmul(Var a, Var b) { return detail::rec(Op::matmul, a, b); }
inline Var concat(Var a, Var b) { return detail::rec(Op::concat, a, b); }
inline Var max_rows(Var a) { return detail::rec(Op::max_rows, a); }
inline Var sum(Var a) { return detail::rec(Op::sum, a); }
inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }
inline Var row_norm(Var a) { return detail::rec(Op::row_norm, a); }
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  return detail::rec(Op::gather_rows, a, Attrs{0.0, std::move(rows)});
}
inline Var broadcast_rows(Var a, std::size_t rows) {
  return detail::rec(Op::broadcast_rows, a, Attrs{0.0, {rows}});
}
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  return detail::rec(Op::slice_rows, a, Attrs{0.0, {begin, end}});
}
inline Var reshape(Var a, Shape shape) {
  return detail::rec(Op::reshape, a, Attrs{0.0, std::move(shape)});
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return shift(a, c); }

inline GradMap backward(Tape& tape, Var root) { return tape.backward(root); }

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries whose perturbation crossed a kink or matching switch
  bool pass = true;
};

struct GradCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-5;
  // Entries are compared relative to max(|analytic|, |numeric|, floor), where
  // floor = floor_ratio * (largest gradient magnitude over all entries).
  double floor_ratio = 1e-6;
  // Skip entries whose +-step perturbation changes the piecewise regime.
  bool skip_regime_changes = true;
  // Re-run `fn` on a fresh tape for every probe instead of replaying the
  // recorded one. Needed when `fn` makes data-dependent choices outside the
  // tape (nearest-neighbour matching), which a replay would keep frozen.
  bool rebuild = true;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares backward() against central differences of `fn` for every entry of
// every input. Inputs are bound as variables "x0", "x1", ...
inline GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    vars.push_back(tape.variable("x" + std::to_string(k), inputs[k]));
  Var root = fn(tape, vars);
  GradMap grads = tape.backward(root);
  const auto base_regime = tape.regime();

  struct Entry {
    double analytic, numeric;
  };
  std::vector<Entry> entries;
  GradCheckReport report;
  double scale = 0.0;
  // Value and regime of fn at perturbed inputs.
  auto probe_at = [&](std::size_t k, const Tensor& probe) -> std::pair<double, bool> {
    if (!opt.rebuild) {
      tape.set_leaf(vars[k], probe);
      tape.replay();
      return {tape.value(root).item(), tape.regime() == base_regime};
    }
    Tape fresh;
    std::vector<Var> fv;
    for (std::size_t j = 0; j < inputs.size(); ++j)
      fv.push_back(fresh.constant(j == k ? probe : inputs[j]));
    Var r = fn(fresh, fv);
    return {r.value().item(), fresh.regime() == base_regime};
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& g = grads.at("x" + std::to_string(k));
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      Tensor probe = inputs[k];
      probe[i] = inputs[k][i] + opt.step;
      const auto [fp, same_p] = probe_at(k, probe);
      probe[i] = inputs[k][i] - opt.step;
      const auto [fm, same_m] = probe_at(k, probe);
      if (!opt.rebuild) tape.set_leaf(vars[k], inputs[k]);
      if (opt.skip_regime_changes && !(same_p && same_m)) {
        ++report.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      entries.push_back({g[i], numeric});
      scale = std::max({scale, std::abs(g[i]), std::abs(numeric)});
    }
  }
  tape.replay();
  const double floor = std::max(opt.floor_ratio * scale, std::numeric_limits<double>::min());
  for (const auto& e : entries) {
    const double abs_err = std::abs(e.analytic - e.numeric);
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
  }
  report.checked = entries.size();
  report.pass = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace lcd::ad
