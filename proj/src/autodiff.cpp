// SPDX-License-Identifier: Apache-2.0
#include "fsq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fsq/error.hpp"
#include "fsq/kernels.hpp"

namespace fsq::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::batched_matmul: return "batched_matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::pow: return "pow";
    case Op::softmax_rows: return "softmax_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::concat_rows: return "concat_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_cols: return "pad_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::pad_rows: return "pad_rows";
    case Op::gather_rows: return "gather_rows";
    case Op::scatter_rows: return "scatter_rows";
    case Op::max_of: return "max_of";
    case Op::sum: return "sum";
    case Op::sum_to: return "sum_to";
    case Op::broadcast_to: return "broadcast_to";
    case Op::cross_entropy: return "cross_entropy";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
    case Op::custom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an invalid Var");
  return tape_->node(id_).value;
}

bool Var::requires_grad() const { return tape_ && tape_->node(id_).requires_grad; }

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{Op::leaf, std::move(value), {}, {}, true, true});
  return Var(this, static_cast<std::int64_t>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{Op::constant, std::move(value), {}, {}, false, true});
  return Var(this, static_cast<std::int64_t>(nodes_.size()) - 1);
}

Var Tape::record(Op op, Tensor value, std::vector<Var> inputs, BackwardFn backward,
                 bool differentiable_backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw ContractError(std::string("operands of ") + op_name(op) +
                                                " live on different tapes");
      needs = needs || node(in.id_).requires_grad;
    }
  }
  Node n{op, std::move(value), {}, {}, needs, differentiable_backward};
  if (needs) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::int64_t>(nodes_.size()) - 1);
}

std::vector<Var> Tape::gradients(const Var& output, std::span<const Var> wrt,
                                 GradOptions options) {
  if (output.tape_ != this) throw ContractError("gradients(): output belongs to another tape");
  if (output.value().rank() != 0)
    throw ContractError("gradients(): output must be rank 0, got shape " +
                        shape_string(output.shape()));
  const auto count = static_cast<std::size_t>(output.id_) + 1;

  // needed[i]: node i lies on a path to one of the requested nodes.
  std::vector<char> needed(count, 0);
  for (const auto& w : wrt) {
    if (w.tape_ != this) throw ContractError("gradients(): wrt node belongs to another tape");
    if (static_cast<std::size_t>(w.id_) < count) needed[static_cast<std::size_t>(w.id_)] = 1;
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (needed[i] || !nodes_[i].requires_grad) continue;
    for (const auto& in : nodes_[i].inputs)
      if (needed[static_cast<std::size_t>(in.id_)]) {
        needed[i] = 1;
        break;
      }
  }

  std::vector<Var> grads(count);
  const bool previous = grad_enabled_;
  grad_enabled_ = options.create_graph;
  try {
    grads[count - 1] = constant(Tensor::scalar(1.0));
    for (std::size_t i = count; i-- > 0;) {
      if (!grads[i].valid() || !needed[i]) continue;
      // The callback may append nodes; take copies before that happens.
      const Op op = nodes_[i].op;
      const BackwardFn backward = nodes_[i].backward;
      const std::vector<Var> inputs = nodes_[i].inputs;
      if (!backward) continue;
      if (options.create_graph && !nodes_[i].differentiable_backward)
        throw UnsupportedOpError(std::string("second-order gradient through op '") +
                                 op_name(op) + "' is not supported");
      Want want(inputs.size());
      for (std::size_t k = 0; k < inputs.size(); ++k)
        want[k] = needed[static_cast<std::size_t>(inputs[k].id_)];
      std::vector<Var> in_grads =
          backward(Var(this, static_cast<std::int64_t>(i)), grads[i], want);
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto in = static_cast<std::size_t>(inputs[k].id_);
        if (!needed[in] || k >= in_grads.size() || !in_grads[k].valid()) continue;
        grads[in] = grads[in].valid() ? add(grads[in], in_grads[k]) : in_grads[k];
      }
    }
  } catch (...) {
    grad_enabled_ = previous;
    throw;
  }
  grad_enabled_ = previous;

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id_);
    if (id < count && grads[id].valid())
      result.push_back(grads[id]);
    else
      result.push_back(constant(Tensor::zeros(w.shape())));
  }
  return result;
}

namespace {

struct View {
  std::size_t rows, cols;
};

View view_of(const Tensor& t) {
  if (t.rank() > 2) throw ShapeError("ops support rank <= 2, got " + shape_string(t.shape()));
  return {t.rows(), t.cols()};
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.rank() == 0) return b.shape();
  if (b.rank() == 0) return a.shape();
  const View va = view_of(a), vb = view_of(b);
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) +
                     " with " + shape_string(b.shape()));
  };
  return {dim(va.rows, vb.rows), dim(va.cols, vb.cols)};
}

template <class F>
Tensor binary_values(const Tensor& a, const Tensor& b, const char* op, F f) {
  Shape out_shape = broadcast_shape(a, b, op);
  const std::size_t n = shape_size(out_shape);
  std::vector<double> out(n);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  } else {
    const View vo = out_shape.empty() ? View{1, 1} : View{out_shape.size() == 2 ? out_shape[0] : 1, out_shape.back()};
    const View va = view_of(a), vb = view_of(b);
    const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
    for (std::size_t r = 0; r < vo.rows; ++r)
      for (std::size_t c = 0; c < vo.cols; ++c) {
        const double x = a_scalar ? a[0] : a[(va.rows == 1 ? 0 : r) * va.cols + (va.cols == 1 ? 0 : c)];
        const double y = b_scalar ? b[0] : b[(vb.rows == 1 ? 0 : r) * vb.cols + (vb.cols == 1 ? 0 : c)];
        out[r * vo.cols + c] = f(x, y);
      }
  }
  return Tensor(std::move(out_shape), std::move(out));
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Tensor(x.shape(), std::move(out));
}

Tensor unary_kernel(kernels::Unary op, const Tensor& x) {
  std::vector<double> out(x.size());
  kernels::unary(op, x.ptr(), out.data(), x.size());
  return Tensor(x.shape(), std::move(out));
}

// Reduction of a gradient onto an operand's shape; identity when shapes agree.
Var reduce_like(const Var& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return sum_to(g, shape);
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("operation on an invalid Var");
  return v.tape();
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = trans_a ? av.cols() : av.rows();
  const std::size_t k = trans_a ? av.rows() : av.cols();
  const std::size_t kb = trans_b ? bv.cols() : bv.rows();
  const std::size_t n = trans_b ? bv.rows() : bv.cols();
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(av.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_string(bv.shape()) +
                     (trans_b ? "^T" : "") + ")");
  std::vector<double> out(m * n);
  kernels::matmul(av.ptr(), bv.ptr(), out.data(), m, n, k, trans_a, trans_b);
  return tape_of(a).record(
      Op::matmul, Tensor({m, n}, std::move(out)), {a, b},
      [a, b, trans_a, trans_b](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
        Var da, db;
        if (want[0]) {
          if (!trans_a)
            da = trans_b ? matmul(g, b) : matmul(g, b, false, true);
          else
            da = trans_b ? matmul(b, g, true, true) : matmul(b, g, false, true);
        }
        if (want[1]) {
          if (!trans_b)
            db = trans_a ? matmul(a, g) : matmul(a, g, true, false);
          else
            db = trans_a ? matmul(g, a, true, true) : matmul(g, a, true, false);
        }
        return {da, db};
      });
}

Var batched_matmul(const Var& a, const Var& b, std::size_t batch, bool trans_a, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "batched_matmul");
  require_matrix(bv, "batched_matmul");
  if (batch == 0 || av.rows() % batch != 0 || bv.rows() % batch != 0)
    throw ShapeError("batched_matmul: " + std::to_string(batch) + " blocks do not divide " +
                     shape_string(av.shape()) + " and " + shape_string(bv.shape()));
  const std::size_t ar = av.rows() / batch, br = bv.rows() / batch;
  const std::size_t m = trans_a ? av.cols() : ar;
  const std::size_t k = trans_a ? ar : av.cols();
  const std::size_t kb = trans_b ? bv.cols() : br;
  const std::size_t n = trans_b ? br : bv.cols();
  if (k != kb)
    throw ShapeError("batched_matmul: inner dimensions differ (" + shape_string(av.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_string(bv.shape()) +
                     (trans_b ? "^T" : "") + " in " + std::to_string(batch) + " blocks)");
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    kernels::matmul(av.ptr() + i * ar * av.cols(), bv.ptr() + i * br * bv.cols(),
                    out.data() + i * m * n, m, n, k, trans_a, trans_b);
  return tape_of(a).record(
      Op::batched_matmul, Tensor({batch * m, n}, std::move(out)), {a, b},
      [a, b, batch, trans_a, trans_b](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
        Var da, db;
        if (want[0]) {
          if (!trans_a)
            da = trans_b ? batched_matmul(g, b, batch) : batched_matmul(g, b, batch, false, true);
          else
            da = trans_b ? batched_matmul(b, g, batch, true, true)
                         : batched_matmul(b, g, batch, false, true);
        }
        if (want[1]) {
          if (!trans_b)
            db = trans_a ? batched_matmul(a, g, batch) : batched_matmul(a, g, batch, true, false);
          else
            db = trans_a ? batched_matmul(g, a, batch, true, true)
                         : batched_matmul(g, a, batch, true, false);
        }
        return {da, db};
      });
}

Var add(const Var& a, const Var& b) {
  Tensor out = binary_values(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
  return tape_of(a).record(Op::add, std::move(out), {a, b},
                           [a, b](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
                             return {want[0] ? reduce_like(g, a.shape()) : Var{},
                                     want[1] ? reduce_like(g, b.shape()) : Var{}};
                           });
}

Var sub(const Var& a, const Var& b) {
  Tensor out = binary_values(a.value(), b.value(), "sub", [](double x, double y) { return x - y; });
  return tape_of(a).record(Op::sub, std::move(out), {a, b},
                           [a, b](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
                             return {want[0] ? reduce_like(g, a.shape()) : Var{},
                                     want[1] ? reduce_like(scale(g, -1.0), b.shape())
                                                       : Var{}};
                           });
}

Var mul(const Var& a, const Var& b) {
  Tensor out = binary_values(a.value(), b.value(), "mul", [](double x, double y) { return x * y; });
  return tape_of(a).record(Op::mul, std::move(out), {a, b},
                           [a, b](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
                             return {want[0] ? reduce_like(mul(g, b), a.shape()) : Var{},
                                     want[1] ? reduce_like(mul(g, a), b.shape()) : Var{}};
                           });
}

Var div(const Var& a, const Var& b) {
  Tensor out = binary_values(a.value(), b.value(), "div", [](double x, double y) { return x / y; });
  return tape_of(a).record(
      Op::div, std::move(out), {a, b}, [a, b](const Var& self, const Var& g, const Want& want) -> std::vector<Var> {
        Var da, db;
        if (want[0]) da = reduce_like(div(g, b), a.shape());
        if (want[1]) db = reduce_like(scale(mul(g, div(self, b)), -1.0), b.shape());
        return {da, db};
      });
}

Var scale(const Var& x, double factor) {
  Tensor out = map_values(x.value(), [factor](double v) { return v * factor; });
  return tape_of(x).record(Op::scale, std::move(out), {x},
                           [factor](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {scale(g, factor)};
                           });
}

Var add_scalar(const Var& x, double offset) {
  Tensor out = map_values(x.value(), [offset](double v) { return v + offset; });
  return tape_of(x).record(Op::add_scalar, std::move(out), {x},
                           [](const Var&, const Var& g, const Want&) -> std::vector<Var> { return {g}; });
}

Var tanh(const Var& x) {
  return tape_of(x).record(Op::tanh, unary_kernel(kernels::Unary::tanh, x.value()), {x},
                           [](const Var& y, const Var& g, const Want&) -> std::vector<Var> {
                             // 1 - y^2
                             return {mul(g, add_scalar(scale(mul(y, y), -1.0), 1.0))};
                           });
}

Var sigmoid(const Var& x) {
  return tape_of(x).record(Op::sigmoid, unary_kernel(kernels::Unary::sigmoid, x.value()), {x},
                           [](const Var& y, const Var& g, const Want&) -> std::vector<Var> {
                             // y (1 - y)
                             return {mul(g, mul(y, add_scalar(scale(y, -1.0), 1.0)))};
                           });
}

Var exp(const Var& x) {
  return tape_of(x).record(Op::exp, unary_kernel(kernels::Unary::exp, x.value()), {x},
                           [](const Var& y, const Var& g, const Want&) -> std::vector<Var> {
                             return {mul(g, y)};
                           });
}

Var log(const Var& x) {
  return tape_of(x).record(Op::log, unary_kernel(kernels::Unary::log, x.value()), {x},
                           [x](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {div(g, x)};
                           });
}

Var pow(const Var& x, double exponent) {
  Tensor out = map_values(x.value(), [exponent](double v) { return std::pow(v, exponent); });
  return tape_of(x).record(Op::pow, std::move(out), {x},
                           [x, exponent](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {mul(g, scale(pow(x, exponent - 1.0), exponent))};
                           });
}

Var softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "softmax_rows");
  std::vector<double> out(xv.size());
  kernels::softmax_rows(xv.ptr(), out.data(), xv.rows(), xv.cols());
  const std::size_t rows = xv.rows();
  return tape_of(x).record(Op::softmax_rows, Tensor(xv.shape(), std::move(out)), {x},
                           [rows](const Var& y, const Var& g, const Want&) -> std::vector<Var> {
                             // y * (g - rowsum(g * y))
                             Var dot = sum_to(mul(g, y), Shape{rows, 1});
                             return {mul(y, sub(g, dot))};
                           });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t rows = xv.rows();
  const double inv_n = 1.0 / static_cast<double>(xv.cols());
  Var mu = scale(sum_to(x, Shape{rows, 1}), inv_n);
  Var centered = sub(x, mu);
  Var var = scale(sum_to(mul(centered, centered), Shape{rows, 1}), inv_n);
  Var inv_std = pow(add_scalar(var, eps), -0.5);
  return add(mul(mul(centered, inv_std), gain), bias);
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.value().cols();
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * cols + offset, v.ptr() + r * v.cols(), v.cols() * sizeof(double));
    offsets.push_back(offset);
    offset += v.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      Op::concat_cols, Tensor({rows, cols}, std::move(out)), inputs,
      [inputs, offsets](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
        std::vector<Var> grads(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i)
          if (want[i])
            grads[i] = slice_cols(g, offsets[i], inputs[i].value().cols());
        return grads;
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.value().rows();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto d = p.value().data();
    out.insert(out.end(), d.begin(), d.end());
    offsets.push_back(offset);
    offset += p.value().rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      Op::concat_rows, Tensor({rows, cols}, std::move(out)), inputs,
      [inputs, offsets](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
        std::vector<Var> grads(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i)
          if (want[i])
            grads[i] = slice_rows(g, offsets[i], inputs[i].value().rows());
        return grads;
      });
}

namespace {

Var pad_cols(const Var& x, std::size_t begin, std::size_t total) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  std::vector<double> out(rows * total, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * total + begin, xv.ptr() + r * cols, cols * sizeof(double));
  return tape_of(x).record(Op::pad_cols, Tensor({rows, total}, std::move(out)), {x},
                           [begin, cols](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {slice_cols(g, begin, cols)};
                           });
}

Var pad_rows(const Var& x, std::size_t begin, std::size_t total) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  std::vector<double> out(total * cols, 0.0);
  std::memcpy(out.data() + begin * cols, xv.ptr(), rows * cols * sizeof(double));
  return tape_of(x).record(Op::pad_rows, Tensor({total, cols}, std::move(out)), {x},
                           [begin, rows](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {slice_rows(g, begin, rows)};
                           });
}

}  // namespace

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  if (count == 0 || begin + count > xv.cols()) throw ShapeError("slice_cols out of range");
  const std::size_t rows = xv.rows(), total = xv.cols();
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * count, xv.ptr() + r * total + begin, count * sizeof(double));
  return tape_of(x).record(Op::slice_cols, Tensor({rows, count}, std::move(out)), {x},
                           [begin, total](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {pad_cols(g, begin, total)};
                           });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_rows");
  if (count == 0 || begin + count > xv.rows()) throw ShapeError("slice_rows out of range");
  const std::size_t cols = xv.cols(), total = xv.rows();
  std::vector<double> out(xv.ptr() + begin * cols, xv.ptr() + (begin + count) * cols);
  return tape_of(x).record(Op::slice_rows, Tensor({count, cols}, std::move(out)), {x},
                           [begin, total](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {pad_rows(g, begin, total)};
                           });
}

Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
  const Tensor& xv = x.value();
  require_matrix(xv, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t cols = xv.cols(), total = xv.rows();
  std::vector<double> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) throw ShapeError("gather_rows: index out of range");
    std::memcpy(out.data() + i * cols, xv.ptr() + rows[i] * cols, cols * sizeof(double));
  }
  const std::size_t n = rows.size();
  return tape_of(x).record(Op::gather_rows, Tensor({n, cols}, std::move(out)), {x},
                           [rows = std::move(rows), total](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {scatter_rows(g, rows, total)};
                           });
}

Var scatter_rows(const Var& x, std::vector<std::size_t> rows, std::size_t total_rows) {
  const Tensor& xv = x.value();
  require_matrix(xv, "scatter_rows");
  if (rows.size() != xv.rows()) throw ShapeError("scatter_rows: index count != rows");
  const std::size_t cols = xv.cols();
  std::vector<double> out(total_rows * cols, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw ShapeError("scatter_rows: index out of range");
    for (std::size_t c = 0; c < cols; ++c) out[rows[i] * cols + c] += xv[i * cols + c];
  }
  return tape_of(x).record(Op::scatter_rows, Tensor({total_rows, cols}, std::move(out)), {x},
                           [rows = std::move(rows)](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {gather_rows(g, rows)};
                           });
}

Var max_of(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("max_of of nothing");
  const Shape& shape = parts[0].shape();
  for (const auto& p : parts)
    if (p.shape() != shape) throw ShapeError("max_of: operand shapes differ");
  const std::size_t n = shape_size(shape);
  std::vector<double> out(parts[0].value().data().begin(), parts[0].value().data().end());
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      if (v[i] > out[i]) {  // strict: ties stay with the lower index
        out[i] = v[i];
        arg[i] = k;
      }
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      Op::max_of, Tensor(shape, std::move(out)), inputs,
      [inputs, arg, shape](const Var&, const Var& g, const Want& want) -> std::vector<Var> {
        std::vector<Var> grads(inputs.size());
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!want[k]) continue;
          std::vector<double> mask(arg.size());
          for (std::size_t i = 0; i < arg.size(); ++i) mask[i] = arg[i] == k ? 1.0 : 0.0;
          grads[k] = mul(g, g.tape().constant(Tensor(shape, std::move(mask))));
        }
        return grads;
      });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  Shape shape = x.shape();
  return tape_of(x).record(Op::sum, Tensor::scalar(total), {x},
                           [shape](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {broadcast_to(g, shape)};
                           });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_to(const Var& x, const Shape& shape) {
  const Tensor& xv = x.value();
  if (xv.shape() == shape) return x;
  if (shape.empty()) return sum(x);
  const View vx = view_of(xv);
  if (shape.size() != 2) throw ShapeError("sum_to: target must be rank 0 or 2");
  const std::size_t tr = shape[0], tc = shape[1];
  if ((tr != vx.rows && tr != 1) || (tc != vx.cols && tc != 1))
    throw ShapeError("sum_to: cannot reduce " + shape_string(xv.shape()) + " to " +
                     shape_string(shape));
  std::vector<double> out(tr * tc, 0.0);
  for (std::size_t r = 0; r < vx.rows; ++r)
    for (std::size_t c = 0; c < vx.cols; ++c)
      out[(tr == 1 ? 0 : r) * tc + (tc == 1 ? 0 : c)] += xv[r * vx.cols + c];
  Shape from = xv.shape();
  return tape_of(x).record(Op::sum_to, Tensor(shape, std::move(out)), {x},
                           [from](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {broadcast_to(g, from)};
                           });
}

Var broadcast_to(const Var& x, const Shape& shape) {
  const Tensor& xv = x.value();
  if (xv.shape() == shape) return x;
  std::vector<double> out(shape_size(shape));
  if (xv.size() == 1) {
    std::fill(out.begin(), out.end(), xv[0]);
  } else {
    if (shape.size() != 2) throw ShapeError("broadcast_to: target must be rank 2");
    const View vx = view_of(xv);
    const std::size_t rows = shape[0], cols = shape[1];
    if ((vx.rows != rows && vx.rows != 1) || (vx.cols != cols && vx.cols != 1))
      throw ShapeError("broadcast_to: cannot stretch " + shape_string(xv.shape()) + " to " +
                       shape_string(shape));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = xv[(vx.rows == 1 ? 0 : r) * vx.cols + (vx.cols == 1 ? 0 : c)];
  }
  Shape from = xv.shape();
  return tape_of(x).record(Op::broadcast_to, Tensor(shape, std::move(out)), {x},
                           [from](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {sum_to(g, from)};
                           });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  require_matrix(z, "cross_entropy");
  const std::size_t rows = z.rows(), cols = z.cols();
  if (labels.size() != rows) throw ShapeError("cross_entropy: one label per row required");
  double total = 0.0;
  std::vector<double> onehot(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= cols)
      throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
    const double* zr = z.ptr() + r * cols;
    const double mx = *std::max_element(zr, zr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(zr[c] - mx);
    total += mx + std::log(s) - zr[label];
    onehot[r * cols + static_cast<std::size_t>(label)] = 1.0;
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Tensor target({rows, cols}, std::move(onehot));
  return tape_of(logits).record(
      Op::cross_entropy, Tensor::scalar(total * inv_rows), {logits},
      [logits, target, inv_rows](const Var&, const Var& g, const Want&) -> std::vector<Var> {
        Var diff = sub(softmax_rows(logits), g.tape().constant(target));
        return {mul(scale(diff, inv_rows), g)};
      });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  require_matrix(xv, "transpose");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xv[r * cols + c];
  return tape_of(x).record(Op::transpose, Tensor({cols, rows}, std::move(out)), {x},
                           [](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {transpose(g)};
                           });
}

Var reshape(const Var& x, Shape shape) {
  Shape from = x.shape();
  return tape_of(x).record(Op::reshape, x.value().reshaped(std::move(shape)), {x},
                           [from](const Var&, const Var& g, const Want&) -> std::vector<Var> {
                             return {reshape(g, from)};
                           });
}

Var custom(std::span<const Var> inputs, Tensor value, CustomVjp vjp) {
  if (inputs.empty()) throw ContractError("custom op needs at least one input");
  std::vector<Var> ins(inputs.begin(), inputs.end());
  return tape_of(ins[0]).record(
      Op::custom, std::move(value), ins,
      [ins, vjp = std::move(vjp)](const Var&, const Var& g, const Want&) -> std::vector<Var> {
        std::vector<Tensor> grads = vjp(g.value());
        if (grads.size() != ins.size())
          throw ContractError("custom op vjp returned the wrong number of gradients");
        std::vector<Var> out(ins.size());
        for (std::size_t i = 0; i < ins.size(); ++i) {
          if (grads[i].shape() != ins[i].shape())
            throw ShapeError("custom op vjp gradient shape mismatch");
          out[i] = g.tape().constant(std::move(grads[i]));
        }
        return out;
      },
      /*differentiable_backward=*/false);
}

}  // namespace fsq::ad
