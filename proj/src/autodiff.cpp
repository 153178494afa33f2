#include "adaptime/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "adaptime/error.hpp"

namespace adaptime {

const Tensor& Var::value() const { return tape_->value(id_); }

GradientBuffer::GradientBuffer(const Tape& tape)
    : tape_(tape), grads_(tape.size()), allocated_(tape.size(), false) {}

Tensor& GradientBuffer::at(std::size_t id) {
  if (!allocated_[id]) {
    grads_[id] = Tensor::zeros_like(tape_.value(id));
    allocated_[id] = true;
  }
  return grads_[id];
}

bool GradientBuffer::wants(std::size_t id) const { return tape_.requires_grad(id); }

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) fail(ErrorKind::kNumeric, "constant: non-finite input");
  nodes_.push_back(Node{std::move(value), false, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& parameter) {
  if (auto it = parameter_ids_.find(&parameter); it != parameter_ids_.end()) {
    return Var(this, it->second);
  }
  if (!parameter.value.all_finite()) {
    fail(ErrorKind::kNumeric, "parameter '" + parameter.name + "' holds non-finite values");
  }
  nodes_.push_back(Node{parameter.value, true, nullptr, &parameter});
  parameter_ids_.emplace(&parameter, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::frozen(const Parameter& parameter) {
  if (auto it = frozen_ids_.find(&parameter); it != frozen_ids_.end()) return Var(this, it->second);
  Var v = constant(parameter.value);
  frozen_ids_.emplace(&parameter, v.id());
  return v;
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs,
                 Backward backward) {
  if (!value.all_finite()) {
    fail(ErrorKind::kNumeric, std::string(op) + ": produced non-finite values");
  }
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) fail(ErrorKind::kShape, std::string(op) + ": input from another tape");
    needs = needs || nodes_[in.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) const {
  if (loss.tape_ != this) fail(ErrorKind::kShape, "backward: loss recorded on another tape");
  if (loss.value().size() != 1) {
    fail(ErrorKind::kShape, "backward: loss must be scalar, got shape " +
                                shape_string(loss.value().shape()));
  }
  GradientBuffer grads(*this);
  grads.at(loss.id_).fill(1.0);
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !grads.has(id)) continue;
    if (node.backward) node.backward(*this, grads.get(id), grads);
  }
  for (const Node& node : nodes_) {
    if (node.parameter == nullptr) continue;
    const std::size_t id = parameter_ids_.at(node.parameter);
    if (id <= loss.id_ && grads.has(id)) node.parameter->grad.add_in_place(grads.get(id));
  }
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims dims_of(const Tensor& t) { return {t.rows(), t.cols()}; }

std::string mismatch(std::string_view op, const Tensor& a, const Tensor& b) {
  return std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
         shape_string(b.shape());
}

Shape broadcast_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.size() == 1 && a.rank() <= 1) return b.shape();
  if (b.size() == 1 && b.rank() <= 1) return a.shape();
  if (a.rank() > 2 || b.rank() > 2) fail(ErrorKind::kShape, mismatch(op, a, b));
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  const std::size_t r = std::max(da.rows, db.rows);
  const std::size_t c = std::max(da.cols, db.cols);
  const bool ok = (da.rows == r || da.rows == 1) && (db.rows == r || db.rows == 1) &&
                  (da.cols == c || da.cols == 1) && (db.cols == c || db.cols == 1);
  if (!ok) fail(ErrorKind::kShape, mismatch(op, a, b));
  return Shape{r, c};
}

// Folds a gradient of the broadcast output shape back onto an operand's shape.
void accumulate_reduced(const Tensor& grad_out, const Tensor& operand, Tensor& target,
                        const std::function<double(std::size_t)>& factor) {
  const Dims out = dims_of(grad_out);
  const Dims in = dims_of(operand);
  auto t = target.data();
  auto g = grad_out.data();
  if (operand.size() == grad_out.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) t[i] += g[i] * factor(i);
    return;
  }
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      const std::size_t i = r * out.cols + c;
      const std::size_t j = (in.rows == 1 ? 0 : r) * in.cols + (in.cols == 1 ? 0 : c);
      t[j] += g[i] * factor(i);
    }
  }
}

template <typename Fn>
Tensor broadcast_apply(std::string_view op, const Tensor& a, const Tensor& b, Fn fn) {
  Tensor out(broadcast_shape(op, a, b));
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  if (a.size() == out.size() && b.size() == out.size()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(av[i], bv[i]);
    return out;
  }
  const Dims d = dims_of(out);
  const Dims da = dims_of(a);
  const Dims db = dims_of(b);
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  for (std::size_t r = 0; r < d.rows; ++r) {
    for (std::size_t c = 0; c < d.cols; ++c) {
      const std::size_t ia =
          a_scalar ? 0 : (da.rows == 1 ? 0 : r) * da.cols + (da.cols == 1 ? 0 : c);
      const std::size_t ib =
          b_scalar ? 0 : (db.rows == 1 ? 0 : r) * db.cols + (db.cols == 1 ? 0 : c);
      o[r * d.cols + c] = fn(av[ia], bv[ib]);
    }
  }
  return out;
}

// Index of operand element that feeds output element i under broadcasting.
std::function<std::size_t(std::size_t)> source_index(const Tensor& out, const Tensor& operand) {
  if (operand.size() == out.size()) return [](std::size_t i) { return i; };
  if (operand.size() == 1) return [](std::size_t) { return std::size_t{0}; };
  const Dims d = dims_of(out);
  const Dims din = dims_of(operand);
  return [d, din](std::size_t i) {
    const std::size_t r = i / d.cols;
    const std::size_t c = i % d.cols;
    return (din.rows == 1 ? 0 : r) * din.cols + (din.cols == 1 ? 0 : c);
  };
}

template <typename Fwd, typename Deriv>
Var unary(std::string_view op, const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  const std::size_t ia = a.id();
  return a.tape().record(op, std::move(out), {a},
                         [ia, deriv](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
                           const Tensor& xin = tape.value(ia);
                           auto gi = grads.at(ia).data();
                           auto gv = g.data();
                           auto xs = xin.data();
                           for (std::size_t i = 0; i < gv.size(); ++i) gi[i] += gv[i] * deriv(xs[i]);
                         });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
    fail(ErrorKind::kShape, mismatch("matmul", x, y));
  }
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  const std::size_t n = y.cols();
  Tensor out(Shape{m, n});
  // Each output row depends only on its own input row, with a fixed
  // accumulation order, so stacking rows never changes results.
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.data()[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.data()[i * k + p];
      const double* yrow = &y.data()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(
      "matmul", std::move(out), {a, b},
      [ia, ib, m, k, n](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
        const auto gv = g.data();
        if (grads.wants(ia)) {
          const auto yv = tape.value(ib).data();
          auto ga = grads.at(ia).data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += gv[i * n + j] * yv[p * n + j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (grads.wants(ib)) {
          const auto xv = tape.value(ia).data();
          auto gb = grads.at(ib).data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double xip = xv[i * k + p];
              double* row = &gb[p * n];
              for (std::size_t j = 0; j < n; ++j) row[j] += xip * gv[i * n + j];
            }
          }
        }
      });
}

Var add(const Var& a, const Var& b) {
  Tensor out = broadcast_apply("add", a.value(), b.value(), [](double x, double y) { return x + y; });
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record("add", std::move(out), {a, b},
                         [ia, ib](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
                           auto one = [](std::size_t) { return 1.0; };
                           if (grads.wants(ia)) accumulate_reduced(g, tape.value(ia), grads.at(ia), one);
                           if (grads.wants(ib)) accumulate_reduced(g, tape.value(ib), grads.at(ib), one);
                         });
}

Var sub(const Var& a, const Var& b) {
  Tensor out = broadcast_apply("sub", a.value(), b.value(), [](double x, double y) { return x - y; });
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record("sub", std::move(out), {a, b},
                         [ia, ib](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
                           if (grads.wants(ia)) {
                             accumulate_reduced(g, tape.value(ia), grads.at(ia),
                                                [](std::size_t) { return 1.0; });
                           }
                           if (grads.wants(ib)) {
                             accumulate_reduced(g, tape.value(ib), grads.at(ib),
                                                [](std::size_t) { return -1.0; });
                           }
                         });
}

Var mul(const Var& a, const Var& b) {
  Tensor out = broadcast_apply("mul", a.value(), b.value(), [](double x, double y) { return x * y; });
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(
      "mul", std::move(out), {a, b},
      [ia, ib](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(ib);
        if (x.size() == g.size() && y.size() == g.size()) {
          const auto gv = g.data();
          if (grads.wants(ia)) {
            auto ga = grads.at(ia).data();
            for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i] * y[i];
          }
          if (grads.wants(ib)) {
            auto gb = grads.at(ib).data();
            for (std::size_t i = 0; i < gv.size(); ++i) gb[i] += gv[i] * x[i];
          }
          return;
        }
        if (grads.wants(ia)) {
          auto src = source_index(g, y);
          auto yv = y.data();
          accumulate_reduced(g, x, grads.at(ia), [&](std::size_t i) { return yv[src(i)]; });
        }
        if (grads.wants(ib)) {
          auto src = source_index(g, x);
          auto xv = x.data();
          accumulate_reduced(g, y, grads.at(ib), [&](std::size_t i) { return xv[src(i)]; });
        }
      });
}

Var div(const Var& a, const Var& b) {
  Tensor out = broadcast_apply("div", a.value(), b.value(), [](double x, double y) { return x / y; });
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape().record(
      "div", std::move(out), {a, b},
      [ia, ib](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(ib);
        auto xs = source_index(g, x);
        auto ys = source_index(g, y);
        auto xv = x.data();
        auto yv = y.data();
        if (grads.wants(ia)) {
          accumulate_reduced(g, x, grads.at(ia), [&](std::size_t i) { return 1.0 / yv[ys(i)]; });
        }
        if (grads.wants(ib)) {
          accumulate_reduced(g, y, grads.at(ib), [&](std::size_t i) {
            const double yi = yv[ys(i)];
            return -xv[xs(i)] / (yi * yi);
          });
        }
      });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var exp(const Var& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var tanh(const Var& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double x) {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s);
      });
}

Var softplus(const Var& a) {
  return unary(
      "softplus", a, [](double x) { return stable_softplus(x); },
      [](double x) { return stable_sigmoid(x); });
}

Var gather_rows(const Var& table, std::span<const std::uint32_t> indices) {
  const Tensor& t = table.value();
  if (t.rank() != 2) fail(ErrorKind::kShape, "gather_rows: table must be a matrix, got " +
                                                 shape_string(t.shape()));
  const std::size_t rows = t.rows();
  const std::size_t cols = t.cols();
  Tensor out(Shape{indices.size(), cols});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      fail(ErrorKind::kRange, "gather_rows: index " + std::to_string(indices[r]) +
                                  " out of range for " + std::to_string(rows) + " rows");
    }
    std::copy_n(&t.data()[indices[r] * cols], cols, &out.data()[r * cols]);
  }
  const std::size_t it = table.id();
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return table.tape().record(
      "gather_rows", std::move(out), {table},
      [it, idx = std::move(idx), cols](const Tape&, const Tensor& g, GradientBuffer& grads) {
        auto gt = grads.at(it).data();
        auto gv = g.data();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          double* dst = &gt[idx[r] * cols];
          const double* src = &gv[r * cols];
          for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
      });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(total), {a},
                         [ia](const Tape&, const Tensor& g, GradientBuffer& grads) {
                           const double gv = g[0];
                           for (double& x : grads.at(ia).data()) x += gv;
                         });
}

Var sum(const Var& a, std::size_t axis) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || axis > 1) {
    fail(ErrorKind::kShape, "sum: axis " + std::to_string(axis) + " invalid for shape " +
                                shape_string(x.shape()));
  }
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Tensor out(Shape{axis == 0 ? c : r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += x(i, j);
  }
  const std::size_t ia = a.id();
  return a.tape().record("sum_axis", std::move(out), {a},
                         [ia, axis, r, c](const Tape&, const Tensor& g, GradientBuffer& grads) {
                           Tensor& ga = grads.at(ia);
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < c; ++j) ga(i, j) += g[axis == 0 ? j : i];
                           }
                         });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean(const Var& a, std::size_t axis) {
  const Tensor& x = a.value();
  const std::size_t n = axis == 0 ? x.rows() : x.cols();
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::kShape, "concat: no inputs");
  const Tensor& first = parts[0].value();
  if (first.rank() == 1 && axis == 0) {
    std::vector<double> values;
    std::vector<std::size_t> sizes;
    for (const Var& p : parts) {
      if (p.value().rank() != 1) fail(ErrorKind::kShape, mismatch("concat", first, p.value()));
      values.insert(values.end(), p.value().data().begin(), p.value().data().end());
      sizes.push_back(p.value().size());
    }
    std::vector<std::size_t> ids;
    for (const Var& p : parts) ids.push_back(p.id());
    return parts[0].tape().record(
        "concat", Tensor::vector(std::move(values)), parts,
        [ids, sizes](const Tape&, const Tensor& g, GradientBuffer& grads) {
          std::size_t offset = 0;
          for (std::size_t k = 0; k < ids.size(); ++k) {
            if (grads.wants(ids[k])) {
              auto dst = grads.at(ids[k]).data();
              for (std::size_t i = 0; i < sizes[k]; ++i) dst[i] += g[offset + i];
            }
            offset += sizes[k];
          }
        });
  }
  if (first.rank() != 2 || axis > 1) {
    fail(ErrorKind::kShape, "concat: unsupported axis " + std::to_string(axis) + " for shape " +
                                shape_string(first.shape()));
  }
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    const bool ok = t.rank() == 2 && (axis == 0 ? t.cols() == first.cols() : t.rows() == first.rows());
    if (!ok) fail(ErrorKind::kShape, mismatch("concat", first, t));
    rows = axis == 0 ? rows + t.rows() : t.rows();
    cols = axis == 1 ? cols + t.cols() : t.cols();
  }
  Tensor out(Shape{rows, cols});
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    for (std::size_t i = 0; i < t.rows(); ++i) {
      for (std::size_t j = 0; j < t.cols(); ++j) {
        if (axis == 0) out(offset + i, j) = t(i, j);
        else out(i, offset + j) = t(i, j);
      }
    }
    ids.push_back(p.id());
    offsets.push_back(offset);
    offset += axis == 0 ? t.rows() : t.cols();
  }
  return parts[0].tape().record(
      "concat", std::move(out), parts,
      [ids, offsets, axis](const Tape& tape, const Tensor& g, GradientBuffer& grads) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!grads.wants(ids[k])) continue;
          Tensor& dst = grads.at(ids[k]);
          const Tensor& src = tape.value(ids[k]);
          for (std::size_t i = 0; i < src.rows(); ++i) {
            for (std::size_t j = 0; j < src.cols(); ++j) {
              dst(i, j) += axis == 0 ? g(offsets[k] + i, j) : g(i, offsets[k] + j);
            }
          }
        }
      });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || begin > end || end > x.cols()) {
    fail(ErrorKind::kShape, "slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") invalid for shape " + shape_string(x.shape()));
  }
  const std::size_t r = x.rows();
  const std::size_t w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(&x.data()[i * x.cols() + begin], w, &out.data()[i * w]);
  }
  const std::size_t ia = a.id();
  const std::size_t cols = x.cols();
  return a.tape().record("slice_cols", std::move(out), {a},
                         [ia, begin, w, r, cols](const Tape&, const Tensor& g, GradientBuffer& grads) {
                           auto ga = grads.at(ia).data();
                           auto gv = g.data();
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < w; ++j) ga[i * cols + begin + j] += gv[i * w + j];
                           }
                         });
}

Var layer_norm(const Var& a, double epsilon) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || x.rank() > 2 || x.cols() == 0) {
    fail(ErrorKind::kShape, "layer_norm: unsupported shape " + shape_string(x.shape()));
  }
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Tensor out(x.shape());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &x.data()[i * c];
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  const std::size_t ia = a.id();
  // The closure reads the normalised output, which lands at the next node id.
  const std::size_t io = a.tape().size();
  return a.tape().record(
      "layer_norm", std::move(out), {a},
      [ia, io, r, c, inv_std = std::move(inv_std)](const Tape& tape, const Tensor& g,
                                                   GradientBuffer& grads) {
        const auto y = tape.value(io).data();
        const auto gv = g.data();
        auto gx = grads.at(ia).data();
        const double n = static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_g = 0.0;
          double mean_gy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            mean_g += gv[i * c + j];
            mean_gy += gv[i * c + j] * y[i * c + j];
          }
          mean_g /= n;
          mean_gy /= n;
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += inv_std[i] * (gv[i * c + j] - mean_g - y[i * c + j] * mean_gy);
          }
        }
      });
}

Var pool_rows(const Var& source, const std::vector<std::vector<std::size_t>>& segments,
              PoolMode mode) {
  const Tensor& x = source.value();
  if (x.rank() != 2) {
    fail(ErrorKind::kShape, "pool_rows: source must be a matrix, got " + shape_string(x.shape()));
  }
  const std::size_t c = x.cols();
  Tensor out(Shape{segments.size(), c});
  std::vector<double> weights(segments.size(), 0.0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.empty()) continue;
    double* dst = &out.data()[s * c];
    for (std::size_t row : seg) {
      if (row >= x.rows()) {
        fail(ErrorKind::kRange, "pool_rows: row " + std::to_string(row) + " out of range for " +
                                    std::to_string(x.rows()) + " rows");
      }
      const double* src = &x.data()[row * c];
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    weights[s] = mode == PoolMode::kMean ? 1.0 / static_cast<double>(seg.size()) : 1.0;
    if (mode == PoolMode::kMean) {
      for (std::size_t j = 0; j < c; ++j) dst[j] *= weights[s];
    }
  }
  const std::size_t ia = source.id();
  return source.tape().record(
      "pool_rows", std::move(out), {source},
      [ia, segments, weights = std::move(weights), c](const Tape&, const Tensor& g,
                                                      GradientBuffer& grads) {
        auto gx = grads.at(ia).data();
        auto gv = g.data();
        for (std::size_t s = 0; s < segments.size(); ++s) {
          for (std::size_t row : segments[s]) {
            for (std::size_t j = 0; j < c; ++j) gx[row * c + j] += gv[s * c + j] * weights[s];
          }
        }
      });
}

}  // namespace adaptime
