#include "oraclesage/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "oraclesage/errors.hpp"

namespace oraclesage {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

using Values = std::shared_ptr<const std::vector<double>>;

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims matrix_dims(const Tensor& t, const char* op) {
  if (t.rank() == 1) return {1, t.shape()[0]};
  if (t.rank() == 2) return {t.shape()[0], t.shape()[1]};
  throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Tensor make1(std::string_view op, Shape shape, std::vector<double> values, const Tensor& a,
             Tape::Backward fn) {
  const std::array<const Tensor*, 1> in{&a};
  return make_result(op, std::move(shape), std::move(values), in, std::move(fn));
}

Tensor make2(std::string_view op, Shape shape, std::vector<double> values, const Tensor& a,
             const Tensor& b, Tape::Backward fn) {
  const std::array<const Tensor*, 2> in{&a, &b};
  return make_result(op, std::move(shape), std::move(values), in, std::move(fn));
}

Tensor make3(std::string_view op, Shape shape, std::vector<double> values, const Tensor& a,
             const Tensor& b, const Tensor& c, Tape::Backward fn) {
  const std::array<const Tensor*, 3> in{&a, &b, &c};
  return make_result(op, std::move(shape), std::move(values), in, std::move(fn));
}

/// Elementwise unary op; `deriv(x, y)` is dy/dx.
template <class F, class D>
Tensor unary(std::string_view op, const Tensor& x, F f, D deriv) {
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  Values xv = x.storage();
  auto ys = std::make_shared<std::vector<double>>(out);
  return make1(op, x.shape(), std::move(out), x,
               [xv, ys, deriv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * deriv((*xv)[i], (*ys)[i]);
               });
}

std::size_t norm_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_string(x.shape()));
  }
  return axis;
}

struct AxisLayout {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis) {
  AxisLayout l{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto da = matrix_dims(a, "matmul");
  const auto db = matrix_dims(b, "matmul");
  if (da.cols != db.rows) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  std::vector<double> out(da.rows * db.cols);
  MutMap(out.data(), da.rows, db.cols).noalias() =
      ConstMap(a.values().data(), da.rows, da.cols) * ConstMap(b.values().data(), db.rows, db.cols);
  Values av = a.storage();
  Values bv = b.storage();
  return make2("matmul", {da.rows, db.cols}, std::move(out), a, b,
               [av, bv, da, db](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 ConstMap g(t.grad(o).data(), da.rows, db.cols);
                 if (in[0] != kNoNode) {
                   MutMap(t.grad(in[0]).data(), da.rows, da.cols).noalias() +=
                       g * ConstMap(bv->data(), db.rows, db.cols).transpose();
                 }
                 if (in[1] != kNoNode) {
                   MutMap(t.grad(in[1]).data(), db.rows, db.cols).noalias() +=
                       ConstMap(av->data(), da.rows, da.cols).transpose() * g;
                 }
               });
}

Tensor transpose(const Tensor& a) {
  const auto d = matrix_dims(a, "transpose");
  std::vector<double> out(d.rows * d.cols);
  MutMap(out.data(), d.cols, d.rows) = ConstMap(a.values().data(), d.rows, d.cols).transpose();
  return make1("transpose", {d.cols, d.rows}, std::move(out), a,
               [d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 MutMap(t.grad(in[0]).data(), d.rows, d.cols) +=
                     ConstMap(t.grad(o).data(), d.cols, d.rows).transpose();
               });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make2("add", a.shape(), std::move(out), a, b,
               [](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 for (NodeId id : in) {
                   if (id == kNoNode) continue;
                   auto gi = t.grad(id);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                 }
               });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make2("sub", a.shape(), std::move(out), a, b,
               [](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                 }
                 if (in[1] != kNoNode) {
                   auto gi = t.grad(in[1]);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
                 }
               });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Values av = a.storage();
  Values bv = b.storage();
  return make2("mul", a.shape(), std::move(out), a, b,
               [av, bv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (*bv)[i];
                 }
                 if (in[1] != kNoNode) {
                   auto gi = t.grad(in[1]);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (*av)[i];
                 }
               });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + shift;
  return make1("affine", x.shape(), std::move(out), x,
               [scale](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < go.size(); ++i) gi[i] += scale * go[i];
               });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const auto d = matrix_dims(x, "add_row");
  if (bias.numel() != d.cols) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not fit rows of " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t c = 0; c < d.cols; ++c) out[r * d.cols + c] = x[r * d.cols + c] + bias[c];
  return make2("add_row", x.shape(), std::move(out), x, bias,
               [d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                 }
                 if (in[1] != kNoNode) {
                   auto gb = t.grad(in[1]);
                   for (std::size_t r = 0; r < d.rows; ++r)
                     for (std::size_t c = 0; c < d.cols; ++c) gb[c] += go[r * d.cols + c];
                 }
               });
}

Tensor mul_col(const Tensor& x, const Tensor& column) {
  const auto d = matrix_dims(x, "mul_col");
  if (column.numel() != d.rows) {
    throw DimensionError("mul_col: column " + shape_string(column.shape()) +
                         " does not fit rows of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t c = 0; c < d.cols; ++c) out[r * d.cols + c] = x[r * d.cols + c] * column[r];
  Values xv = x.storage();
  Values cv = column.storage();
  return make2("mul_col", x.shape(), std::move(out), x, column,
               [xv, cv, d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   for (std::size_t r = 0; r < d.rows; ++r)
                     for (std::size_t c = 0; c < d.cols; ++c)
                       gi[r * d.cols + c] += go[r * d.cols + c] * (*cv)[r];
                 }
                 if (in[1] != kNoNode) {
                   auto gc = t.grad(in[1]);
                   for (std::size_t r = 0; r < d.rows; ++r)
                     for (std::size_t c = 0; c < d.cols; ++c)
                       gc[r] += go[r * d.cols + c] * (*xv)[r * d.cols + c];
                 }
               });
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make1("sum", {1}, {s}, x, [](Tape& t, NodeId o, const std::vector<NodeId>& in) {
    const double g = t.grad(o)[0];
    for (double& gi : t.grad(in[0])) gi += g;
  });
}

Tensor mean(const Tensor& x) { return affine(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_rows(const Tensor& x) {
  const auto d = matrix_dims(x, "sum_rows");
  std::vector<double> out(d.cols, 0.0);
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t c = 0; c < d.cols; ++c) out[c] += x[r * d.cols + c];
  return make1("sum_rows", {1, d.cols}, std::move(out), x,
               [d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t r = 0; r < d.rows; ++r)
                   for (std::size_t c = 0; c < d.cols; ++c) gi[r * d.cols + c] += go[c];
               });
}

Tensor mean_rows(const Tensor& x) {
  return affine(sum_rows(x), 1.0 / static_cast<double>(matrix_dims(x, "mean_rows").rows));
}

Tensor mean_cols(const Tensor& x) {
  const auto d = matrix_dims(x, "mean_cols");
  std::vector<double> out(d.rows, 0.0);
  const double inv = 1.0 / static_cast<double>(d.cols);
  for (std::size_t r = 0; r < d.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d.cols; ++c) s += x[r * d.cols + c];
    out[r] = s * inv;
  }
  return make1("mean_cols", {d.rows, 1}, std::move(out), x,
               [d, inv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t r = 0; r < d.rows; ++r)
                   for (std::size_t c = 0; c < d.cols; ++c) gi[r * d.cols + c] += go[r] * inv;
               });
}

Tensor l1_norm(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += std::abs(v);
  Values xv = x.storage();
  return make1("l1_norm", {1}, {s}, x, [xv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
    const double g = t.grad(o)[0];
    auto gi = t.grad(in[0]);
    for (std::size_t i = 0; i < gi.size(); ++i) {
      const double v = (*xv)[i];
      gi[i] += v > 0.0 ? g : (v < 0.0 ? -g : 0.0);
    }
  });
}

Tensor frobenius_sq(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  Values xv = x.storage();
  return make1("frobenius_sq", {1}, {s}, x,
               [xv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 const double g = t.grad(o)[0];
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += 2.0 * g * (*xv)[i];
               });
}

// ---------------------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Tensor& first = parts.front();
  norm_axis(first, axis, "concat");
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != axis && p.shape()[i] != first.shape()[i]) {
        throw DimensionError("concat: shape mismatch " + shape_string(first.shape()) + " vs " +
                             shape_string(p.shape()));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  const auto layout = axis_layout(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    for (std::size_t o = 0; o < layout.outer; ++o) {
      const double* src = p.values().data() + o * len * layout.inner;
      double* dst = out.data() + (o * layout.len + offset) * layout.inner;
      std::copy(src, src + len * layout.inner, dst);
    }
    offset += len;
  }
  std::vector<std::size_t> lens;
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) {
    lens.push_back(p.shape()[axis]);
    inputs.push_back(&p);
  }
  return make_result("concat", shape, std::move(out), inputs,
                     [layout, offsets, lens](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                       auto go = t.grad(o);
                       for (std::size_t k = 0; k < in.size(); ++k) {
                         if (in[k] == kNoNode) continue;
                         auto gi = t.grad(in[k]);
                         for (std::size_t q = 0; q < layout.outer; ++q) {
                           const double* src = go.data() + (q * layout.len + offsets[k]) * layout.inner;
                           double* dst = gi.data() + q * lens[k] * layout.inner;
                           for (std::size_t i = 0; i < lens[k] * layout.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto d = matrix_dims(x, "slice_rows");
  if (begin >= end || end > d.rows) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * d.cols),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end * d.cols));
  return make1("slice_rows", {end - begin, d.cols}, std::move(out), x,
               [begin, d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < go.size(); ++i) gi[begin * d.cols + i] += go[i];
               });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  const auto d = matrix_dims(x, "slice_cols");
  if (begin >= end || end > d.cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(d.rows * w);
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * d.cols + begin + c];
  return make1("slice_cols", {d.rows, w}, std::move(out), x,
               [begin, w, d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t r = 0; r < d.rows; ++r)
                   for (std::size_t c = 0; c < w; ++c) gi[r * d.cols + begin + c] += go[r * w + c];
               });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const auto d = matrix_dims(x, "gather_rows");
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(rows.size() * d.cols);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= d.rows) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[k]) + " out of range for " +
                           shape_string(x.shape()));
    }
    std::copy_n(x.values().data() + rows[k] * d.cols, d.cols, out.data() + k * d.cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make1("gather_rows", {rows.size(), d.cols}, std::move(out), x,
               [idx, d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t k = 0; k < idx.size(); ++k)
                   for (std::size_t c = 0; c < d.cols; ++c) gi[idx[k] * d.cols + c] += go[k * d.cols + c];
               });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t out_rows) {
  const auto d = matrix_dims(x, "scatter_add_rows");
  if (index.size() != d.rows) throw DimensionError("scatter_add_rows: index length mismatch");
  std::vector<double> out(out_rows * d.cols, 0.0);
  for (std::size_t k = 0; k < d.rows; ++k) {
    if (index[k] >= out_rows) throw DimensionError("scatter_add_rows: index out of range");
    for (std::size_t c = 0; c < d.cols; ++c) out[index[k] * d.cols + c] += x[k * d.cols + c];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make1("scatter_add_rows", {out_rows, d.cols}, std::move(out), x,
               [idx, d](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t k = 0; k < idx.size(); ++k)
                   for (std::size_t c = 0; c < d.cols; ++c) gi[k * d.cols + c] += go[idx[k] * d.cols + c];
               });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  norm_axis(x, axis, "softmax");
  const auto l = axis_layout(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = x[base];
      for (std::size_t k = 1; k < l.len; ++k) mx = std::max(mx, x[base + k * l.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) {
        const double e = std::exp(x[base + k * l.inner] - mx);
        out[base + k * l.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] /= z;
    }
  }
  auto ys = std::make_shared<std::vector<double>>(out);
  return make1("softmax", x.shape(), std::move(out), x,
               [ys, l](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 const auto& y = *ys;
                 for (std::size_t q = 0; q < l.outer; ++q) {
                   for (std::size_t i = 0; i < l.inner; ++i) {
                     const std::size_t base = q * l.len * l.inner + i;
                     double dot = 0.0;
                     for (std::size_t k = 0; k < l.len; ++k) dot += go[base + k * l.inner] * y[base + k * l.inner];
                     for (std::size_t k = 0; k < l.len; ++k) {
                       const std::size_t j = base + k * l.inner;
                       gi[j] += y[j] * (go[j] - dot);
                     }
                   }
                 }
               });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  norm_axis(x, axis, "log_softmax");
  const auto l = axis_layout(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.len * l.inner + i;
      double mx = x[base];
      for (std::size_t k = 1; k < l.len; ++k) mx = std::max(mx, x[base + k * l.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) z += std::exp(x[base + k * l.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] = x[base + k * l.inner] - lse;
    }
  }
  auto ys = std::make_shared<std::vector<double>>(out);
  return make1("log_softmax", x.shape(), std::move(out), x,
               [ys, l](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t q = 0; q < l.outer; ++q) {
                   for (std::size_t i = 0; i < l.inner; ++i) {
                     const std::size_t base = q * l.len * l.inner + i;
                     double gsum = 0.0;
                     for (std::size_t k = 0; k < l.len; ++k) gsum += go[base + k * l.inner];
                     for (std::size_t k = 0; k < l.len; ++k) {
                       const std::size_t j = base + k * l.inner;
                       gi[j] += go[j] - std::exp((*ys)[j]) * gsum;
                     }
                   }
                 }
               });
}

Tensor segment_softmax(const Tensor& logits, std::span<const std::size_t> segment,
                       std::size_t num_segments) {
  const auto d = matrix_dims(logits, "segment_softmax");
  if (segment.size() != d.rows) throw DimensionError("segment_softmax: segment length mismatch");
  for (auto s : segment) {
    if (s >= num_segments) throw DimensionError("segment_softmax: segment id out of range");
  }
  std::vector<double> out(logits.numel());
  std::vector<double> mx(num_segments * d.cols, -std::numeric_limits<double>::infinity());
  std::vector<double> z(num_segments * d.cols, 0.0);
  for (std::size_t e = 0; e < d.rows; ++e)
    for (std::size_t c = 0; c < d.cols; ++c) {
      double& m = mx[segment[e] * d.cols + c];
      m = std::max(m, logits[e * d.cols + c]);
    }
  for (std::size_t e = 0; e < d.rows; ++e)
    for (std::size_t c = 0; c < d.cols; ++c) {
      const double v = std::exp(logits[e * d.cols + c] - mx[segment[e] * d.cols + c]);
      out[e * d.cols + c] = v;
      z[segment[e] * d.cols + c] += v;
    }
  for (std::size_t e = 0; e < d.rows; ++e)
    for (std::size_t c = 0; c < d.cols; ++c) out[e * d.cols + c] /= z[segment[e] * d.cols + c];
  auto ys = std::make_shared<std::vector<double>>(out);
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  return make1("segment_softmax", logits.shape(), std::move(out), logits,
               [ys, seg, d, num_segments](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 const auto& y = *ys;
                 std::vector<double> dot(num_segments * d.cols, 0.0);
                 for (std::size_t e = 0; e < d.rows; ++e)
                   for (std::size_t c = 0; c < d.cols; ++c)
                     dot[seg[e] * d.cols + c] += go[e * d.cols + c] * y[e * d.cols + c];
                 for (std::size_t e = 0; e < d.rows; ++e)
                   for (std::size_t c = 0; c < d.cols; ++c) {
                     const std::size_t j = e * d.cols + c;
                     gi[j] += y[j] * (go[j] - dot[seg[e] * d.cols + c]);
                   }
               });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layernorm: gain/bias length must equal last axis of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * n + c] = h;
      out[r * n + c] = gain[c] * h + bias[c];
    }
  }
  Values gv = gain.storage();
  return make3("layernorm", x.shape(), std::move(out), x, gain, bias,
               [xhat, inv_std, gv, n, rows](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   std::vector<double> gh(n);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t c = 0; c < n; ++c) {
                       gh[c] = go[r * n + c] * (*gv)[c];
                       m1 += gh[c];
                       m2 += gh[c] * (*xhat)[r * n + c];
                     }
                     m1 /= static_cast<double>(n);
                     m2 /= static_cast<double>(n);
                     for (std::size_t c = 0; c < n; ++c)
                       gi[r * n + c] += (*inv_std)[r] * (gh[c] - m1 - (*xhat)[r * n + c] * m2);
                   }
                 }
                 if (in[1] != kNoNode) {
                   auto gg = t.grad(in[1]);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t c = 0; c < n; ++c) gg[c] += go[r * n + c] * (*xhat)[r * n + c];
                 }
                 if (in[2] != kNoNode) {
                   auto gb = t.grad(in[2]);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t c = 0; c < n; ++c) gb[c] += go[r * n + c];
                 }
               });
}

// ---------------------------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary("leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x[i] * (*mask)[i];
  }
  return make1("dropout", x.shape(), std::move(out), x,
               [mask](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (*mask)[i];
               });
}

// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const auto d = matrix_dims(logits, "cross_entropy");
  if (d.rows != 1) throw DimensionError("cross_entropy expects a single row of logits");
  if (label >= d.cols) {
    throw DataError("label " + std::to_string(label) + " outside vocabulary of size " +
                    std::to_string(d.cols));
  }
  double mx = logits[0];
  for (double v : logits.values()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits.values()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  auto probs = std::make_shared<std::vector<double>>(d.cols);
  for (std::size_t c = 0; c < d.cols; ++c) (*probs)[c] = std::exp(logits[c] - lse);
  return make1("cross_entropy", {1}, {lse - logits[label]}, logits,
               [probs, label](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 const double g = t.grad(o)[0];
                 auto gi = t.grad(in[0]);
                 for (std::size_t c = 0; c < gi.size(); ++c)
                   gi[c] += g * ((*probs)[c] - (c == label ? 1.0 : 0.0));
               });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.numel() != targets.numel()) {
    throw DimensionError("bce_with_logits: " + shape_string(logits.shape()) + " vs " +
                         shape_string(targets.shape()));
  }
  double s = 0.0;
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double z = logits[i];
    const double y = targets[i];
    s += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    (*probs)[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Values tv = targets.storage();
  return make1("bce_with_logits", {1}, {s}, logits,
               [probs, tv](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 const double g = t.grad(o)[0];
                 auto gi = t.grad(in[0]);
                 for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g * ((*probs)[i] - (*tv)[i]);
               });
}

Tensor head_dot(const Tensor& x, const Tensor& a) {
  const auto dx = matrix_dims(x, "head_dot");
  const auto da = matrix_dims(a, "head_dot");
  if (da.rows * da.cols != dx.cols) {
    throw DimensionError("head_dot: " + shape_string(x.shape()) + " does not split into heads of " +
                         shape_string(a.shape()));
  }
  const std::size_t heads = da.rows;
  const std::size_t k = da.cols;
  std::vector<double> out(dx.rows * heads, 0.0);
  for (std::size_t n = 0; n < dx.rows; ++n)
    for (std::size_t h = 0; h < heads; ++h) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += x[n * dx.cols + h * k + j] * a[h * k + j];
      out[n * heads + h] = s;
    }
  Values xv = x.storage();
  Values av = a.storage();
  return make2("head_dot", {dx.rows, heads}, std::move(out), x, a,
               [xv, av, dx, heads, k](Tape& t, NodeId o, const std::vector<NodeId>& in) {
                 auto go = t.grad(o);
                 if (in[0] != kNoNode) {
                   auto gi = t.grad(in[0]);
                   for (std::size_t n = 0; n < dx.rows; ++n)
                     for (std::size_t h = 0; h < heads; ++h)
                       for (std::size_t j = 0; j < k; ++j)
                         gi[n * dx.cols + h * k + j] += go[n * heads + h] * (*av)[h * k + j];
                 }
                 if (in[1] != kNoNode) {
                   auto ga = t.grad(in[1]);
                   for (std::size_t n = 0; n < dx.rows; ++n)
                     for (std::size_t h = 0; h < heads; ++h)
                       for (std::size_t j = 0; j < k; ++j)
                         ga[h * k + j] += go[n * heads + h] * (*xv)[n * dx.cols + h * k + j];
                 }
               });
}

}  // namespace oraclesage
