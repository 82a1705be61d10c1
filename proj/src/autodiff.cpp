#include "lsemvae/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace lsemvae {

template <typename T>
const Tensor<T>& Tape<T>::val(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("invalid tape variable");
  return val(v.id);
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.sink) return *n.sink;
  return n.grad.empty() ? empty_ : n.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.sink) return *n.sink;
  if (n.grad.empty()) n.grad = Tensor<T>(val(id).shape);
  return n.grad;
}

template <typename T>
Var Tape<T>::push(const char* op, Tensor<T> value, std::vector<std::uint32_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::check_same_shape(const char* op, Var a, Var b) const {
  if (shape(a) != shape(b)) {
    throw ShapeError(std::string(op) + ": " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  }
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push("constant", std::move(value), {}, nullptr);
}

template <typename T>
Var Tape<T>::input(Tensor<T> value, bool requires_grad) {
  Var v = push("input", std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = requires_grad;
  return v;
}

template <typename T>
Var Tape<T>::parameter(const Tensor<T>& value, Tensor<T>* grad_sink) {
  if (grad_sink && grad_sink->shape != value.shape) {
    throw ShapeError("gradient sink " + shape_str(grad_sink->shape) + " for parameter " +
                     shape_str(value.shape));
  }
  Node n;
  n.external = &value;
  n.sink = grad_sink;
  n.op = "parameter";
  n.requires_grad = grad_sink != nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  check_same_shape("add", a, b);
  Tensor<T> y = value(a);
  const auto& bv = value(b).data;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return push("add", std::move(y), {a.id, b.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    for (int s = 0; s < 2; ++s) {
      const auto in = t.nodes_[self].inputs[s];
      if (!t.needs(in)) continue;
      auto& gi = t.grad_buffer(in).data;
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  check_same_shape("sub", a, b);
  Tensor<T> y = value(a);
  const auto& bv = value(b).data;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return push("sub", std::move(y), {a.id, b.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto ia = t.nodes_[self].inputs[0];
    const auto ib = t.nodes_[self].inputs[1];
    if (t.needs(ia)) {
      auto& ga = t.grad_buffer(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs(ib)) {
      auto& gb = t.grad_buffer(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  check_same_shape("mul", a, b);
  Tensor<T> y = value(a);
  const auto& bv = value(b).data;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return push("mul", std::move(y), {a.id, b.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto ia = t.nodes_[self].inputs[0];
    const auto ib = t.nodes_[self].inputs[1];
    const auto& av = t.val(ia).data;
    const auto& bv = t.val(ib).data;
    if (t.needs(ia)) {
      auto& ga = t.grad_buffer(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs(ib)) {
      auto& gb = t.grad_buffer(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var Tape<T>::div(Var a, Var b) {
  check_same_shape("div", a, b);
  Tensor<T> y = value(a);
  const auto& bv = value(b).data;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
  return push("div", std::move(y), {a.id, b.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& y = t.nodes_[self].value.data;
    const auto ia = t.nodes_[self].inputs[0];
    const auto ib = t.nodes_[self].inputs[1];
    const auto& bv = t.val(ib).data;
    if (t.needs(ia)) {
      auto& ga = t.grad_buffer(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.needs(ib)) {
      auto& gb = t.grad_buffer(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

template <typename T>
Var Tape<T>::add_scalar(Var a, T c) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v += c;
  return push("add_scalar", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var Tape<T>::mul_scalar(Var a, T c) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v *= c;
  return push("mul_scalar", std::move(y), {a.id}, [c](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

template <typename T>
Var Tape<T>::scale(Var a, Var s) {
  if (size(s) != 1) throw ShapeError("scale: factor must have one element, got " + shape_str(shape(s)));
  Tensor<T> y = value(a);
  const T f = value(s)[0];
  for (auto& v : y.data) v *= f;
  return push("scale", std::move(y), {a.id, s.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto ia = t.nodes_[self].inputs[0];
    const auto is = t.nodes_[self].inputs[1];
    const auto& av = t.val(ia).data;
    const T f = t.val(is)[0];
    if (t.needs(ia)) {
      auto& ga = t.grad_buffer(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
    }
    if (t.needs(is)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad_buffer(is)[0] += acc;
    }
  });
}

template <typename T>
Var Tape<T>::exp(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = std::exp(v);
  return push("exp", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& y = t.nodes_[self].value.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

template <typename T>
Var Tape<T>::log(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = std::log(v);
  return push("log", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto in = t.nodes_[self].inputs[0];
    const auto& x = t.val(in).data;
    auto& ga = t.grad_buffer(in).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

template <typename T>
Var Tape<T>::sqrt(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = std::sqrt(v);
  return push("sqrt", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& y = t.nodes_[self].value.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * T(0.5) / y[i];
  });
}

template <typename T>
Var Tape<T>::square(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = v * v;
  return push("square", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto in = t.nodes_[self].inputs[0];
    const auto& x = t.val(in).data;
    auto& ga = t.grad_buffer(in).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * x[i] * g[i];
  });
}

template <typename T>
Var Tape<T>::relu(Var a) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = v > T(0) ? v : T(0);
  return push("relu", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& y = t.nodes_[self].value.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var Tape<T>::clamp(Var a, T lo, T hi) {
  Tensor<T> y = value(a);
  for (auto& v : y.data) v = std::clamp(v, lo, hi);
  return push("clamp", std::move(y), {a.id}, [lo, hi](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto in = t.nodes_[self].inputs[0];
    const auto& x = t.val(in).data;
    auto& ga = t.grad_buffer(in).data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
    }
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var Tape<T>::sum(Var a) {
  T acc = 0;
  for (T v : value(a).data) acc += v;
  return push("sum", Tensor<T>::scalar(acc), {a.id}, [](Tape& t, std::uint32_t self) {
    const T g = t.nodes_[self].grad[0];
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (auto& v : ga) v += g;
  });
}

template <typename T>
Var Tape<T>::mean(Var a) {
  T acc = 0;
  const auto& x = value(a).data;
  for (T v : x) acc += v;
  const T n = static_cast<T>(x.size());
  return push("mean", Tensor<T>::scalar(acc / n), {a.id}, [](Tape& t, std::uint32_t self) {
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    const T g = t.nodes_[self].grad[0] / static_cast<T>(ga.size());
    for (auto& v : ga) v += g;
  });
}

template <typename T>
Var Tape<T>::logsumexp(Var a) {
  const auto& x = value(a).data;
  if (x.empty()) throw ShapeError("logsumexp of empty tensor");
  const T m = *std::max_element(x.begin(), x.end());
  T acc = 0;
  for (T v : x) acc += std::exp(v - m);
  return push("logsumexp", Tensor<T>::scalar(m + std::log(acc)), {a.id},
              [](Tape& t, std::uint32_t self) {
                const T g = t.nodes_[self].grad[0];
                const T y = t.nodes_[self].value[0];
                const auto in = t.nodes_[self].inputs[0];
                const auto& x = t.val(in).data;
                auto& ga = t.grad_buffer(in).data;
                for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * std::exp(x[i] - y);
              });
}

template <typename T>
Var Tape<T>::softmax(Var a) {
  Tensor<T> y = value(a);
  if (y.empty()) throw ShapeError("softmax of empty tensor");
  const T m = *std::max_element(y.data.begin(), y.data.end());
  T acc = 0;
  for (auto& v : y.data) {
    v = std::exp(v - m);
    acc += v;
  }
  for (auto& v : y.data) v /= acc;
  return push("softmax", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& y = t.nodes_[self].value.data;
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (g[i] - dot);
  });
}

// ------------------------------------------------------------------ structure

template <typename T>
Var Tape<T>::concat(std::span<const Var> parts) {
  std::vector<T> out;
  std::vector<std::uint32_t> ids;
  for (Var p : parts) {
    const auto& d = value(p).data;
    out.insert(out.end(), d.begin(), d.end());
    ids.push_back(p.id);
  }
  return push("concat", Tensor<T>::vector(std::move(out)), std::move(ids),
              [](Tape& t, std::uint32_t self) {
                const auto& g = t.nodes_[self].grad.data;
                std::size_t off = 0;
                for (auto in : t.nodes_[self].inputs) {
                  const std::size_t n = t.val(in).size();
                  if (t.needs(in)) {
                    auto& gi = t.grad_buffer(in).data;
                    for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                  }
                  off += n;
                }
              });
}

template <typename T>
Var Tape<T>::slice(Var a, std::size_t offset, std::size_t count) {
  const auto& x = value(a).data;
  if (offset + count > x.size()) {
    throw ShapeError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + count) +
                     ") out of range for " + shape_str(shape(a)));
  }
  std::vector<T> out(x.begin() + offset, x.begin() + offset + count);
  return push("slice", Tensor<T>::vector(std::move(out)), {a.id},
              [offset](Tape& t, std::uint32_t self) {
                const auto& g = t.nodes_[self].grad.data;
                auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
                for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
              });
}

template <typename T>
Var Tape<T>::reshape(Var a, Shape new_shape) {
  if (numel(new_shape) != size(a)) {
    throw ShapeError("reshape " + shape_str(shape(a)) + " to " + shape_str(new_shape));
  }
  Tensor<T> y(std::move(new_shape), value(a).data);
  return push("reshape", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// --------------------------------------------------------------------- layers

namespace {

// Dot product with eight independent partial sums so the loop vectorizes
// without reassociation flags; the summation order is fixed, so results stay
// bitwise reproducible.
template <typename T>
T dot(const T* a, const T* b, std::size_t n, std::size_t stride_b = 1) {
  T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  if (stride_b == 1) {
    for (; i + 8 <= n; i += 8) {
      for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    }
  } else {
    for (; i + 8 <= n; i += 8) {
      for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[(i + l) * stride_b];
    }
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i * stride_b];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

}  // namespace

template <typename T>
Var Tape<T>::dense(Var x, Var w, Var b) {
  const auto& ws = shape(w);
  if (ws.size() != 2 || ws[1] != size(x) || shape(b) != Shape{ws[0]}) {
    throw ShapeError("dense: x " + shape_str(shape(x)) + ", W " + shape_str(ws) + ", b " +
                     shape_str(shape(b)));
  }
  const std::size_t out = ws[0], in = ws[1];
  const T* xv = value(x).data.data();
  const T* wv = value(w).data.data();
  Tensor<T> y = value(b);
  y.shape = Shape{out};
  for (std::size_t o = 0; o < out; ++o) {
    y[o] += dot(wv + o * in, xv, in);
  }
  return push("dense", std::move(y), {x.id, w.id, b.id}, [out, in](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto ix = t.nodes_[self].inputs[0];
    const auto iw = t.nodes_[self].inputs[1];
    const auto ib = t.nodes_[self].inputs[2];
    const T* xv = t.val(ix).data.data();
    const T* wv = t.val(iw).data.data();
    if (t.needs(ix)) {
      T* gx = t.grad_buffer(ix).data.data();
      for (std::size_t o = 0; o < out; ++o) {
        const T go = g[o];
        if (go == T(0)) continue;
        const T* row = wv + o * in;
        for (std::size_t i = 0; i < in; ++i) gx[i] += go * row[i];
      }
    }
    if (t.needs(iw)) {
      T* gw = t.grad_buffer(iw).data.data();
      for (std::size_t o = 0; o < out; ++o) {
        const T go = g[o];
        if (go == T(0)) continue;
        T* row = gw + o * in;
        for (std::size_t i = 0; i < in; ++i) row[i] += go * xv[i];
      }
    }
    if (t.needs(ib)) {
      auto& gb = t.grad_buffer(ib).data;
      for (std::size_t o = 0; o < out; ++o) gb[o] += g[o];
    }
  });
}

namespace {

// Output positions t for which t * stride + k - pad lies in [0, len).
inline void valid_range(std::size_t len, std::size_t out_len, std::size_t stride, std::size_t k,
                        std::size_t pad, std::size_t& t0, std::size_t& t1) {
  const long long s = static_cast<long long>(stride);
  const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
  long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long long hi = (static_cast<long long>(len) - 1 - off);
  hi = hi < 0 ? -1 : hi / s;
  hi = std::min<long long>(hi, static_cast<long long>(out_len) - 1);
  if (hi < lo) {
    t0 = t1 = 0;
    return;
  }
  t0 = static_cast<std::size_t>(lo);
  t1 = static_cast<std::size_t>(hi) + 1;
}

}  // namespace

template <typename T>
Var Tape<T>::conv1d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const auto& xs = shape(x);
  const auto& ws = shape(w);
  if (xs.size() != 2 || ws.size() != 3 || ws[1] != xs[0] || shape(b) != Shape{ws[0]} ||
      stride == 0 || xs[1] + 2 * pad < ws[2]) {
    throw ShapeError("conv1d: x " + shape_str(xs) + ", W " + shape_str(ws) + ", b " +
                     shape_str(shape(b)));
  }
  const std::size_t cin = xs[0], len = xs[1], cout = ws[0], kw = ws[2];
  const std::size_t out_len = (len + 2 * pad - kw) / stride + 1;
  const std::size_t rows = cin * kw;
  const T* xv = value(x).data.data();
  const T* wv = value(w).data.data();
  const T* bv = value(b).data.data();

  // im2col: row (ci, k) holds the input tap feeding each output position.
  std::vector<T> col(rows * out_len, T(0));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t k = 0; k < kw; ++k) {
      std::size_t t0, t1;
      valid_range(len, out_len, stride, k, pad, t0, t1);
      T* cr = col.data() + (ci * kw + k) * out_len;
      const T* xr = xv + ci * len;
      for (std::size_t t = t0; t < t1; ++t) cr[t] = xr[t * stride + k - pad];
    }
  }
  Tensor<T> y(Shape{cout, out_len});
  for (std::size_t co = 0; co < cout; ++co) {
    T* yr = y.data.data() + co * out_len;
    for (std::size_t t = 0; t < out_len; ++t) yr[t] = bv[co];
    for (std::size_t j = 0; j < rows; ++j) {
      const T wj = wv[co * rows + j];
      const T* cr = col.data() + j * out_len;
      for (std::size_t t = 0; t < out_len; ++t) yr[t] += wj * cr[t];
    }
  }
  Var v = push("conv1d", std::move(y), {x.id, w.id, b.id},
               [cin, len, cout, kw, out_len, stride, pad, rows](Tape& t, std::uint32_t self) {
                 const T* g = t.nodes_[self].grad.data.data();
                 const auto& col = t.nodes_[self].aux;
                 const auto ix = t.nodes_[self].inputs[0];
                 const auto iw = t.nodes_[self].inputs[1];
                 const auto ib = t.nodes_[self].inputs[2];
                 const T* wv = t.val(iw).data.data();
                 if (t.needs(ib)) {
                   T* gb = t.grad_buffer(ib).data.data();
                   for (std::size_t co = 0; co < cout; ++co) {
                     T acc = 0;
                     for (std::size_t q = 0; q < out_len; ++q) acc += g[co * out_len + q];
                     gb[co] += acc;
                   }
                 }
                 if (t.needs(iw)) {
                   T* gw = t.grad_buffer(iw).data.data();
                   for (std::size_t co = 0; co < cout; ++co) {
                     for (std::size_t j = 0; j < rows; ++j) {
                       gw[co * rows + j] += dot(g + co * out_len, col.data() + j * out_len, out_len);
                     }
                   }
                 }
                 if (t.needs(ix)) {
                   std::vector<T> gcol(rows * out_len, T(0));
                   for (std::size_t co = 0; co < cout; ++co) {
                     const T* gr = g + co * out_len;
                     for (std::size_t j = 0; j < rows; ++j) {
                       const T wj = wv[co * rows + j];
                       T* gc = gcol.data() + j * out_len;
                       for (std::size_t q = 0; q < out_len; ++q) gc[q] += wj * gr[q];
                     }
                   }
                   T* gx = t.grad_buffer(ix).data.data();
                   for (std::size_t ci = 0; ci < cin; ++ci) {
                     for (std::size_t k = 0; k < kw; ++k) {
                       std::size_t t0, t1;
                       valid_range(len, out_len, stride, k, pad, t0, t1);
                       const T* gc = gcol.data() + (ci * kw + k) * out_len;
                       T* gxr = gx + ci * len;
                       for (std::size_t q = t0; q < t1; ++q) gxr[q * stride + k - pad] += gc[q];
                     }
                   }
                 }
               });
  if (needs(v.id)) nodes_[v.id].aux = std::move(col);
  return v;
}

template <typename T>
Var Tape<T>::conv_transpose1d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const auto& xs = shape(x);
  const auto& ws = shape(w);
  if (xs.size() != 2 || ws.size() != 3 || ws[0] != xs[0] || shape(b) != Shape{ws[1]} ||
      stride == 0 || xs[1] == 0 || (xs[1] - 1) * stride + ws[2] <= 2 * pad) {
    throw ShapeError("conv_transpose1d: x " + shape_str(xs) + ", W " + shape_str(ws) + ", b " +
                     shape_str(shape(b)));
  }
  const std::size_t cin = xs[0], len = xs[1], cout = ws[1], kw = ws[2];
  const std::size_t out_len = (len - 1) * stride + kw - 2 * pad;
  const T* xv = value(x).data.data();
  const T* wv = value(w).data.data();
  const T* bv = value(b).data.data();

  // Row (co, k) of the column buffer is the contribution of tap k at every
  // input position; input t lands on output t * stride + k - pad.
  std::vector<T> col(cout * kw * len, T(0));
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T* xr = xv + ci * len;
    for (std::size_t j = 0; j < cout * kw; ++j) {
      const T wj = wv[ci * cout * kw + j];
      T* cr = col.data() + j * len;
      for (std::size_t q = 0; q < len; ++q) cr[q] += wj * xr[q];
    }
  }
  Tensor<T> y(Shape{cout, out_len});
  for (std::size_t co = 0; co < cout; ++co) {
    T* yr = y.data.data() + co * out_len;
    for (std::size_t o = 0; o < out_len; ++o) yr[o] = bv[co];
    for (std::size_t k = 0; k < kw; ++k) {
      std::size_t t0, t1;
      valid_range(out_len, len, stride, k, pad, t0, t1);
      const T* cr = col.data() + (co * kw + k) * len;
      for (std::size_t q = t0; q < t1; ++q) yr[q * stride + k - pad] += cr[q];
    }
  }
  return push("conv_transpose1d", std::move(y), {x.id, w.id, b.id},
              [cin, len, cout, kw, out_len, stride, pad](Tape& t, std::uint32_t self) {
                const T* g = t.nodes_[self].grad.data.data();
                const auto ix = t.nodes_[self].inputs[0];
                const auto iw = t.nodes_[self].inputs[1];
                const auto ib = t.nodes_[self].inputs[2];
                const T* xv = t.val(ix).data.data();
                const T* wv = t.val(iw).data.data();
                if (t.needs(ib)) {
                  T* gb = t.grad_buffer(ib).data.data();
                  for (std::size_t co = 0; co < cout; ++co) {
                    T acc = 0;
                    for (std::size_t o = 0; o < out_len; ++o) acc += g[co * out_len + o];
                    gb[co] += acc;
                  }
                }
                const bool want_w = t.needs(iw), want_x = t.needs(ix);
                if (!want_w && !want_x) return;
                std::vector<T> gcol(cout * kw * len, T(0));
                for (std::size_t co = 0; co < cout; ++co) {
                  for (std::size_t k = 0; k < kw; ++k) {
                    std::size_t t0, t1;
                    valid_range(out_len, len, stride, k, pad, t0, t1);
                    T* gc = gcol.data() + (co * kw + k) * len;
                    const T* gr = g + co * out_len;
                    for (std::size_t q = t0; q < t1; ++q) gc[q] = gr[q * stride + k - pad];
                  }
                }
                T* gw = want_w ? t.grad_buffer(iw).data.data() : nullptr;
                T* gx = want_x ? t.grad_buffer(ix).data.data() : nullptr;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const T* xr = xv + ci * len;
                  T* gxr = gx ? gx + ci * len : nullptr;
                  for (std::size_t j = 0; j < cout * kw; ++j) {
                    const T* gc = gcol.data() + j * len;
                    if (gw) gw[ci * cout * kw + j] += dot(xr, gc, len);
                    if (gxr) {
                      const T wj = wv[ci * cout * kw + j];
                      for (std::size_t q = 0; q < len; ++q) gxr[q] += wj * gc[q];
                    }
                  }
                }
              });
}

template <typename T>
Var Tape<T>::dropout(Var a, double rate, CounterRng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout rate must be in [0, 1)");
  Tensor<T> y = value(a);
  std::vector<T> mask(y.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < y.size(); ++i) {
    mask[i] = rng.uniform() >= rate ? keep_scale : T(0);
    y[i] *= mask[i];
  }
  Var v = push("dropout", std::move(y), {a.id}, [](Tape& t, std::uint32_t self) {
    const auto& g = t.nodes_[self].grad.data;
    const auto& mask = t.nodes_[self].aux;
    auto& ga = t.grad_buffer(t.nodes_[self].inputs[0]).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
  nodes_[v.id].aux = std::move(mask);
  return v;
}

template <typename T>
std::uint64_t Tape<T>::activation_pattern() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (const Node& n : nodes_) {
    const std::string_view op = n.op;
    if (op != "relu" && op != "clamp") continue;
    const auto& x = val(n.inputs[0]).data;
    if (op == "relu") {
      for (T v : x) feed(v > T(0) ? 1 : 0);
    } else {
      const auto& y = n.value.data;
      for (std::size_t i = 0; i < x.size(); ++i) feed(x[i] == y[i] ? 1 : 2);
    }
  }
  return h;
}

// ------------------------------------------------------------------- backward

template <typename T>
void Tape<T>::backward(Var loss) {
  if (size(loss) != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(shape(loss)));
  }
  if (!needs(loss.id)) return;
  grad_buffer(loss.id)[0] += T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, static_cast<std::uint32_t>(i));
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace lsemvae
