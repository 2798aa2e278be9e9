#include "paed/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "paed/error.hpp"
#include "paed/parallel.hpp"
#include "paed/rng.hpp"

namespace paed {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw ShapeMismatch(msg);
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_id(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) throw Error("invalid tape node id");
}

const Tensor& Tape::node_value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external_value != nullptr ? *n.external_value : n.value;
}

Var Tape::leaf(const Tensor* value, Tensor* grad) {
  Node n;
  n.external_value = value;
  n.external_grad = grad;
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  check_id(v.id);
  return node_value(v.id);
}

const Tensor& Tape::grad(Var v) const {
  check_id(v.id);
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.grad_ready) throw MissingGradient("gradient requested before backward()");
  return n.external_grad != nullptr ? *n.external_grad : n.grad;
}

const Tensor& Tape::value_at(int id) const {
  check_id(id);
  return node_value(id);
}

Tensor& Tape::grad_at(int id) {
  check_id(id);
  Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external_grad != nullptr ? *n.external_grad : n.grad;
}

const std::vector<int>& Tape::inputs_at(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].inputs;
}

Var Tape::make_node(Tensor value, std::vector<int> inputs,
                    std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  check_id(loss.id);
  if (node_value(loss.id).size() != 1) throw NotScalar("backward() requires a scalar loss");

  // Reset every gradient buffer reachable by index; makes backward idempotent.
  for (int id = 0; id <= loss.id; ++id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& v = node_value(id);
    Tensor& g = n.external_grad != nullptr ? *n.external_grad : n.grad;
    if (!g.same_shape(v)) g = Tensor(v.shape());
    g.fill(0.0);
    n.grad_ready = true;
  }
  grad_at(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "add: shape mismatch");
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return make_node(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_at(t.inputs_at(self)[0]);
    Tensor& gb = t.grad_at(t.inputs_at(self)[1]);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "sub: shape mismatch");
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return make_node(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_at(t.inputs_at(self)[0]);
    Tensor& gb = t.grad_at(t.inputs_at(self)[1]);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.same_shape(bv), "mul: shape mismatch");
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return make_node(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const int ia = t.inputs_at(self)[0];
    const int ib = t.inputs_at(self)[1];
    const Tensor& av = t.value_at(ia);
    const Tensor& bv = t.value_at(ib);
    Tensor& ga = t.grad_at(ia);
    Tensor& gb = t.grad_at(ib);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  });
}

Var Tape::affine(Var a, double scale, double shift) {
  const Tensor& av = value(a);
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.size(); ++i) out[i] = scale * av[i] + shift;
  return make_node(std::move(out), {a.id}, [scale](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

Var Tape::relu(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_node(std::move(out), {x.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& xv = t.value_at(t.inputs_at(self)[0]);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var Tape::sigmoid(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  return make_node(std::move(out), {x.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& y = t.value_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::tanh_op(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  return make_node(std::move(out), {x.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const Tensor& y = t.value_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Tape::sum(Var x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  return make_node(Tensor::scalar(s), {x.id}, [](Tape& t, int self) {
    const double g = t.grad_at(self)[0];
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var Tape::add_scalars(const std::vector<Var>& xs) {
  require(!xs.empty(), "add_scalars: empty list");
  double s = 0.0;
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (Var v : xs) {
    require(value(v).size() == 1, "add_scalars: non-scalar input");
    s += value(v)[0];
    ids.push_back(v.id);
  }
  return make_node(Tensor::scalar(s), std::move(ids), [](Tape& t, int self) {
    const double g = t.grad_at(self)[0];
    for (int in : t.inputs_at(self)) t.grad_at(in)[0] += g;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.ndim() == 2 && bv.ndim() == 2, "matmul: rank-2 operands required");
  require(av.dim(1) == bv.dim(0), "matmul: inner extents differ");
  const int rows = av.dim(0), inner = av.dim(1), cols = bv.dim(1);
  Tensor out({rows, cols});
  {
    const double* ap = av.data();
    const double* bp = bv.data();
    double* op = out.data();
    for (int r = 0; r < rows; ++r) {
      for (int k = 0; k < inner; ++k) {
        const double arc = ap[r * inner + k];
        if (arc == 0.0) continue;
        const double* brow = bp + k * cols;
        double* orow = op + r * cols;
        for (int c = 0; c < cols; ++c) orow[c] += arc * brow[c];
      }
    }
  }
  return make_node(std::move(out), {a.id, b.id}, [rows, inner, cols](Tape& t, int self) {
    const double* g = t.grad_at(self).data();
    const int ia = t.inputs_at(self)[0];
    const int ib = t.inputs_at(self)[1];
    const double* ap = t.value_at(ia).data();
    const double* bp = t.value_at(ib).data();
    double* ga = t.grad_at(ia).data();
    double* gb = t.grad_at(ib).data();
    for (int r = 0; r < rows; ++r) {
      for (int k = 0; k < inner; ++k) {
        const double* brow = bp + k * cols;
        const double* grow = g + r * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += grow[c] * brow[c];
        ga[r * inner + k] += acc;
      }
    }
    for (int k = 0; k < inner; ++k) {
      for (int r = 0; r < rows; ++r) {
        const double ark = ap[r * inner + k];
        if (ark == 0.0) continue;
        const double* grow = g + r * cols;
        double* gbrow = gb + k * cols;
        for (int c = 0; c < cols; ++c) gbrow[c] += ark * grow[c];
      }
    }
  });
}

Var Tape::add_bias(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  require(xv.ndim() == 2 && bv.ndim() == 1, "add_bias: [R,K] and [K] required");
  require(xv.dim(1) == bv.dim(0), "add_bias: feature extents differ");
  const int rows = xv.dim(0), cols = xv.dim(1);
  Tensor out(xv.shape());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  }
  return make_node(std::move(out), {x.id, bias.id}, [rows, cols](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    Tensor& gbias = t.grad_at(t.inputs_at(self)[1]);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        gx[r * cols + c] += g[r * cols + c];
        gbias[c] += g[r * cols + c];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

Var Tape::reshape(Var x, std::vector<int> shape) {
  const Tensor& xv = value(x);
  require(shape_size(shape) == xv.size(), "reshape: element count changes");
  Tensor out(std::move(shape));
  std::memcpy(out.data(), xv.data(), sizeof(double) * static_cast<std::size_t>(xv.size()));
  return make_node(std::move(out), {x.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  require(av.ndim() == 2 && bv.ndim() == 2, "concat_cols: rank-2 operands required");
  require(av.dim(0) == bv.dim(0), "concat_cols: row counts differ");
  const int rows = av.dim(0), ka = av.dim(1), kb = bv.dim(1);
  Tensor out({rows, ka + kb});
  for (int r = 0; r < rows; ++r) {
    std::memcpy(out.data() + static_cast<std::ptrdiff_t>(r) * (ka + kb), av.data() + static_cast<std::ptrdiff_t>(r) * ka,
                sizeof(double) * static_cast<std::size_t>(ka));
    std::memcpy(out.data() + static_cast<std::ptrdiff_t>(r) * (ka + kb) + ka, bv.data() + static_cast<std::ptrdiff_t>(r) * kb,
                sizeof(double) * static_cast<std::size_t>(kb));
  }
  return make_node(std::move(out), {a.id, b.id}, [rows, ka, kb](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& ga = t.grad_at(t.inputs_at(self)[0]);
    Tensor& gb = t.grad_at(t.inputs_at(self)[1]);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < ka; ++c) ga[r * ka + c] += g[r * (ka + kb) + c];
      for (int c = 0; c < kb; ++c) gb[r * kb + c] += g[r * (ka + kb) + ka + c];
    }
  });
}

Var Tape::transpose_last2(Var x) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 3, "transpose_last2: rank-3 input required");
  const int b = xv.dim(0), f = xv.dim(1), tdim = xv.dim(2);
  Tensor out({b, tdim, f});
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < f; ++j) {
      for (int k = 0; k < tdim; ++k) {
        out[(static_cast<std::int64_t>(i) * tdim + k) * f + j] =
            xv[(static_cast<std::int64_t>(i) * f + j) * tdim + k];
      }
    }
  }
  return make_node(std::move(out), {x.id}, [b, f, tdim](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < f; ++j) {
        for (int k = 0; k < tdim; ++k) {
          gx[(static_cast<std::int64_t>(i) * f + j) * tdim + k] +=
              g[(static_cast<std::int64_t>(i) * tdim + k) * f + j];
        }
      }
    }
  });
}

Var Tape::slice_time(Var x, int t) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 3, "slice_time: rank-3 input required");
  require(t >= 0 && t < xv.dim(2), "slice_time: index out of range");
  const int b = xv.dim(0), f = xv.dim(1), tdim = xv.dim(2);
  Tensor out({b, f});
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < f; ++j) {
      out[i * f + j] = xv[(static_cast<std::int64_t>(i) * f + j) * tdim + t];
    }
  }
  return make_node(std::move(out), {x.id}, [b, f, tdim, t](Tape& tp, int self) {
    const Tensor& g = tp.grad_at(self);
    Tensor& gx = tp.grad_at(tp.inputs_at(self)[0]);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < f; ++j) {
        gx[(static_cast<std::int64_t>(i) * f + j) * tdim + t] += g[i * f + j];
      }
    }
  });
}

Var Tape::stack_rows(const std::vector<Var>& xs) {
  require(!xs.empty(), "stack_rows: empty list");
  const Tensor& first = value(xs[0]);
  require(first.ndim() == 2, "stack_rows: rank-2 inputs required");
  const int b = first.dim(0), k = first.dim(1);
  const int steps = static_cast<int>(xs.size());
  Tensor out({b, steps, k});
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (int s = 0; s < steps; ++s) {
    const Tensor& v = value(xs[static_cast<std::size_t>(s)]);
    require(v.same_shape(first), "stack_rows: inconsistent shapes");
    for (int i = 0; i < b; ++i) {
      std::memcpy(out.data() + (static_cast<std::int64_t>(i) * steps + s) * k,
                  v.data() + static_cast<std::ptrdiff_t>(i) * k, sizeof(double) * static_cast<std::size_t>(k));
    }
    ids.push_back(xs[static_cast<std::size_t>(s)].id);
  }
  return make_node(std::move(out), std::move(ids), [b, k, steps](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    const std::vector<int>& ins = t.inputs_at(self);
    for (int s = 0; s < steps; ++s) {
      Tensor& gx = t.grad_at(ins[static_cast<std::size_t>(s)]);
      for (int i = 0; i < b; ++i) {
        for (int c = 0; c < k; ++c) {
          gx[i * k + c] += g[(static_cast<std::int64_t>(i) * steps + s) * k + c];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

Var Tape::conv2d_same(Var x, Var kernels, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernels);
  const Tensor& bv = value(bias);
  require(xv.ndim() == 4 && kv.ndim() == 4, "conv2d: rank-4 input and kernels required");
  require(kv.dim(1) == xv.dim(1), "conv2d: input channel mismatch");
  require(kv.dim(2) % 2 == 1 && kv.dim(3) % 2 == 1, "conv2d: kernel extents must be odd");
  require(bv.ndim() == 1 && bv.dim(0) == kv.dim(0), "conv2d: bias extent mismatch");
  const int batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int cout = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  const int ph = kh / 2, pw = kw / 2;

  Tensor out({batch, cout, h, w});
  {
    const double* xp = xv.data();
    const double* kp = kv.data();
    const double* bp = bv.data();
    double* op = out.data();
    parallel_for(static_cast<std::int64_t>(batch) * cout, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t bc = lo; bc < hi; ++bc) {
        const int bi = static_cast<int>(bc / cout);
        const int co = static_cast<int>(bc % cout);
        double* oplane = op + ((static_cast<std::int64_t>(bi) * cout + co) * h) * w;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) oplane[i] = bp[co];
        for (int ci = 0; ci < cin; ++ci) {
          const double* xplane = xp + ((static_cast<std::int64_t>(bi) * cin + ci) * h) * w;
          const double* kplane = kp + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
          for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
              const double kval = kplane[dy * kw + dx];
              if (kval == 0.0) continue;
              const int y0 = std::max(0, ph - dy);
              const int y1 = std::min(h, h + ph - dy);
              const int x0 = std::max(0, pw - dx);
              const int x1 = std::min(w, w + pw - dx);
              for (int y = y0; y < y1; ++y) {
                const double* xrow = xplane + (y + dy - ph) * w + (dx - pw);
                double* orow = oplane + y * w;
                for (int xx = x0; xx < x1; ++xx) orow[xx] += kval * xrow[xx];
              }
            }
          }
        }
      }
    });
  }

  return make_node(std::move(out), {x.id, kernels.id, bias.id},
                   [batch, cin, cout, h, w, kh, kw, ph, pw](Tape& t, int self) {
    const double* g = t.grad_at(self).data();
    const int ix = t.inputs_at(self)[0];
    const int ik = t.inputs_at(self)[1];
    const int ib = t.inputs_at(self)[2];
    const double* xp = t.value_at(ix).data();
    const double* kp = t.value_at(ik).data();
    double* gx = t.grad_at(ix).data();
    double* gk = t.grad_at(ik).data();
    double* gb = t.grad_at(ib).data();

    for (int co = 0; co < cout; ++co) {
      double acc = 0.0;
      for (int bi = 0; bi < batch; ++bi) {
        const double* gplane = g + ((static_cast<std::int64_t>(bi) * cout + co) * h) * w;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) acc += gplane[i];
      }
      gb[co] += acc;
    }

    // Kernel gradients: each worker owns one co slice.
    parallel_for(cout, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t co = lo; co < hi; ++co) {
        for (int ci = 0; ci < cin; ++ci) {
          double* gkplane = gk + ((co * cin + ci) * kh) * kw;
          for (int bi = 0; bi < batch; ++bi) {
            const double* gplane = g + ((static_cast<std::int64_t>(bi) * cout + co) * h) * w;
            const double* xplane = xp + ((static_cast<std::int64_t>(bi) * cin + ci) * h) * w;
            for (int dy = 0; dy < kh; ++dy) {
              for (int dx = 0; dx < kw; ++dx) {
                const int y0 = std::max(0, ph - dy);
                const int y1 = std::min(h, h + ph - dy);
                const int x0 = std::max(0, pw - dx);
                const int x1 = std::min(w, w + pw - dx);
                double acc = 0.0;
                for (int y = y0; y < y1; ++y) {
                  const double* xrow = xplane + (y + dy - ph) * w + (dx - pw);
                  const double* grow = gplane + y * w;
                  for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx];
                }
                gkplane[dy * kw + dx] += acc;
              }
            }
          }
        }
      }
    });

    // Input gradients: each worker owns one (batch, cin) plane.
    parallel_for(static_cast<std::int64_t>(batch) * cin, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t bc = lo; bc < hi; ++bc) {
        const int bi = static_cast<int>(bc / cin);
        const int ci = static_cast<int>(bc % cin);
        double* gxplane = gx + ((static_cast<std::int64_t>(bi) * cin + ci) * h) * w;
        for (int co = 0; co < cout; ++co) {
          const double* gplane = g + ((static_cast<std::int64_t>(bi) * cout + co) * h) * w;
          const double* kplane = kp + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
          for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
              const double kval = kplane[dy * kw + dx];
              if (kval == 0.0) continue;
              const int y0 = std::max(0, ph - dy);
              const int y1 = std::min(h, h + ph - dy);
              const int x0 = std::max(0, pw - dx);
              const int x1 = std::min(w, w + pw - dx);
              for (int y = y0; y < y1; ++y) {
                double* gxrow = gxplane + (y + dy - ph) * w + (dx - pw);
                const double* grow = gplane + y * w;
                for (int xx = x0; xx < x1; ++xx) gxrow[xx] += kval * grow[xx];
              }
            }
          }
        }
      }
    });
  });
}

Var Tape::maxpool_rows(Var x, int k) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 4, "maxpool_rows: rank-4 input required");
  require(k >= 1, "maxpool_rows: kernel must be >= 1");
  require(xv.dim(2) % k == 0, "maxpool_rows: H not divisible by pool size");
  const int batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int hout = h / k;
  Tensor out({batch, ch, hout, w});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(out.size()));
  for (int bi = 0; bi < batch; ++bi) {
    for (int c = 0; c < ch; ++c) {
      const double* xplane = xv.data() + ((static_cast<std::int64_t>(bi) * ch + c) * h) * w;
      double* oplane = out.data() + ((static_cast<std::int64_t>(bi) * ch + c) * hout) * w;
      std::int32_t* aplane =
          argmax.data() + ((static_cast<std::int64_t>(bi) * ch + c) * hout) * w;
      for (int ho = 0; ho < hout; ++ho) {
        for (int xx = 0; xx < w; ++xx) {
          double best = xplane[(ho * k) * w + xx];
          int besti = ho * k;
          for (int i = 1; i < k; ++i) {
            const double v = xplane[(ho * k + i) * w + xx];
            if (v > best) {  // strict: ties keep the first index
              best = v;
              besti = ho * k + i;
            }
          }
          oplane[ho * w + xx] = best;
          aplane[ho * w + xx] = besti;
        }
      }
    }
  }
  return make_node(std::move(out), {x.id},
                   [batch, ch, h, w, hout, argmax = std::move(argmax)](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (int bi = 0; bi < batch; ++bi) {
      for (int c = 0; c < ch; ++c) {
        const std::int64_t obase = ((static_cast<std::int64_t>(bi) * ch + c) * hout) * w;
        const std::int64_t xbase = ((static_cast<std::int64_t>(bi) * ch + c) * h) * w;
        for (int ho = 0; ho < hout; ++ho) {
          for (int xx = 0; xx < w; ++xx) {
            const std::int64_t oi = obase + ho * w + xx;
            gx[xbase + static_cast<std::int64_t>(argmax[static_cast<std::size_t>(oi)]) * w + xx] += g[oi];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

namespace {

// Shared batch-norm kernel. The input is viewed as groups x features where
// statistics reduce over `groups` entries per feature; `stride`/`span` encode
// the memory layout of one feature's entries.
struct BnView {
  int features = 0;
  std::int64_t count = 0;  // entries per feature
  // Gathers the flat indices of feature f into `idx`.
  std::function<void(int, std::vector<std::int64_t>&)> gather;
};

Var batchnorm_impl(Tape& tape, Var x, Var gamma, Var beta, BatchNormState* state, Mode mode,
                   bool update_running, const BnView& view) {
  const Tensor& xv = tape.value(x);
  const Tensor& gv = tape.value(gamma);
  const Tensor& bv = tape.value(beta);
  if (gv.size() != view.features || bv.size() != view.features) {
    throw ShapeMismatch("batchnorm: gamma/beta extent mismatch");
  }
  if (state == nullptr) throw Error("batchnorm: null state");
  if (state->running_mean.size() != view.features) {
    state->running_mean = Tensor({view.features});
    state->running_var = Tensor({view.features}, 1.0);
  }
  if (mode == Mode::kInfer && !state->initialized) {
    throw NoRunningStats("batch norm used in infer mode before any training step");
  }

  const double eps = state->eps;
  Tensor out(xv.shape());
  Tensor istd({view.features});
  Tensor xhat(xv.shape());

  std::vector<std::int64_t> idx;
  for (int f = 0; f < view.features; ++f) {
    view.gather(f, idx);
    double mu, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::int64_t i : idx) s += xv[i];
      mu = s / static_cast<double>(idx.size());
      double sq = 0.0;
      for (std::int64_t i : idx) {
        const double d = xv[i] - mu;
        sq += d * d;
      }
      var = sq / static_cast<double>(idx.size());
      if (update_running) {
        state->running_mean[f] = state->momentum * state->running_mean[f] + (1.0 - state->momentum) * mu;
        state->running_var[f] = state->momentum * state->running_var[f] + (1.0 - state->momentum) * var;
      }
    } else {
      mu = state->running_mean[f];
      var = state->running_var[f];
    }
    istd[f] = 1.0 / std::sqrt(var + eps);
    for (std::int64_t i : idx) {
      xhat[i] = (xv[i] - mu) * istd[f];
      out[i] = gv[f] * xhat[i] + bv[f];
    }
  }
  if (mode == Mode::kTrain && update_running) state->initialized = true;

  const bool train = mode == Mode::kTrain;
  return tape.make_node(
      std::move(out), {x.id, gamma.id, beta.id},
      [view, xhat = std::move(xhat), istd = std::move(istd), train](Tape& t, int self) {
        const Tensor& g = t.grad_at(self);
        const int ix = t.inputs_at(self)[0];
        const int ig = t.inputs_at(self)[1];
        const int ibeta = t.inputs_at(self)[2];
        const Tensor& gv = t.value_at(ig);
        Tensor& gx = t.grad_at(ix);
        Tensor& ggamma = t.grad_at(ig);
        Tensor& gbeta = t.grad_at(ibeta);
        std::vector<std::int64_t> idx;
        for (int f = 0; f < view.features; ++f) {
          view.gather(f, idx);
          const double n = static_cast<double>(idx.size());
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t i : idx) {
            sum_g += g[i];
            sum_gx += g[i] * xhat[i];
          }
          ggamma[f] += sum_gx;
          gbeta[f] += sum_g;
          if (train) {
            const double scale = gv[f] * istd[f];
            for (std::int64_t i : idx) {
              gx[i] += scale * (g[i] - sum_g / n - xhat[i] * sum_gx / n);
            }
          } else {
            const double scale = gv[f] * istd[f];
            for (std::int64_t i : idx) gx[i] += scale * g[i];
          }
        }
      });
}

}  // namespace

Var Tape::batchnorm_conv(Var x, Var gamma, Var beta, BatchNormState* state, Mode mode,
                         bool update_running) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 4, "batchnorm_conv: rank-4 input required");
  const int batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  BnView view;
  view.features = ch;
  view.count = static_cast<std::int64_t>(batch) * h * w;
  view.gather = [batch, ch, h, w](int c, std::vector<std::int64_t>& idx) {
    idx.clear();
    idx.reserve(static_cast<std::size_t>(batch) * h * w);
    for (int bi = 0; bi < batch; ++bi) {
      const std::int64_t base = ((static_cast<std::int64_t>(bi) * ch + c) * h) * w;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) idx.push_back(base + i);
    }
  };
  return batchnorm_impl(*this, x, gamma, beta, state, mode, update_running, view);
}

Var Tape::batchnorm_rows(Var x, Var gamma, Var beta, BatchNormState* state, Mode mode,
                         bool update_running) {
  const Tensor& xv = value(x);
  require(xv.ndim() == 2, "batchnorm_rows: rank-2 input required");
  const int rows = xv.dim(0), cols = xv.dim(1);
  BnView view;
  view.features = cols;
  view.count = rows;
  view.gather = [rows, cols](int f, std::vector<std::int64_t>& idx) {
    idx.clear();
    idx.reserve(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) idx.push_back(static_cast<std::int64_t>(r) * cols + f);
  };
  return batchnorm_impl(*this, x, gamma, beta, state, mode, update_running, view);
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Var Tape::dropout(Var x, double rate, Mode mode, StepContext* ctx) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (rate == 0.0 || mode == Mode::kInfer) return x;
  if (ctx == nullptr) throw Error("dropout: train mode requires a StepContext");
  const Tensor& xv = value(x);
  Rng rng(mix_seed(ctx->seed, static_cast<std::uint64_t>(ctx->step),
                   0xd20u + static_cast<std::uint64_t>(ctx->dropout_counter)));
  ctx->dropout_counter += 1;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<float> mask(static_cast<std::size_t>(xv.size()));
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.size(); ++i) {
    const bool keep = rng.uniform() >= rate;
    mask[static_cast<std::size_t>(i)] = keep ? static_cast<float>(keep_scale) : 0.0f;
    out[i] = xv[i] * mask[static_cast<std::size_t>(i)];
  }
  return make_node(std::move(out), {x.id}, [mask = std::move(mask)](Tape& t, int self) {
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_at(t.inputs_at(self)[0]);
    for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[static_cast<std::size_t>(i)];
  });
}

}  // namespace paed
