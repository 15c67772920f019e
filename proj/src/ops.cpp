#include "qcnmt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "qcnmt/kernels.hpp"
#include "qcnmt/rng.hpp"

namespace qcnmt {

namespace {

thread_local bool g_grad_enabled = true;

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               std::function<void(const Tensor&)> bwd) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || want_grad(p);
  Tensor out(std::move(shape), std::move(values), rg);
  if (rg) {
    auto n = std::make_shared<Node>();
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
    out.set_node(std::move(n));
  }
  return out;
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcast layout: `a_big` says which operand keeps its shape; the other is
// indexed modulo `inner` (1 for scalars).
struct BcInfo {
  bool a_big;
  std::size_t inner;
  std::size_t n;
};

BcInfo broadcast_info(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {true, a.numel(), a.numel()};
  if (b.numel() == 1) return {true, 1, a.numel()};
  if (a.numel() == 1) return {false, 1, b.numel()};
  if (is_suffix(b.shape(), a.shape())) return {true, b.numel(), a.numel()};
  if (is_suffix(a.shape(), b.shape())) return {false, a.numel(), b.numel()};
  shape_error(op, a, b);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit axis_split(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i < axis) s.outer *= static_cast<std::size_t>(shape[i]);
    else if (i == axis) s.len = static_cast<std::size_t>(shape[i]);
    else s.inner *= static_cast<std::size_t>(shape[i]);
  }
  return s;
}

void check_axis(const char* op, const Tensor& t, int axis) {
  if (axis < 0 || axis >= t.rank()) {
    throw std::runtime_error(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(t.shape()));
  }
}

Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b,
                          double (*fwd)(double, double),
                          void (*bwd)(double g, double av, double bv, double* da, double* db)) {
  const BcInfo bc = broadcast_info(op, a, b);
  const Tensor& big = bc.a_big ? a : b;
  const Tensor& small = bc.a_big ? b : a;
  std::vector<double> out(bc.n);
  const auto& bv = big.values();
  const auto& sv = small.values();
  for (std::size_t i = 0; i < bc.n; ++i) {
    const double x = bc.a_big ? bv[i] : sv[i % bc.inner];
    const double y = bc.a_big ? sv[i % bc.inner] : bv[i];
    out[i] = fwd(x, y);
  }
  return make_op(big.shape(), std::move(out), {a, b}, [bc, bwd](const Tensor& o) {
    auto& pa = o.node()->parents[0];
    auto& pb = o.node()->parents[1];
    const auto& g = o.grad();
    const bool da = pa.requires_grad();
    const bool db = pb.requires_grad();
    const auto& av = pa.values();
    const auto& bvv = pb.values();
    for (std::size_t i = 0; i < bc.n; ++i) {
      const std::size_t ia = bc.a_big ? i : i % bc.inner;
      const std::size_t ib = bc.a_big ? i % bc.inner : i;
      double ga = 0.0, gb = 0.0;
      bwd(g[i], av[ia], bvv[ib], &ga, &gb);
      if (da) pa.grad()[ia] += ga;
      if (db) pb.grad()[ib] += gb;
    }
  });
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw std::runtime_error("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw std::runtime_error("backward: root does not require grad");
  }

  // Post-order DFS so parents precede consumers; zero every reachable grad
  // buffer exactly once before accumulating.
  std::vector<Tensor> order;
  std::unordered_set<const Node*> visited;
  std::unordered_set<const void*> zeroed;
  auto zero_grad = [&](Tensor t) {
    if (t.has_grad_buffer() && zeroed.insert(t.grad_key()).second) {
      std::fill(t.grad().begin(), t.grad().end(), 0.0);
    }
  };

  struct Frame {
    Tensor t;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  zero_grad(root);
  if (root.node() && visited.insert(root.node().get()).second) {
    stack.push_back({root, 0});
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto& parents = f.t.node()->parents;
    if (f.next < parents.size()) {
      Tensor p = parents[f.next++];
      zero_grad(p);
      if (p.node() && visited.insert(p.node().get()).second) {
        stack.push_back({std::move(p), 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  Tensor seed = root;
  seed.grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->node()->backward(*it);
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* da, double* db) {
        *da = g;
        *db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* da, double* db) {
        *da = g;
        *db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double av, double bv, double* da, double* db) {
        *da = g * bv;
        *db = g * av;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double av, double bv, double* da, double* db) {
        *da = g / bv;
        *db = -g * av / (bv * bv);
      });
}

Tensor scale(const Tensor& t, double s) {
  std::vector<double> out(t.numel());
  kernels::scale_map(t.values().data(), out.data(), out.size(), s);
  return make_op(t.shape(), std::move(out), {t}, [s](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad()[i] += g[i] * s;
  });
}

Tensor add_scalar(const Tensor& t, double s) {
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.values()[i] + s;
  return make_op(t.shape(), std::move(out), {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad()[i] += g[i];
  });
}

Tensor neg(const Tensor& t) { return scale(t, -1.0); }

Tensor tanh(const Tensor& t) {
  std::vector<double> out(t.numel());
  kernels::tanh_map(t.values().data(), out.data(), out.size());
  return make_op(t.shape(), std::move(out), {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    const auto& y = o.values();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad()[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Tensor relu(const Tensor& t) {
  std::vector<double> out(t.numel());
  kernels::relu_map(t.values().data(), out.data(), out.size());
  return make_op(t.shape(), std::move(out), {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    const auto& x = p.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) p.grad()[i] += g[i];
    }
  });
}

Tensor sqrt(const Tensor& t) {
  std::vector<double> out(t.numel());
  kernels::sqrt_map(t.values().data(), out.data(), out.size());
  return make_op(t.shape(), std::move(out), {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    const auto& y = o.values();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad()[i] += g[i] * 0.5 / y[i];
  });
}

namespace {

struct MatmulDims {
  int batch, m, k, n;
  std::ptrdiff_t stride_a, stride_b, stride_c;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  MatmulDims d{};
  d.m = sa[sa.size() - 2];
  d.k = sa[sa.size() - 1];
  const int bk = sb[sb.size() - 2];
  d.n = sb[sb.size() - 1];
  if (bk != d.k) shape_error("matmul", a, b);
  if (a.rank() == b.rank()) {
    if (!std::equal(sa.begin(), sa.end() - 2, sb.begin())) shape_error("matmul", a, b);
    d.batch = 1;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) d.batch *= sa[i];
    d.stride_a = static_cast<std::ptrdiff_t>(d.m) * d.k;
    d.stride_b = static_cast<std::ptrdiff_t>(d.k) * d.n;
  } else if (b.rank() == 2 && a.rank() > 2) {
    d.batch = 1;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) d.batch *= sa[i];
    d.stride_a = static_cast<std::ptrdiff_t>(d.m) * d.k;
    d.stride_b = 0;
  } else {
    shape_error("matmul", a, b);
  }
  d.stride_c = static_cast<std::ptrdiff_t>(d.m) * d.n;
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a, b);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  std::vector<double> out(static_cast<std::size_t>(d.batch) * d.m * d.n);
  kernels::matmul(a.values().data(), b.values().data(), out.data(), d.batch, d.m, d.k, d.n, false,
                  false, d.stride_a, d.stride_b, d.stride_c, false);
  return make_op(std::move(out_shape), std::move(out), {a, b}, [d](const Tensor& o) {
    auto& pa = o.node()->parents[0];
    auto& pb = o.node()->parents[1];
    const double* g = o.grad().data();
    if (pa.requires_grad()) {
      // dA = dC * B^T
      kernels::matmul(g, pb.values().data(), pa.grad().data(), d.batch, d.m, d.n, d.k, false, true,
                      d.stride_c, d.stride_b, d.stride_a, true);
    }
    if (pb.requires_grad()) {
      // dB = A^T * dC; with a shared B the batch loop must stay serial since
      // every entry accumulates into the same buffer.
      if (d.stride_b == 0 && d.batch > 1) {
        for (int bi = 0; bi < d.batch; ++bi) {
          kernels::matmul(pa.values().data() + d.stride_a * bi, g + d.stride_c * bi,
                          pb.grad().data(), 1, d.k, d.m, d.n, true, false, 0, 0, 0, true);
        }
      } else {
        kernels::matmul(pa.values().data(), g, pb.grad().data(), d.batch, d.k, d.m, d.n, true,
                        false, d.stride_a, d.stride_c, d.stride_b, true);
      }
    }
  });
}

Tensor transpose(const Tensor& t) {
  if (t.rank() < 2) throw std::runtime_error("transpose: rank must be >= 2, got " + shape_str(t.shape()));
  Shape out_shape = t.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const int r = t.dim(t.rank() - 2);
  const int c = t.dim(t.rank() - 1);
  const std::size_t batch = t.numel() / (static_cast<std::size_t>(r) * c);
  std::vector<double> out(t.numel());
  const auto& x = t.values();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const std::size_t base = bi * static_cast<std::size_t>(r) * c;
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) {
        out[base + static_cast<std::size_t>(j) * r + i] = x[base + static_cast<std::size_t>(i) * c + j];
      }
    }
  }
  return make_op(std::move(out_shape), std::move(out), {t}, [r, c, batch](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const std::size_t base = bi * static_cast<std::size_t>(r) * c;
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          p.grad()[base + static_cast<std::size_t>(i) * c + j] +=
              g[base + static_cast<std::size_t>(j) * r + i];
        }
      }
    }
  });
}

Tensor reshape(const Tensor& t, Shape shape) {
  if (shape_numel(shape) != t.numel()) {
    throw std::runtime_error("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out = t.values();
  return make_op(std::move(shape), std::move(out), {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) p.grad()[i] += g[i];
  });
}

namespace {

Tensor reduce_axis(const char* name, const Tensor& t, int axis, double scale_factor) {
  check_axis(name, t, axis);
  const AxisSplit s = axis_split(t.shape(), axis);
  Shape out_shape = drop_axis(t.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto& x = t.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const std::size_t base = (o * s.len + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[base + i];
    }
  }
  if (scale_factor != 1.0) {
    for (double& v : out) v *= scale_factor;
  }
  return make_op(std::move(out_shape), std::move(out), {t}, [s, scale_factor](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t base = (ou * s.len + l) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) {
          p.grad()[base + i] += g[ou * s.inner + i] * scale_factor;
        }
      }
    }
  });
}

}  // namespace

Tensor sum(const Tensor& t, int axis) { return reduce_axis("sum", t, axis, 1.0); }

Tensor mean(const Tensor& t, int axis) {
  check_axis("mean", t, axis);
  return reduce_axis("mean", t, axis, 1.0 / t.dim(axis));
}

Tensor sum_all(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  return make_op(Shape{1}, {acc}, {t}, [](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const double g = o.grad()[0];
    for (auto& gv : p.grad()) gv += g;
  });
}

Tensor mean_all(const Tensor& t) { return scale(sum_all(t), 1.0 / static_cast<double>(t.numel())); }

Tensor tile_expand(const Tensor& t, int axis, int count) {
  if (axis < 0 || axis > t.rank()) {
    throw std::runtime_error("tile_expand: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(t.shape()));
  }
  if (count <= 0) throw std::runtime_error("tile_expand: count must be positive");
  Shape out_shape = t.shape();
  out_shape.insert(out_shape.begin() + axis, count);
  std::size_t outer = 1, rest = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(t.shape()[i]);
  for (int i = axis; i < t.rank(); ++i) rest *= static_cast<std::size_t>(t.shape()[i]);
  std::vector<double> out(outer * static_cast<std::size_t>(count) * rest);
  const auto& x = t.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (int c = 0; c < count; ++c) {
      std::copy(x.begin() + o * rest, x.begin() + (o + 1) * rest,
                out.begin() + (o * count + c) * rest);
    }
  }
  return make_op(std::move(out_shape), std::move(out), {t}, [outer, count, rest](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t ou = 0; ou < outer; ++ou) {
      for (int c = 0; c < count; ++c) {
        const std::size_t base = (ou * count + static_cast<std::size_t>(c)) * rest;
        for (std::size_t i = 0; i < rest; ++i) p.grad()[ou * rest + i] += g[base + i];
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::runtime_error("concat: no inputs");
  check_axis("concat", parts[0], axis);
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) shape_error("concat", parts[0], p);
    for (int i = 0; i < p.rank(); ++i) {
      if (i != axis && p.shape()[i] != out_shape[i]) shape_error("concat", parts[0], p);
    }
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const AxisSplit so = axis_split(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = static_cast<std::size_t>(p.dim(axis));
    const auto& x = p.values();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy(x.begin() + o * len * so.inner, x.begin() + (o + 1) * len * so.inner,
                out.begin() + (o * so.len + offset) * so.inner);
    }
    offset += len;
  }
  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(static_cast<std::size_t>(p.dim(axis)));
  return make_op(std::move(out_shape), std::move(out), parts, [so, lens](const Tensor& o) {
    const auto& g = o.grad();
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < lens.size(); ++pi) {
      auto& p = o.node()->parents[pi];
      if (p.requires_grad()) {
        for (std::size_t ou = 0; ou < so.outer; ++ou) {
          const std::size_t src = (ou * so.len + offset) * so.inner;
          const std::size_t dst = ou * lens[pi] * so.inner;
          for (std::size_t i = 0; i < lens[pi] * so.inner; ++i) p.grad()[dst + i] += g[src + i];
        }
      }
      offset += lens[pi];
    }
  });
}

Tensor slice(const Tensor& t, int axis, int start, int len) {
  check_axis("slice", t, axis);
  if (start < 0 || len <= 0 || start + len > t.dim(axis)) {
    throw std::runtime_error("slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(t.shape()));
  }
  const AxisSplit s = axis_split(t.shape(), axis);
  Shape out_shape = t.shape();
  out_shape[axis] = len;
  std::vector<double> out(s.outer * static_cast<std::size_t>(len) * s.inner);
  const auto& x = t.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy(x.begin() + (o * s.len + start) * s.inner,
              x.begin() + (o * s.len + start + len) * s.inner,
              out.begin() + o * static_cast<std::size_t>(len) * s.inner);
  }
  return make_op(std::move(out_shape), std::move(out), {t}, [s, start, len](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      const std::size_t dst = (ou * s.len + static_cast<std::size_t>(start)) * s.inner;
      const std::size_t src = ou * static_cast<std::size_t>(len) * s.inner;
      for (std::size_t i = 0; i < static_cast<std::size_t>(len) * s.inner; ++i) {
        p.grad()[dst + i] += g[src + i];
      }
    }
  });
}

Tensor softmax(const Tensor& t, int axis) {
  check_axis("softmax", t, axis);
  const AxisSplit s = axis_split(t.shape(), axis);
  std::vector<double> out(t.numel());
  if (s.inner == 1) {
    kernels::softmax_rows(t.values().data(), out.data(), s.outer, s.len);
  } else {
    const auto& x = t.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double mx = x[base];
        for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
        double total = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const double e = std::exp(x[base + l * s.inner] - mx);
          out[base + l * s.inner] = e;
          total += e;
        }
        const double inv = 1.0 / total;
        for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] *= inv;
      }
    }
  }
  return make_op(t.shape(), std::move(out), {t}, [s](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const auto& g = o.grad();
    const auto& y = o.values();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = ou * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t idx = base + l * s.inner;
          p.grad()[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw std::runtime_error("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  }
  const int vocab = table.dim(0);
  const int d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::runtime_error("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                               std::to_string(vocab) + ")");
    }
  }
  std::vector<double> out(ids.size() * static_cast<std::size_t>(d));
  const auto& x = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(x.begin() + static_cast<std::size_t>(ids[i]) * d,
              x.begin() + static_cast<std::size_t>(ids[i] + 1) * d, out.begin() + i * d);
  }
  return make_op(Shape{static_cast<int>(ids.size()), d}, std::move(out), {table},
                 [ids, d](const Tensor& o) {
                   auto& p = o.node()->parents[0];
                   if (!p.requires_grad()) return;
                   const auto& g = o.grad();
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     for (int j = 0; j < d; ++j) {
                       p.grad()[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
                     }
                   }
                 });
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& gold,
                                 Reduction reduction) {
  if (logits.rank() != 2) {
    throw std::runtime_error("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  }
  const int rows = logits.dim(0);
  const int vocab = logits.dim(1);
  if (static_cast<int>(gold.size()) != rows) {
    throw std::runtime_error("cross_entropy: " + std::to_string(gold.size()) + " labels for " +
                             std::to_string(rows) + " rows");
  }
  const auto& x = logits.values();
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (gold[r] < 0 || gold[r] >= vocab) throw std::runtime_error("cross_entropy: label out of range");
    const double* row = x.data() + static_cast<std::size_t>(r) * vocab;
    double mx = row[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double lse = 0.0;
    for (int c = 0; c < vocab; ++c) lse += std::exp(row[c] - mx);
    total += mx + std::log(lse) - row[gold[r]];
  }
  const double norm = reduction == Reduction::Mean ? 1.0 / rows : 1.0;
  return make_op(Shape{1}, {total * norm}, {logits}, [gold, rows, vocab, norm](const Tensor& o) {
    auto& p = o.node()->parents[0];
    if (!p.requires_grad()) return;
    const double g = o.grad()[0] * norm;
    const auto& x = p.values();
    for (int r = 0; r < rows; ++r) {
      const double* row = x.data() + static_cast<std::size_t>(r) * vocab;
      double mx = row[0];
      for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
      double lse = 0.0;
      for (int c = 0; c < vocab; ++c) lse += std::exp(row[c] - mx);
      const double inv = 1.0 / lse;
      for (int c = 0; c < vocab; ++c) {
        double soft = std::exp(row[c] - mx) * inv;
        if (c == gold[r]) soft -= 1.0;
        p.grad()[static_cast<std::size_t>(r) * vocab + c] += g * soft;
      }
    }
  });
}

Tensor pccs_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() < 1 || a.shape().back() != b.shape().back()) {
    shape_error("pccs", a, b);
  }
  if (!is_suffix(b.shape(), a.shape())) shape_error("pccs", a, b);
  const int d = a.shape().back();
  if (d < 2) {
    throw std::runtime_error("pccs: vectors must have at least 2 entries, got " + shape_str(a.shape()));
  }
  const std::size_t rows_a = a.numel() / static_cast<std::size_t>(d);
  const std::size_t rows_b = b.numel() / static_cast<std::size_t>(d);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);

  constexpr double kDegenerate = 1e-12;
  std::vector<double> out(rows_a);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t r = 0; r < rows_a; ++r) {
    const double* ar = av.data() + r * d;
    const double* br = bv.data() + (r % rows_b) * d;
    double ma = 0.0, mb = 0.0;
    for (int i = 0; i < d; ++i) {
      ma += ar[i];
      mb += br[i];
    }
    ma /= d;
    mb /= d;
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int i = 0; i < d; ++i) {
      const double ca = ar[i] - ma;
      const double cb = br[i] - mb;
      dot += ca * cb;
      na2 += ca * ca;
      nb2 += cb * cb;
    }
    const double na = std::sqrt(na2);
    const double nb = std::sqrt(nb2);
    out[r] = (na < kDegenerate || nb < kDegenerate) ? 0.0 : dot / (na * nb);
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [d, rows_a, rows_b](const Tensor& o) {
                   auto& pa = o.node()->parents[0];
                   auto& pb = o.node()->parents[1];
                   const bool da = pa.requires_grad();
                   const bool db = pb.requires_grad();
                   if (!da && !db) return;
                   const auto& g = o.grad();
                   const auto& f = o.values();
                   const auto& av = pa.values();
                   const auto& bv = pb.values();
                   std::vector<double> ca(d), cb(d), gc(d);
                   for (std::size_t r = 0; r < rows_a; ++r) {
                     if (g[r] == 0.0) continue;
                     const double* ar = av.data() + r * d;
                     const double* br = bv.data() + (r % rows_b) * d;
                     double ma = 0.0, mb = 0.0;
                     for (int i = 0; i < d; ++i) {
                       ma += ar[i];
                       mb += br[i];
                     }
                     ma /= d;
                     mb /= d;
                     double na2 = 0.0, nb2 = 0.0;
                     for (int i = 0; i < d; ++i) {
                       ca[i] = ar[i] - ma;
                       cb[i] = br[i] - mb;
                       na2 += ca[i] * ca[i];
                       nb2 += cb[i] * cb[i];
                     }
                     const double na = std::sqrt(na2);
                     const double nb = std::sqrt(nb2);
                     if (na < 1e-12 || nb < 1e-12) continue;  // guard: value 0, grad 0
                     const double inv = 1.0 / (na * nb);
                     // d f / d centered, then re-center for the mean's adjoint.
                     if (da) {
                       double m = 0.0;
                       for (int i = 0; i < d; ++i) {
                         gc[i] = cb[i] * inv - f[r] * ca[i] / na2;
                         m += gc[i];
                       }
                       m /= d;
                       for (int i = 0; i < d; ++i) pa.grad()[r * d + i] += g[r] * (gc[i] - m);
                     }
                     if (db) {
                       double m = 0.0;
                       for (int i = 0; i < d; ++i) {
                         gc[i] = ca[i] * inv - f[r] * cb[i] / nb2;
                         m += gc[i];
                       }
                       m /= d;
                       for (int i = 0; i < d; ++i) {
                         pb.grad()[(r % rows_b) * d + i] += g[r] * (gc[i] - m);
                       }
                     }
                   }
                 });
}

Tensor dropout(const Tensor& t, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::runtime_error("dropout: p must be in [0,1)");
  if (p == 0.0) return t;
  const double keep = 1.0 - p;
  const double inv = 1.0 / keep;
  auto mask = std::make_shared<std::vector<double>>(t.numel());
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < keep ? inv : 0.0;
    out[i] = t.values()[i] * (*mask)[i];
  }
  return make_op(t.shape(), std::move(out), {t}, [mask](const Tensor& o) {
    auto& pt = o.node()->parents[0];
    if (!pt.requires_grad()) return;
    const auto& g = o.grad();
    for (std::size_t i = 0; i < g.size(); ++i) pt.grad()[i] += g[i] * (*mask)[i];
  });
}

namespace {

// Broadcast a last-axis reduction result back against `ref` for element-wise
// combination; rank-1 refs reduce to scalars, which broadcast directly.
Tensor stretch_last(const Tensor& reduced, const Tensor& ref) {
  if (ref.rank() == 1) return reduced;
  return tile_expand(reduced, reduced.rank(), ref.dim(ref.rank() - 1));
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int last = x.rank() - 1;
  Tensor mu = mean(x, last);
  Tensor xc = sub(x, stretch_last(mu, x));
  Tensor var = mean(mul(xc, xc), last);
  Tensor denom = qcnmt::sqrt(add_scalar(var, eps));
  Tensor y = div(xc, stretch_last(denom, x));
  return add(mul(y, gain), bias);
}

Tensor squash(const Tensor& t) {
  const int last = t.rank() - 1;
  Tensor n2 = sum(mul(t, t), last);
  Tensor factor = div(n2, add_scalar(n2, 1.0));
  // Epsilon under the root keeps the zero vector a fixed point with a finite
  // gradient; values match the (norm + 1e-12) guard form well inside 1e-12.
  Tensor coef = div(factor, qcnmt::sqrt(add_scalar(n2, 1e-24)));
  return mul(t, stretch_last(coef, t));
}

}  // namespace qcnmt
