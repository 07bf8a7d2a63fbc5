#include "adabldm/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <unordered_set>

#include "adabldm/errors.hpp"

namespace adabldm::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return node;
}

bool wants_grad(const Var& v) { return v && v->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  ADABLDM_CHECK(a->value.same_shape(b->value), ParameterError,
                std::string(op) + ": shape mismatch " + a->value.shape_string() + " vs " +
                    b->value.shape_string());
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape());
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- ParamSet

std::size_t ParamSet::add(std::string name, std::vector<int> shape) {
  Parameter p;
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(std::move(shape));
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

std::size_t ParamSet::add_uniform(std::string name, std::vector<int> shape, double bound, Rng& rng) {
  const std::size_t i = add(std::move(name), std::move(shape));
  for (double& v : params_[i].value.values()) v = uniform(rng, -bound, bound);
  return i;
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Parameter* ParamSet::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void ParamSet::set_trainable(bool trainable) {
  for (auto& p : params_) p.trainable = trainable;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) {
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
    p.grad.fill(0.0);
  }
}

std::uint64_t ParamSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), p.value.size() * sizeof(double));
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- leaves

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var leaf(Parameter& p) {
  auto node = std::make_shared<Node>();
  node->value = p.value;
  if (g_grad_enabled && p.trainable) {
    node->requires_grad = true;
    node->param = &p;
  }
  return node;
}

Var leaf(const Parameter& p) { return constant(p.value); }

void backward(const Var& root) {
  ADABLDM_CHECK(root->value.size() == 1, ParameterError, "backward: root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->grad.same_shape(node->value)) continue;  // never reached by a gradient
    if (node->backward) node->backward(*node);
    if (node->param) {
      auto& pg = node->param->grad;
      if (!pg.same_shape(node->value)) pg = Tensor(node->value.shape());
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += node->grad[i];
    }
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self.parents[k])) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants_grad(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var silu(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return make_result(std::move(out), {x}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      g[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return make_result(std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var stack(const std::vector<Var>& xs) {
  ADABLDM_CHECK(!xs.empty(), ParameterError, "stack: no inputs");
  const auto& inner = xs.front()->value.shape();
  std::vector<int> shape{static_cast<int>(xs.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const std::size_t chunk = xs.front()->value.size();
  for (std::size_t k = 0; k < xs.size(); ++k) {
    ADABLDM_CHECK(xs[k]->value.shape() == inner, ParameterError, "stack: shape mismatch");
    std::copy(xs[k]->value.data(), xs[k]->value.data() + chunk, out.data() + k * chunk);
  }
  return make_result(std::move(out), xs, [chunk](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants_grad(self.parents[k])) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < chunk; ++i) g[i] += self.grad[k * chunk + i];
    }
  });
}

Var to_sequence(const Var& x) {
  const auto& s = x->value.shape();
  ADABLDM_CHECK(s.size() == 4, ParameterError, "to_sequence: expected NCHW");
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  Tensor out({n, hw, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        out[(static_cast<std::size_t>(b) * hw + p) * c + ch] =
            x->value[(static_cast<std::size_t>(b) * c + ch) * hw + p];
  return make_result(std::move(out), {x}, [n, c, hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p)
          g[(static_cast<std::size_t>(b) * c + ch) * hw + p] +=
              self.grad[(static_cast<std::size_t>(b) * hw + p) * c + ch];
  });
}

Var from_sequence(const Var& x, int height, int width) {
  const auto& s = x->value.shape();
  ADABLDM_CHECK(s.size() == 3 && s[1] == height * width, ParameterError,
                "from_sequence: expected (N,H*W,C)");
  const int n = s[0], hw = s[1], c = s[2];
  Tensor out({n, c, height, width});
  for (int b = 0; b < n; ++b)
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<std::size_t>(b) * c + ch) * hw + p] =
            x->value[(static_cast<std::size_t>(b) * hw + p) * c + ch];
  return make_result(std::move(out), {x}, [n, c, hw](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch)
          g[(static_cast<std::size_t>(b) * hw + p) * c + ch] +=
              self.grad[(static_cast<std::size_t>(b) * c + ch) * hw + p];
  });
}

// ---------------------------------------------------------------- conv

namespace {

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  int rows() const { return cin * k * k; }
  int cols() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  for (int c = 0; c < g.cin; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        double* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
        const double* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          double* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
  for (int c = 0; c < g.cin; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const double* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
        double* plane = dx + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.wo;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  ADABLDM_CHECK(xs.size() == 4 && ws.size() == 4 && ws[2] == ws[3], ParameterError,
                "conv2d: expected NCHW input and square kernel");
  ADABLDM_CHECK(xs[1] == ws[1], ParameterError,
                "conv2d: channel mismatch " + x->value.shape_string() + " * " + w->value.shape_string());
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  ADABLDM_CHECK(g.ho > 0 && g.wo > 0, ParameterError, "conv2d: empty output");
  if (b) ADABLDM_CHECK(b->value.size() == static_cast<std::size_t>(g.cout), ParameterError, "conv2d: bias size");

  const bool direct = g.k == 1 && stride == 1 && pad == 0;
  const std::size_t in_plane = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.cout) * g.cols();
  const std::size_t col_size = static_cast<std::size_t>(g.rows()) * g.cols();

  Tensor out({g.n, g.cout, g.ho, g.wo});
  auto cols = std::make_shared<AlignedVector>(direct ? 0 : col_size * g.n);
  ConstMatMap wm(w->value.data(), g.cout, g.rows());
  for (int i = 0; i < g.n; ++i) {
    const double* src = x->value.data() + i * in_plane;
    if (!direct) {
      im2col(src, g, cols->data() + i * col_size);
      src = cols->data() + i * col_size;
    }
    MatMap y(out.data() + i * out_plane, g.cout, g.cols());
    y.noalias() = wm * ConstMatMap(src, g.rows(), g.cols());
    if (b) y.colwise() += Eigen::Map<const Eigen::VectorXd>(b->value.data(), g.cout);
  }

  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_result(std::move(out), std::move(parents), [g, cols, direct, in_plane, out_plane, col_size](Node& self) {
    const Var& xv = self.parents[0];
    const Var& wv = self.parents[1];
    ConstMatMap wm(wv->value.data(), g.cout, g.rows());
    AlignedVector dcol(direct ? 0 : col_size);
    for (int i = 0; i < g.n; ++i) {
      ConstMatMap dy(self.grad.data() + i * out_plane, g.cout, g.cols());
      const double* col = direct ? xv->value.data() + i * in_plane : cols->data() + i * col_size;
      if (wants_grad(wv)) {
        MatMap dw(wv->grad_buffer().data(), g.cout, g.rows());
        dw.noalias() += dy * ConstMatMap(col, g.rows(), g.cols()).transpose();
      }
      if (self.parents.size() > 2 && wants_grad(self.parents[2])) {
        Eigen::Map<Eigen::VectorXd> db(self.parents[2]->grad_buffer().data(), g.cout);
        db += dy.rowwise().sum();
      }
      if (wants_grad(xv)) {
        double* dx = xv->grad_buffer().data() + i * in_plane;
        if (direct) {
          MatMap dxm(dx, g.rows(), g.cols());
          dxm.noalias() += wm.transpose() * dy;
        } else {
          MatMap dc(dcol.data(), g.rows(), g.cols());
          dc.noalias() = wm.transpose() * dy;
          col2im(dcol.data(), g, dx);
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const auto& s = x->value.shape();
  ADABLDM_CHECK(s.size() == 4, ParameterError, "upsample: expected NCHW");
  const int planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor out({s[0], s[1], 2 * h, 2 * w});
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx] =
            x->value[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
  return make_result(std::move(out), {x}, [planes, h, w](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int p = 0; p < planes; ++p)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          g[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] +=
              self.grad[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  ADABLDM_CHECK(!xs.empty() && ws.size() == 2 && xs.back() == ws[1], ParameterError,
                "linear: shape mismatch " + x->value.shape_string() + " * " + w->value.shape_string());
  const int d = ws[1], o = ws[0];
  const int m = static_cast<int>(x->value.size() / d);
  std::vector<int> shape = xs;
  shape.back() = o;
  Tensor out(shape);
  MatMap y(out.data(), m, o);
  y.noalias() = ConstMatMap(x->value.data(), m, d) * ConstMatMap(w->value.data(), o, d).transpose();
  if (b) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), o);
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_result(std::move(out), std::move(parents), [m, d, o](Node& self) {
    ConstMatMap dy(self.grad.data(), m, o);
    const Var& xv = self.parents[0];
    const Var& wv = self.parents[1];
    if (wants_grad(xv)) {
      MatMap(xv->grad_buffer().data(), m, d).noalias() += dy * ConstMatMap(wv->value.data(), o, d);
    }
    if (wants_grad(wv)) {
      MatMap(wv->grad_buffer().data(), o, d).noalias() += dy.transpose() * ConstMatMap(xv->value.data(), m, d);
    }
    if (self.parents.size() > 2 && wants_grad(self.parents[2])) {
      Eigen::Map<Eigen::RowVectorXd>(self.parents[2]->grad_buffer().data(), o) += dy.colwise().sum();
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const auto& s = x->value.shape();
  ADABLDM_CHECK(s.size() == 4 && s[1] % groups == 0, ParameterError, "group_norm: bad shape/groups");
  const int n = s[0], c = s[1], hw = s[2] * s[3], cg = c / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * hw;
  Tensor out(s);
  auto xhat = std::make_shared<Tensor>(s);
  auto inv = std::make_shared<AlignedVector>(static_cast<std::size_t>(n) * groups);
  for (int b = 0; b < n; ++b)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + gi * cg) * hw;
      double mean = 0.0;
      for (std::size_t i = 0; i < m; ++i) mean += x->value[off + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = x->value[off + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv)[b * groups + gi] = is;
      for (std::size_t i = 0; i < m; ++i) {
        const double xh = (x->value[off + i] - mean) * is;
        (*xhat)[off + i] = xh;
        const int ch = gi * cg + static_cast<int>(i / hw);
        out[off + i] = xh * gamma->value[ch] + beta->value[ch];
      }
    }
  return make_result(std::move(out), {x, gamma, beta}, [=](Node& self) {
    const auto& gv = self.parents[1]->value;
    const bool gx = wants_grad(self.parents[0]);
    const bool gg = wants_grad(self.parents[1]);
    const bool gb = wants_grad(self.parents[2]);
    for (int b = 0; b < n; ++b)
      for (int gi = 0; gi < groups; ++gi) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + gi * cg) * hw;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const int ch = gi * cg + static_cast<int>(i / hw);
          const double dy = self.grad[off + i];
          const double xh = (*xhat)[off + i];
          if (gg) self.parents[1]->grad_buffer()[ch] += dy * xh;
          if (gb) self.parents[2]->grad_buffer()[ch] += dy;
          const double dxh = dy * gv[ch];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh;
        }
        if (!gx) continue;
        mean_dxh /= static_cast<double>(m);
        mean_dxh_xh /= static_cast<double>(m);
        const double is = (*inv)[b * groups + gi];
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const int ch = gi * cg + static_cast<int>(i / hw);
          const double dxh = self.grad[off + i] * gv[ch];
          g[off + i] += is * (dxh - mean_dxh - (*xhat)[off + i] * mean_dxh_xh);
        }
      }
  });
}

Var add_channel(const Var& x, const Var& v) {
  const auto& s = x->value.shape();
  ADABLDM_CHECK(s.size() == 4 && v->value.size() == static_cast<std::size_t>(s[0]) * s[1], ParameterError,
                "add_channel: expected x (N,C,H,W) and v (N,C)");
  const int nc = s[0] * s[1], hw = s[2] * s[3];
  Tensor out = x->value;
  for (int p = 0; p < nc; ++p)
    for (int i = 0; i < hw; ++i) out[static_cast<std::size_t>(p) * hw + i] += v->value[p];
  return make_result(std::move(out), {x, v}, [nc, hw](Node& self) {
    if (wants_grad(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (int p = 0; p < nc; ++p)
        for (int i = 0; i < hw; ++i) g[p] += self.grad[static_cast<std::size_t>(p) * hw + i];
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v) {
  const auto& qs = q->value.shape();
  const auto& ks = k->value.shape();
  const auto& vs = v->value.shape();
  ADABLDM_CHECK(qs.size() == 3 && ks.size() == 3 && vs.size() == 3 && qs[0] == ks[0] && ks[0] == vs[0] &&
                    qs[2] == ks[2] && ks[1] == vs[1],
                ParameterError, "attention: incompatible q/k/v shapes");
  const int n = qs[0], lq = qs[1], lk = ks[1], d = qs[2], dv = vs[2];
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({n, lq, dv});
  auto probs = std::make_shared<AlignedVector>(static_cast<std::size_t>(n) * lq * lk);
  for (int b = 0; b < n; ++b) {
    ConstMatMap qm(q->value.data() + static_cast<std::size_t>(b) * lq * d, lq, d);
    ConstMatMap km(k->value.data() + static_cast<std::size_t>(b) * lk * d, lk, d);
    ConstMatMap vm(v->value.data() + static_cast<std::size_t>(b) * lk * dv, lk, dv);
    MatMap a(probs->data() + static_cast<std::size_t>(b) * lq * lk, lq, lk);
    a.noalias() = (qm * km.transpose()) * sc;
    for (int r = 0; r < lq; ++r) {
      const double mx = a.row(r).maxCoeff();
      a.row(r) = (a.row(r).array() - mx).exp();
      a.row(r) /= a.row(r).sum();
    }
    MatMap(out.data() + static_cast<std::size_t>(b) * lq * dv, lq, dv).noalias() = a * vm;
  }
  return make_result(std::move(out), {q, k, v}, [=](Node& self) {
    for (int b = 0; b < n; ++b) {
      ConstMatMap qm(self.parents[0]->value.data() + static_cast<std::size_t>(b) * lq * d, lq, d);
      ConstMatMap km(self.parents[1]->value.data() + static_cast<std::size_t>(b) * lk * d, lk, d);
      ConstMatMap vm(self.parents[2]->value.data() + static_cast<std::size_t>(b) * lk * dv, lk, dv);
      ConstMatMap a(probs->data() + static_cast<std::size_t>(b) * lq * lk, lq, lk);
      ConstMatMap dout(self.grad.data() + static_cast<std::size_t>(b) * lq * dv, lq, dv);
      if (wants_grad(self.parents[2])) {
        MatMap(self.parents[2]->grad_buffer().data() + static_cast<std::size_t>(b) * lk * dv, lk, dv).noalias() +=
            a.transpose() * dout;
      }
      RowMat da = dout * vm.transpose();
      RowMat ds = a.array() * (da.array().colwise() - (da.array() * a.array()).rowwise().sum());
      if (wants_grad(self.parents[0])) {
        MatMap(self.parents[0]->grad_buffer().data() + static_cast<std::size_t>(b) * lq * d, lq, d).noalias() +=
            (ds * km) * sc;
      }
      if (wants_grad(self.parents[1])) {
        MatMap(self.parents[1]->grad_buffer().data() + static_cast<std::size_t>(b) * lk * d, lk, d).noalias() +=
            (ds.transpose() * qm) * sc;
      }
    }
  });
}

Var gather_rows(const Var& table, const std::vector<int>& rows) {
  const auto& s = table->value.shape();
  ADABLDM_CHECK(s.size() == 2, ParameterError, "gather_rows: table must be 2-D");
  const int d = s[1];
  Tensor out({static_cast<int>(rows.size()), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    ADABLDM_CHECK(rows[r] >= 0 && rows[r] < s[0], ParameterError, "gather_rows: index out of range");
    std::copy_n(table->value.data() + static_cast<std::size_t>(rows[r]) * d, d, out.data() + r * d);
  }
  return make_result(std::move(out), {table}, [rows, d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(rows[r]) * d + j] += self.grad[r * d + j];
  });
}

// ---------------------------------------------------------------- losses

Var mean_squared_error(const Var& x, const Tensor& target) {
  ADABLDM_CHECK(x->value.same_shape(target), ParameterError,
                "mse: shape mismatch " + x->value.shape_string() + " vs " + target.shape_string());
  const double n = static_cast<double>(x->value.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = x->value[i] - target[i];
    acc += d * d;
  }
  return make_result(Tensor({1}, acc / n), {x}, [target, n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double s = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (self.parents[0]->value[i] - target[i]);
  });
}

Var weighted_squared_sum(const Var& x, const Tensor& target, const Tensor& weight) {
  ADABLDM_CHECK(x->value.same_shape(target) && x->value.same_shape(weight), ParameterError,
                "weighted_squared_sum: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = x->value[i] - target[i];
    acc += weight[i] * d * d;
  }
  return make_result(Tensor({1}, acc), {x}, [target, weight](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double s = 2.0 * self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += s * weight[i] * (self.parents[0]->value[i] - target[i]);
  });
}

}  // namespace adabldm::nn
