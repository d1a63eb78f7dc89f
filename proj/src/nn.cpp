#include "mlang/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace mlang::nn {

namespace {

std::atomic<int64_t> g_seq{0};

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::shared_ptr<Node> new_node(std::vector<int> shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(shape_numel(n->shape));
  n->seq = ++g_seq;
  return n;
}

// Registers parents/backfn only while taping is on and some parent needs
// gradients.
Tensor finish(std::shared_ptr<Node> n, std::vector<Tensor> parents,
              std::function<void(Node&)> backfn) {
  bool need = false;
  if (grad_enabled())
    for (const auto& p : parents) need = need || p.node()->requires_grad;
  if (need) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backfn = std::move(backfn);
  }
  return Tensor(std::move(n));
}

Eigen::Map<RowMat> as_mat(Node& n) {
  return Eigen::Map<RowMat>(n.value.data(), n.shape[0], n.shape[1]);
}
Eigen::Map<RowMat> grad_mat(Node& n) {
  n.ensure_grad();
  return Eigen::Map<RowMat>(n.grad.data(), n.shape[0], n.shape[1]);
}

void check_2d(const Tensor& t, const char* who) {
  if (t.rank() != 2) throw ShapeMismatch(std::string(who) + ": tensor must be 2D");
}

}  // namespace

bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

Tensor Tensor::leaf(std::vector<int> shape, bool requires_grad) {
  auto n = new_node(std::move(shape));
  n->value.setZero();
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(std::vector<int> shape, const double* data) {
  auto n = new_node(std::move(shape));
  std::copy(data, data + n->value.size(), n->value.data());
  return Tensor(std::move(n));
}

Tensor Tensor::constant(const Mat& m) {
  auto n = new_node({int(m.rows()), int(m.cols())});
  Eigen::Map<RowMat>(n->value.data(), m.rows(), m.cols()) = m;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(const std::vector<double>& v) {
  return constant({int(v.size())}, v.data());
}

Tensor Tensor::scalar(double v) { return constant({1}, &v); }

void backward(const Tensor& root) {
  if (root.numel() != 1) throw ShapeMismatch("backward root must be a scalar");
  // Collect the reachable subgraph, then replay in reverse creation order.
  std::vector<Node*> order;
  std::vector<Node*> stack{root.node()};
  std::unordered_map<const Node*, bool> seen;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (seen[n]) continue;
    seen[n] = true;
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (Node* n : order) {
    if (!n->backfn) continue;
    n->ensure_grad();
    n->backfn(*n);
  }
}

// --- elementwise -------------------------------------------------------------

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(who) + ": operand shapes differ");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = new_node(a.shape());
  n->value = a.value() + b.value();
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb](Node& o) {
    if (pa->requires_grad) { pa->ensure_grad(); pa->grad += o.grad; }
    if (pb->requires_grad) { pb->ensure_grad(); pb->grad += o.grad; }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto n = new_node(a.shape());
  n->value = a.value() - b.value();
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb](Node& o) {
    if (pa->requires_grad) { pa->ensure_grad(); pa->grad += o.grad; }
    if (pb->requires_grad) { pb->ensure_grad(); pb->grad -= o.grad; }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = new_node(a.shape());
  n->value = a.value() * b.value();
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb](Node& o) {
    if (pa->requires_grad) { pa->ensure_grad(); pa->grad += o.grad * pb->value; }
    if (pb->requires_grad) { pb->ensure_grad(); pb->grad += o.grad * pa->value; }
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
  auto n = new_node(a.shape());
  n->value = a.value() * s;
  auto pa = a.ptr();
  return finish(n, {a}, [pa, s](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  auto n = new_node(a.shape());
  n->value = a.value() + s;
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad;
  });
}

Tensor relu(const Tensor& a) {
  auto n = new_node(a.shape());
  n->value = a.value().max(0.0);
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad * (pa->value > 0.0).cast<double>();
  });
}

Tensor exp_t(const Tensor& a) {
  auto n = new_node(a.shape());
  n->value = a.value().exp();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad * o.value;
  });
}

Tensor abs_t(const Tensor& a) {
  auto n = new_node(a.shape());
  n->value = a.value().abs();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad * pa->value.sign();
  });
}

Tensor square(const Tensor& a) {
  auto n = new_node(a.shape());
  n->value = a.value().square();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad * 2.0 * pa->value;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  check_2d(a, "add_rowvec");
  if (b.numel() != a.cols()) throw ShapeMismatch("add_rowvec: bias size != cols");
  auto n = new_node(a.shape());
  const int r = a.rows(), c = a.cols();
  as_mat(*n) = a.mat().rowwise() +
               Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), c);
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb, r, c](Node& o) {
    if (pa->requires_grad) { pa->ensure_grad(); pa->grad += o.grad; }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<Eigen::VectorXd>(pb->grad.data(), c) +=
          grad_mat(o).colwise().sum().transpose();
    }
  });
}

Tensor add_per_row(const Tensor& a, const Tensor& b) {
  check_2d(a, "add_per_row");
  if (b.numel() != a.rows()) throw ShapeMismatch("add_per_row: bias size != rows");
  auto n = new_node(a.shape());
  const int r = a.rows();
  as_mat(*n) = a.mat().colwise() + Eigen::Map<const Eigen::VectorXd>(b.value().data(), r);
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb, r](Node& o) {
    if (pa->requires_grad) { pa->ensure_grad(); pa->grad += o.grad; }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<Eigen::VectorXd>(pb->grad.data(), r) += grad_mat(o).rowwise().sum();
    }
  });
}

// --- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto n = new_node({1});
  n->value[0] = a.value().sum();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  auto n = new_node({1});
  const double inv = 1.0 / double(a.numel());
  n->value[0] = a.value().sum() * inv;
  auto pa = a.ptr();
  return finish(n, {a}, [pa, inv](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad[0] * inv;
  });
}

// --- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dims differ");
  auto n = new_node({a.rows(), b.cols()});
  as_mat(*n) = a.mat() * b.mat();
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb](Node& o) {
    auto G = grad_mat(o);
    if (pa->requires_grad) {
      pa->ensure_grad();
      as_mat(*pa);  // shape guard
      Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]) +=
          G * Eigen::Map<RowMat>(pb->value.data(), pb->shape[0], pb->shape[1]).transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<RowMat>(pb->grad.data(), pb->shape[0], pb->shape[1]) +=
          Eigen::Map<RowMat>(pa->value.data(), pa->shape[0], pa->shape[1]).transpose() * G;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) throw ShapeMismatch("matmul_nt: inner dims differ");
  auto n = new_node({a.rows(), b.rows()});
  as_mat(*n) = a.mat() * b.mat().transpose();
  auto pa = a.ptr(), pb = b.ptr();
  return finish(n, {a, b}, [pa, pb](Node& o) {
    auto G = grad_mat(o);
    auto A = Eigen::Map<RowMat>(pa->value.data(), pa->shape[0], pa->shape[1]);
    auto B = Eigen::Map<RowMat>(pb->value.data(), pb->shape[0], pb->shape[1]);
    if (pa->requires_grad) {
      pa->ensure_grad();
      Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]) += G * B;
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<RowMat>(pb->grad.data(), pb->shape[0], pb->shape[1]) +=
          G.transpose() * A;
    }
  });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  auto n = new_node({a.cols(), a.rows()});
  as_mat(*n) = a.mat().transpose();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]) +=
        grad_mat(o).transpose();
  });
}

// --- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeMismatch("reshape: numel differs");
  auto n = new_node(std::move(shape));
  n->value = a.value();
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    pa->grad += o.grad;
  });
}

Tensor slice_rows(const Tensor& a, int r0, int nrows) {
  check_2d(a, "slice_rows");
  if (r0 < 0 || r0 + nrows > a.rows()) throw ShapeMismatch("slice_rows: out of range");
  auto n = new_node({nrows, a.cols()});
  as_mat(*n) = a.mat().middleRows(r0, nrows);
  auto pa = a.ptr();
  return finish(n, {a}, [pa, r0, nrows](Node& o) {
    pa->ensure_grad();
    Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1])
        .middleRows(r0, nrows) += grad_mat(o);
  });
}

Tensor slice_cols(const Tensor& a, int c0, int ncols) {
  check_2d(a, "slice_cols");
  if (c0 < 0 || c0 + ncols > a.cols()) throw ShapeMismatch("slice_cols: out of range");
  auto n = new_node({a.rows(), ncols});
  as_mat(*n) = a.mat().middleCols(c0, ncols);
  auto pa = a.ptr();
  return finish(n, {a}, [pa, c0, ncols](Node& o) {
    pa->ensure_grad();
    Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1])
        .middleCols(c0, ncols) += grad_mat(o);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
  const int c = parts[0].cols();
  int r = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != c) throw ShapeMismatch("concat_rows: column mismatch");
    r += p.rows();
  }
  auto n = new_node({r, c});
  int at = 0;
  for (const auto& p : parts) {
    as_mat(*n).middleRows(at, p.rows()) = p.mat();
    at += p.rows();
  }
  std::vector<std::shared_ptr<Node>> ps;
  for (const auto& p : parts) ps.push_back(p.ptr());
  return finish(n, parts, [ps](Node& o) {
    auto G = grad_mat(o);
    int at = 0;
    for (auto& p : ps) {
      if (p->requires_grad) {
        p->ensure_grad();
        Eigen::Map<RowMat>(p->grad.data(), p->shape[0], p->shape[1]) +=
            G.middleRows(at, p->shape[0]);
      }
      at += p->shape[0];
    }
  });
}

Tensor overlay_cols(const Mat& base, const Tensor& x, int col0) {
  check_2d(x, "overlay_cols");
  if (x.rows() != base.rows() || col0 < 0 || col0 + x.cols() > base.cols())
    throw ShapeMismatch("overlay_cols: slice out of range");
  auto n = new_node({int(base.rows()), int(base.cols())});
  as_mat(*n) = base;
  as_mat(*n).middleCols(col0, x.cols()) = x.mat();
  auto px = x.ptr();
  const int nc = x.cols();
  return finish(n, {x}, [px, col0, nc](Node& o) {
    px->ensure_grad();
    Eigen::Map<RowMat>(px->grad.data(), px->shape[0], px->shape[1]) +=
        grad_mat(o).middleCols(col0, nc);
  });
}

Tensor detach(const Tensor& a) {
  auto n = new_node(a.shape());
  n->value = a.value();
  return Tensor(std::move(n));
}

// --- softmax family --------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  check_2d(a, "softmax_rows");
  auto n = new_node(a.shape());
  auto X = a.mat();
  auto Y = as_mat(*n);
  for (int i = 0; i < a.rows(); ++i) {
    const double m = X.row(i).maxCoeff();
    Y.row(i) = (X.row(i).array() - m).exp();
    Y.row(i) /= Y.row(i).sum();
  }
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    auto G = grad_mat(o);
    auto Y = as_mat(o);
    auto D = Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]);
    for (int i = 0; i < o.shape[0]; ++i) {
      const double dot = (G.row(i).array() * Y.row(i).array()).sum();
      D.row(i) += ((G.row(i).array() - dot) * Y.row(i).array()).matrix();
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  check_2d(a, "log_softmax_rows");
  auto n = new_node(a.shape());
  auto X = a.mat();
  auto Y = as_mat(*n);
  for (int i = 0; i < a.rows(); ++i) {
    const double m = X.row(i).maxCoeff();
    const double lse = std::log((X.row(i).array() - m).exp().sum()) + m;
    Y.row(i) = X.row(i).array() - lse;
  }
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    auto G = grad_mat(o);
    auto Y = as_mat(o);
    auto D = Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]);
    for (int i = 0; i < o.shape[0]; ++i) {
      const double gsum = G.row(i).sum();
      D.row(i) += (G.row(i).array() - gsum * Y.row(i).array().exp()).matrix();
    }
  });
}

Tensor rmsnorm(const Tensor& x, const Tensor& w, double eps) {
  check_2d(x, "rmsnorm");
  if (w.numel() != x.cols()) throw ShapeMismatch("rmsnorm: weight size != cols");
  auto n = new_node(x.shape());
  const int r = x.rows(), c = x.cols();
  auto X = x.mat();
  auto Y = as_mat(*n);
  Eigen::VectorXd inv_rms(r);
  for (int i = 0; i < r; ++i) {
    inv_rms[i] = 1.0 / std::sqrt(X.row(i).squaredNorm() / c + eps);
    Y.row(i) = X.row(i) * inv_rms[i];
  }
  Y.array().rowwise() *=
      Eigen::Map<const Eigen::RowVectorXd>(w.value().data(), c).array();
  auto px = x.ptr(), pw = w.ptr();
  return finish(n, {x, w}, [px, pw, inv_rms, c](Node& o) {
    auto G = grad_mat(o);
    auto X = Eigen::Map<RowMat>(px->value.data(), px->shape[0], px->shape[1]);
    auto W = Eigen::Map<const Eigen::RowVectorXd>(pw->value.data(), c);
    if (pw->requires_grad) {
      pw->ensure_grad();
      auto WG = Eigen::Map<Eigen::RowVectorXd>(pw->grad.data(), c);
      for (int i = 0; i < o.shape[0]; ++i)
        WG += (G.row(i).array() * X.row(i).array() * inv_rms[i]).matrix();
    }
    if (px->requires_grad) {
      px->ensure_grad();
      auto D = Eigen::Map<RowMat>(px->grad.data(), px->shape[0], px->shape[1]);
      for (int i = 0; i < o.shape[0]; ++i) {
        // y = w.x.s with s = (mean(x^2)+eps)^-1/2; ds/dx = -s^3 x / c
        Eigen::RowVectorXd gw = (G.row(i).array() * W.array()).matrix();
        const double dot = gw.dot(X.row(i));
        D.row(i) += gw * inv_rms[i] -
                    X.row(i) * (dot * inv_rms[i] * inv_rms[i] * inv_rms[i] / c);
      }
    }
  });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding");
  const int c = table.cols();
  auto n = new_node({int(ids.size()), c});
  auto T = table.mat();
  auto Y = as_mat(*n);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw IndexOutOfRange("embedding id " + std::to_string(ids[i]) +
                            " outside table of " + std::to_string(table.rows()));
    Y.row(Eigen::Index(i)) = T.row(ids[i]);
  }
  auto pt = table.ptr();
  auto idcopy = ids;
  return finish(n, {table}, [pt, idcopy](Node& o) {
    pt->ensure_grad();
    auto G = grad_mat(o);
    auto D = Eigen::Map<RowMat>(pt->grad.data(), pt->shape[0], pt->shape[1]);
    for (size_t i = 0; i < idcopy.size(); ++i)
      D.row(idcopy[i]) += G.row(Eigen::Index(i));
  });
}

Tensor pick_per_row(const Tensor& a, const std::vector<int>& cols) {
  check_2d(a, "pick_per_row");
  if (int(cols.size()) != a.rows())
    throw ShapeMismatch("pick_per_row: one column index per row required");
  auto n = new_node({a.rows()});
  auto A = a.mat();
  for (int i = 0; i < a.rows(); ++i) {
    if (cols[size_t(i)] < 0 || cols[size_t(i)] >= a.cols())
      throw IndexOutOfRange("pick_per_row: column out of range");
    n->value[i] = A(i, cols[size_t(i)]);
  }
  auto pa = a.ptr();
  auto cc = cols;
  return finish(n, {a}, [pa, cc](Node& o) {
    pa->ensure_grad();
    auto D = Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]);
    for (size_t i = 0; i < cc.size(); ++i) D(Eigen::Index(i), cc[i]) += o.grad[Eigen::Index(i)];
  });
}

// --- convolutions ------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  check_2d(x, "conv1d");
  if (w.rank() != 3) throw ShapeMismatch("conv1d: weight must be [cout,cin,k]");
  const int cin = x.rows(), t = x.cols();
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw ShapeMismatch("conv1d: cin mismatch");
  const int tout = (t + 2 * pad - k) / stride + 1;
  if (tout < 1) throw TooShort("conv1d: input too short for kernel");
  auto n = new_node({cout, tout});
  auto X = x.mat();
  auto Y = as_mat(*n);
  Y.setZero();
  // One GEMM per kernel tap: Y += W_k * X_shifted.
  for (int kk = 0; kk < k; ++kk) {
    RowMat Wkm(cout, cin);
    for (int co = 0; co < cout; ++co)
      for (int ci = 0; ci < cin; ++ci)
        Wkm(co, ci) = w.value()[(int64_t(co) * cin + ci) * k + kk];
    RowMat Xs = RowMat::Zero(cin, tout);
    for (int to = 0; to < tout; ++to) {
      const int src = to * stride + kk - pad;
      if (src >= 0 && src < t) Xs.col(to) = X.col(src);
    }
    Y += Wkm * Xs;
  }
  if (b.defined()) {
    if (b.numel() != cout) throw ShapeMismatch("conv1d: bias size != cout");
    Y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), cout);
  }
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b.defined() ? b.ptr() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return finish(n, parents, [px, pw, pb, stride, pad, cin, t, cout, k, tout](Node& o) {
    auto G = grad_mat(o);
    auto X = Eigen::Map<RowMat>(px->value.data(), cin, t);
    if (pb && pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<Eigen::VectorXd>(pb->grad.data(), cout) += G.rowwise().sum();
    }
    for (int kk = 0; kk < k; ++kk) {
      RowMat Wkm(cout, cin);
      for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
          Wkm(co, ci) = pw->value[(int64_t(co) * cin + ci) * k + kk];
      RowMat Xs = RowMat::Zero(cin, tout);
      for (int to = 0; to < tout; ++to) {
        const int src = to * stride + kk - pad;
        if (src >= 0 && src < t) Xs.col(to) = X.col(src);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        RowMat dW = G * Xs.transpose();  // [cout, cin]
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            pw->grad[(int64_t(co) * cin + ci) * k + kk] += dW(co, ci);
      }
      if (px->requires_grad) {
        px->ensure_grad();
        auto DX = Eigen::Map<RowMat>(px->grad.data(), cin, t);
        RowMat dXs = Wkm.transpose() * G;  // [cin, tout]
        for (int to = 0; to < tout; ++to) {
          const int src = to * stride + kk - pad;
          if (src >= 0 && src < t) DX.col(src) += dXs.col(to);
        }
      }
    }
  });
}

Tensor conv1d_transpose(const Tensor& x, const Tensor& w, const Tensor& b,
                        int stride, int pad) {
  check_2d(x, "conv1d_transpose");
  if (w.rank() != 3) throw ShapeMismatch("conv1d_transpose: weight must be [cin,cout,k]");
  const int cin = x.rows(), t = x.cols();
  const int cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != cin) throw ShapeMismatch("conv1d_transpose: cin mismatch");
  const int tout = (t - 1) * stride + k - 2 * pad;
  if (tout < 1) throw TooShort("conv1d_transpose: empty output");
  auto n = new_node({cout, tout});
  auto X = x.mat();
  auto Y = as_mat(*n);
  Y.setZero();
  for (int kk = 0; kk < k; ++kk) {
    RowMat Wkm(cout, cin);
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        Wkm(co, ci) = w.value()[(int64_t(ci) * cout + co) * k + kk];
    RowMat M = Wkm * X;  // [cout, t]
    for (int ti = 0; ti < t; ++ti) {
      const int u = ti * stride + kk - pad;
      if (u >= 0 && u < tout) Y.col(u) += M.col(ti);
    }
  }
  if (b.defined()) {
    if (b.numel() != cout) throw ShapeMismatch("conv1d_transpose: bias size != cout");
    Y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), cout);
  }
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b.defined() ? b.ptr() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return finish(n, parents, [px, pw, pb, stride, pad, cin, t, cout, k, tout](Node& o) {
    auto G = grad_mat(o);
    auto X = Eigen::Map<RowMat>(px->value.data(), cin, t);
    if (pb && pb->requires_grad) {
      pb->ensure_grad();
      Eigen::Map<Eigen::VectorXd>(pb->grad.data(), cout) += G.rowwise().sum();
    }
    for (int kk = 0; kk < k; ++kk) {
      RowMat Wkm(cout, cin);
      for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
          Wkm(co, ci) = pw->value[(int64_t(ci) * cout + co) * k + kk];
      RowMat Gg = RowMat::Zero(cout, t);  // gathered output grads per input step
      for (int ti = 0; ti < t; ++ti) {
        const int u = ti * stride + kk - pad;
        if (u >= 0 && u < tout) Gg.col(ti) = G.col(u);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        RowMat dW = Gg * X.transpose();  // [cout, cin]
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < cout; ++co)
            pw->grad[(int64_t(ci) * cout + co) * k + kk] += dW(co, ci);
      }
      if (px->requires_grad) {
        px->ensure_grad();
        auto DX = Eigen::Map<RowMat>(px->grad.data(), cin, t);
        DX += Wkm.transpose() * Gg;
      }
    }
  });
}

Tensor cumsum_cols(const Tensor& a) {
  check_2d(a, "cumsum_cols");
  auto n = new_node(a.shape());
  auto X = a.mat();
  auto Y = as_mat(*n);
  Y.col(0) = X.col(0);
  for (int j = 1; j < a.cols(); ++j) Y.col(j) = Y.col(j - 1) + X.col(j);
  auto pa = a.ptr();
  return finish(n, {a}, [pa](Node& o) {
    pa->ensure_grad();
    auto G = grad_mat(o);
    auto D = Eigen::Map<RowMat>(pa->grad.data(), pa->shape[0], pa->shape[1]);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(o.shape[0]);
    for (int j = o.shape[1] - 1; j >= 0; --j) {
      acc += G.col(j);
      D.col(j) += acc;
    }
  });
}

// --- geometry ------------------------------------------------------------------

Tensor rot6d_mats(const Tensor& x) {
  check_2d(x, "rot6d_mats");
  if (x.cols() != 6) throw ShapeMismatch("rot6d_mats: expected 6 columns");
  const int nrows = x.rows();
  auto n = new_node({nrows, 9});
  auto X = x.mat();
  auto Y = as_mat(*n);
  for (int i = 0; i < nrows; ++i) {
    Vec6 r6 = X.row(i).transpose();
    Mat3 R = rot6d_to_matrix(r6);  // throws DegenerateRotation
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r) Y(i, 3 * c + r) = R(r, c);
  }
  auto px = x.ptr();
  return finish(n, {x}, [px, nrows](Node& o) {
    px->ensure_grad();
    auto G = grad_mat(o);
    auto X = Eigen::Map<RowMat>(px->value.data(), nrows, 6);
    auto D = Eigen::Map<RowMat>(px->grad.data(), nrows, 6);
    for (int i = 0; i < nrows; ++i) {
      const Vec3 a1 = X.row(i).head<3>().transpose();
      const Vec3 a2 = X.row(i).tail<3>().transpose();
      const double n1 = a1.norm();
      const Vec3 b1 = a1 / n1;
      const Vec3 u = a2 - b1.dot(a2) * b1;
      const double n2 = u.norm();
      const Vec3 b2 = u / n2;
      const Vec3 g1(G(i, 0), G(i, 1), G(i, 2));
      const Vec3 g2(G(i, 3), G(i, 4), G(i, 5));
      const Vec3 g3(G(i, 6), G(i, 7), G(i, 8));
      // b3 = b1 x b2 feeds back into both columns.
      const Vec3 gb2 = g2 + g3.cross(b1);
      const Vec3 ubar = (gb2 - b2 * b2.dot(gb2)) / n2;
      Vec3 gb1 = g1 + b2.cross(g3);
      gb1 += -(ubar.dot(b1)) * a2 - (b1.dot(a2)) * ubar;
      const Vec3 da2 = ubar - b1 * b1.dot(ubar);
      const Vec3 da1 = (gb1 - b1 * b1.dot(gb1)) / n1;
      D.row(i).head<3>() += da1.transpose();
      D.row(i).tail<3>() += da2.transpose();
    }
  });
}

Tensor geodesic_to_const(const Tensor& pred, const Mat& target) {
  check_2d(pred, "geodesic_to_const");
  if (pred.cols() != 9 || target.cols() != 9 || target.rows() != pred.rows())
    throw ShapeMismatch("geodesic_to_const: expected matching [n,9] inputs");
  const int nrows = pred.rows();
  auto n = new_node({nrows});
  auto P = pred.mat();
  Eigen::VectorXd cosv(nrows);
  for (int i = 0; i < nrows; ++i) {
    const double tr = P.row(i).dot(target.row(i));  // trace(P^T T) elementwise
    double c = (tr - 1.0) / 2.0;
    c = std::min(1.0, std::max(-1.0, c));
    cosv[i] = c;
    n->value[i] = std::acos(c);
  }
  auto pp = pred.ptr();
  Mat tg = target;
  return finish(n, {pred}, [pp, tg, cosv, nrows](Node& o) {
    pp->ensure_grad();
    auto D = Eigen::Map<RowMat>(pp->grad.data(), nrows, 9);
    for (int i = 0; i < nrows; ++i) {
      const double c = cosv[i];
      // acos is singular at |c| = 1; treat the clamp region as flat.
      if (std::abs(c) > 1.0 - 1e-7) continue;
      const double dacos = -1.0 / std::sqrt(1.0 - c * c);
      D.row(i) += o.grad[i] * dacos * 0.5 * tg.row(i);
    }
  });
}

Tensor fk_markers(const Tensor& rot, const ProxySkeleton& skeleton,
                  const Mat& translation) {
  check_2d(rot, "fk_markers");
  const int joints = skeleton.joint_count();
  if (rot.cols() != 9 || rot.rows() % joints != 0)
    throw ShapeMismatch("fk_markers: rotation rows must be T*joints x 9");
  const int frames = rot.rows() / joints;
  if (translation.rows() != frames || translation.cols() != 3)
    throw ShapeMismatch("fk_markers: translation must be frames x 3");
  const int mc = skeleton.marker_count;
  auto n = new_node({frames, joints * mc * 3});

  auto R = rot.mat();
  auto read_mat = [&](int f, int j) {
    Mat3 m;
    const auto row = R.row(f * joints + j);
    for (int c = 0; c < 3; ++c)
      for (int r = 0; r < 3; ++r) m(r, c) = row[3 * c + r];
    return m;
  };

  // Forward pass; keep globals for the reverse sweep.
  auto globals = std::make_shared<std::vector<Mat3>>(size_t(frames) * joints);
  auto positions = std::make_shared<std::vector<Vec3>>(size_t(frames) * joints);
  auto Y = as_mat(*n);
  for (int f = 0; f < frames; ++f) {
    for (int j = 0; j < joints; ++j) {
      const int p = skeleton.parents[j];
      const Mat3 L = read_mat(f, j);
      const Vec3 off = skeleton.neutral_shape * skeleton.offsets[j];
      Mat3& G = (*globals)[size_t(f) * joints + j];
      Vec3& P = (*positions)[size_t(f) * joints + j];
      if (p < 0) {
        G = L;
        P = off + translation.row(f).transpose();
      } else {
        const Mat3& Gp = (*globals)[size_t(f) * joints + p];
        G = Gp * L;
        P = (*positions)[size_t(f) * joints + p] + Gp * off;
      }
      for (int m = 0; m < mc; ++m) {
        const Vec3 mk = P + G * skeleton.marker_offsets[j][m];
        for (int d = 0; d < 3; ++d) Y(f, (j * mc + m) * 3 + d) = mk[d];
      }
    }
  }

  auto pr = rot.ptr();
  const ProxySkeleton* sk = &skeleton;  // standard() is a static singleton
  return finish(n, {rot}, [pr, sk, globals, positions, frames, joints, mc](Node& o) {
    pr->ensure_grad();
    auto G = grad_mat(o);
    auto DR = Eigen::Map<RowMat>(pr->grad.data(), frames * joints, 9);
    for (int f = 0; f < frames; ++f) {
      std::vector<Mat3> gbar(joints, Mat3::Zero());
      std::vector<Vec3> pbar(joints, Vec3::Zero());
      // Marker adjoints feed each joint's global rotation and position.
      for (int j = 0; j < joints; ++j) {
        for (int m = 0; m < mc; ++m) {
          Vec3 gm;
          for (int d = 0; d < 3; ++d) gm[d] = G(f, (j * mc + m) * 3 + d);
          pbar[j] += gm;
          gbar[j] += gm * sk->marker_offsets[j][m].transpose();
        }
      }
      // Reverse sweep: children push adjoints into their parent.
      for (int j = joints - 1; j >= 0; --j) {
        const int p = sk->parents[j];
        const Mat3& Gj = (*globals)[size_t(f) * joints + j];
        Mat3 local_adj;
        if (p < 0) {
          local_adj = gbar[j];
        } else {
          const Mat3& Gp = (*globals)[size_t(f) * joints + p];
          const Vec3 off = sk->neutral_shape * sk->offsets[j];
          const Mat3 L = Gp.transpose() * Gj;
          local_adj = Gp.transpose() * gbar[j];
          gbar[p] += gbar[j] * L.transpose() + pbar[j] * off.transpose();
          pbar[p] += pbar[j];
        }
        auto row = DR.row(f * joints + j);
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) row[3 * c + r] += local_adj(r, c);
      }
    }
  });
}

// --- parameters ----------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, std::vector<int> shape) {
  for (auto& it : items)
    if (it.first == name) throw InvalidConfig("duplicate parameter name " + name);
  Tensor t = Tensor::leaf(std::move(shape), true);
  items.emplace_back(name, t);
  return t;
}

Tensor ParamStore::find(const std::string& name) const {
  for (auto& it : items)
    if (it.first == name) return it.second;
  throw InvalidConfig("unknown parameter " + name);
}

void ParamStore::zero_grad() {
  for (auto& it : items) it.second.node()->grad.resize(0);
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (auto& it : items) n += it.second.numel();
  return n;
}

void init_uniform(const Tensor& t, Rng& rng, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i)
    t.value()[i] = double(float(rng.uniform(lo, hi)));
}

void init_normal(const Tensor& t, Rng& rng, double stddev) {
  for (int64_t i = 0; i < t.numel(); ++i)
    t.value()[i] = double(float(rng.normal(0.0, stddev)));
}

void init_zero(const Tensor& t) { t.value().setZero(); }

void init_const(const Tensor& t, double v) {
  t.value().setConstant(double(float(v)));
}

double fan_in_bound(int fan_in) { return 1.0 / std::sqrt(double(fan_in)); }

// --- optimizer --------------------------------------------------------------

double AdamW::step(ParamStore& params) {
  double sq = 0.0;
  for (auto& it : params.items) {
    Node* n = it.second.node();
    if (n->grad.size() == n->value.size()) sq += n->grad.square().sum();
  }
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (auto& it : params.items) {
    Node* n = it.second.node();
    if (n->grad.size() != n->value.size()) continue;  // untouched this step
    auto& st = state_[n];
    if (st.first.size() != n->value.size()) {
      st.first = Arr::Zero(n->value.size());
      st.second = Arr::Zero(n->value.size());
    }
    Arr g = n->grad * scale;
    st.first = cfg_.beta1 * st.first + (1.0 - cfg_.beta1) * g;
    st.second = cfg_.beta2 * st.second + (1.0 - cfg_.beta2) * g.square();
    Arr mhat = st.first / bc1;
    Arr vhat = st.second / bc2;
    n->value -= cfg_.lr * (mhat / (vhat.sqrt() + cfg_.eps) +
                           cfg_.weight_decay * n->value);
  }
  return norm;
}

void AdamW::save_state(
    const ParamStore& params,
    std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<double>>>>& out) const {
  for (auto& it : params.items) {
    const Node* n = it.second.node();
    auto found = state_.find(n);
    std::vector<double> m(size_t(n->value.size()), 0.0), v(size_t(n->value.size()), 0.0);
    if (found != state_.end()) {
      std::copy(found->second.first.data(), found->second.first.data() + n->value.size(), m.begin());
      std::copy(found->second.second.data(), found->second.second.data() + n->value.size(), v.begin());
    }
    out.emplace_back("adam_m." + it.first, std::make_pair(it.second.shape(), std::move(m)));
    out.emplace_back("adam_v." + it.first, std::make_pair(it.second.shape(), std::move(v)));
  }
}

void AdamW::load_state(const ParamStore& params,
                       const std::unordered_map<std::string, std::vector<double>>& m,
                       const std::unordered_map<std::string, std::vector<double>>& v,
                       int64_t step_count) {
  t_ = step_count;
  state_.clear();
  for (auto& it : params.items) {
    auto mi = m.find("adam_m." + it.first);
    auto vi = v.find("adam_v." + it.first);
    if (mi == m.end() || vi == v.end()) continue;
    Node* n = it.second.node();
    auto& st = state_[n];
    st.first = Eigen::Map<const Arr>(mi->second.data(), Eigen::Index(mi->second.size()));
    st.second = Eigen::Map<const Arr>(vi->second.data(), Eigen::Index(vi->second.size()));
  }
}

void AdamW::round_state_to_f32() {
  for (auto& kv : state_) {
    for (int64_t i = 0; i < kv.second.first.size(); ++i) {
      kv.second.first[i] = double(float(kv.second.first[i]));
      kv.second.second[i] = double(float(kv.second.second[i]));
    }
  }
}

void round_to_f32(ParamStore& params) {
  for (auto& it : params.items) {
    Arr& v = it.second.value();
    for (int64_t i = 0; i < v.size(); ++i) v[i] = double(float(v[i]));
  }
}

}  // namespace mlang::nn
