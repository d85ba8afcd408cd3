#define EIGEN_DONT_PARALLELIZE
#include "pseudoseg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace pseudoseg::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

static CMatMap mview(const Tensor& t) {
  return CMatMap(t.data(), t.rows(), t.last_dim());
}
static MatMap mview(Tensor& t) {
  return MatMap(t.data(), t.rows(), t.last_dim());
}

Value Tape::leaf(Tensor v, bool requires_grad) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.val = std::move(v);
  n.requires_grad = requires_grad;
  return Value(this, &n);
}

Value Tape::external(const Tensor* v, bool requires_grad) {
  check_contract(v != nullptr, "Tape::external: null tensor");
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.ext = v;
  n.requires_grad = requires_grad;
  return Value(this, &n);
}

Node* Tape::make_node(Tensor val, std::initializer_list<Node*> parents) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.val = std::move(val);
  for (const Node* p : parents) {
    if (p && p->requires_grad) {
      n.requires_grad = true;
      break;
    }
  }
  return &n;
}

void Tape::backward(const std::vector<std::pair<Value, double>>& seeds) {
  for (const auto& [v, w] : seeds) {
    check_contract(v.tape() == this, "Tape::backward: foreign value");
    check_contract(v.v().size() == 1, "Tape::backward: seed must be scalar");
    v.node()->grad_ref()[0] += w;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->grad_ready && it->backward) it->backward();
  }
}

Tensor Tape::grad(const Value& v) const {
  check_contract(v.tape() == this, "Tape::grad: foreign value");
  if (v.node()->grad_ready) return v.node()->grad;
  return Tensor(v.v().shape());
}

namespace {

Tape* common_tape(std::initializer_list<Value> vs) {
  Tape* t = nullptr;
  for (const Value& v : vs) {
    check_contract(v.valid(), "op: invalid value");
    if (!t) t = v.tape();
    check_contract(t == v.tape(), "op: values from different tapes");
  }
  return t;
}

}  // namespace

Value add(Value a, Value b) {
  Tape* t = common_tape({a, b});
  check_contract(a.v().same_shape(b.v()), "add: shape mismatch " + a.v().shape_str() +
                                              " vs " + b.v().shape_str());
  Tensor out = a.v();
  const double* pb = b.v().data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb] {
      if (na->requires_grad) mview(na->grad_ref()) += mview(n->grad);
      if (nb->requires_grad) mview(nb->grad_ref()) += mview(n->grad);
    };
  }
  return Value(t, n);
}

Value sub(Value a, Value b) {
  Tape* t = common_tape({a, b});
  check_contract(a.v().same_shape(b.v()), "sub: shape mismatch");
  Tensor out = a.v();
  const double* pb = b.v().data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb] {
      if (na->requires_grad) mview(na->grad_ref()) += mview(n->grad);
      if (nb->requires_grad) mview(nb->grad_ref()) -= mview(n->grad);
    };
  }
  return Value(t, n);
}

Value mul(Value a, Value b) {
  Tape* t = common_tape({a, b});
  check_contract(a.v().same_shape(b.v()), "mul: shape mismatch");
  Tensor out = a.v();
  const double* pb = b.v().data();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb] {
      const std::int64_t sz = n->grad.size();
      if (na->requires_grad) {
        Tensor& ga = na->grad_ref();
        const double* pb2 = nb->value().data();
        for (std::int64_t i = 0; i < sz; ++i) ga[i] += n->grad[i] * pb2[i];
      }
      if (nb->requires_grad) {
        Tensor& gb = nb->grad_ref();
        const double* pa = na->value().data();
        for (std::int64_t i = 0; i < sz; ++i) gb[i] += n->grad[i] * pa[i];
      }
    };
  }
  return Value(t, n);
}

Value scale(Value a, double s) {
  Tape* t = common_tape({a});
  Tensor out = a.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  Node* n = t->make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node* na = a.node();
    n->backward = [n, na, s] { mview(na->grad_ref()) += s * mview(n->grad); };
  }
  return Value(t, n);
}

Value add_const(Value a, double c) {
  Tape* t = common_tape({a});
  Tensor out = a.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] += c;
  Node* n = t->make_node(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node* na = a.node();
    n->backward = [n, na] { mview(na->grad_ref()) += mview(n->grad); };
  }
  return Value(t, n);
}

Value relu(Value x) {
  Tape* t = common_tape({x});
  Tensor out = x.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, out[i]);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx] {
      Tensor& gx = nx->grad_ref();
      const Tensor& in = nx->value();
      for (std::int64_t i = 0; i < gx.size(); ++i)
        if (in[i] > 0.0) gx[i] += n->grad[i];
    };
  }
  return Value(t, n);
}

Value pow_const(Value x, double p) {
  Tape* t = common_tape({x});
  Tensor out = x.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::pow(out[i], p);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, p] {
      Tensor& gx = nx->grad_ref();
      const Tensor& in = nx->value();
      for (std::int64_t i = 0; i < gx.size(); ++i)
        gx[i] += n->grad[i] * p * std::pow(in[i], p - 1.0);
    };
  }
  return Value(t, n);
}

Value log_clamped(Value x, double floor) {
  Tape* t = common_tape({x});
  Tensor out = x.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(out[i], floor));
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, floor] {
      Tensor& gx = nx->grad_ref();
      const Tensor& in = nx->value();
      for (std::int64_t i = 0; i < gx.size(); ++i)
        if (in[i] > floor) gx[i] += n->grad[i] / in[i];
    };
  }
  return Value(t, n);
}

Value clamp_min(Value x, double floor) {
  Tape* t = common_tape({x});
  Tensor out = x.v();
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], floor);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, floor] {
      Tensor& gx = nx->grad_ref();
      const Tensor& in = nx->value();
      for (std::int64_t i = 0; i < gx.size(); ++i)
        if (in[i] > floor) gx[i] += n->grad[i];
    };
  }
  return Value(t, n);
}

Value matmul(Value a, Value b) {
  Tape* t = common_tape({a, b});
  const Tensor& A = a.v();
  const Tensor& B = b.v();
  check_contract(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0),
                 "matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
  Tensor out({A.dim(0), B.dim(1)});
  mview(out).noalias() = mview(A) * mview(B);
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb] {
      if (na->requires_grad)
        mview(na->grad_ref()).noalias() += mview(n->grad) * mview(nb->value()).transpose();
      if (nb->requires_grad)
        mview(nb->grad_ref()).noalias() += mview(na->value()).transpose() * mview(n->grad);
    };
  }
  return Value(t, n);
}

Value matmul_nt(Value a, Value b) {
  Tape* t = common_tape({a, b});
  const Tensor& A = a.v();
  const Tensor& B = b.v();
  check_contract(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(1),
                 "matmul_nt: incompatible shapes");
  Tensor out({A.dim(0), B.dim(0)});
  mview(out).noalias() = mview(A) * mview(B).transpose();
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb] {
      if (na->requires_grad)
        mview(na->grad_ref()).noalias() += mview(n->grad) * mview(nb->value());
      if (nb->requires_grad)
        mview(nb->grad_ref()).noalias() += mview(n->grad).transpose() * mview(na->value());
    };
  }
  return Value(t, n);
}

Value linear(Value x, Value w, Value b) {
  Tape* t = common_tape({x, w, b});
  const Tensor& X = x.v();
  const Tensor& W = w.v();
  const Tensor& B = b.v();
  check_contract(W.ndim() == 2 && X.last_dim() == W.dim(0), "linear: weight shape mismatch");
  check_contract(B.size() == W.dim(1), "linear: bias shape mismatch");
  std::vector<int> out_shape = X.shape();
  out_shape.back() = W.dim(1);
  Tensor out(std::move(out_shape));
  auto om = mview(out);
  om.noalias() = mview(X) * mview(W);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.data(), B.size());
  Node* n = t->make_node(std::move(out), {x.node(), w.node(), b.node()});
  if (n->requires_grad) {
    Node *nx = x.node(), *nw = w.node(), *nb = b.node();
    n->backward = [n, nx, nw, nb] {
      auto g = mview(n->grad);
      if (nx->requires_grad) mview(nx->grad_ref()).noalias() += g * mview(nw->value()).transpose();
      if (nw->requires_grad) mview(nw->grad_ref()).noalias() += mview(nx->value()).transpose() * g;
      if (nb->requires_grad) {
        Tensor& gb = nb->grad_ref();
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), gb.size()) += g.colwise().sum();
      }
    };
  }
  return Value(t, n);
}

Value sum(Value x) {
  Tape* t = common_tape({x});
  double s = 0.0;
  for (std::int64_t i = 0; i < x.v().size(); ++i) s += x.v()[i];
  Node* n = t->make_node(Tensor::scalar(s), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx] {
      Tensor& gx = nx->grad_ref();
      const double g = n->grad[0];
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
    };
  }
  return Value(t, n);
}

Value row_sum(Value x) {
  Tape* t = common_tape({x});
  const Tensor& X = x.v();
  const int c = X.last_dim();
  const std::int64_t rows = X.rows();
  Tensor out({static_cast<int>(rows), 1});
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += X[i * c + j];
    out[i] = s;
  }
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, rows, c] {
      Tensor& gx = nx->grad_ref();
      for (std::int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j) gx[i * c + j] += n->grad[i];
    };
  }
  return Value(t, n);
}

Value mul_rows(Value x, Value r) {
  Tape* t = common_tape({x, r});
  const Tensor& X = x.v();
  const Tensor& R = r.v();
  const int c = X.last_dim();
  const std::int64_t rows = X.rows();
  check_contract(R.size() == rows, "mul_rows: row vector size mismatch");
  Tensor out = X;
  for (std::int64_t i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] *= R[i];
  Node* n = t->make_node(std::move(out), {x.node(), r.node()});
  if (n->requires_grad) {
    Node *nx = x.node(), *nr = r.node();
    n->backward = [n, nx, nr, rows, c] {
      if (nx->requires_grad) {
        Tensor& gx = nx->grad_ref();
        const Tensor& R2 = nr->value();
        for (std::int64_t i = 0; i < rows; ++i)
          for (int j = 0; j < c; ++j) gx[i * c + j] += n->grad[i * c + j] * R2[i];
      }
      if (nr->requires_grad) {
        Tensor& gr = nr->grad_ref();
        const Tensor& X2 = nx->value();
        for (std::int64_t i = 0; i < rows; ++i) {
          double s = 0.0;
          for (int j = 0; j < c; ++j) s += n->grad[i * c + j] * X2[i * c + j];
          gr[i] += s;
        }
      }
    };
  }
  return Value(t, n);
}

Value div_rows(Value x, Value r) {
  Tape* t = common_tape({x, r});
  const Tensor& X = x.v();
  const Tensor& R = r.v();
  const int c = X.last_dim();
  const std::int64_t rows = X.rows();
  check_contract(R.size() == rows, "div_rows: row vector size mismatch");
  Tensor out = X;
  for (std::int64_t i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] /= R[i];
  Node* n = t->make_node(std::move(out), {x.node(), r.node()});
  if (n->requires_grad) {
    Node *nx = x.node(), *nr = r.node();
    n->backward = [n, nx, nr, rows, c] {
      const Tensor& R2 = nr->value();
      if (nx->requires_grad) {
        Tensor& gx = nx->grad_ref();
        for (std::int64_t i = 0; i < rows; ++i)
          for (int j = 0; j < c; ++j) gx[i * c + j] += n->grad[i * c + j] / R2[i];
      }
      if (nr->requires_grad) {
        Tensor& gr = nr->grad_ref();
        const Tensor& X2 = nx->value();
        for (std::int64_t i = 0; i < rows; ++i) {
          double s = 0.0;
          for (int j = 0; j < c; ++j) s += n->grad[i * c + j] * X2[i * c + j];
          gr[i] -= s / (R2[i] * R2[i]);
        }
      }
    };
  }
  return Value(t, n);
}

Value spatial_mean(Value x) {
  Tape* t = common_tape({x});
  const Tensor& X = x.v();
  const int c = X.last_dim();
  const std::int64_t rows = X.rows();
  check_contract(rows > 0, "spatial_mean: empty input");
  Tensor out({1, c});
  for (std::int64_t i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out[j] += X[i * c + j];
  for (int j = 0; j < c; ++j) out[j] /= static_cast<double>(rows);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, rows, c] {
      Tensor& gx = nx->grad_ref();
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j) gx[i * c + j] += n->grad[j] * inv;
    };
  }
  return Value(t, n);
}

namespace {

void softmax_rows_into(const Tensor& x, Tensor& out) {
  const int c = x.last_dim();
  const std::int64_t rows = x.rows();
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xi = x.data() + i * c;
    double* oi = out.data() + i * c;
    double mx = xi[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      z += oi[j];
    }
    for (int j = 0; j < c; ++j) oi[j] /= z;
  }
}

}  // namespace

Value softmax_rows(Value x) {
  Tape* t = common_tape({x});
  Tensor out(x.v().shape());
  softmax_rows_into(x.v(), out);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx] {
      Tensor& gx = nx->grad_ref();
      const Tensor& y = n->val;
      const int c = y.last_dim();
      const std::int64_t rows = y.rows();
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* yi = y.data() + i * c;
        const double* gi = n->grad.data() + i * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gi[j] * yi[j];
        for (int j = 0; j < c; ++j) gx[i * c + j] += yi[j] * (gi[j] - dot);
      }
    };
  }
  return Value(t, n);
}

Value log_softmax_rows(Value x) {
  Tape* t = common_tape({x});
  const Tensor& X = x.v();
  const int c = X.last_dim();
  const std::int64_t rows = X.rows();
  Tensor out(X.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* xi = X.data() + i * c;
    double* oi = out.data() + i * c;
    double mx = xi[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) oi[j] = xi[j] - lse;
  }
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, rows, c] {
      Tensor& gx = nx->grad_ref();
      const Tensor& y = n->val;  // log-probs
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* yi = y.data() + i * c;
        const double* gi = n->grad.data() + i * c;
        double gsum = 0.0;
        for (int j = 0; j < c; ++j) gsum += gi[j];
        for (int j = 0; j < c; ++j) gx[i * c + j] += gi[j] - std::exp(yi[j]) * gsum;
      }
    };
  }
  return Value(t, n);
}

Value concat_cols(Value a, Value b) {
  Tape* t = common_tape({a, b});
  const Tensor& A = a.v();
  const Tensor& B = b.v();
  check_contract(A.rows() == B.rows(), "concat_cols: row count mismatch");
  const int ca = A.last_dim(), cb = B.last_dim();
  std::vector<int> shape = A.shape();
  shape.back() = ca + cb;
  Tensor out(std::move(shape));
  const std::int64_t rows = A.rows();
  for (std::int64_t i = 0; i < rows; ++i) {
    std::memcpy(out.data() + i * (ca + cb), A.data() + i * ca, sizeof(double) * ca);
    std::memcpy(out.data() + i * (ca + cb) + ca, B.data() + i * cb, sizeof(double) * cb);
  }
  Node* n = t->make_node(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node *na = a.node(), *nb = b.node();
    n->backward = [n, na, nb, ca, cb, rows] {
      for (std::int64_t i = 0; i < rows; ++i) {
        if (na->requires_grad) {
          Tensor& ga = na->grad_ref();
          for (int j = 0; j < ca; ++j) ga[i * ca + j] += n->grad[i * (ca + cb) + j];
        }
        if (nb->requires_grad) {
          Tensor& gb = nb->grad_ref();
          for (int j = 0; j < cb; ++j) gb[i * cb + j] += n->grad[i * (ca + cb) + ca + j];
        }
      }
    };
  }
  return Value(t, n);
}

Value pick(Value x, std::int64_t row, std::int64_t col) {
  Tape* t = common_tape({x});
  const Tensor& X = x.v();
  const int c = X.last_dim();
  check_contract(row >= 0 && row < X.rows() && col >= 0 && col < c, "pick: index out of range");
  Node* n = t->make_node(Tensor::scalar(X[row * c + col]), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, row, col, c] { nx->grad_ref()[row * c + col] += n->grad[0]; };
  }
  return Value(t, n);
}

namespace {

// Patch layout: (dy, dx, cin), matching the weight matrix rows.
void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow, Tensor& cols) {
  const int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const int patch = k * k * cin;
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double* dst = cols.data() + (static_cast<std::int64_t>(i) * ow + j) * patch;
      for (int dy = 0; dy < k; ++dy) {
        const int yy = i * stride - pad + dy;
        for (int dx = 0; dx < k; ++dx) {
          const int xx = j * stride - pad + dx;
          double* cell = dst + (dy * k + dx) * cin;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) {
            std::memset(cell, 0, sizeof(double) * cin);
          } else {
            std::memcpy(cell, x.data() + (static_cast<std::int64_t>(yy) * w + xx) * cin,
                        sizeof(double) * cin);
          }
        }
      }
    }
  }
}

void col2im_add(const Tensor& dcols, int k, int stride, int pad, int oh, int ow, Tensor& dx) {
  const int h = dx.dim(0), w = dx.dim(1), cin = dx.dim(2);
  const int patch = k * k * cin;
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      const double* src = dcols.data() + (static_cast<std::int64_t>(i) * ow + j) * patch;
      for (int dy = 0; dy < k; ++dy) {
        const int yy = i * stride - pad + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx_ = 0; dx_ < k; ++dx_) {
          const int xx = j * stride - pad + dx_;
          if (xx < 0 || xx >= w) continue;
          const double* cell = src + (dy * k + dx_) * cin;
          double* out = dx.data() + (static_cast<std::int64_t>(yy) * w + xx) * cin;
          for (int c = 0; c < cin; ++c) out[c] += cell[c];
        }
      }
    }
  }
}

}  // namespace

Value conv2d(Value x, Value w, Value b, int ksize, int stride, int pad) {
  Tape* t = common_tape({x, w, b});
  const Tensor& X = x.v();
  const Tensor& W = w.v();
  const Tensor& B = b.v();
  check_contract(X.ndim() == 3, "conv2d: input must be {H,W,C}");
  const int h = X.dim(0), wd = X.dim(1), cin = X.dim(2);
  check_contract(W.ndim() == 2 && W.dim(0) == ksize * ksize * cin,
                 "conv2d: weight shape mismatch");
  const int cout = W.dim(1);
  check_contract(B.size() == cout, "conv2d: bias shape mismatch");
  check_contract(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - ksize) / stride + 1;
  const int ow = (wd + 2 * pad - ksize) / stride + 1;
  check_contract(oh > 0 && ow > 0, "conv2d: output would be empty");

  Tensor cols({oh * ow, ksize * ksize * cin});
  im2col(X, ksize, stride, pad, oh, ow, cols);
  Tensor out({oh, ow, cout});
  auto om = MatMap(out.data(), static_cast<std::int64_t>(oh) * ow, cout);
  om.noalias() = mview(cols) * mview(W);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.data(), cout);

  Node* n = t->make_node(std::move(out), {x.node(), w.node(), b.node()});
  if (n->requires_grad) {
    n->saved.push_back(std::move(cols));
    Node *nx = x.node(), *nw = w.node(), *nb = b.node();
    n->backward = [n, nx, nw, nb, ksize, stride, pad, oh, ow, cout] {
      auto g = MatMap(n->grad.data(), static_cast<std::int64_t>(oh) * ow, cout);
      if (nw->requires_grad)
        mview(nw->grad_ref()).noalias() += mview(n->saved[0]).transpose() * g;
      if (nb->requires_grad) {
        Tensor& gb = nb->grad_ref();
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), cout) += g.colwise().sum();
      }
      if (nx->requires_grad) {
        Tensor dcols({oh * ow, nw->value().dim(0)});
        mview(dcols).noalias() = g * mview(nw->value()).transpose();
        col2im_add(dcols, ksize, stride, pad, oh, ow, nx->grad_ref());
      }
    };
  }
  return Value(t, n);
}

namespace {

struct LerpAxis {
  std::vector<int> lo, hi;
  std::vector<double> t;
};

// Half-pixel-centered source coordinates, clamped at the borders.
LerpAxis make_axis(int in, int out) {
  LerpAxis ax;
  ax.lo.resize(out);
  ax.hi.resize(out);
  ax.t.resize(out);
  const double s = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * s - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    ax.lo[i] = lo;
    ax.hi[i] = std::min(lo + 1, in - 1);
    ax.t[i] = src - lo;
  }
  return ax;
}

void bilinear_into(const Tensor& x, int oh, int ow, Tensor& out) {
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const LerpAxis ay = make_axis(h, oh), axx = make_axis(w, ow);
  for (int i = 0; i < oh; ++i) {
    const double ty = ay.t[i];
    for (int j = 0; j < ow; ++j) {
      const double tx = axx.t[j];
      const double* p00 = x.data() + (static_cast<std::int64_t>(ay.lo[i]) * w + axx.lo[j]) * c;
      const double* p01 = x.data() + (static_cast<std::int64_t>(ay.lo[i]) * w + axx.hi[j]) * c;
      const double* p10 = x.data() + (static_cast<std::int64_t>(ay.hi[i]) * w + axx.lo[j]) * c;
      const double* p11 = x.data() + (static_cast<std::int64_t>(ay.hi[i]) * w + axx.hi[j]) * c;
      double* o = out.data() + (static_cast<std::int64_t>(i) * ow + j) * c;
      for (int ch = 0; ch < c; ++ch) {
        const double top = p00[ch] + (p01[ch] - p00[ch]) * tx;
        const double bot = p10[ch] + (p11[ch] - p10[ch]) * tx;
        o[ch] = top + (bot - top) * ty;
      }
    }
  }
}

}  // namespace

Value upsample_bilinear(Value x, int out_h, int out_w) {
  Tape* t = common_tape({x});
  const Tensor& X = x.v();
  check_contract(X.ndim() == 3, "upsample_bilinear: input must be {H,W,C}");
  check_contract(out_h >= 1 && out_w >= 1, "upsample_bilinear: bad target size");
  const int c = X.dim(2);
  Tensor out({out_h, out_w, c});
  bilinear_into(X, out_h, out_w, out);
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx, out_h, out_w, c] {
      Tensor& gx = nx->grad_ref();
      const int h = nx->value().dim(0), w = nx->value().dim(1);
      const LerpAxis ay = make_axis(h, out_h), axx = make_axis(w, out_w);
      for (int i = 0; i < out_h; ++i) {
        const double ty = ay.t[i];
        for (int j = 0; j < out_w; ++j) {
          const double tx = axx.t[j];
          const double w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx;
          const double w10 = ty * (1 - tx), w11 = ty * tx;
          const double* g = n->grad.data() + (static_cast<std::int64_t>(i) * out_w + j) * c;
          double* p00 = gx.data() + (static_cast<std::int64_t>(ay.lo[i]) * w + axx.lo[j]) * c;
          double* p01 = gx.data() + (static_cast<std::int64_t>(ay.lo[i]) * w + axx.hi[j]) * c;
          double* p10 = gx.data() + (static_cast<std::int64_t>(ay.hi[i]) * w + axx.lo[j]) * c;
          double* p11 = gx.data() + (static_cast<std::int64_t>(ay.hi[i]) * w + axx.hi[j]) * c;
          for (int ch = 0; ch < c; ++ch) {
            p00[ch] += w00 * g[ch];
            p01[ch] += w01 * g[ch];
            p10[ch] += w10 * g[ch];
            p11[ch] += w11 * g[ch];
          }
        }
      }
    };
  }
  return Value(t, n);
}

Value reshape(Value x, std::vector<int> shape) {
  Tape* t = common_tape({x});
  Tensor out = x.v().reshaped(std::move(shape));
  Node* n = t->make_node(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node* nx = x.node();
    n->backward = [n, nx] {
      Tensor& gx = nx->grad_ref();
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += n->grad[i];
    };
  }
  return Value(t, n);
}

Value stop_grad(Value x) {
  Tape* t = common_tape({x});
  Node* n = t->make_node(Tensor(), {});
  n->ext = &x.node()->value();
  n->requires_grad = false;
  return Value(t, n);
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  check_contract(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                 "matmul_plain: incompatible shapes");
  Tensor out({a.dim(0), b.dim(1)});
  mview(out).noalias() = mview(a) * mview(b);
  return out;
}

Tensor softmax_rows_plain(const Tensor& x) {
  Tensor out(x.shape());
  softmax_rows_into(x, out);
  return out;
}

Tensor bilinear_resize_plain(const Tensor& x, int out_h, int out_w) {
  check_contract(x.ndim() == 3, "bilinear_resize_plain: input must be {H,W,C}");
  Tensor out({out_h, out_w, x.dim(2)});
  bilinear_into(x, out_h, out_w, out);
  return out;
}

}  // namespace pseudoseg::ad
