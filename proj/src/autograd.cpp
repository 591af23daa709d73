#include "ctefm/autograd.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace ctefm {

Parameter& ParamStore::create(const std::string& name, Eigen::Index rows,
                              Eigen::Index cols) {
  if (find(name) != nullptr) throw std::runtime_error("duplicate parameter: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->index = static_cast<int>(items_.size());
  p->value.setZero(rows, cols);
  p->grad.setZero(rows, cols);
  p->m.setZero(rows, cols);
  p->v.setZero(rows, cols);
  items_.push_back(std::move(p));
  return *items_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : items_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
  return const_cast<ParamStore*>(this)->find(name);
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : items_) p->zero_grad();
}

namespace nn {

const Matrix& Var::val() const { return tape_->value_of(idx_); }

double Var::scalar() const {
  const Matrix& v = val();
  if (v.rows() != 1 || v.cols() != 1) throw std::runtime_error("scalar() on non-1x1 node");
  return v(0, 0);
}

Var Tape::leaf(Matrix value, bool track) {
  Node n;
  n.value = std::move(value);
  n.track = track;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  Var v = leaf(p.value, true);
  bound_.emplace_back(v.index(), &p);
  return v;
}

Var Tape::op(Matrix value, std::initializer_list<Var> parents,
             std::function<void(Tape&, int)> backward) {
  bool track = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw std::runtime_error("op mixes tapes");
    track = track || nodes_[static_cast<std::size_t>(p.index())].track;
  }
  Node n;
  n.value = std::move(value);
  n.track = track;
  if (track) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad_of(int i) {
  Node& n = nodes_[static_cast<std::size_t>(i)];
  if (!n.grad_init) {
    n.grad.setZero(n.value.rows(), n.value.cols());
    n.grad_init = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::runtime_error("backward on foreign var");
  const Matrix& rv = value_of(root.index());
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw std::runtime_error("backward root must be scalar");
  }
  grad_of(root.index())(0, 0) = 1.0;
  for (int i = root.index(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.track && n.grad_init && n.backward) n.backward(*this, i);
  }
}

void Tape::collect_param_grads(std::vector<Matrix>& acc, double scale) const {
  for (const auto& [idx, p] : bound_) {
    const Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.grad_init) continue;
    if (p->index < 0 || static_cast<std::size_t>(p->index) >= acc.size()) {
      throw std::runtime_error("collect_param_grads: parameter '" + p->name +
                               "' is not from the expected store");
    }
    Matrix& slot = acc[static_cast<std::size_t>(p->index)];
    if (slot.size() == 0) slot.setZero(p->value.rows(), p->value.cols());
    slot += scale * n.grad;
  }
}

Matrix Tape::param_grad(const Parameter& p) const {
  Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
  for (const auto& [idx, bound] : bound_) {
    if (bound != &p) continue;
    const Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (n.grad_init) g += n.grad;
  }
  return g;
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::runtime_error(std::string(op) + ": shape mismatch " +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
  }
}

Tape& tp(Var a) { return *a.tape(); }

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  const int ia = a.index(), ib = b.index();
  return tp(a).op(a.val() + b.val(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g;
    if (t.tracked(ib)) t.grad_of(ib) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  const int ia = a.index(), ib = b.index();
  return tp(a).op(a.val() - b.val(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g;
    if (t.tracked(ib)) t.grad_of(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  const int ia = a.index(), ib = b.index();
  return tp(a).op(a.val().cwiseProduct(b.val()), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g.cwiseProduct(t.value_of(ib));
    if (t.tracked(ib)) t.grad_of(ib) += g.cwiseProduct(t.value_of(ia));
  });
}

Var div(Var a, Var b) {
  check_same_shape(a, b, "div");
  const int ia = a.index(), ib = b.index();
  return tp(a).op(a.val().cwiseQuotient(b.val()), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& bv = t.value_of(ib);
    if (t.tracked(ia)) t.grad_of(ia) += g.cwiseQuotient(bv);
    if (t.tracked(ib)) {
      t.grad_of(ib) -= g.cwiseProduct(t.value_of(self)).cwiseQuotient(bv);
    }
  });
}

Var scale(Var a, double c) {
  const int ia = a.index();
  return tp(a).op(a.val() * c, {a}, [ia, c](Tape& t, int self) {
    t.grad_of(ia) += c * t.grad_of(self);
  });
}

Var add_scalar(Var a, double c) {
  const int ia = a.index();
  return tp(a).op((a.val().array() + c).matrix(), {a}, [ia](Tape& t, int self) {
    t.grad_of(ia) += t.grad_of(self);
  });
}

Var gelu(Var a) {
  const int ia = a.index();
  Matrix y = a.val().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
  });
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix d = t.value_of(ia).unaryExpr([](double x) {
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    });
    t.grad_of(ia) += t.grad_of(self).cwiseProduct(d);
  });
}

Var tanh_(Var a) {
  const int ia = a.index();
  Matrix y = a.val().array().tanh().matrix();
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value_of(self);
    t.grad_of(ia) += t.grad_of(self).cwiseProduct((1.0 - y.array().square()).matrix());
  });
}

Var sqrt_eps(Var a, double eps) {
  const int ia = a.index();
  Matrix y = (a.val().array() + eps).sqrt().matrix();
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value_of(self);
    t.grad_of(ia) += (t.grad_of(self).array() * 0.5 / y.array()).matrix();
  });
}

Var rsqrt_eps(Var a, double eps) {
  const int ia = a.index();
  Matrix y = (a.val().array() + eps).rsqrt().matrix();
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value_of(self);
    t.grad_of(ia) += (t.grad_of(self).array() * (-0.5) * y.array().cube()).matrix();
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::runtime_error("matmul: inner dims differ");
  const int ia = a.index(), ib = b.index();
  Matrix y;
  y.noalias() = a.val() * b.val();
  return tp(a).op(std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia).noalias() += g * t.value_of(ib).transpose();
    if (t.tracked(ib)) t.grad_of(ib).noalias() += t.value_of(ia).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::runtime_error("matmul_nt: inner dims differ");
  const int ia = a.index(), ib = b.index();
  Matrix y;
  y.noalias() = a.val() * b.val().transpose();
  return tp(a).op(std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia).noalias() += g * t.value_of(ib);
    if (t.tracked(ib)) t.grad_of(ib).noalias() += g.transpose() * t.value_of(ia);
  });
}

Var add_rowvec(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::runtime_error("add_rowvec: bad shapes");
  const int ia = a.index(), ib = b.index();
  Matrix y = a.val().rowwise() + b.val().row(0);
  return tp(a).op(std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g;
    if (t.tracked(ib)) t.grad_of(ib) += g.colwise().sum();
  });
}

Var sub_rowvec(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::runtime_error("sub_rowvec: bad shapes");
  const int ia = a.index(), ib = b.index();
  Matrix y = a.val().rowwise() - b.val().row(0);
  return tp(a).op(std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g;
    if (t.tracked(ib)) t.grad_of(ib) -= g.colwise().sum();
  });
}

Var mul_rowvec(Var a, Var b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::runtime_error("mul_rowvec: bad shapes");
  const int ia = a.index(), ib = b.index();
  Matrix y = (a.val().array().rowwise() * b.val().row(0).array()).matrix();
  return tp(a).op(std::move(y), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) {
      t.grad_of(ia) += (g.array().rowwise() * t.value_of(ib).row(0).array()).matrix();
    }
    if (t.tracked(ib)) {
      t.grad_of(ib) += g.cwiseProduct(t.value_of(ia)).colwise().sum();
    }
  });
}

Var scale_by(Var a, Var s) {
  if (s.rows() != 1 || s.cols() != 1) throw std::runtime_error("scale_by: s must be 1x1");
  const int ia = a.index(), is = s.index();
  return tp(a).op(a.val() * s.val()(0, 0), {a, s}, [ia, is](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g * t.value_of(is)(0, 0);
    if (t.tracked(is)) t.grad_of(is)(0, 0) += g.cwiseProduct(t.value_of(ia)).sum();
  });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::runtime_error("concat_cols: row mismatch");
  const int ia = a.index(), ib = b.index();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Matrix y(a.rows(), ca + cb);
  y.leftCols(ca) = a.val();
  y.rightCols(cb) = b.val();
  return tp(a).op(std::move(y), {a, b}, [ia, ib, ca, cb](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g.leftCols(ca);
    if (t.tracked(ib)) t.grad_of(ib) += g.rightCols(cb);
  });
}

Var concat_rows(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::runtime_error("concat_rows: col mismatch");
  const int ia = a.index(), ib = b.index();
  const Eigen::Index ra = a.rows(), rb = b.rows();
  Matrix y(ra + rb, a.cols());
  y.topRows(ra) = a.val();
  y.bottomRows(rb) = b.val();
  return tp(a).op(std::move(y), {a, b}, [ia, ib, ra, rb](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(ia)) t.grad_of(ia) += g.topRows(ra);
    if (t.tracked(ib)) t.grad_of(ib) += g.bottomRows(rb);
  });
}

Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
  if (c0 < 0 || n < 1 || c0 + n > a.cols()) throw std::runtime_error("slice_cols: out of range");
  const int ia = a.index();
  return tp(a).op(a.val().middleCols(c0, n), {a}, [ia, c0, n](Tape& t, int self) {
    t.grad_of(ia).middleCols(c0, n) += t.grad_of(self);
  });
}

Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
  if (r0 < 0 || n < 1 || r0 + n > a.rows()) throw std::runtime_error("slice_rows: out of range");
  const int ia = a.index();
  return tp(a).op(a.val().middleRows(r0, n), {a}, [ia, r0, n](Tape& t, int self) {
    t.grad_of(ia).middleRows(r0, n) += t.grad_of(self);
  });
}

Var upsample_rows2(Var a) {
  const int ia = a.index();
  const Eigen::Index r = a.rows();
  Matrix y(2 * r, a.cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    y.row(2 * i) = a.val().row(i);
    y.row(2 * i + 1) = a.val().row(i);
  }
  return tp(a).op(std::move(y), {a}, [ia, r](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_of(ia);
    for (Eigen::Index i = 0; i < r; ++i) {
      ga.row(i) += g.row(2 * i) + g.row(2 * i + 1);
    }
  });
}

Var sum_all(Var a) {
  const int ia = a.index();
  Matrix y(1, 1);
  y(0, 0) = a.val().sum();
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    t.grad_of(ia).array() += t.grad_of(self)(0, 0);
  });
}

Var mean_all(Var a) {
  const int ia = a.index();
  const double inv_n = 1.0 / static_cast<double>(a.val().size());
  Matrix y(1, 1);
  y(0, 0) = a.val().sum() * inv_n;
  return tp(a).op(std::move(y), {a}, [ia, inv_n](Tape& t, int self) {
    t.grad_of(ia).array() += t.grad_of(self)(0, 0) * inv_n;
  });
}

Var mean_over_rows(Var a) {
  const int ia = a.index();
  const double inv_r = 1.0 / static_cast<double>(a.rows());
  Matrix y = a.val().colwise().mean();
  return tp(a).op(std::move(y), {a}, [ia, inv_r](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    t.grad_of(ia).rowwise() += (g.row(0) * inv_r).eval();
  });
}

Var softmax_rows(Var a) {
  const int ia = a.index();
  Matrix y = a.val();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  return tp(a).op(std::move(y), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value_of(self);
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_of(ia);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r) += ((g.row(r).array() - dot) * y.row(r).array()).matrix();
    }
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != a.cols() || beta.rows() != 1 ||
      beta.cols() != a.cols()) {
    throw std::runtime_error("layer_norm: gamma/beta must be 1 x cols");
  }
  const int ia = a.index(), ig = gamma.index(), ibt = beta.index();
  const Eigen::Index n = a.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  Matrix xhat(a.rows(), n);
  Vector inv_sigma(a.rows());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double mu = a.val().row(r).mean();
    const double var = (a.val().row(r).array() - mu).square().sum() * inv_n;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(r) = is;
    xhat.row(r) = (a.val().row(r).array() - mu) * is;
  }
  Matrix y = ((xhat.array().rowwise() * gamma.val().row(0).array()).rowwise() +
              beta.val().row(0).array())
                 .matrix();
  auto xhat_sp = std::make_shared<Matrix>(std::move(xhat));
  auto is_sp = std::make_shared<Vector>(std::move(inv_sigma));
  return tp(a).op(std::move(y), {a, gamma, beta},
                  [ia, ig, ibt, inv_n, xhat_sp, is_sp](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& xh = *xhat_sp;
    if (t.tracked(ig)) t.grad_of(ig) += g.cwiseProduct(xh).colwise().sum();
    if (t.tracked(ibt)) t.grad_of(ibt) += g.colwise().sum();
    if (t.tracked(ia)) {
      Matrix& ga = t.grad_of(ia);
      const auto gamma_row = t.value_of(ig).row(0);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const Eigen::RowVectorXd gy = g.row(r).cwiseProduct(gamma_row);
        const double m1 = gy.mean();
        const double m2 = gy.cwiseProduct(xh.row(r)).mean();
        ga.row(r) += ((gy.array() - m1 - xh.row(r).array() * m2) * (*is_sp)(r)).matrix();
      }
    }
  });
}

Var conv1d(Var x, Var w, Var b, int kernel, int stride, int pad) {
  const Eigen::Index T = x.rows();
  const Eigen::Index cin = x.cols();
  if (w.rows() != static_cast<Eigen::Index>(kernel) * cin) {
    throw std::runtime_error("conv1d: weight rows != kernel*cin");
  }
  const Eigen::Index cout = w.cols();
  if (b.rows() != 1 || b.cols() != cout) throw std::runtime_error("conv1d: bad bias shape");
  if (stride < 1 || pad < 0) throw std::runtime_error("conv1d: bad stride/pad");
  const Eigen::Index t_out = (T + 2 * pad - kernel) / stride + 1;
  if (t_out < 1) throw std::runtime_error("conv1d: output would be empty");

  auto col = std::make_shared<Matrix>(t_out, static_cast<Eigen::Index>(kernel) * cin);
  col->setZero();
  for (Eigen::Index to = 0; to < t_out; ++to) {
    for (int tap = 0; tap < kernel; ++tap) {
      const Eigen::Index ti = to * stride + tap - pad;
      if (ti >= 0 && ti < T) {
        col->block(to, static_cast<Eigen::Index>(tap) * cin, 1, cin) = x.val().row(ti);
      }
    }
  }
  Matrix y;
  y.noalias() = (*col) * w.val();
  y.rowwise() += b.val().row(0);

  const int ix = x.index(), iw = w.index(), ib = b.index();
  return tp(x).op(std::move(y), {x, w, b},
                  [ix, iw, ib, col, kernel, stride, pad, T, cin](Tape& t, int self) {
    const Matrix& g = t.grad_of(self);
    if (t.tracked(iw)) t.grad_of(iw).noalias() += col->transpose() * g;
    if (t.tracked(ib)) t.grad_of(ib) += g.colwise().sum();
    if (t.tracked(ix)) {
      Matrix gcol;
      gcol.noalias() = g * t.value_of(iw).transpose();
      Matrix& gx = t.grad_of(ix);
      for (Eigen::Index to = 0; to < gcol.rows(); ++to) {
        for (int tap = 0; tap < kernel; ++tap) {
          const Eigen::Index ti = to * stride + tap - pad;
          if (ti >= 0 && ti < T) {
            gx.row(ti) += gcol.block(to, static_cast<Eigen::Index>(tap) * cin, 1, cin);
          }
        }
      }
    }
  });
}

}  // namespace nn
}  // namespace ctefm
