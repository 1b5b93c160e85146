#include "shev/autodiff.hpp"

#include <cmath>

#include "shev/error.hpp"

namespace shev::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Matrix v) {
  nodes_.push_back(Node{std::move(v), {}, false, nullptr, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Matrix v) {
  nodes_.push_back(Node{std::move(v), {}, true, nullptr, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const Matrix& v, Matrix* sink) {
  nodes_.push_back(Node{{}, {}, sink != nullptr, sink, &v, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward back) {
  bool req = false;
  for (const auto& p : parents) req = req || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
  nodes_.push_back(Node{std::move(value), {}, req, nullptr, nullptr, req ? std::move(back) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward back) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(back));
}

void Tape::accumulate(int id, const Matrix& g) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::accumulate_rows(int id, const std::vector<Eigen::Index>& idx, const Matrix& g) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  for (std::size_t i = 0; i < idx.size(); ++i) n.grad.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
}

void Tape::backward(Var loss) {
  if (loss.tape() != this || loss.value().size() != 1) throw ShapeError("backward() needs a scalar on this tape");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  const auto root = static_cast<std::size_t>(loss.id());
  if (!nodes_[root].needs_grad) return;
  nodes_[root].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.back) {
      n.back(n.grad);
    }
    if (n.sink) *n.sink += n.grad;
  }
}

Matrix Tape::grad(Var v) const {
  const auto& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.size() == 0) return Matrix::Zero(value(v.id()).rows(), value(v.id()).cols());
  return n.grad;
}

namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value() * b.value(), {a, b}, [t, ia, ib](const Matrix& g) {
    if (t->requires_grad(ia)) t->accumulate(ia, g * t->value(ib).transpose());
    if (t->requires_grad(ib)) t->accumulate(ib, t->value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  Tape* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value() + b.value(), {a, b}, [t, ia, ib](const Matrix& g) {
    t->accumulate(ia, g);
    t->accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  Tape* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value() - b.value(), {a, b}, [t, ia, ib](const Matrix& g) {
    t->accumulate(ia, g);
    t->accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  Tape* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value().cwiseProduct(b.value()), {a, b}, [t, ia, ib](const Matrix& g) {
    if (t->requires_grad(ia)) t->accumulate(ia, g.cwiseProduct(t->value(ib)));
    if (t->requires_grad(ib)) t->accumulate(ib, g.cwiseProduct(t->value(ia)));
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value() * s, {a}, [t, ia, s](const Matrix& g) { t->accumulate(ia, g * s); });
}

Var add_scalar(Var a, double s) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value().array() + s, {a}, [t, ia](const Matrix& g) { t->accumulate(ia, g); });
}

Var add_rowvec(Var x, Var b) {
  if (b.rows() != 1 || b.cols() != x.cols()) throw ShapeError("add_rowvec: bias must be 1 x cols");
  Tape* t = x.tape();
  const int ix = x.id(), ib = b.id();
  Matrix out = x.value().rowwise() + b.value().row(0);
  return t->push(std::move(out), {x, b}, [t, ix, ib](const Matrix& g) {
    t->accumulate(ix, g);
    if (t->requires_grad(ib)) t->accumulate(ib, g.colwise().sum());
  });
}

Var relu(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value().cwiseMax(0.0), {a}, [t, ia](const Matrix& g) {
    t->accumulate(ia, (t->value(ia).array() > 0.0).select(g, 0.0));
  });
}

Var tanh(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  Matrix y = a.value().array().tanh();
  Matrix dy = (1.0 - y.array().square()).matrix();
  return t->push(std::move(y), {a}, [t, ia, dy = std::move(dy)](const Matrix& g) {
    t->accumulate(ia, g.cwiseProduct(dy));
  });
}

Var sigmoid(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  Matrix y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix dy = y.array() * (1.0 - y.array());
  return t->push(std::move(y), {a}, [t, ia, dy = std::move(dy)](const Matrix& g) {
    t->accumulate(ia, g.cwiseProduct(dy));
  });
}

Var exp(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  Matrix y = a.value().array().exp();
  Matrix yc = y;
  return t->push(std::move(y), {a}, [t, ia, yc = std::move(yc)](const Matrix& g) {
    t->accumulate(ia, g.cwiseProduct(yc));
  });
}

Var square(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value().array().square(), {a}, [t, ia](const Matrix& g) {
    t->accumulate(ia, 2.0 * g.cwiseProduct(t->value(ia)));
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value().cwiseMax(lo).cwiseMin(hi), {a}, [t, ia, lo, hi](const Matrix& g) {
    const auto& x = t->value(ia).array();
    t->accumulate(ia, ((x >= lo) && (x <= hi)).select(g, 0.0));
  });
}

Var minimum(Var a, Var b) {
  same_shape(a, b, "minimum");
  Tape* t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t->push(a.value().cwiseMin(b.value()), {a, b}, [t, ia, ib](const Matrix& g) {
    const auto pick_a = (t->value(ia).array() <= t->value(ib).array());
    t->accumulate(ia, pick_a.select(g, 0.0));
    t->accumulate(ib, pick_a.select(0.0, g));
  });
}

Var sum(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix s(1, 1);
  s(0, 0) = a.value().sum();
  return t->push(std::move(s), {a}, [t, ia, r, c](const Matrix& g) {
    t->accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  const auto c = a.cols();
  return t->push(a.value().rowwise().sum(), {a}, [t, ia, c](const Matrix& g) {
    t->accumulate(ia, g.replicate(1, c));
  });
}

Var transpose(Var a) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->push(a.value().transpose(), {a}, [t, ia](const Matrix& g) { t->accumulate(ia, g.transpose()); });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  Tape* t = a.tape();
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return t->push(a.value().middleCols(start, count), {a}, [t, ia, r, c, start, count](const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleCols(start, count) = g;
    t->accumulate(ia, full);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  Tape* t = a.tape();
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return t->push(a.value().middleRows(start, count), {a}, [t, ia, r, c, start, count](const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleRows(start, count) = g;
    t->accumulate(ia, full);
  });
}

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("hcat of nothing");
  Tape* t = parts[0].tape();
  const auto r = parts[0].rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("hcat: row counts differ");
    c += p.cols();
  }
  Matrix out(r, c);
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  return t->push(std::move(out), parts, [t, ids, widths](const Matrix& g) {
    Eigen::Index o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t->requires_grad(ids[i])) t->accumulate(ids[i], g.middleCols(o, widths[i]));
      o += widths[i];
    }
  });
}

Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("vcat of nothing");
  Tape* t = parts[0].tape();
  const auto c = parts[0].cols();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("vcat: column counts differ");
    r += p.rows();
  }
  Matrix out(r, c);
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  return t->push(std::move(out), parts, [t, ids, heights](const Matrix& g) {
    Eigen::Index o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t->requires_grad(ids[i])) t->accumulate(ids[i], g.middleRows(o, heights[i]));
      o += heights[i];
    }
  });
}

Var gather_rows(Var a, std::vector<Eigen::Index> idx) {
  Tape* t = a.tape();
  const int ia = a.id();
  const auto r = a.rows(), c = a.cols();
  Matrix out(static_cast<Eigen::Index>(idx.size()), c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= r) throw ShapeError("gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return t->push(std::move(out), {a}, [t, ia, idx = std::move(idx)](const Matrix& g) {
    t->accumulate_rows(ia, idx, g);
  });
}

Var squash_log_det(Var u, double eps) {
  Tape* t = u.tape();
  const int iu = u.id();
  const Eigen::ArrayXXd th = u.value().array().tanh();
  const Eigen::ArrayXXd inner = 1.0 - th.square() + eps;
  Matrix y = inner.log().matrix();
  // d/du log(1 - tanh^2 + eps) = -2 tanh (1 - tanh^2) / (1 - tanh^2 + eps)
  Matrix dy = (-2.0 * th * (1.0 - th.square()) / inner).matrix();
  return t->push(std::move(y), {u}, [t, iu, dy = std::move(dy)](const Matrix& g) {
    t->accumulate(iu, g.cwiseProduct(dy));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: gain/bias must be 1 x d");
  Tape* t = x.tape();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const Eigen::RowVectorXd c = x.value().row(i).array() - mu;
    const double var = c.squaredNorm() / static_cast<double>(d);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = c * inv_std(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  return t->push(std::move(y), {x, gain, bias},
                 [t, ix, ig, ib, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g) {
                   if (t->requires_grad(ig)) t->accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                   if (t->requires_grad(ib)) t->accumulate(ib, g.colwise().sum());
                   if (!t->requires_grad(ix)) return;
                   const Matrix gx = (g.array().rowwise() * t->value(ig).row(0).array()).matrix();
                   Matrix dx(gx.rows(), d);
                   for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                     const double m1 = gx.row(i).mean();
                     const double m2 = gx.row(i).dot(xhat.row(i)) / static_cast<double>(d);
                     dx.row(i) = inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2);
                   }
                   t->accumulate(ix, dx);
                 });
}

Var causal_attention(Var q, Var k, Var v, int batch, int seq, int heads) {
  same_shape(q, k, "causal_attention");
  same_shape(q, v, "causal_attention");
  const auto width = q.cols();
  if (q.rows() != static_cast<Eigen::Index>(batch) * seq) throw ShapeError("causal_attention: rows != batch*seq");
  if (heads <= 0 || width % heads != 0) throw ShapeError("causal_attention: heads must divide width");
  const Eigen::Index dh = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tape* t = q.tape();
  const int iq = q.id(), ik = k.id(), iv = v.id();

  Matrix out(q.rows(), width);
  // Attention weights per (batch, head), kept for the backward pass.
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
    for (int h = 0; h < heads; ++h) {
      const auto Q = q.value().block(r0, h * dh, seq, dh);
      const auto K = k.value().block(r0, h * dh, seq, dh);
      const auto V = v.value().block(r0, h * dh, seq, dh);
      Matrix s = (Q * K.transpose()) * inv_sqrt;
      Matrix p = Matrix::Zero(seq, seq);
      for (int i = 0; i < seq; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
        for (int j = 0; j <= i; ++j) p(i, j) /= z;
      }
      out.block(r0, h * dh, seq, dh) = p * V;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return t->push(std::move(out), {q, k, v},
                 [t, iq, ik, iv, batch, seq, heads, dh, inv_sqrt, probs = std::move(probs)](const Matrix& g) {
                   const auto& Qa = t->value(iq);
                   const auto& Ka = t->value(ik);
                   const auto& Va = t->value(iv);
                   Matrix dq = Matrix::Zero(Qa.rows(), Qa.cols());
                   Matrix dk = Matrix::Zero(Qa.rows(), Qa.cols());
                   Matrix dv = Matrix::Zero(Qa.rows(), Qa.cols());
                   for (int b = 0; b < batch; ++b) {
                     const Eigen::Index r0 = static_cast<Eigen::Index>(b) * seq;
                     for (int h = 0; h < heads; ++h) {
                       const auto& p = probs[static_cast<std::size_t>(b * heads + h)];
                       const auto G = g.block(r0, h * dh, seq, dh);
                       const auto Q = Qa.block(r0, h * dh, seq, dh);
                       const auto K = Ka.block(r0, h * dh, seq, dh);
                       const auto V = Va.block(r0, h * dh, seq, dh);
                       dv.block(r0, h * dh, seq, dh) = p.transpose() * G;
                       const Matrix dp = G * V.transpose();
                       Matrix ds = p.cwiseProduct(dp);
                       const Eigen::VectorXd rs = ds.rowwise().sum();
                       ds -= (p.array().colwise() * rs.array()).matrix();
                       dq.block(r0, h * dh, seq, dh) = ds * K * inv_sqrt;
                       dk.block(r0, h * dh, seq, dh) = ds.transpose() * Q * inv_sqrt;
                     }
                   }
                   t->accumulate(iq, dq);
                   t->accumulate(ik, dk);
                   t->accumulate(iv, dv);
                 });
}

}  // namespace shev::ad
