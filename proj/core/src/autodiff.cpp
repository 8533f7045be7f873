#include "meanvc/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace meanvc {

namespace {

constexpr double kLnEps = 1e-5;  // layer norm epsilon

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
}

// In-place rotary rotation of a [n, dh] buffer; sign -1 inverts.
void apply_rope(double* buf, std::size_t n, std::size_t dh,
                const std::vector<int>& pos, double sign) {
  const std::size_t half = dh / 2;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = buf + i * dh;
    const double p = static_cast<double>(pos[i]);
    for (std::size_t k = 0; k < half; ++k) {
      const double theta = p * std::pow(10000.0, -2.0 * static_cast<double>(k) /
                                                     static_cast<double>(dh));
      const double c = std::cos(theta), s = sign * std::sin(theta);
      const double x0 = row[2 * k], x1 = row[2 * k + 1];
      row[2 * k] = x0 * c - x1 * s;
      row[2 * k + 1] = x0 * s + x1 * c;
    }
  }
}

}  // namespace

Var Graph::push(Node n) {
  if (forward_mode_ && n.tangent.empty()) compute_tangent(n);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor v) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  if (forward_mode_) n.tangent = Tensor::zeros_like(n.value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::leaf(Tensor v, Tensor tangent) {
  require_same_shape(v, tangent, "leaf");
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(v);
  n.tangent = std::move(tangent);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::add(Var a, Var b) {
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.value = meanvc::add(value(a), value(b));
  return push(std::move(n));
}

Var Graph::sub(Var a, Var b) {
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.value = meanvc::sub(value(a), value(b));
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.id, b.id};
  n.value = meanvc::mul(value(a), value(b));
  return push(std::move(n));
}

Var Graph::affine(Var x, double a, double b) {
  Node n;
  n.op = Op::kAffine;
  n.inputs = {x.id};
  n.a = a;
  n.b = b;
  n.value = value(x);
  for (std::size_t i = 0; i < n.value.size(); ++i)
    n.value[i] = a * n.value[i] + b;
  return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  n.value = meanvc::matmul(value(a), value(b));
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  Node n;
  n.op = Op::kMatmulNT;
  n.inputs = {a.id, b.id};
  n.value = meanvc::matmul_nt(value(a), value(b));
  return push(std::move(n));
}

Var Graph::add_row(Var x, Var v) {
  const Tensor& xv = value(x);
  const Tensor& vv = value(v);
  if (vv.cols() != xv.cols()) {
    throw std::invalid_argument("add_row: dim mismatch");
  }
  Node n;
  n.op = Op::kAddRow;
  n.inputs = {x.id, v.id};
  n.value = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) n.value.at(i, j) += vv[j];
  return push(std::move(n));
}

Var Graph::mul_row(Var x, Var v) {
  const Tensor& xv = value(x);
  const Tensor& vv = value(v);
  if (vv.cols() != xv.cols()) {
    throw std::invalid_argument("mul_row: dim mismatch");
  }
  Node n;
  n.op = Op::kMulRow;
  n.inputs = {x.id, v.id};
  n.value = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) n.value.at(i, j) *= vv[j];
  return push(std::move(n));
}

Var Graph::scale_rows(Var x, Var m) {
  const Tensor& xv = value(x);
  const Tensor& mv = value(m);
  if (mv.size() != xv.rows()) {
    throw std::invalid_argument("scale_rows: row count mismatch");
  }
  Node n;
  n.op = Op::kScaleRows;
  n.inputs = {x.id, m.id};
  n.value = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) n.value.at(i, j) *= mv[i];
  return push(std::move(n));
}

Var Graph::slice_cols(Var x, std::size_t c0, std::size_t c1) {
  const Tensor& xv = value(x);
  if (c1 > xv.cols() || c0 >= c1) {
    throw std::invalid_argument("slice_cols: bad range");
  }
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {x.id};
  n.i0 = static_cast<int>(c0);
  n.i1 = static_cast<int>(c1);
  n.value = Tensor({xv.rows(), c1 - c0});
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) n.value.at(i, j - c0) = xv.at(i, j);
  return push(std::move(n));
}

Var Graph::slice_rows(Var x, std::size_t r0, std::size_t r1) {
  const Tensor& xv = value(x);
  if (r1 > xv.rows() || r0 >= r1) {
    throw std::invalid_argument("slice_rows: bad range");
  }
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {x.id};
  n.i0 = static_cast<int>(r0);
  n.i1 = static_cast<int>(r1);
  n.value = Tensor({r1 - r0, xv.cols()});
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) n.value.at(i - r0, j) = xv.at(i, j);
  return push(std::move(n));
}

Var Graph::concat_rows(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.cols() != bv.cols()) {
    throw std::invalid_argument("concat_rows: col mismatch");
  }
  Node n;
  n.op = Op::kConcatRows;
  n.inputs = {a.id, b.id};
  n.i0 = static_cast<int>(av.rows());
  n.value = Tensor({av.rows() + bv.rows(), av.cols()});
  std::size_t d = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) n.value.at(i, j) = av.at(i, j);
  for (std::size_t i = 0; i < bv.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) n.value.at(av.rows() + i, j) = bv.at(i, j);
  return push(std::move(n));
}

Var Graph::concat_cols(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rows() != bv.rows()) {
    throw std::invalid_argument("concat_cols: row mismatch");
  }
  Node n;
  n.op = Op::kConcatCols;
  n.inputs = {a.id, b.id};
  n.i0 = static_cast<int>(av.cols());
  n.value = Tensor({av.rows(), av.cols() + bv.cols()});
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < av.cols(); ++j) n.value.at(i, j) = av.at(i, j);
    for (std::size_t j = 0; j < bv.cols(); ++j)
      n.value.at(i, av.cols() + j) = bv.at(i, j);
  }
  return push(std::move(n));
}

Var Graph::layer_norm(Var x) {
  const Tensor& xv = value(x);
  const std::size_t rows = xv.rows(), d = xv.cols();
  Node n;
  n.op = Op::kLayerNorm;
  n.inputs = {x.id};
  n.value = Tensor({rows, d});
  n.saved.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv.at(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv.at(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    n.saved[i] = inv;
    for (std::size_t j = 0; j < d; ++j)
      n.value.at(i, j) = (xv.at(i, j) - mu) * inv;
  }
  return push(std::move(n));
}

Var Graph::silu(Var x) {
  Node n;
  n.op = Op::kSilu;
  n.inputs = {x.id};
  n.value = value(x);
  for (std::size_t i = 0; i < n.value.size(); ++i)
    n.value[i] *= sigmoid(n.value[i]);
  return push(std::move(n));
}

Var Graph::attention(Var q, Var k, Var v, int heads,
                     std::vector<std::uint8_t> mask, std::vector<int> qpos,
                     std::vector<int> kpos, bool rope) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  const std::size_t nq = Q.rows(), nk = K.rows(), D = Q.cols();
  if (K.cols() != D || V.cols() != D || V.rows() != nk) {
    throw std::invalid_argument("attention: projection dim mismatch");
  }
  if (heads <= 0 || D % static_cast<std::size_t>(heads) != 0) {
    throw std::invalid_argument("attention: dim not divisible by heads");
  }
  const std::size_t dh = D / static_cast<std::size_t>(heads);
  if (rope && dh % 2 != 0) {
    throw std::invalid_argument("attention: rotary needs even head dim");
  }
  if (!mask.empty() && mask.size() != nq * nk) {
    throw std::invalid_argument("attention: mask size mismatch");
  }
  if (qpos.size() != nq || kpos.size() != nk) {
    throw std::invalid_argument("attention: position length mismatch");
  }
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  Node n;
  n.op = Op::kAttention;
  n.inputs = {q.id, k.id, v.id};
  n.i0 = heads;
  n.rope = rope;
  n.mask = std::move(mask);
  n.qpos = std::move(qpos);
  n.kpos = std::move(kpos);
  n.value = Tensor({nq, D});
  const std::size_t head_stride = nq * dh + nk * dh + nq * nk;
  n.saved.assign(static_cast<std::size_t>(heads) * head_stride, 0.0);

  for (int h = 0; h < heads; ++h) {
    double* qr = n.saved.data() + static_cast<std::size_t>(h) * head_stride;
    double* kr = qr + nq * dh;
    double* P = kr + nk * dh;
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < dh; ++j)
        qr[i * dh + j] = Q.at(i, static_cast<std::size_t>(h) * dh + j);
    for (std::size_t i = 0; i < nk; ++i)
      for (std::size_t j = 0; j < dh; ++j)
        kr[i * dh + j] = K.at(i, static_cast<std::size_t>(h) * dh + j);
    if (rope) {
      apply_rope(qr, nq, dh, n.qpos, 1.0);
      apply_rope(kr, nk, dh, n.kpos, 1.0);
    }
    for (std::size_t i = 0; i < nq; ++i) {
      double mx = -1e300;
      bool any = false;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!n.mask.empty() && !n.mask[i * nk + j]) continue;
        any = true;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c)
          s += qr[i * dh + c] * kr[j * dh + c];
        s *= scl;
        P[i * nk + j] = s;
        if (s > mx) mx = s;
      }
      if (!any) {
        throw std::invalid_argument("attention: query with no permitted key");
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        if (!n.mask.empty() && !n.mask[i * nk + j]) {
          P[i * nk + j] = 0.0;
          continue;
        }
        const double e = std::exp(P[i * nk + j] - mx);
        P[i * nk + j] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < nk; ++j) P[i * nk + j] /= denom;
      for (std::size_t c = 0; c < dh; ++c) {
        double o = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          const double p = P[i * nk + j];
          if (p != 0.0) o += p * V.at(j, static_cast<std::size_t>(h) * dh + c);
        }
        n.value.at(i, static_cast<std::size_t>(h) * dh + c) = o;
      }
    }
  }
  return push(std::move(n));
}

Var Graph::time_embed(Var t, std::size_t dim) {
  const Tensor& tv = value(t);
  if (tv.size() != 1 || dim % 2 != 0) {
    throw std::invalid_argument("time_embed: scalar input and even dim required");
  }
  const std::size_t half = dim / 2;
  Node n;
  n.op = Op::kTimeEmbed;
  n.inputs = {t.id};
  n.i0 = static_cast<int>(dim);
  n.value = Tensor({1, dim});
  const double tval = tv[0];
  for (std::size_t k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                              static_cast<double>(half));
    n.value[k] = std::sin(tval * f);
    n.value[half + k] = std::cos(tval * f);
  }
  return push(std::move(n));
}

Var Graph::sum_all(Var x) {
  Node n;
  n.op = Op::kSumAll;
  n.inputs = {x.id};
  n.value = Tensor::scalar(meanvc::sum(value(x)));
  return push(std::move(n));
}

Var Graph::mean_all(Var x) {
  const double inv = 1.0 / static_cast<double>(value(x).size());
  return affine(sum_all(x), inv, 0.0);
}

Var Graph::sg(Var x) {
  Node n;
  n.op = Op::kStopGrad;
  n.inputs = {x.id};
  n.value = value(x);
  if (forward_mode_) n.tangent = Tensor::zeros_like(n.value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Graph::compute_tangent(Node& n) {
  auto tin = [&](int idx) -> const Tensor& { return nodes_[n.inputs[idx]].tangent; };
  auto vin = [&](int idx) -> const Tensor& { return nodes_[n.inputs[idx]].value; };
  switch (n.op) {
    case Op::kAdd:
      n.tangent = meanvc::add(tin(0), tin(1));
      break;
    case Op::kSub:
      n.tangent = meanvc::sub(tin(0), tin(1));
      break;
    case Op::kMul:
      n.tangent = meanvc::add(meanvc::mul(tin(0), vin(1)),
                              meanvc::mul(vin(0), tin(1)));
      break;
    case Op::kAffine:
      n.tangent = meanvc::scale(tin(0), n.a);
      break;
    case Op::kMatmul:
      n.tangent = meanvc::add(meanvc::matmul(tin(0), vin(1)),
                              meanvc::matmul(vin(0), tin(1)));
      break;
    case Op::kMatmulNT:
      n.tangent = meanvc::add(meanvc::matmul_nt(tin(0), vin(1)),
                              meanvc::matmul_nt(vin(0), tin(1)));
      break;
    case Op::kAddRow: {
      n.tangent = tin(0);
      const Tensor& dv = tin(1);
      for (std::size_t i = 0; i < n.tangent.rows(); ++i)
        for (std::size_t j = 0; j < n.tangent.cols(); ++j)
          n.tangent.at(i, j) += dv[j];
      break;
    }
    case Op::kMulRow: {
      const Tensor& x = vin(0);
      const Tensor& v = vin(1);
      const Tensor& dx = tin(0);
      const Tensor& dv = tin(1);
      n.tangent = Tensor::zeros_like(n.value);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
          n.tangent.at(i, j) = dx.at(i, j) * v[j] + x.at(i, j) * dv[j];
      break;
    }
    case Op::kScaleRows: {
      const Tensor& x = vin(0);
      const Tensor& m = vin(1);
      const Tensor& dx = tin(0);
      const Tensor& dm = tin(1);
      n.tangent = Tensor::zeros_like(n.value);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
          n.tangent.at(i, j) = dx.at(i, j) * m[i] + x.at(i, j) * dm[i];
      break;
    }
    case Op::kSliceCols: {
      const Tensor& dx = tin(0);
      const std::size_t c0 = static_cast<std::size_t>(n.i0);
      n.tangent = Tensor::zeros_like(n.value);
      for (std::size_t i = 0; i < n.value.rows(); ++i)
        for (std::size_t j = 0; j < n.value.cols(); ++j)
          n.tangent.at(i, j) = dx.at(i, c0 + j);
      break;
    }
    case Op::kSliceRows: {
      const Tensor& dx = tin(0);
      const std::size_t r0 = static_cast<std::size_t>(n.i0);
      n.tangent = Tensor::zeros_like(n.value);
      for (std::size_t i = 0; i < n.value.rows(); ++i)
        for (std::size_t j = 0; j < n.value.cols(); ++j)
          n.tangent.at(i, j) = dx.at(r0 + i, j);
      break;
    }
    case Op::kConcatRows: {
      const Tensor& da = tin(0);
      const Tensor& db = tin(1);
      n.tangent = Tensor::zeros_like(n.value);
      const std::size_t ra = da.rows(), d = da.cols();
      for (std::size_t i = 0; i < ra; ++i)
        for (std::size_t j = 0; j < d; ++j) n.tangent.at(i, j) = da.at(i, j);
      for (std::size_t i = 0; i < db.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          n.tangent.at(ra + i, j) = db.at(i, j);
      break;
    }
    case Op::kConcatCols: {
      const Tensor& da = tin(0);
      const Tensor& db = tin(1);
      n.tangent = Tensor::zeros_like(n.value);
      const std::size_t ca = da.cols();
      for (std::size_t i = 0; i < n.value.rows(); ++i) {
        for (std::size_t j = 0; j < ca; ++j) n.tangent.at(i, j) = da.at(i, j);
        for (std::size_t j = 0; j < db.cols(); ++j)
          n.tangent.at(i, ca + j) = db.at(i, j);
      }
      break;
    }
    case Op::kLayerNorm: {
      const Tensor& dx = tin(0);
      const Tensor& y = n.value;
      const std::size_t rows = y.rows(), d = y.cols();
      n.tangent = Tensor({rows, d});
      for (std::size_t i = 0; i < rows; ++i) {
        double mdx = 0.0, mydx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          mdx += dx.at(i, j);
          mydx += y.at(i, j) * dx.at(i, j);
        }
        mdx /= static_cast<double>(d);
        mydx /= static_cast<double>(d);
        const double inv = n.saved[i];
        for (std::size_t j = 0; j < d; ++j)
          n.tangent.at(i, j) = inv * (dx.at(i, j) - mdx - y.at(i, j) * mydx);
      }
      break;
    }
    case Op::kSilu: {
      const Tensor& x = vin(0);
      const Tensor& dx = tin(0);
      n.tangent = Tensor::zeros_like(n.value);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        n.tangent[i] = dx[i] * s * (1.0 + x[i] * (1.0 - s));
      }
      break;
    }
    case Op::kAttention: {
      const Tensor& V = vin(2);
      const Tensor& dQ = tin(0);
      const Tensor& dK = tin(1);
      const Tensor& dV = tin(2);
      const std::size_t nq = n.value.rows(), D = n.value.cols();
      const std::size_t nk = V.rows();
      const int heads = n.i0;
      const std::size_t dh = D / static_cast<std::size_t>(heads);
      const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
      const std::size_t head_stride = nq * dh + nk * dh + nq * nk;
      n.tangent = Tensor({nq, D});
      std::vector<double> dqr(nq * dh), dkr(nk * dh), ds(nk);
      for (int h = 0; h < heads; ++h) {
        const double* qr =
            n.saved.data() + static_cast<std::size_t>(h) * head_stride;
        const double* kr = qr + nq * dh;
        const double* P = kr + nk * dh;
        for (std::size_t i = 0; i < nq; ++i)
          for (std::size_t j = 0; j < dh; ++j)
            dqr[i * dh + j] = dQ.at(i, static_cast<std::size_t>(h) * dh + j);
        for (std::size_t i = 0; i < nk; ++i)
          for (std::size_t j = 0; j < dh; ++j)
            dkr[i * dh + j] = dK.at(i, static_cast<std::size_t>(h) * dh + j);
        if (n.rope) {
          apply_rope(dqr.data(), nq, dh, n.qpos, 1.0);
          apply_rope(dkr.data(), nk, dh, n.kpos, 1.0);
        }
        for (std::size_t i = 0; i < nq; ++i) {
          double pds = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            if (P[i * nk + j] == 0.0) {
              ds[j] = 0.0;
              continue;
            }
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += dqr[i * dh + c] * kr[j * dh + c] +
                   qr[i * dh + c] * dkr[j * dh + c];
            }
            ds[j] = s * scl;
            pds += P[i * nk + j] * ds[j];
          }
          for (std::size_t c = 0; c < dh; ++c) {
            double o = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              const double p = P[i * nk + j];
              if (p == 0.0) continue;
              const double dp = p * (ds[j] - pds);
              o += dp * V.at(j, static_cast<std::size_t>(h) * dh + c) +
                   p * dV.at(j, static_cast<std::size_t>(h) * dh + c);
            }
            n.tangent.at(i, static_cast<std::size_t>(h) * dh + c) = o;
          }
        }
      }
      break;
    }
    case Op::kTimeEmbed: {
      const double dt = tin(0)[0];
      const double tval = vin(0)[0];
      const std::size_t dim = static_cast<std::size_t>(n.i0);
      const std::size_t half = dim / 2;
      n.tangent = Tensor({1, dim});
      for (std::size_t k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                  static_cast<double>(half));
        n.tangent[k] = dt * f * std::cos(tval * f);
        n.tangent[half + k] = -dt * f * std::sin(tval * f);
      }
      break;
    }
    case Op::kSumAll:
      n.tangent = Tensor::scalar(meanvc::sum(tin(0)));
      break;
    case Op::kStopGrad:
    case Op::kLeaf:
      n.tangent = Tensor::zeros_like(n.value);
      break;
  }
}

const Tensor& Graph::grad(Var v) const { return nodes_[v.id].grad; }

void Graph::backward(Var loss, double seed) {
  Node& ln = nodes_[loss.id];
  if (ln.value.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  if (!std::isfinite(ln.value[0])) {
    throw std::runtime_error("backward: non-finite loss value");
  }
  ensure_grad(ln);
  ln.grad[0] += seed;
  for (int id = loss.id; id >= 0; --id) {
    if (!nodes_[id].grad.empty()) backprop_node(id);
  }
}

void Graph::backprop_node(int id) {
  Node& n = nodes_[id];
  const Tensor& g = n.grad;
  auto in = [&](int idx) -> Node& { return nodes_[n.inputs[idx]]; };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kStopGrad:
      break;
    case Op::kAdd:
      ensure_grad(in(0));
      add_inplace(in(0).grad, g);
      ensure_grad(in(1));
      add_inplace(in(1).grad, g);
      break;
    case Op::kSub:
      ensure_grad(in(0));
      add_inplace(in(0).grad, g);
      ensure_grad(in(1));
      axpy_inplace(in(1).grad, -1.0, g);
      break;
    case Op::kMul:
      ensure_grad(in(0));
      add_inplace(in(0).grad, meanvc::mul(g, in(1).value));
      ensure_grad(in(1));
      add_inplace(in(1).grad, meanvc::mul(g, in(0).value));
      break;
    case Op::kAffine:
      ensure_grad(in(0));
      axpy_inplace(in(0).grad, n.a, g);
      break;
    case Op::kMatmul:
      ensure_grad(in(0));
      add_inplace(in(0).grad, meanvc::matmul_nt(g, in(1).value));
      ensure_grad(in(1));
      add_inplace(in(1).grad, meanvc::matmul_tn(in(0).value, g));
      break;
    case Op::kMatmulNT:
      ensure_grad(in(0));
      add_inplace(in(0).grad, meanvc::matmul(g, in(1).value));
      ensure_grad(in(1));
      add_inplace(in(1).grad, meanvc::matmul_tn(g, in(0).value));
      break;
    case Op::kAddRow: {
      ensure_grad(in(0));
      add_inplace(in(0).grad, g);
      ensure_grad(in(1));
      Tensor& gv = in(1).grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gv[j] += g.at(i, j);
      break;
    }
    case Op::kMulRow: {
      const Tensor& x = in(0).value;
      const Tensor& v = in(1).value;
      ensure_grad(in(0));
      ensure_grad(in(1));
      Tensor& gx = in(0).grad;
      Tensor& gv = in(1).grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          gx.at(i, j) += g.at(i, j) * v[j];
          gv[j] += g.at(i, j) * x.at(i, j);
        }
      break;
    }
    case Op::kScaleRows: {
      const Tensor& x = in(0).value;
      const Tensor& m = in(1).value;
      ensure_grad(in(0));
      ensure_grad(in(1));
      Tensor& gx = in(0).grad;
      Tensor& gm = in(1).grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          gx.at(i, j) += g.at(i, j) * m[i];
          gm[i] += g.at(i, j) * x.at(i, j);
        }
      break;
    }
    case Op::kSliceCols: {
      ensure_grad(in(0));
      Tensor& gx = in(0).grad;
      const std::size_t c0 = static_cast<std::size_t>(n.i0);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
          gx.at(i, c0 + j) += g.at(i, j);
      break;
    }
    case Op::kSliceRows: {
      ensure_grad(in(0));
      Tensor& gx = in(0).grad;
      const std::size_t r0 = static_cast<std::size_t>(n.i0);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
          gx.at(r0 + i, j) += g.at(i, j);
      break;
    }
    case Op::kConcatRows: {
      ensure_grad(in(0));
      ensure_grad(in(1));
      const std::size_t ra = static_cast<std::size_t>(n.i0);
      Tensor& ga = in(0).grad;
      Tensor& gb = in(1).grad;
      for (std::size_t i = 0; i < ra; ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga.at(i, j) += g.at(i, j);
      for (std::size_t i = ra; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
          gb.at(i - ra, j) += g.at(i, j);
      break;
    }
    case Op::kConcatCols: {
      ensure_grad(in(0));
      ensure_grad(in(1));
      const std::size_t ca = static_cast<std::size_t>(n.i0);
      Tensor& ga = in(0).grad;
      Tensor& gb = in(1).grad;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < ca; ++j) ga.at(i, j) += g.at(i, j);
        for (std::size_t j = ca; j < g.cols(); ++j)
          gb.at(i, j - ca) += g.at(i, j);
      }
      break;
    }
    case Op::kLayerNorm: {
      ensure_grad(in(0));
      Tensor& gx = in(0).grad;
      const Tensor& y = n.value;
      const std::size_t rows = y.rows(), d = y.cols();
      for (std::size_t i = 0; i < rows; ++i) {
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          mg += g.at(i, j);
          mgy += g.at(i, j) * y.at(i, j);
        }
        mg /= static_cast<double>(d);
        mgy /= static_cast<double>(d);
        const double inv = n.saved[i];
        for (std::size_t j = 0; j < d; ++j)
          gx.at(i, j) += inv * (g.at(i, j) - mg - y.at(i, j) * mgy);
      }
      break;
    }
    case Op::kSilu: {
      ensure_grad(in(0));
      Tensor& gx = in(0).grad;
      const Tensor& x = in(0).value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        gx[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
      }
      break;
    }
    case Op::kAttention: {
      ensure_grad(in(0));
      ensure_grad(in(1));
      ensure_grad(in(2));
      Tensor& gQ = in(0).grad;
      Tensor& gK = in(1).grad;
      Tensor& gV = in(2).grad;
      const Tensor& V = in(2).value;
      const std::size_t nq = n.value.rows(), D = n.value.cols();
      const std::size_t nk = V.rows();
      const int heads = n.i0;
      const std::size_t dh = D / static_cast<std::size_t>(heads);
      const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
      const std::size_t head_stride = nq * dh + nk * dh + nq * nk;
      std::vector<double> gqr(nq * dh), gkr(nk * dh), gs(nk);
      for (int h = 0; h < heads; ++h) {
        const double* qr =
            n.saved.data() + static_cast<std::size_t>(h) * head_stride;
        const double* kr = qr + nq * dh;
        const double* P = kr + nk * dh;
        std::fill(gqr.begin(), gqr.end(), 0.0);
        std::fill(gkr.begin(), gkr.end(), 0.0);
        for (std::size_t i = 0; i < nq; ++i) {
          double pdot = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            const double p = P[i * nk + j];
            if (p == 0.0) {
              gs[j] = 0.0;
              continue;
            }
            double gp = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              const double gout = g.at(i, static_cast<std::size_t>(h) * dh + c);
              gp += gout * V.at(j, static_cast<std::size_t>(h) * dh + c);
              gV.at(j, static_cast<std::size_t>(h) * dh + c) += p * gout;
            }
            gs[j] = gp;
            pdot += p * gp;
          }
          for (std::size_t j = 0; j < nk; ++j) {
            const double p = P[i * nk + j];
            if (p == 0.0) continue;
            const double gsij = scl * p * (gs[j] - pdot);
            for (std::size_t c = 0; c < dh; ++c) {
              gqr[i * dh + c] += gsij * kr[j * dh + c];
              gkr[j * dh + c] += gsij * qr[i * dh + c];
            }
          }
        }
        if (n.rope) {
          apply_rope(gqr.data(), nq, dh, n.qpos, -1.0);
          apply_rope(gkr.data(), nk, dh, n.kpos, -1.0);
        }
        for (std::size_t i = 0; i < nq; ++i)
          for (std::size_t c = 0; c < dh; ++c)
            gQ.at(i, static_cast<std::size_t>(h) * dh + c) += gqr[i * dh + c];
        for (std::size_t i = 0; i < nk; ++i)
          for (std::size_t c = 0; c < dh; ++c)
            gK.at(i, static_cast<std::size_t>(h) * dh + c) += gkr[i * dh + c];
      }
      break;
    }
    case Op::kTimeEmbed: {
      ensure_grad(in(0));
      const double tval = in(0).value[0];
      const std::size_t dim = static_cast<std::size_t>(n.i0);
      const std::size_t half = dim / 2;
      double gt = 0.0;
      for (std::size_t k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                  static_cast<double>(half));
        gt += g[k] * f * std::cos(tval * f) - g[half + k] * f * std::sin(tval * f);
      }
      in(0).grad[0] += gt;
      break;
    }
    case Op::kSumAll: {
      ensure_grad(in(0));
      Tensor& gx = in(0).grad;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
      break;
    }
  }
}

DualTensor jvp(const GraphFn& f, const std::vector<Tensor>& inputs,
               const std::vector<Tensor>& tangents) {
  if (inputs.size() != tangents.size()) {
    throw std::invalid_argument("jvp: inputs/tangents count mismatch");
  }
  Graph g(/*forward_mode=*/true);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require_same_shape(inputs[i], tangents[i], "jvp");
    vars.push_back(g.leaf(inputs[i], tangents[i]));
  }
  Var out = f(g, vars);
  return DualTensor{g.value(out), g.tangent(out)};
}

Tensor finite_diff_jvp(const PlainFn& f, const std::vector<Tensor>& inputs,
                       const std::vector<Tensor>& tangents, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_jvp: h must be > 0");
  if (inputs.size() != tangents.size()) {
    throw std::invalid_argument("finite_diff_jvp: count mismatch");
  }
  std::vector<Tensor> plus = inputs, minus = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    axpy_inplace(plus[i], h, tangents[i]);
    axpy_inplace(minus[i], -h, tangents[i]);
  }
  Tensor fp = f(plus);
  Tensor fm = f(minus);
  Tensor r = sub(fp, fm);
  return scale(r, 1.0 / (2.0 * h));
}

}  // namespace meanvc
