#include "jmlab/nn.hpp"

#include <cmath>

namespace jmlab::nn {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

using ArrX = Eigen::Array<double, 1, Eigen::Dynamic>;

// lower-triangular row-softmax of Q K^T * scale
Mat causal_softmax(const Mat& Q, const Mat& K, double scale) {
  Mat S = Q * K.transpose() * scale;
  Mat P = Mat::Zero(S.rows(), S.cols());
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    double m = S.row(i).head(i + 1).maxCoeff();
    ArrX e = (S.row(i).head(i + 1).array() - m).exp();
    P.row(i).head(i + 1) = (e / e.sum()).matrix();
  }
  return P;
}

}  // namespace

Tape::NodeId Tape::push(Mat val, std::function<void()> back) {
  Node n;
  n.val = std::move(val);
  if (record_) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Mat& Tape::grad_buf(NodeId id) {
  Node& n = node(id);
  if (n.grad.rows() != n.val.rows() || n.grad.cols() != n.val.cols())
    n.grad = Mat::Zero(n.val.rows(), n.val.cols());
  return n.grad;
}

double Tape::scalar(NodeId id) const {
  const Mat& v = value(id);
  if (v.rows() != 1 || v.cols() != 1) throw UsageError("Tape::scalar: node is not 1x1");
  return v(0, 0);
}

Tape::NodeId Tape::constant(Mat v) {
  return push(std::move(v), nullptr);
}

Tape::NodeId Tape::gather(Param& table, std::vector<uint32_t> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.value.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (static_cast<Eigen::Index>(ids[i]) >= table.value.rows())
      throw DataError("gather: id out of range for table " + table.name);
    out.row(static_cast<Eigen::Index>(i)) = table.value.row(static_cast<Eigen::Index>(ids[i]));
  }
  Param* t = &table;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, t, ids = std::move(ids), id] {
    const Mat& g = node(id).grad;
    t->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      t->grad.row(static_cast<Eigen::Index>(ids[i])) += g.row(static_cast<Eigen::Index>(i));
  });
}

Tape::NodeId Tape::vstack(NodeId a, NodeId b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  if (va.cols() != vb.cols()) throw UsageError("vstack: column mismatch");
  Mat out(va.rows() + vb.rows(), va.cols());
  out.topRows(va.rows()) = va;
  out.bottomRows(vb.rows()) = vb;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, a, b, id] {
    const Mat& g = node(id).grad;
    Eigen::Index ra = node(a).val.rows();
    grad_buf(a) += g.topRows(ra);
    grad_buf(b) += g.bottomRows(g.rows() - ra);
  });
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) throw UsageError("add: shape mismatch");
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(va + vb, [this, a, b, id] {
    const Mat& g = node(id).grad;
    grad_buf(a) += g;
    grad_buf(b) += g;
  });
}

Tape::NodeId Tape::add_bias(NodeId a, Param& bias) {
  const Mat& va = value(a);
  if (bias.value.rows() != 1 || bias.value.cols() != va.cols())
    throw UsageError("add_bias: bias shape mismatch for " + bias.name);
  Mat out = va;
  out.rowwise() += bias.value.row(0);
  Param* b = &bias;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, a, b, id] {
    const Mat& g = node(id).grad;
    grad_buf(a) += g;
    b->ensure_grad();
    b->grad.row(0) += g.colwise().sum();
  });
}

Tape::NodeId Tape::add_tiled(NodeId a, Param& rows) {
  const Mat& va = value(a);
  Eigen::Index period = rows.value.rows();
  if (period == 0 || rows.value.cols() != va.cols())
    throw UsageError("add_tiled: shape mismatch for " + rows.name);
  Mat out = va;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) += rows.value.row(i % period);
  Param* r = &rows;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, a, r, id, period] {
    const Mat& g = node(id).grad;
    grad_buf(a) += g;
    r->ensure_grad();
    for (Eigen::Index i = 0; i < g.rows(); ++i) r->grad.row(i % period) += g.row(i);
  });
}

Tape::NodeId Tape::matmul(NodeId a, Param& w) {
  const Mat& va = value(a);
  if (va.cols() != w.value.rows()) throw UsageError("matmul: shape mismatch for " + w.name);
  Param* wp = &w;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(va * w.value, [this, a, wp, id] {
    const Mat& g = node(id).grad;
    grad_buf(a) += g * wp->value.transpose();
    wp->ensure_grad();
    wp->grad += node(a).val.transpose() * g;
  });
}

Tape::NodeId Tape::layer_norm(NodeId x, Param& gain, Param& bias) {
  const Mat& vx = value(x);
  Eigen::Index d = vx.cols();
  if (gain.value.cols() != d || bias.value.cols() != d || gain.value.rows() != 1 ||
      bias.value.rows() != 1)
    throw UsageError("layer_norm: affine shape mismatch for " + gain.name);
  Mat out(vx.rows(), d);
  for (Eigen::Index i = 0; i < vx.rows(); ++i) {
    double mu = vx.row(i).mean();
    double var = (vx.row(i).array() - mu).square().mean();
    double sigma = std::sqrt(var + kLayerNormEps);
    ArrX xhat = (vx.row(i).array() - mu) / sigma;
    out.row(i) = (xhat * gain.value.row(0).array() + bias.value.row(0).array()).matrix();
  }
  Param* gp = &gain;
  Param* bp = &bias;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, x, gp, bp, id] {
    const Mat& g = node(id).grad;
    const Mat& vx = node(x).val;
    Mat& gx = grad_buf(x);
    gp->ensure_grad();
    bp->ensure_grad();
    for (Eigen::Index i = 0; i < vx.rows(); ++i) {
      double mu = vx.row(i).mean();
      double var = (vx.row(i).array() - mu).square().mean();
      double sigma = std::sqrt(var + kLayerNormEps);
      ArrX xhat = (vx.row(i).array() - mu) / sigma;
      ArrX gy = g.row(i).array();
      ArrX gxhat = gy * gp->value.row(0).array();
      double m1 = gxhat.mean();
      double m2 = (gxhat * xhat).mean();
      gx.row(i) += ((gxhat - m1 - xhat * m2) / sigma).matrix();
      gp->grad.row(0) += (gy * xhat).matrix();
      bp->grad.row(0) += g.row(i);
    }
  });
}

Tape::NodeId Tape::gelu(NodeId x) {
  const Mat& vx = value(x);
  Mat out = vx.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, x, id] {
    const Mat& g = node(id).grad;
    const Mat& vx = node(x).val;
    Mat dx = vx.unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    grad_buf(x) += g.cwiseProduct(dx);
  });
}

Tape::NodeId Tape::causal_attention(NodeId q, NodeId k, NodeId v, int n_heads, int n_seqs,
                                    int len) {
  const Mat& vq = value(q);
  const Mat& vk = value(k);
  const Mat& vv = value(v);
  Eigen::Index N = vq.rows(), d = vq.cols();
  if (vk.rows() != N || vv.rows() != N || vk.cols() != d || vv.cols() != d)
    throw UsageError("causal_attention: q/k/v shape mismatch");
  if (N != static_cast<Eigen::Index>(n_seqs) * len)
    throw UsageError("causal_attention: rows != n_seqs * len");
  if (n_heads <= 0 || d % n_heads != 0)
    throw UsageError("causal_attention: d_model not divisible by heads");
  Eigen::Index dh = d / n_heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat out = Mat::Zero(N, d);
  for (int b = 0; b < n_seqs; ++b)
    for (int h = 0; h < n_heads; ++h) {
      Eigen::Index r0 = static_cast<Eigen::Index>(b) * len, c0 = static_cast<Eigen::Index>(h) * dh;
      Mat Q = vq.block(r0, c0, len, dh);
      Mat K = vk.block(r0, c0, len, dh);
      Mat V = vv.block(r0, c0, len, dh);
      out.block(r0, c0, len, dh) = causal_softmax(Q, K, scale) * V;
    }

  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, q, k, v, n_heads, n_seqs, len, dh, scale, id] {
    const Mat& g = node(id).grad;
    const Mat& vq = node(q).val;
    const Mat& vk = node(k).val;
    const Mat& vv = node(v).val;
    Mat& gq = grad_buf(q);
    Mat& gk = grad_buf(k);
    Mat& gv = grad_buf(v);
    for (int b = 0; b < n_seqs; ++b)
      for (int h = 0; h < n_heads; ++h) {
        Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
        Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
        Mat Q = vq.block(r0, c0, len, dh);
        Mat K = vk.block(r0, c0, len, dh);
        Mat V = vv.block(r0, c0, len, dh);
        Mat P = causal_softmax(Q, K, scale);
        Mat gO = g.block(r0, c0, len, dh);
        Mat dV = P.transpose() * gO;
        Mat dP = gO * V.transpose();
        Mat dS = Mat::Zero(len, len);
        for (Eigen::Index i = 0; i < len; ++i) {
          ArrX p = P.row(i).head(i + 1).array();
          ArrX dp = dP.row(i).head(i + 1).array();
          double dot = (p * dp).sum();
          dS.row(i).head(i + 1) = (p * (dp - dot)).matrix();
        }
        gq.block(r0, c0, len, dh) += dS * K * scale;
        gk.block(r0, c0, len, dh) += dS.transpose() * Q * scale;
        gv.block(r0, c0, len, dh) += dV;
      }
  });
}

Tape::NodeId Tape::interleave(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw UsageError("interleave: no parts");
  Eigen::Index R = value(parts[0]).rows(), d = value(parts[0]).cols();
  for (NodeId p : parts)
    if (value(p).rows() != R || value(p).cols() != d)
      throw UsageError("interleave: part shape mismatch");
  Eigen::Index P = static_cast<Eigen::Index>(parts.size());
  Mat out(R * P, d);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index p = 0; p < P; ++p)
      out.row(r * P + p) = value(parts[static_cast<size_t>(p)]).row(r);
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, parts, id] {
    const Mat& g = node(id).grad;
    Eigen::Index P = static_cast<Eigen::Index>(parts.size());
    Eigen::Index R = g.rows() / P;
    for (Eigen::Index p = 0; p < P; ++p) {
      Mat& gp = grad_buf(parts[static_cast<size_t>(p)]);
      for (Eigen::Index r = 0; r < R; ++r) gp.row(r) += g.row(r * P + p);
    }
  });
}

Tape::NodeId Tape::stride_rows(NodeId x, int offset, int stride, int count) {
  const Mat& vx = value(x);
  if (stride <= 0 || offset < 0 || count < 0 ||
      (count > 0 &&
       static_cast<Eigen::Index>(offset) + static_cast<Eigen::Index>(count - 1) * stride >=
           vx.rows()))
    throw UsageError("stride_rows: selection out of range");
  Mat out(count, vx.cols());
  for (int i = 0; i < count; ++i)
    out.row(i) = vx.row(offset + static_cast<Eigen::Index>(i) * stride);
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out), [this, x, offset, stride, count, id] {
    const Mat& g = node(id).grad;
    Mat& gx = grad_buf(x);
    for (int i = 0; i < count; ++i)
      gx.row(offset + static_cast<Eigen::Index>(i) * stride) += g.row(i);
  });
}

Tape::NodeId Tape::cross_entropy_sum(NodeId logits, std::vector<uint32_t> targets,
                                     std::vector<double> weights) {
  const Mat& vl = value(logits);
  if (static_cast<size_t>(vl.rows()) != targets.size() || targets.size() != weights.size())
    throw UsageError("cross_entropy_sum: row/target/weight count mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < vl.rows(); ++i) {
    double w = weights[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    uint32_t t = targets[static_cast<size_t>(i)];
    if (static_cast<Eigen::Index>(t) >= vl.cols())
      throw DataError("cross_entropy_sum: target out of vocabulary");
    double m = vl.row(i).maxCoeff();
    double lse = m + std::log((vl.row(i).array() - m).exp().sum());
    total += w * (lse - vl(i, static_cast<Eigen::Index>(t)));
  }
  Mat out(1, 1);
  out(0, 0) = total;
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(std::move(out),
              [this, logits, targets = std::move(targets), weights = std::move(weights), id] {
                double up = node(id).grad(0, 0);
                const Mat& vl = node(logits).val;
                Mat& gl = grad_buf(logits);
                for (Eigen::Index i = 0; i < vl.rows(); ++i) {
                  double w = weights[static_cast<size_t>(i)];
                  if (w == 0.0) continue;
                  double m = vl.row(i).maxCoeff();
                  ArrX e = (vl.row(i).array() - m).exp();
                  ArrX p = e / e.sum();
                  gl.row(i) += (w * up * p).matrix();
                  gl(i, static_cast<Eigen::Index>(targets[static_cast<size_t>(i)])) -= w * up;
                }
              });
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  NodeId id = static_cast<NodeId>(nodes_.size());
  return push(value(a) * c, [this, a, c, id] { grad_buf(a) += node(id).grad * c; });
}

void Tape::backward(NodeId output, double upstream) {
  Node& out = node(output);
  if (out.val.rows() != 1 || out.val.cols() != 1)
    throw UsageError("Tape::backward: output must be scalar");
  if (!record_) throw UsageError("Tape::backward: tape was created without recording");
  out.grad = Mat::Constant(1, 1, upstream);
  for (NodeId id = output; id >= 0; --id) {
    Node& n = node(id);
    if (n.back && n.grad.size() > 0) n.back();
  }
}

void adam_update(Param& p, double lr, const AdamConfig& cfg, uint64_t step_no) {
  if (step_no == 0) throw UsageError("adam_update: step_no counts from 1");
  p.ensure_grad();
  if (p.adam_m.rows() != p.value.rows() || p.adam_m.cols() != p.value.cols()) {
    p.adam_m = Mat::Zero(p.value.rows(), p.value.cols());
    p.adam_v = Mat::Zero(p.value.rows(), p.value.cols());
  }
  p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * p.grad;
  p.adam_v = (cfg.beta2 * p.adam_v.array() + (1.0 - cfg.beta2) * p.grad.array().square()).matrix();
  double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_no));
  double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_no));
  Eigen::ArrayXXd mhat = p.adam_m.array() / bias1;
  Eigen::ArrayXXd vhat = p.adam_v.array() / bias2;
  p.value.array() -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p.value.array());
}

}  // namespace jmlab::nn
