#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jmlab/common.hpp"

namespace jmlab::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLayerNormEps = 1e-5;

struct Param {
  std::string name;
  Mat value;
  Mat grad;    // empty until a backward pass touches it
  Mat adam_m;  // empty until the first optimizer step
  Mat adam_v;

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Mat::Zero(value.rows(), value.cols());
  }
  void clear_grad() { grad.resize(0, 0); }
};

// Reverse-mode tape over row-major double matrices. Nodes are created in
// topological order; backward walks them in reverse. With record=false the
// tape only runs the forward math (shared inference path).
class Tape {
 public:
  using NodeId = int;

  explicit Tape(bool record = true) : record_(record) {}

  NodeId constant(Mat v);
  NodeId gather(Param& table, std::vector<uint32_t> ids);
  NodeId vstack(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId add_bias(NodeId a, Param& bias);              // bias is 1 x n
  NodeId add_tiled(NodeId a, Param& rows);             // row i += rows[i % period]
  NodeId matmul(NodeId a, Param& w);
  NodeId layer_norm(NodeId x, Param& gain, Param& bias);
  NodeId gelu(NodeId x);
  // q,k,v are (n_seqs*len) x d; attention is causal within each length-len block.
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, int n_heads, int n_seqs, int len);
  // parts all R x d; output row r*P+p = parts[p] row r.
  NodeId interleave(const std::vector<NodeId>& parts);
  NodeId stride_rows(NodeId x, int offset, int stride, int count);
  // 1x1 node: sum_i weights[i] * nll(logits row i, targets[i]); rows with
  // weight 0 are skipped entirely.
  NodeId cross_entropy_sum(NodeId logits, std::vector<uint32_t> targets,
                           std::vector<double> weights);
  NodeId scale(NodeId a, double c);

  const Mat& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }
  double scalar(NodeId id) const;

  // Seeds d(output)/d(output) = upstream and accumulates into Param::grad.
  void backward(NodeId output, double upstream = 1.0);

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void()> back;
  };

  Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  Mat& grad_buf(NodeId id);
  NodeId push(Mat val, std::function<void()> back);

  bool record_;
  std::vector<Node> nodes_;
};

// Decoupled-weight-decay adaptive-moment update; step_no counts from 1.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
};

void adam_update(Param& p, double lr, const AdamConfig& cfg, uint64_t step_no);

}  // namespace jmlab::nn
