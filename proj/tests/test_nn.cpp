#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "jmlab/nn.hpp"

using jmlab::DataError;
using jmlab::Rng;
using jmlab::UsageError;
using jmlab::nn::AdamConfig;
using jmlab::nn::Mat;
using jmlab::nn::Param;
using jmlab::nn::Tape;
using jmlab::nn::adam_update;

namespace {

Param make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng,
                 double scale = 1.0) {
  Param p;
  p.name = name;
  p.value = Mat(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) p.value(i, j) = scale * rng.normal();
  return p;
}

// Re-runs `build` on a throwaway tape after each single-element perturbation
// and compares central differences against the recorded gradients.
void check_grads(std::vector<Param*> params, const std::function<Tape::NodeId(Tape&)>& build,
                 double tol = 1e-6) {
  for (Param* p : params) {
    p->clear_grad();
    p->ensure_grad();
  }
  Tape tape(true);
  tape.backward(build(tape));

  auto eval = [&] {
    Tape t(false);
    return t.scalar(build(t));
  };
  for (Param* p : params) {
    for (Eigen::Index i = 0; i < p->value.rows(); ++i)
      for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
        double saved = p->value(i, j);
        double h = 1e-5 * std::max(1.0, std::abs(saved));
        p->value(i, j) = saved + h;
        double fp = eval();
        p->value(i, j) = saved - h;
        double fm = eval();
        p->value(i, j) = saved;
        double numeric = (fp - fm) / (2 * h);
        double analytic = p->grad(i, j);
        double rel = std::abs(analytic - numeric) /
                     std::max({1.0, std::abs(analytic), std::abs(numeric)});
        INFO(p->name << "(" << i << "," << j << ") analytic=" << analytic
                     << " numeric=" << numeric);
        CHECK(rel <= tol);
      }
  }
}

}  // namespace

TEST_CASE("weighted cross entropy matches a direct softmax computation") {
  Rng rng(11);
  Param logits = make_param("l", 4, 5, rng);
  std::vector<uint32_t> targets{1, 4, 0, 2};
  std::vector<double> weights{1.0, 0.5, 0.0, 2.0};

  Tape tape(false);
  std::vector<uint32_t> ids{0, 1, 2, 3};
  double got = tape.scalar(tape.cross_entropy_sum(tape.gather(logits, ids), targets, weights));

  double want = 0.0;
  for (int r = 0; r < 4; ++r) {
    if (weights[static_cast<size_t>(r)] == 0.0) continue;
    double denom = 0.0;
    for (int c = 0; c < 5; ++c) denom += std::exp(logits.value(r, c));
    double p = std::exp(logits.value(r, targets[static_cast<size_t>(r)])) / denom;
    want += weights[static_cast<size_t>(r)] * -std::log(p);
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("layer norm forward matches the per-row formula") {
  Rng rng(12);
  Param x = make_param("x", 3, 6, rng, 2.0);
  Param gain = make_param("g", 1, 6, rng);
  Param bias = make_param("b", 1, 6, rng);

  Tape tape(false);
  std::vector<uint32_t> ids{0, 1, 2};
  const Mat& out = tape.value(tape.layer_norm(tape.gather(x, ids), gain, bias));

  for (int r = 0; r < 3; ++r) {
    double mu = 0.0;
    for (int c = 0; c < 6; ++c) mu += x.value(r, c);
    mu /= 6.0;
    double var = 0.0;
    for (int c = 0; c < 6; ++c) var += (x.value(r, c) - mu) * (x.value(r, c) - mu);
    var /= 6.0;
    for (int c = 0; c < 6; ++c) {
      double want =
          (x.value(r, c) - mu) / std::sqrt(var + 1e-5) * gain.value(0, c) + bias.value(0, c);
      CHECK(out(r, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("block-causal attention matches a naive reference") {
  Rng rng(13);
  const int n_seqs = 2, len = 3, d = 4, heads = 2, dh = d / heads;
  Param q = make_param("q", n_seqs * len, d, rng);
  Param k = make_param("k", n_seqs * len, d, rng);
  Param v = make_param("v", n_seqs * len, d, rng);

  Tape tape(false);
  std::vector<uint32_t> ids{0, 1, 2, 3, 4, 5};
  const Mat& out = tape.value(tape.causal_attention(
      tape.gather(q, ids), tape.gather(k, ids), tape.gather(v, ids), heads, n_seqs, len));

  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int b = 0; b < n_seqs; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < len; ++i) {
        int row = b * len + i;
        std::vector<double> w(static_cast<size_t>(i) + 1);
        double denom = 0.0;
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int c = 0; c < dh; ++c)
            s += q.value(row, h * dh + c) * k.value(b * len + j, h * dh + c);
          w[static_cast<size_t>(j)] = std::exp(s * scale);
          denom += w[static_cast<size_t>(j)];
        }
        for (int c = 0; c < dh; ++c) {
          double want = 0.0;
          for (int j = 0; j <= i; ++j)
            want += w[static_cast<size_t>(j)] / denom * v.value(b * len + j, h * dh + c);
          CHECK(out(row, h * dh + c) == doctest::Approx(want).epsilon(1e-12));
        }
      }
}

TEST_CASE("gradients of the embedding/linear/activation chain match finite differences") {
  Rng rng(21);
  Param emb = make_param("emb", 7, 4, rng);
  Param emb2 = make_param("emb2", 5, 4, rng);
  Param bias = make_param("bias", 1, 4, rng);
  Param w = make_param("w", 4, 6, rng, 0.5);
  std::vector<uint32_t> ids{3, 0, 6, 3};  // repeated id exercises scatter-add
  std::vector<uint32_t> ids2{1, 4, 2, 1};
  std::vector<uint32_t> targets{2, 5, 0, 3};
  std::vector<double> weights{1.0, 0.7, 1.3, 0.0};

  check_grads({&emb, &emb2, &bias, &w}, [&](Tape& t) {
    Tape::NodeId x = t.add(t.gather(emb, ids), t.gather(emb2, ids2));
    x = t.add_bias(x, bias);
    x = t.gelu(t.matmul(x, w));
    return t.scale(t.cross_entropy_sum(x, targets, weights), 0.75);
  });
}

TEST_CASE("layer norm gradients match finite differences") {
  Rng rng(22);
  Param emb = make_param("emb", 6, 5, rng, 1.5);
  Param gain = make_param("gain", 1, 5, rng);
  Param bias = make_param("bias", 1, 5, rng);
  Param w = make_param("w", 5, 4, rng, 0.6);
  std::vector<uint32_t> ids{0, 2, 4, 5};
  std::vector<uint32_t> targets{1, 3, 0, 2};
  std::vector<double> weights{1.0, 1.0, 0.5, 2.0};

  check_grads({&emb, &gain, &bias, &w}, [&](Tape& t) {
    Tape::NodeId x = t.layer_norm(t.gather(emb, ids), gain, bias);
    return t.cross_entropy_sum(t.matmul(x, w), targets, weights);
  });
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(23);
  const int n_seqs = 2, len = 3, d = 4;
  Param emb = make_param("emb", 8, d, rng);
  Param wq = make_param("wq", d, d, rng, 0.5);
  Param wk = make_param("wk", d, d, rng, 0.5);
  Param wv = make_param("wv", d, d, rng, 0.5);
  Param wo = make_param("wo", d, 5, rng, 0.5);
  std::vector<uint32_t> ids{0, 3, 7, 2, 3, 5};
  std::vector<uint32_t> targets{0, 1, 2, 3, 4, 0};
  std::vector<double> weights{1.0, 0.4, 1.0, 0.0, 1.0, 0.9};

  check_grads({&emb, &wq, &wk, &wv, &wo}, [&](Tape& t) {
    Tape::NodeId x = t.gather(emb, ids);
    Tape::NodeId a = t.causal_attention(t.matmul(x, wq), t.matmul(x, wk), t.matmul(x, wv), 2,
                                        n_seqs, len);
    return t.cross_entropy_sum(t.matmul(a, wo), targets, weights);
  });
}

TEST_CASE("stacking, interleaving and striding gradients match finite differences") {
  Rng rng(24);
  Param a = make_param("a", 3, 4, rng);
  Param b = make_param("b", 3, 4, rng);
  Param tiles = make_param("tiles", 2, 4, rng);
  Param w = make_param("w", 4, 5, rng, 0.7);
  std::vector<uint32_t> all{0, 1, 2};
  std::vector<uint32_t> targets{4, 2, 1};
  std::vector<double> weights{1.0, 2.0, 1.0};

  check_grads({&a, &b, &tiles, &w}, [&](Tape& t) {
    Tape::NodeId stacked = t.vstack(t.gather(a, all), t.gather(b, all));  // 6 x 4
    Tape::NodeId inter = t.interleave({t.gather(a, all), t.gather(b, all)});
    Tape::NodeId mixed = t.add(stacked, inter);
    mixed = t.add_tiled(mixed, tiles);
    Tape::NodeId picked = t.stride_rows(mixed, 1, 2, 3);  // rows 1, 3, 5
    return t.cross_entropy_sum(t.matmul(picked, w), targets, weights);
  });
}

TEST_CASE("tape misuse is rejected") {
  Rng rng(31);
  Param emb = make_param("emb", 4, 3, rng);

  Tape t(true);
  Tape::NodeId x = t.gather(emb, {0, 1});
  CHECK_THROWS_AS(t.scalar(x), UsageError);
  CHECK_THROWS_AS(t.backward(x), UsageError);
  CHECK_THROWS_AS(t.gather(emb, {4}), DataError);
  CHECK_THROWS_AS(t.stride_rows(x, 1, 2, 2), UsageError);
  CHECK_THROWS_AS(t.cross_entropy_sum(x, {0}, {1.0}), UsageError);
  CHECK_THROWS_AS(t.cross_entropy_sum(x, {3, 0}, {1.0, 1.0}), DataError);

  Tape frozen(false);
  Tape::NodeId y = frozen.cross_entropy_sum(frozen.gather(emb, {0}), {0}, {1.0});
  CHECK_THROWS_AS(frozen.backward(y), UsageError);
}

TEST_CASE("optimizer leaves parameters alone when gradient and decay are zero") {
  Rng rng(41);
  Param p = make_param("p", 3, 3, rng);
  Mat before = p.value;
  p.ensure_grad();
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  for (uint64_t s = 1; s <= 5; ++s) adam_update(p, 1e-3, cfg, s);
  CHECK(p.value == before);
}

TEST_CASE("first optimizer step matches the closed form") {
  Param p;
  p.name = "p";
  p.value = Mat::Constant(1, 1, 1.0);
  p.ensure_grad();
  p.grad(0, 0) = 0.25;
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_update(p, 0.5, cfg, 1);
  // Bias corrections cancel on step one, so the update is lr * g/(|g|+eps).
  double expected = 1.0 - 0.5 * (0.25 / (0.25 + cfg.eps));
  CHECK(p.value(0, 0) == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("optimizer drives a quadratic to its minimum") {
  // f(x) = (x - 3)^2, analytic minimum at 3. The adaptive step is ~lr away
  // from the optimum and contracts once |2(x-3)| falls to the eps scale.
  Param p;
  p.name = "x";
  p.value = Mat::Constant(1, 1, 3.0005);
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  for (uint64_t s = 1; s <= 500; ++s) {
    p.ensure_grad();
    p.grad(0, 0) = 2.0 * (p.value(0, 0) - 3.0);
    adam_update(p, 2e-6, cfg, s);
    p.clear_grad();
  }
  CHECK(std::abs(p.value(0, 0) - 3.0) <= 1e-6);
}

TEST_CASE("optimizer runs are deterministic") {
  auto run = [] {
    Rng rng(7);
    Param p = make_param("p", 4, 4, rng);
    AdamConfig cfg;
    for (uint64_t s = 1; s <= 20; ++s) {
      p.ensure_grad();
      p.grad = p.value * 0.1;
      adam_update(p, 3e-4, cfg, s);
    }
    return p.value;
  };
  Mat a = run();
  Mat b = run();
  CHECK(a == b);
}

TEST_CASE("generator produces the documented distributions") {
  Rng rng(99);
  const int n = 20000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(var - 1.0) < 6.0 / std::sqrt(static_cast<double>(n)));

  for (int i = 0; i < 1000; ++i) {
    uint64_t v = rng.below(7);
    CHECK(v < 7);
  }
  double u = rng.uniform(2.0, 5.0);
  CHECK(u >= 2.0);
  CHECK(u < 5.0);
}
