#include "jmlab/rq_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace jmlab::model {

using grid::GridSchema;
using grid::StreamRole;
using grid::StreamSpec;
using grid::TokenGrid;
using nn::Mat;
using nn::Param;
using nn::RowVec;
using nn::Tape;

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw UsageError("model config: d_model must be a positive multiple of n_heads");
  if (temporal_layers < 1 || depth_layers < 1)
    throw UsageError("model config: layer counts must be positive");
  if (max_frames < 1) throw UsageError("model config: max_frames must be positive");
  schema.validate();
  if (schema.stream_count() < 2 || schema.streams[0].role != StreamRole::text)
    throw UsageError("model config: schema must lead with a text stream");
  for (size_t k = 1; k < schema.stream_count(); ++k)
    if (schema.streams[k].role == StreamRole::text)
      throw UsageError("model config: only one text stream is supported");
}

uint64_t ModelConfig::digest() const {
  Fnv1a h;
  h.add_string("jmck-arch");
  h.add_u64(static_cast<uint64_t>(d_model));
  h.add_u64(static_cast<uint64_t>(n_heads));
  h.add_u64(static_cast<uint64_t>(temporal_layers));
  h.add_u64(static_cast<uint64_t>(depth_layers));
  h.add_u64(static_cast<uint64_t>(max_frames));
  h.add_u64(schema.stream_count());
  for (const auto& sp : schema.streams) {
    h.add_u64(static_cast<uint64_t>(sp.role));
    h.add_u64(static_cast<uint64_t>(sp.channel));
    h.add_u64(sp.vocab_size);
    h.add_u64(sp.delay);
    h.add_u64(sp.pad_id);
    h.add_u64(sp.initial_id);
  }
  return h.digest();
}

void TrainConfig::validate() const {
  if (lr_max <= 0) throw UsageError("train config: lr_max must be positive");
  if (warmup_steps < 1) throw UsageError("train config: warmup_steps must be >= 1");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1)
    throw UsageError("train config: betas must lie in [0, 1)");
  if (adam_eps <= 0) throw UsageError("train config: adam_eps must be positive");
  if (weight_decay < 0) throw UsageError("train config: weight_decay must be >= 0");
  if (batch_frames < 1) throw UsageError("train config: batch_frames must be >= 1");
  if (pad_loss_factor < 0 || w_semantic < 0 || w_acoustic < 0 || w_text < 0)
    throw UsageError("train config: loss weights must be >= 0");
  if (epochs < 1) throw UsageError("train config: epochs must be >= 1");
}

Param& ModelState::param(const std::string& name) {
  build_index();
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return params[it->second];
}

const Param& ModelState::param(const std::string& name) const {
  build_index();
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return params[it->second];
}

void ModelState::build_index() const {
  if (index_.size() == params.size()) return;
  index_.clear();
  for (size_t i = 0; i < params.size(); ++i) index_.emplace(params[i].name, i);
}

int64_t ModelState::param_elements() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

bool in_depth_group(const std::string& name) {
  return name.rfind("depth.", 0) == 0 || name == "depth_text_embed" || name == "pos.depth" ||
         name.rfind("head.", 0) == 0;
}

namespace {

// All parameters are created and initialized in one fixed order so that a
// seed pins every weight bitwise.
struct Builder {
  std::vector<Param>& out;
  Rng& rng;
  int d;

  void embedding(const std::string& name, Eigen::Index rows) {
    push(name, rows, d, 0.02);
  }
  void linear(const std::string& name, Eigen::Index in, Eigen::Index out_dim) {
    push(name + ".w", in, out_dim, 1.0 / std::sqrt(static_cast<double>(in)));
    push(name + ".b", 1, out_dim, 0.0);
  }
  void weight(const std::string& name, Eigen::Index in, Eigen::Index out_dim) {
    push(name, in, out_dim, 1.0 / std::sqrt(static_cast<double>(in)));
  }
  void ln(const std::string& name) {
    Param g;
    g.name = name + ".gain";
    g.value = Mat::Ones(1, d);
    out.push_back(std::move(g));
    Param b;
    b.name = name + ".bias";
    b.value = Mat::Zero(1, d);
    out.push_back(std::move(b));
  }
  void block(const std::string& prefix) {
    ln(prefix + ".ln1");
    weight(prefix + ".attn.wq", d, d);
    weight(prefix + ".attn.wk", d, d);
    weight(prefix + ".attn.wv", d, d);
    weight(prefix + ".attn.wo", d, d);
    ln(prefix + ".ln2");
    weight(prefix + ".mlp.w1", d, 4 * d);
    push(prefix + ".mlp.b1", 1, 4 * d, 0.0);
    weight(prefix + ".mlp.w2", 4 * d, d);
    push(prefix + ".mlp.b2", 1, d, 0.0);
  }

  void push(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Param p;
    p.name = name;
    p.value = Mat(rows, cols);
    if (stddev == 0.0) {
      p.value.setZero();
    } else {
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) p.value(i, j) = rng.normal(0.0, stddev);
    }
    out.push_back(std::move(p));
  }
};

void fill_normal(Mat& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, stddev);
}

}  // namespace

ModelState init_model(const ModelConfig& config) {
  config.validate();
  ModelState st;
  st.config = config;
  Rng rng(config.seed);
  Builder b{st.params, rng, config.d_model};
  const GridSchema& schema = config.schema;

  for (const auto& sp : schema.streams) b.embedding("embed." + sp.name, sp.vocab_size);
  b.embedding("start", 1);
  b.embedding("pos.temporal", config.max_frames);
  b.embedding("pos.depth", static_cast<Eigen::Index>(schema.stream_count()));
  b.embedding("depth_text_embed", schema.streams[0].vocab_size);
  for (int l = 0; l < config.temporal_layers; ++l) b.block("temporal." + std::to_string(l));
  b.ln("temporal.ln_f");
  for (int l = 0; l < config.depth_layers; ++l) b.block("depth." + std::to_string(l));
  b.ln("depth.ln_f");
  b.linear("text_linear", config.d_model, schema.streams[0].vocab_size);
  for (size_t k = 1; k < schema.stream_count(); ++k)
    b.linear("head." + schema.streams[k].name, config.d_model,
             schema.streams[k].vocab_size);
  return st;
}

double lr_at(uint64_t step, const TrainConfig& tc) {
  double f = static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  return tc.lr_max * std::min(1.0, f);
}

double group_lr_at(uint64_t step, const TrainConfig& tc, bool depth_group) {
  double base = depth_group ? tc.depth_lr : tc.temporal_lr;
  if (base < 0) base = tc.lr_max;
  double f = static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  return base * std::min(1.0, f);
}

double token_weight(const StreamSpec& sp, uint32_t token, size_t frame, const TrainConfig& tc) {
  if (frame < sp.delay) return 0.0;
  switch (sp.role) {
    case StreamRole::text:
      return (sp.has_pad() && token == sp.pad_id) ? tc.w_text * tc.pad_loss_factor : tc.w_text;
    case StreamRole::semantic_audio:
      return tc.w_semantic;
    case StreamRole::acoustic_audio:
      return tc.w_acoustic;
  }
  return 0.0;
}

double grid_weight_total(const TokenGrid& g, const TrainConfig& tc) {
  double w = 0.0;
  for (size_t k = 0; k < g.schema().stream_count(); ++k) {
    const StreamSpec& sp = g.schema().streams[k];
    for (size_t t = 0; t < g.length(); ++t) w += token_weight(sp, g.at(t, k), t, tc);
  }
  return w;
}

namespace {

void check_loss_grid(const ModelState& state, const TokenGrid& g) {
  if (!(g.schema() == state.config.schema))
    throw UsageError("loss: grid schema does not match the model");
  if (!g.delayed()) throw UsageError("loss: grid must be delayed");
  if (g.length() < 2) throw UsageError("loss: need at least 2 frames");
  if (g.length() > static_cast<size_t>(state.config.max_frames))
    throw UsageError("loss: grid longer than max_frames");
}

std::vector<uint32_t> stream_column(const TokenGrid& g, size_t k, size_t rows) {
  std::vector<uint32_t> col(rows);
  for (size_t t = 0; t < rows; ++t) col[t] = g.at(t, k);
  return col;
}

// Pre-LN residual stack with a final layer norm. x is (n_seqs*len) x d.
Tape::NodeId run_stack(Tape& tape, ModelState& st, Tape::NodeId x, const std::string& prefix,
                       int layers, int n_seqs, int len) {
  int heads = st.config.n_heads;
  for (int l = 0; l < layers; ++l) {
    std::string p = prefix + "." + std::to_string(l);
    Tape::NodeId h = tape.layer_norm(x, st.param(p + ".ln1.gain"), st.param(p + ".ln1.bias"));
    Tape::NodeId q = tape.matmul(h, st.param(p + ".attn.wq"));
    Tape::NodeId k = tape.matmul(h, st.param(p + ".attn.wk"));
    Tape::NodeId v = tape.matmul(h, st.param(p + ".attn.wv"));
    Tape::NodeId a = tape.causal_attention(q, k, v, heads, n_seqs, len);
    x = tape.add(x, tape.matmul(a, st.param(p + ".attn.wo")));
    Tape::NodeId h2 = tape.layer_norm(x, st.param(p + ".ln2.gain"), st.param(p + ".ln2.bias"));
    Tape::NodeId m1 = tape.add_bias(tape.matmul(h2, st.param(p + ".mlp.w1")),
                                    st.param(p + ".mlp.b1"));
    Tape::NodeId m2 = tape.add_bias(tape.matmul(tape.gelu(m1), st.param(p + ".mlp.w2")),
                                    st.param(p + ".mlp.b2"));
    x = tape.add(x, m2);
  }
  return tape.layer_norm(x, st.param(prefix + ".ln_f.gain"), st.param(prefix + ".ln_f.bias"));
}

// Hidden states for rows 0..rows-1: row 0 sees only the start embedding,
// row r sums the 17 stream embeddings of frame r-1. Positional rows added.
Tape::NodeId temporal_hidden(Tape& tape, ModelState& st, const TokenGrid& g, size_t rows) {
  const GridSchema& schema = st.config.schema;
  Tape::NodeId x;
  Tape::NodeId start_row = tape.gather(st.param("start"), {0});
  if (rows >= 2) {
    Tape::NodeId sum = 0;
    for (size_t k = 0; k < schema.stream_count(); ++k) {
      Tape::NodeId e =
          tape.gather(st.param("embed." + schema.streams[k].name), stream_column(g, k, rows - 1));
      sum = (k == 0) ? e : tape.add(sum, e);
    }
    x = tape.vstack(start_row, sum);
  } else {
    x = start_row;
  }
  std::vector<uint32_t> pos_ids(rows);
  std::iota(pos_ids.begin(), pos_ids.end(), 0u);
  x = tape.add(x, tape.gather(st.param("pos.temporal"), pos_ids));
  return run_stack(tape, st, x, "temporal", st.config.temporal_layers, 1,
                   static_cast<int>(rows));
}

struct LossGraph {
  std::vector<Tape::NodeId> ce;  // one scored sum per stream
  Tape::NodeId total = -1;       // fold of ce in stream order
  LossBreakdown breakdown;       // weighted_nll filled in by the caller
};

// Teacher-forced graph: z rows predict their own frame's text token directly
// and condition the depth stack, which predicts the 16 audio tokens from the
// frame's gold earlier-in-depth tokens.
LossGraph build_loss_graph(Tape& tape, ModelState& st, const TokenGrid& g,
                           const TrainConfig& tc) {
  const GridSchema& schema = st.config.schema;
  size_t S = schema.stream_count();
  size_t T = g.length();

  Tape::NodeId z = temporal_hidden(tape, st, g, T);

  std::vector<Tape::NodeId> parts;
  parts.reserve(S);
  parts.push_back(z);
  parts.push_back(tape.gather(st.param("depth_text_embed"), stream_column(g, 0, T)));
  for (size_t k = 1; k + 1 < S; ++k)
    parts.push_back(
        tape.gather(st.param("embed." + schema.streams[k].name), stream_column(g, k, T)));
  Tape::NodeId dseq = tape.interleave(parts);
  dseq = tape.add_tiled(dseq, st.param("pos.depth"));
  dseq = run_stack(tape, st, dseq, "depth", st.config.depth_layers, static_cast<int>(T),
                   static_cast<int>(S));

  LossGraph out;
  out.breakdown.streams.resize(S);
  for (size_t k = 0; k < S; ++k) {
    const StreamSpec& sp = schema.streams[k];
    Tape::NodeId hidden;
    Tape::NodeId logits;
    if (k == 0) {
      hidden = z;
      logits = tape.add_bias(tape.matmul(hidden, st.param("text_linear.w")),
                             st.param("text_linear.b"));
    } else {
      hidden = tape.stride_rows(dseq, static_cast<int>(k), static_cast<int>(S),
                                static_cast<int>(T));
      logits = tape.add_bias(tape.matmul(hidden, st.param("head." + sp.name + ".w")),
                             st.param("head." + sp.name + ".b"));
    }
    std::vector<uint32_t> targets = stream_column(g, k, T);
    std::vector<double> weights(T);
    StreamLoss& sl = out.breakdown.streams[k];
    for (size_t t = 0; t < T; ++t) {
      weights[t] = token_weight(sp, targets[t], t, tc);
      if (weights[t] > 0) {
        sl.weight_total += weights[t];
        ++sl.tokens;
      }
    }
    Tape::NodeId ce = tape.cross_entropy_sum(logits, std::move(targets), std::move(weights));
    out.ce.push_back(ce);
    out.total = (k == 0) ? ce : tape.add(out.total, ce);
  }
  return out;
}

void finish_breakdown(const Tape& tape, LossGraph& lg) {
  double n = 0.0, w = 0.0;
  uint64_t tokens = 0;
  for (size_t k = 0; k < lg.ce.size(); ++k) {
    StreamLoss& sl = lg.breakdown.streams[k];
    sl.weighted_nll = tape.scalar(lg.ce[k]);
    n += sl.weighted_nll;
    w += sl.weight_total;
    tokens += sl.tokens;
  }
  lg.breakdown.weight_total = w;
  lg.breakdown.tokens = tokens;
  lg.breakdown.total = w > 0 ? n / w : 0.0;
}

}  // namespace

void LossBreakdown::add(const LossBreakdown& other) {
  if (streams.empty()) streams.resize(other.streams.size());
  if (streams.size() != other.streams.size())
    throw UsageError("loss breakdown: stream count mismatch");
  for (size_t k = 0; k < streams.size(); ++k) {
    streams[k].weighted_nll += other.streams[k].weighted_nll;
    streams[k].weight_total += other.streams[k].weight_total;
    streams[k].tokens += other.streams[k].tokens;
  }
  double n = 0.0, w = 0.0;
  uint64_t t = 0;
  for (const auto& sl : streams) {
    n += sl.weighted_nll;
    w += sl.weight_total;
    t += sl.tokens;
  }
  weight_total = w;
  tokens = t;
  total = w > 0 ? n / w : 0.0;
}

LossBreakdown loss(const ModelState& state, const TokenGrid& g, const TrainConfig& tc) {
  check_loss_grid(state, g);
  // The non-recording tape only reads parameter values.
  ModelState& st = const_cast<ModelState&>(state);
  Tape tape(false);
  LossGraph lg = build_loss_graph(tape, st, g, tc);
  finish_breakdown(tape, lg);
  return lg.breakdown;
}

LossBreakdown loss_and_grad(ModelState& state, const TokenGrid& g, const TrainConfig& tc,
                            double weight_norm) {
  check_loss_grid(state, g);
  if (weight_norm <= 0) throw UsageError("loss_and_grad: weight_norm must be positive");
  Tape tape(true);
  LossGraph lg = build_loss_graph(tape, state, g, tc);
  finish_breakdown(tape, lg);
  if (lg.breakdown.weight_total > 0) tape.backward(lg.total, 1.0 / weight_norm);
  return lg.breakdown;
}

TrainMetrics train_step(ModelState& state, const std::vector<const TokenGrid*>& batch,
                        const TrainConfig& tc) {
  tc.validate();
  if (batch.empty()) throw UsageError("train_step: empty batch");
  for (const TokenGrid* g : batch) check_loss_grid(state, *g);

  double w_total = 0.0;
  for (const TokenGrid* g : batch) w_total += grid_weight_total(*g, tc);

  for (auto& p : state.params) {
    p.clear_grad();
    p.ensure_grad();
  }

  LossBreakdown agg;
  for (const TokenGrid* g : batch)
    agg.add(loss_and_grad(state, *g, tc, w_total > 0 ? w_total : 1.0));

  if (!std::isfinite(agg.total)) throw NumericError("train_step: non-finite loss");
  for (const auto& p : state.params)
    if (!p.grad.allFinite())
      throw NumericError("train_step: non-finite gradient in " + p.name);

  uint64_t n = state.step + 1;
  double lr_t = group_lr_at(n, tc, false);
  double lr_d = group_lr_at(n, tc, true);
  nn::AdamConfig ac{tc.adam_beta1, tc.adam_beta2, tc.adam_eps, tc.weight_decay};
  for (auto& p : state.params)
    nn::adam_update(p, in_depth_group(p.name) ? lr_d : lr_t, ac, n);
  state.step = n;

  TrainMetrics m;
  m.breakdown = std::move(agg);
  m.lr_temporal = lr_t;
  m.lr_depth = lr_d;
  m.step = n;
  return m;
}

TrainMetrics train_step(ModelState& state, const std::vector<TokenGrid>& batch,
                        const TrainConfig& tc) {
  std::vector<const TokenGrid*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& g : batch) ptrs.push_back(&g);
  return train_step(state, ptrs, tc);
}

void swap_text_vocab(ModelState& state, uint32_t new_text_vocab, uint64_t seed) {
  if (new_text_vocab < 4)
    throw UsageError("swap_text_vocab: text vocab cannot host PAD and INITIAL (need >= 4)");
  int d = state.config.d_model;
  Rng rng(seed);

  Param& te = state.param("embed.text");
  te.value = Mat(new_text_vocab, d);
  fill_normal(te.value, 0.02, rng);
  Param& de = state.param("depth_text_embed");
  de.value = Mat(new_text_vocab, d);
  fill_normal(de.value, 0.02, rng);
  Param& lw = state.param("text_linear.w");
  lw.value = Mat(d, new_text_vocab);
  fill_normal(lw.value, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  Param& lb = state.param("text_linear.b");
  lb.value = Mat::Zero(1, new_text_vocab);

  for (Param* p : {&te, &de, &lw, &lb}) {
    p->grad.resize(0, 0);
    p->adam_m.resize(0, 0);
    p->adam_v.resize(0, 0);
  }

  StreamSpec& sp = state.config.schema.streams[0];
  sp.vocab_size = new_text_vocab;
  sp.pad_id = grid::text_pad_id(new_text_vocab);
  sp.initial_id = grid::text_initial_id(new_text_vocab);
}

GradCheckReport grad_check(const ModelConfig& config, const TrainConfig& tc, uint64_t seed) {
  config.validate();
  ModelState st = init_model(config);
  Rng rng(seed);
  size_t T = std::min<size_t>(4, static_cast<size_t>(config.max_frames));
  TokenGrid g(config.schema, T, true);
  for (size_t t = 0; t < T; ++t)
    for (size_t k = 0; k < config.schema.stream_count(); ++k)
      g.set(t, k, static_cast<uint32_t>(rng.below(config.schema.streams[k].vocab_size)));

  double w = grid_weight_total(g, tc);
  double norm = w > 0 ? w : 1.0;
  for (auto& p : st.params) {
    p.clear_grad();
    p.ensure_grad();
  }
  loss_and_grad(st, g, tc, norm);

  GradCheckReport rep;
  for (auto& p : st.params) {
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
        double saved = p.value(i, j);
        double h = 1e-5 * std::max(1.0, std::abs(saved));
        p.value(i, j) = saved + h;
        double fp = loss(st, g, tc).total;
        p.value(i, j) = saved - h;
        double fm = loss(st, g, tc).total;
        p.value(i, j) = saved;
        double numeric = (fp - fm) / (2 * h);
        double analytic = p.grad(i, j);
        double rel = std::abs(analytic - numeric) /
                     std::max({1.0, std::abs(analytic), std::abs(numeric)});
        ++rep.elements_checked;
        if (rel > rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_param = p.name;
        }
      }
  }
  return rep;
}

Mat temporal_forward(const ModelState& state, const TokenGrid& g, size_t upto_frame) {
  if (!(g.schema() == state.config.schema))
    throw UsageError("temporal_forward: grid schema does not match the model");
  if (!g.delayed()) throw UsageError("temporal_forward: grid must be delayed");
  if (upto_frame < 1 || upto_frame > g.length())
    throw UsageError("temporal_forward: upto_frame out of range");
  if (upto_frame > static_cast<size_t>(state.config.max_frames))
    throw UsageError("temporal_forward: context exceeds max_frames");
  ModelState& st = const_cast<ModelState&>(state);
  Tape tape(false);
  Tape::NodeId z = temporal_hidden(tape, st, g, upto_frame);
  return tape.value(z);
}

RowVec text_logits(const ModelState& state, const RowVec& z) {
  const Param& w = state.param("text_linear.w");
  const Param& b = state.param("text_linear.b");
  if (z.cols() != w.value.rows()) throw UsageError("text_logits: hidden size mismatch");
  return z * w.value + b.value;
}

RowVec depth_logits(const ModelState& state, const RowVec& z,
                    const std::vector<uint32_t>& frame_tokens_so_far) {
  const GridSchema& schema = state.config.schema;
  size_t S = schema.stream_count();
  size_t k = frame_tokens_so_far.size();
  if (k < 1) throw UsageError("depth_logits: need at least the frame's text token");
  if (k >= S) throw UsageError("depth_logits: over-long frame sequence");
  if (z.cols() != state.config.d_model) throw UsageError("depth_logits: hidden size mismatch");

  ModelState& st = const_cast<ModelState&>(state);
  Tape tape(false);
  Tape::NodeId x = tape.constant(z);
  x = tape.vstack(x, tape.gather(st.param("depth_text_embed"), {frame_tokens_so_far[0]}));
  for (size_t j = 1; j < k; ++j)
    x = tape.vstack(
        x, tape.gather(st.param("embed." + schema.streams[j].name), {frame_tokens_so_far[j]}));
  std::vector<uint32_t> pos_ids(k + 1);
  std::iota(pos_ids.begin(), pos_ids.end(), 0u);
  x = tape.add(x, tape.gather(st.param("pos.depth"), pos_ids));
  Tape::NodeId h = run_stack(tape, st, x, "depth", st.config.depth_layers, 1,
                             static_cast<int>(k + 1));
  RowVec last = tape.value(h).row(static_cast<Eigen::Index>(k));
  const Param& hw = state.param("head." + schema.streams[k].name + ".w");
  const Param& hb = state.param("head." + schema.streams[k].name + ".b");
  return last * hw.value + hb.value;
}

// ---------------------------------------------------------------------------
// Incremental decoding. A raw Eigen re-implementation of the stack with
// per-layer KV caches; equivalence with the tape path is covered by tests.
// ---------------------------------------------------------------------------

namespace {

RowVec raw_ln(const RowVec& x, const Param& gain, const Param& bias) {
  double mu = x.mean();
  double var = (x.array() - mu).square().mean();
  double sigma = std::sqrt(var + nn::kLayerNormEps);
  return (((x.array() - mu) / sigma) * gain.value.row(0).array() + bias.value.row(0).array())
      .matrix();
}

RowVec raw_gelu(const RowVec& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440)); });
}

}  // namespace

struct StackCache {
  std::vector<Mat> k, v;  // per layer, capacity x d, first `len` rows valid
  size_t len = 0;
};

namespace {

// One incremental step through a pre-LN stack: appends this position's K/V
// to the cache and returns the post-ln_f hidden row.
RowVec stack_step(const ModelState& st, const std::string& prefix, int layers, StackCache& cache,
                  RowVec x) {
  int heads = st.config.n_heads;
  Eigen::Index d = x.cols();
  Eigen::Index dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Eigen::Index t = static_cast<Eigen::Index>(cache.len);

  for (int l = 0; l < layers; ++l) {
    std::string p = prefix + "." + std::to_string(l);
    RowVec h = raw_ln(x, st.param(p + ".ln1.gain"), st.param(p + ".ln1.bias"));
    RowVec q = h * st.param(p + ".attn.wq").value;
    cache.k[static_cast<size_t>(l)].row(t) = h * st.param(p + ".attn.wk").value;
    cache.v[static_cast<size_t>(l)].row(t) = h * st.param(p + ".attn.wv").value;
    RowVec attn(d);
    for (int hd = 0; hd < heads; ++hd) {
      Eigen::Index c0 = static_cast<Eigen::Index>(hd) * dh;
      auto K = cache.k[static_cast<size_t>(l)].block(0, c0, t + 1, dh);
      auto V = cache.v[static_cast<size_t>(l)].block(0, c0, t + 1, dh);
      Eigen::VectorXd s = K * q.segment(c0, dh).transpose() * scale;
      double m = s.maxCoeff();
      Eigen::ArrayXd e = (s.array() - m).exp();
      Eigen::VectorXd w = (e / e.sum()).matrix();
      attn.segment(c0, dh) = w.transpose() * V;
    }
    x += attn * st.param(p + ".attn.wo").value;
    RowVec h2 = raw_ln(x, st.param(p + ".ln2.gain"), st.param(p + ".ln2.bias"));
    RowVec m1 = h2 * st.param(p + ".mlp.w1").value + st.param(p + ".mlp.b1").value;
    x += raw_gelu(m1) * st.param(p + ".mlp.w2").value + st.param(p + ".mlp.b2").value;
  }
  ++cache.len;
  return raw_ln(x, st.param(prefix + ".ln_f.gain"), st.param(prefix + ".ln_f.bias"));
}

StackCache make_cache(int layers, Eigen::Index capacity, Eigen::Index d) {
  StackCache c;
  c.k.assign(static_cast<size_t>(layers), Mat(capacity, d));
  c.v.assign(static_cast<size_t>(layers), Mat(capacity, d));
  return c;
}

}  // namespace

TemporalSession::TemporalSession(const ModelState& state)
    : state_(state),
      cache_(std::make_unique<StackCache>(make_cache(
          state.config.temporal_layers, state.config.max_frames, state.config.d_model))) {}

TemporalSession::~TemporalSession() = default;

RowVec TemporalSession::next_z(const uint32_t* prev_frame_tokens) {
  if (t_ >= static_cast<size_t>(state_.config.max_frames))
    throw UsageError("TemporalSession: context exceeds max_frames");
  if ((t_ == 0) != (prev_frame_tokens == nullptr))
    throw UsageError("TemporalSession: previous-frame tokens required after the first frame");
  const GridSchema& schema = state_.config.schema;
  RowVec x;
  if (prev_frame_tokens == nullptr) {
    x = state_.param("start").value.row(0);
  } else {
    x = RowVec::Zero(state_.config.d_model);
    for (size_t k = 0; k < schema.stream_count(); ++k) {
      uint32_t tok = prev_frame_tokens[k];
      const Param& e = state_.param("embed." + schema.streams[k].name);
      if (static_cast<Eigen::Index>(tok) >= e.value.rows())
        throw DataError("TemporalSession: token out of vocabulary");
      x += e.value.row(static_cast<Eigen::Index>(tok));
    }
  }
  x += state_.param("pos.temporal").value.row(static_cast<Eigen::Index>(t_));
  ++t_;
  return stack_step(state_, "temporal", state_.config.temporal_layers, *cache_, std::move(x));
}

DepthSession::DepthSession(const ModelState& state, const RowVec& z)
    : state_(state),
      cache_(std::make_unique<StackCache>(
          make_cache(state.config.depth_layers,
                     static_cast<Eigen::Index>(state.config.schema.stream_count()),
                     state.config.d_model))) {
  RowVec x = z + state_.param("pos.depth").value.row(0);
  h_ = stack_step(state_, "depth", state_.config.depth_layers, *cache_, std::move(x));
  pos_ = 1;
}

DepthSession::~DepthSession() = default;

RowVec DepthSession::next_logits(size_t stream_k, uint32_t prev_token) {
  const GridSchema& schema = state_.config.schema;
  if (stream_k != pos_ || stream_k >= schema.stream_count())
    throw UsageError("DepthSession: streams must be decoded in order 1..16");
  const Param& table = (stream_k == 1) ? state_.param("depth_text_embed")
                                       : state_.param("embed." + schema.streams[stream_k - 1].name);
  if (static_cast<Eigen::Index>(prev_token) >= table.value.rows())
    throw DataError("DepthSession: token out of vocabulary");
  RowVec x = table.value.row(static_cast<Eigen::Index>(prev_token)) +
             state_.param("pos.depth").value.row(static_cast<Eigen::Index>(stream_k));
  h_ = stack_step(state_, "depth", state_.config.depth_layers, *cache_, std::move(x));
  pos_ = stream_k + 1;
  const Param& hw = state_.param("head." + schema.streams[stream_k].name + ".w");
  const Param& hb = state_.param("head." + schema.streams[stream_k].name + ".b");
  return h_ * hw.value + hb.value;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'J', 'M', 'C', 'K'};
constexpr uint16_t kCkptVersion = 1;

void write_mat(ByteWriter& w, const Mat& m) {
  w.u64(static_cast<uint64_t>(m.rows()));
  w.u64(static_cast<uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

Mat read_mat(ByteReader& r) {
  uint64_t rows = r.u64();
  uint64_t cols = r.u64();
  if (rows > (1u << 24) || cols > (1u << 24) || rows * cols > (1u << 28))
    throw DataError("checkpoint: implausible tensor shape");
  if (rows * cols > r.remaining() / 8) throw DataError("checkpoint: truncated");
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  return m;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
  ByteWriter w;
  w.bytes(kCkptMagic, 4);
  w.u16(kCkptVersion);
  const ModelConfig& c = state.config;
  w.u32(static_cast<uint32_t>(c.d_model));
  w.u32(static_cast<uint32_t>(c.n_heads));
  w.u32(static_cast<uint32_t>(c.temporal_layers));
  w.u32(static_cast<uint32_t>(c.depth_layers));
  w.u32(static_cast<uint32_t>(c.max_frames));
  w.u64(c.seed);
  grid::write_schema(w, c.schema);
  w.u64(c.digest());
  w.u64(state.step);
  w.u32(static_cast<uint32_t>(state.params.size()));
  for (const auto& p : state.params) {
    w.u32(static_cast<uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    write_mat(w, p.value);
    // Moments not yet allocated by an optimizer step are stored as zeros.
    Mat zero = Mat::Zero(p.value.rows(), p.value.cols());
    write_mat(w, p.adam_m.size() > 0 ? p.adam_m : zero);
    write_mat(w, p.adam_v.size() > 0 ? p.adam_v : zero);
  }
  write_file(path, w.str());
}

ModelState load_checkpoint(const std::string& path) {
  std::string bytes = read_file(path);
  ByteReader r(bytes.data(), bytes.size(), "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  uint16_t version = r.u16();
  if (version != kCkptVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));

  ModelConfig c;
  c.d_model = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.temporal_layers = static_cast<int>(r.u32());
  c.depth_layers = static_cast<int>(r.u32());
  c.max_frames = static_cast<int>(r.u32());
  c.seed = r.u64();
  c.schema = grid::read_schema(r, "checkpoint");
  uint64_t stored_digest = r.u64();
  c.validate();
  if (stored_digest != c.digest()) throw DataError("checkpoint: config digest mismatch");

  ModelState st = init_model(c);
  st.step = r.u64();
  uint32_t n = r.u32();
  if (n != st.params.size()) throw DataError("checkpoint: parameter count mismatch");
  for (auto& p : st.params) {
    uint32_t len = r.u32();
    if (len > 4096) throw DataError("checkpoint: implausible parameter name");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    if (name != p.name) throw DataError("checkpoint: unexpected parameter " + name);
    Mat value = read_mat(r);
    Mat m = read_mat(r);
    Mat v = read_mat(r);
    if (value.rows() != p.value.rows() || value.cols() != p.value.cols() ||
        m.rows() != value.rows() || m.cols() != value.cols() || v.rows() != value.rows() ||
        v.cols() != value.cols())
      throw DataError("checkpoint: shape mismatch for " + p.name);
    p.value = std::move(value);
    p.adam_m = std::move(m);
    p.adam_v = std::move(v);
  }
  r.expect_end();
  return st;
}

}  // namespace jmlab::model
