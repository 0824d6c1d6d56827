#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "jmlab/nn.hpp"
#include "jmlab/token_grid.hpp"

namespace jmlab::model {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int temporal_layers = 4;
  int depth_layers = 2;
  int max_frames = 2048;
  grid::GridSchema schema;
  uint64_t seed = 0;

  void validate() const;
  // Architecture fingerprint for checkpoint compatibility. The seed is
  // excluded: two states trained from different seeds still share a layout.
  uint64_t digest() const;
};

struct TrainConfig {
  double lr_max = 3e-5;
  uint64_t warmup_steps = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-5;
  double weight_decay = 0.1;
  uint64_t batch_frames = 2048;
  double pad_loss_factor = 0.5;
  double w_semantic = 100.0;
  double w_acoustic = 1.0;
  double w_text = 100.0;
  // Per-group overrides; negative means "use lr_max". Fine-tuning runs set
  // these to 2e-6 (temporal) and 4e-6 (depth).
  double temporal_lr = -1.0;
  double depth_lr = -1.0;
  uint64_t epochs = 1;

  void validate() const;
};

struct ModelState {
  ModelConfig config;
  std::vector<nn::Param> params;  // fixed creation order, stable addresses
  uint64_t step = 0;

  nn::Param& param(const std::string& name);
  const nn::Param& param(const std::string& name) const;
  int64_t param_elements() const;

 private:
  mutable std::unordered_map<std::string, size_t> index_;
  void build_index() const;
};

// Depth group: the depth stack, its text embedding, its positions, and the
// audio output heads. Everything else (stream embeddings, temporal stack,
// Text Linear) belongs to the temporal group for learning-rate purposes.
bool in_depth_group(const std::string& param_name);

ModelState init_model(const ModelConfig& config);

// Base schedule: lr_max * min(1, step / warmup_steps). Step is the 1-based
// optimizer step count; step 0 is the pre-training boundary value.
double lr_at(uint64_t step, const TrainConfig& tc);
// Same shape with the group's lr_max override applied.
double group_lr_at(uint64_t step, const TrainConfig& tc, bool depth_group);

struct StreamLoss {
  double weighted_nll = 0.0;  // sum of weight * nll over scored tokens
  double weight_total = 0.0;  // sum of weights over scored tokens
  uint64_t tokens = 0;        // scored (nonzero-weight) token count
};

struct LossBreakdown {
  std::vector<StreamLoss> streams;  // one per schema stream, in stream order
  double weight_total = 0.0;
  uint64_t tokens = 0;
  double total = 0.0;  // sum weighted_nll / weight_total, 0 when unscored

  void add(const LossBreakdown& other);  // element-wise accumulate + refresh total
};

// Per-token loss weight. Positions a delay has not reached (t < delay) score
// zero: their initial_id filler is bookkeeping, not content. Text PAD tokens
// are down-weighted by pad_loss_factor.
double token_weight(const grid::StreamSpec& sp, uint32_t token, size_t frame,
                    const TrainConfig& tc);
// Sum of token_weight over a whole grid, no model evaluation.
double grid_weight_total(const grid::TokenGrid& g, const TrainConfig& tc);

// Teacher-forced loss over one delayed grid. Frame s is predicted from frames
// < s; the first frame is predicted from the learned start embedding. Audio
// streams condition on gold earlier-in-frame tokens through the depth stack.
LossBreakdown loss(const ModelState& state, const grid::TokenGrid& g, const TrainConfig& tc);

// Same, but accumulates d(total)/d(param) into each Param::grad scaled so a
// later division by weight_norm yields the batch-mean gradient. Callers zero
// grads first; weight_norm is the batch-wide weight total.
LossBreakdown loss_and_grad(ModelState& state, const grid::TokenGrid& g, const TrainConfig& tc,
                            double weight_norm);

struct TrainMetrics {
  LossBreakdown breakdown;
  double lr_temporal = 0.0;
  double lr_depth = 0.0;
  uint64_t step = 0;  // 1-based step count after the update
};

// One optimizer update over a batch of grids: batch loss is the weight-
// normalized sum over every scored token in every grid.
TrainMetrics train_step(ModelState& state, const std::vector<const grid::TokenGrid*>& batch,
                        const TrainConfig& tc);
TrainMetrics train_step(ModelState& state, const std::vector<grid::TokenGrid>& batch,
                        const TrainConfig& tc);

// Re-initializes the text-vocabulary-shaped parameters (temporal text
// embedding, depth text embedding, Text Linear) for a new vocabulary and
// refreshes the schema's text stream. Audio parameters are untouched.
void swap_text_vocab(ModelState& state, uint32_t new_text_vocab, uint64_t seed);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t elements_checked = 0;
};

// Central-finite-difference validation of the analytic gradients on a small
// randomized instance. Checks every element of every parameter.
GradCheckReport grad_check(const ModelConfig& config, const TrainConfig& tc, uint64_t seed);

// Temporal hidden states for a delayed grid: row r depends only on frames
// < r (row 0 on the start embedding alone) and predicts frame r's tokens.
// Returns upto_frame rows; requires 1 <= upto_frame <= length.
nn::Mat temporal_forward(const ModelState& state, const grid::TokenGrid& g, size_t upto_frame);

// Affine text head over one hidden row.
nn::RowVec text_logits(const ModelState& state, const nn::RowVec& z);

// Logits for the next audio stream given this frame's tokens so far.
// frame_tokens_so_far[0] is the text token; entries 1..k-1 are the gold or
// sampled tokens of streams 1..k-1. Returns logits for stream k.
nn::RowVec depth_logits(const ModelState& state, const nn::RowVec& z,
                        const std::vector<uint32_t>& frame_tokens_so_far);

struct StackCache;  // per-layer key/value rows, defined with the sessions

// Incremental temporal decoding with per-layer KV caches. next_z(nullptr)
// starts from the learned start embedding; afterwards pass the previous
// frame's 17 tokens. Equivalent to temporal_forward row by row.
class TemporalSession {
 public:
  explicit TemporalSession(const ModelState& state);
  ~TemporalSession();

  nn::RowVec next_z(const uint32_t* prev_frame_tokens);
  size_t frames_seen() const { return t_; }

 private:
  const ModelState& state_;
  size_t t_ = 0;
  std::unique_ptr<StackCache> cache_;
};

// Incremental depth decoding for one frame. Construct with the frame's z,
// then call next_logits(k, prev_token) for k = 1..16 in order: prev_token is
// the text token when k == 1, else stream k-1's token.
class DepthSession {
 public:
  DepthSession(const ModelState& state, const nn::RowVec& z);
  ~DepthSession();

  nn::RowVec next_logits(size_t stream_k, uint32_t prev_token);
  size_t position() const { return pos_; }

 private:
  const ModelState& state_;
  size_t pos_ = 0;
  nn::RowVec h_;  // hidden of the last processed position
  std::unique_ptr<StackCache> cache_;
};

void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace jmlab::model
