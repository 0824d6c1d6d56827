#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jmlab/generation.hpp"
#include "jmlab/rq_model.hpp"
#include "jmlab/token_grid.hpp"
#include "jmlab/turn_taking.hpp"

namespace jmlab::eval {

struct EvalConfig {
  double chunk_s = 30.0;
  double prompt_s = 10.0;
  std::vector<double> temperatures = {0.8, 0.9, 1.0};
  uint64_t seed = 17;  // per-sample seeds are derived from this base
  // adapter names; resolved by the caller (the library takes objects)
  std::string asr_adapter = "pseudo";
  std::string lm_adapter = "bigram";

  void validate() const;
};

// One 30 s window: the first 10 s as a delayed prompt the model can continue,
// the remaining 20 s undelayed for scoring against.
struct EvalChunk {
  grid::TokenGrid prompt;
  grid::TokenGrid reference;
};

std::vector<EvalChunk> chunk_dialogues(const std::vector<grid::TokenGrid>& dialogues,
                                       const EvalConfig& cfg = {});

struct LmScore {
  double nll = 0.0;  // total negative log-likelihood, nats
  size_t tokens = 0;
};

class LmAdapter {
 public:
  virtual ~LmAdapter() = default;
  // Deterministic and safe for concurrent read-only use.
  virtual LmScore score(const std::vector<uint32_t>& tokens) const = 0;
};

// exp(nll / tokens); corpus-level when the inputs are summed over samples.
double ppl(double nll_total, size_t token_count);

// Token bigram with add-one smoothing; sequence starts score against a
// dedicated start context (id = vocab_size).
class BigramLm : public LmAdapter {
 public:
  BigramLm(uint32_t vocab_size);
  LmScore score(const std::vector<uint32_t>& tokens) const override;
  double prob(uint32_t context, uint32_t token) const;  // context vocab_size = start
  uint32_t vocab_size() const { return vocab_; }
  void observe(const std::vector<uint32_t>& tokens);

 private:
  uint32_t vocab_ = 0;
  std::vector<uint64_t> counts_;  // (vocab 1) contexts x vocab, row-major
  std::vector<uint64_t> totals_;
};

BigramLm mock_lm_train(const std::vector<std::vector<uint32_t>>& corpus, uint32_t vocab_size);

struct ExperimentRow {
  std::string label;  // temperature or "ref"
  size_t n_samples = 0;
  double mean_ppl = 0.0;
  turn::TurnTakingReport tt;
};

struct ExperimentReport {
  std::vector<ExperimentRow> rows;
  std::string table;  // tab-separated, fixed formatting, rerun-stable
  std::string note;
};

// Prompted-continuation experiment: for every temperature, continue each
// chunk's prompt, pseudo-decode both channels, and score perplexity and
// turn-taking over the generated 20 s region; the reference regions are
// scored the same way as a ground-truth row.
ExperimentReport run_experiment(const model::ModelState& state,
                                const std::vector<EvalChunk>& chunks, const EvalConfig& cfg,
                                const LmAdapter& lm, const gen::AsrAdapter& asr = {});

std::string render_table(const std::vector<ExperimentRow>& rows, const std::string& note);

}  // namespace jmlab::eval
