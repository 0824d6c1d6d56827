#include "jmlab/eval.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <optional>

#include "jmlab/common.hpp"

namespace jmlab::eval {

void EvalConfig::validate() const {
  if (!std::isfinite(chunk_s) || !std::isfinite(prompt_s) || prompt_s <= 0.0 ||
      prompt_s >= chunk_s)
    throw UsageError("eval config: need 0 < prompt_s < chunk_s");
  if (temperatures.empty()) throw UsageError("eval config: no temperatures");
  for (double t : temperatures)
    if (!std::isfinite(t) || t <= 0.0) throw UsageError("eval config: temperatures must be positive");
}

std::vector<EvalChunk> chunk_dialogues(const std::vector<grid::TokenGrid>& dialogues,
                                       const EvalConfig& cfg) {
  cfg.validate();
  size_t chunk_frames = static_cast<size_t>(seconds_to_frames(cfg.chunk_s));
  size_t prompt_frames = static_cast<size_t>(seconds_to_frames(cfg.prompt_s));
  if (prompt_frames == 0 || prompt_frames >= chunk_frames)
    throw UsageError("eval config: degenerate prompt/chunk frame split");

  std::vector<EvalChunk> chunks;
  for (const auto& g : dialogues) {
    // Windows come from the delayed grid so mid-dialogue prompts keep the
    // true audio shift; references stay undelayed for scoring.
    grid::TokenGrid undelayed = g.delayed() ? grid::remove_delays(g) : g;
    grid::TokenGrid delayed = g.delayed() ? g : grid::apply_delays(g);
    for (size_t start = 0; start + chunk_frames <= g.length(); start += chunk_frames) {
      chunks.push_back({grid::slice(delayed, start, start + prompt_frames),
                        grid::slice(undelayed, start + prompt_frames, start + chunk_frames)});
    }
  }
  return chunks;
}

double ppl(double nll_total, size_t token_count) {
  if (token_count == 0) throw UsageError("ppl: zero tokens");
  return std::exp(nll_total / static_cast<double>(token_count));
}

BigramLm::BigramLm(uint32_t vocab_size) : vocab_(vocab_size) {
  if (vocab_ == 0) throw UsageError("bigram lm: empty vocabulary");
  counts_.assign(static_cast<size_t>(vocab_ + 1) * vocab_, 0);
  totals_.assign(vocab_ + 1, 0);
}

void BigramLm::observe(const std::vector<uint32_t>& tokens) {
  uint32_t context = vocab_;  // start-of-sequence
  for (uint32_t t : tokens) {
    if (t >= vocab_) throw DataError("bigram lm: token outside vocabulary");
    counts_[static_cast<size_t>(context) * vocab_ + t] += 1;
    totals_[context] += 1;
    context = t;
  }
}

double BigramLm::prob(uint32_t context, uint32_t token) const {
  if (context > vocab_ || token >= vocab_)
    throw UsageError("bigram lm: context or token outside vocabulary");
  uint64_t c = counts_[static_cast<size_t>(context) * vocab_ + token];
  uint64_t total = totals_[context];
  return (static_cast<double>(c) + 1.0) / (static_cast<double>(total) + vocab_);
}

LmScore BigramLm::score(const std::vector<uint32_t>& tokens) const {
  LmScore s;
  uint32_t context = vocab_;
  for (uint32_t t : tokens) {
    if (t >= vocab_) throw DataError("bigram lm: token outside vocabulary");
    s.nll -= std::log(prob(context, t));
    context = t;
  }
  s.tokens = tokens.size();
  return s;
}

BigramLm mock_lm_train(const std::vector<std::vector<uint32_t>>& corpus, uint32_t vocab_size) {
  size_t total = 0;
  for (const auto& seq : corpus) total += seq.size();
  if (total == 0) throw UsageError("bigram lm: empty training corpus");
  BigramLm lm(vocab_size);
  for (const auto& seq : corpus) lm.observe(seq);
  return lm;
}

namespace {

// Both scoring paths share this: decode the 20 s region, score its tokens,
// and fold its turn-taking report into the row.
struct RowAccum {
  double nll = 0.0;
  size_t tokens = 0;
  std::vector<turn::TurnTakingReport> reports;
};

void accumulate(RowAccum& acc, const grid::TokenGrid& region, const LmAdapter& lm,
                const gen::AsrAdapter& asr) {
  auto decoded = asr(region);
  auto s = lm.score(decoded);
  acc.nll += s.nll;
  acc.tokens += s.tokens;

  grid::TokenGrid undelayed = region.delayed() ? grid::remove_delays(region) : region;
  auto a = turn::segments_to_ipus(turn::activity_from_grid(undelayed, grid::Channel::self));
  auto b = turn::segments_to_ipus(turn::activity_from_grid(undelayed, grid::Channel::user));
  acc.reports.push_back(turn::report(a, b, undelayed.duration_s()));
}

ExperimentRow finish_row(std::string label, size_t n_samples, const RowAccum& acc) {
  ExperimentRow row;
  row.label = std::move(label);
  row.n_samples = n_samples;
  if (acc.tokens == 0) throw DataError("experiment: nothing to score (no decoded tokens)");
  row.mean_ppl = ppl(acc.nll, acc.tokens);
  row.tt = turn::merge_reports(acc.reports);
  return row;
}

std::string format_tau(double t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", t);
  return std::string(buf);
}

}  // namespace

std::string render_table(const std::vector<ExperimentRow>& rows, const std::string& note) {
  std::string out;
  if (!note.empty()) out += "# " + note + "\n";
  out += "tau\tn_samples\tmean_ppl\tipu_s_per_min\tpause_s_per_min\tgap_s_per_min\toverlap_s_per_min\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%zu\t%.4f\t%.1f\t%.1f\t%.1f\t%.1f\n", r.label.c_str(),
                  r.n_samples, r.mean_ppl, r.tt.ipu_s_per_min, r.tt.pause_s_per_min,
                  r.tt.gap_s_per_min, r.tt.overlap_s_per_min);
    out += buf;
  }
  return out;
}

ExperimentReport run_experiment(const model::ModelState& state,
                                const std::vector<EvalChunk>& chunks, const EvalConfig& cfg,
                                const LmAdapter& lm, const gen::AsrAdapter& asr) {
  cfg.validate();
  if (chunks.empty()) throw UsageError("experiment: empty chunk set");
  gen::AsrAdapter decode = asr ? asr : gen::AsrAdapter(&gen::dialogue_pseudo_asr);

  size_t gen_frames = chunks.front().reference.length();
  for (const auto& c : chunks) {
    if (!c.prompt.delayed() || c.prompt.length() == 0)
      throw UsageError("experiment: chunk prompts must be nonempty delayed grids");
    if (!(c.prompt.schema() == state.config.schema))
      throw UsageError("experiment: chunk schema does not match the model");
    if (c.reference.length() != gen_frames || gen_frames == 0)
      throw UsageError("experiment: reference regions must share one nonzero length");
    if (c.prompt.length() + gen_frames > static_cast<size_t>(state.config.max_frames))
      throw UsageError("experiment: chunk window exceeds the model's frame budget");
  }

  ExperimentReport report;
  report.note =
      "ppl is over pseudo-decoded token streams (structural analog of ASR-transcript ppl)";

  for (size_t ti = 0; ti < cfg.temperatures.size(); ++ti) {
    // Generation is the expensive part; it runs per chunk in parallel with
    // worker errors carried out by hand since threads cannot rethrow.
    std::vector<std::optional<gen::GenerationResult>> results(chunks.size());
    std::vector<std::exception_ptr> errors(chunks.size());
    parallel_for(chunks.size(), [&](size_t i) {
      try {
        gen::SamplerConfig sampler;
        sampler.temperature = cfg.temperatures[ti];
        sampler.seed = cfg.seed + 1000003u * ti + i;
        sampler.max_new_frames = gen_frames;
        results[i] = gen::continue_dialogue(state, chunks[i].prompt, gen_frames, sampler);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    });
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    RowAccum acc;
    for (size_t i = 0; i < chunks.size(); ++i) {
      size_t prompt_len = chunks[i].prompt.length();
      auto region = grid::slice(results[i]->grid, prompt_len, prompt_len + gen_frames);
      accumulate(acc, region, lm, decode);
    }
    report.rows.push_back(finish_row(format_tau(cfg.temperatures[ti]), chunks.size(), acc));
  }

  RowAccum ref;
  for (const auto& c : chunks) accumulate(ref, c.reference, lm, decode);
  report.rows.push_back(finish_row("ref", chunks.size(), ref));

  report.table = render_table(report.rows, report.note);
  return report;
}

}  // namespace jmlab::eval
