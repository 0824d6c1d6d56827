#include "jmlab/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>

namespace jmlab::gen {

using grid::GridSchema;
using grid::StreamRole;
using grid::TokenGrid;
using model::DepthSession;
using model::ModelState;
using model::TemporalSession;
using nn::RowVec;

namespace {

constexpr double kArgmaxTemperature = 1e-6;

void check_sampler(const SamplerConfig& s) {
  if (!(s.temperature > 0.0) || !std::isfinite(s.temperature))
    throw UsageError("sampler: temperature must be positive");
}

size_t stream_index(const GridSchema& schema, StreamRole role, grid::Channel channel) {
  for (size_t k = 0; k < schema.stream_count(); ++k)
    if (schema.streams[k].role == role && schema.streams[k].channel == channel) return k;
  throw UsageError("schema lacks the requested stream");
}

// Samples one frame from the session's current z. forced_text, when
// non-negative, replaces the text sample (speech synthesis). Streams still
// inside their delay window emit initial_id unsampled.
std::vector<uint32_t> sample_frame(const ModelState& state, const RowVec& z, size_t frame_index,
                                   int64_t forced_text, double temperature, Rng& rng,
                                   std::vector<SampleLogEntry>& log) {
  const GridSchema& schema = state.config.schema;
  std::vector<uint32_t> frame(schema.stream_count());

  if (forced_text >= 0) {
    frame[0] = static_cast<uint32_t>(forced_text);
  } else {
    RowVec logits = model::text_logits(state, z);
    frame[0] = sample_token(logits, temperature, rng);
    log.push_back({frame_index, 0, frame[0], logits(frame[0])});
  }

  DepthSession ds(state, z);
  for (size_t k = 1; k < schema.stream_count(); ++k) {
    RowVec logits = ds.next_logits(k, frame[k - 1]);
    const auto& sp = schema.streams[k];
    if (frame_index < sp.delay) {
      frame[k] = sp.initial_id;  // delay window: filler, not content
      continue;
    }
    frame[k] = sample_token(logits, temperature, rng);
    log.push_back({frame_index, k, frame[k], logits(frame[k])});
  }
  return frame;
}

void check_prompt(const ModelState& state, const TokenGrid& prompt) {
  if (!(prompt.schema() == state.config.schema))
    throw UsageError("generation: prompt schema does not match the model");
  if (prompt.length() > 0 && !prompt.delayed())
    throw UsageError("generation: prompt must be delayed");
}

}  // namespace

uint32_t sample_token(const RowVec& logits, double temperature, Rng& rng) {
  if (logits.cols() < 1) throw UsageError("sample_token: empty logits");
  if (!(temperature > 0.0)) throw UsageError("sample_token: temperature must be positive");
  Eigen::Index n = logits.cols();

  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < n; ++j)
    if (logits(j) > logits(best)) best = j;
  double max = logits(best);
  if (!std::isfinite(max)) throw UsageError("sample_token: no finite logit");
  if (temperature <= kArgmaxTemperature) return static_cast<uint32_t>(best);

  RowVec p(n);
  double z = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    p(j) = std::exp((logits(j) - max) / temperature);
    z += p(j);
  }
  double u = rng.uniform() * z;
  double c = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    c += p(j);
    if (u < c) return static_cast<uint32_t>(j);
  }
  // Rounding can leave u marginally above the final cumulative sum.
  for (Eigen::Index j = n - 1; j >= 0; --j)
    if (p(j) > 0.0) return static_cast<uint32_t>(j);
  return static_cast<uint32_t>(n - 1);
}

std::vector<uint32_t> generate_frame(const ModelState& state, const TokenGrid& context,
                                     const SamplerConfig& sampler) {
  check_sampler(sampler);
  check_prompt(state, context);
  Rng rng(sampler.seed);
  std::vector<SampleLogEntry> log;

  TemporalSession ts(state);
  std::vector<uint32_t> prev(state.config.schema.stream_count());
  RowVec z = ts.next_z(nullptr);
  for (size_t t = 1; t <= context.length(); ++t) {
    for (size_t k = 0; k < prev.size(); ++k) prev[k] = context.at(t - 1, k);
    z = ts.next_z(prev.data());
  }
  return sample_frame(state, z, context.length(), -1, sampler.temperature, rng, log);
}

GenerationResult continue_dialogue(const ModelState& state, const TokenGrid& prompt,
                                   size_t n_frames, const SamplerConfig& sampler) {
  check_sampler(sampler);
  check_prompt(state, prompt);
  const GridSchema& schema = state.config.schema;
  const size_t S = schema.stream_count();
  const size_t Tp = prompt.length();

  std::vector<uint32_t> tokens;
  tokens.reserve((Tp + n_frames) * S);
  for (size_t t = 0; t < Tp; ++t)
    for (size_t k = 0; k < S; ++k) tokens.push_back(prompt.at(t, k));

  if (n_frames == 0)
    return {TokenGrid::from_tokens(schema, std::move(tokens), true), {}, sampler.seed,
            sampler.temperature};

  Rng rng(sampler.seed);
  std::vector<SampleLogEntry> log;
  TemporalSession ts(state);
  std::vector<uint32_t> prev(S);

  RowVec z = ts.next_z(nullptr);
  for (size_t t = 1; t <= Tp; ++t) {
    for (size_t k = 0; k < S; ++k) prev[k] = prompt.at(t - 1, k);
    z = ts.next_z(prev.data());
  }
  for (size_t i = 0; i < n_frames; ++i) {
    std::vector<uint32_t> frame =
        sample_frame(state, z, Tp + i, -1, sampler.temperature, rng, log);
    tokens.insert(tokens.end(), frame.begin(), frame.end());
    if (i + 1 < n_frames) z = ts.next_z(frame.data());
  }

  GenerationResult res{TokenGrid::from_tokens(schema, std::move(tokens), true), std::move(log),
                       sampler.seed, sampler.temperature};
  return res;
}

GenerationResult tts_generate(const ModelState& state, const align::TimedTranscript& self_tr,
                              const align::TimedTranscript& user_tr, size_t n_frames,
                              const SamplerConfig& sampler) {
  check_sampler(sampler);
  const GridSchema& schema = state.config.schema;
  size_t sem = stream_index(schema, StreamRole::semantic_audio, grid::Channel::self);
  if (schema.streams[sem].delay == 0)
    throw UsageError("tts_generate: model schema has no audio delay gap (not a synthesis schema)");

  align::TimedTranscript merged = align::merge_transcripts(self_tr, user_tr);
  align::TextStreamResult text =
      align::text_stream_from_transcript(merged, n_frames, schema.streams[0]);

  Rng rng(sampler.seed);
  std::vector<SampleLogEntry> log;
  std::vector<uint32_t> tokens;
  tokens.reserve(n_frames * schema.stream_count());
  TemporalSession ts(state);

  for (size_t t = 0; t < n_frames; ++t) {
    RowVec z = t == 0 ? ts.next_z(nullptr)
                      : ts.next_z(tokens.data() + (t - 1) * schema.stream_count());
    std::vector<uint32_t> frame = sample_frame(state, z, t, static_cast<int64_t>(text.tokens[t]),
                                               sampler.temperature, rng, log);
    tokens.insert(tokens.end(), frame.begin(), frame.end());
  }

  GenerationResult res{TokenGrid::from_tokens(schema, std::move(tokens), true), std::move(log),
                       sampler.seed, sampler.temperature};
  return res;
}

size_t edit_distance(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<size_t> row(m + 1);
  for (size_t j = 0; j <= m; ++j) row[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    size_t diag = row[0];
    row[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
      diag = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
    }
  }
  return row[m];
}

double wer(const std::vector<uint32_t>& hypothesis, const std::vector<uint32_t>& reference) {
  if (reference.empty()) throw UsageError("wer: empty reference");
  return static_cast<double>(edit_distance(hypothesis, reference)) /
         static_cast<double>(reference.size());
}

std::vector<uint32_t> dialogue_pseudo_asr(const TokenGrid& delayed_grid) {
  const GridSchema& schema = delayed_grid.schema();
  size_t sem_self = stream_index(schema, StreamRole::semantic_audio, grid::Channel::self);
  size_t sem_user = stream_index(schema, StreamRole::semantic_audio, grid::Channel::user);
  TokenGrid flat = delayed_grid.delayed() ? grid::remove_delays(delayed_grid) : delayed_grid;

  std::vector<uint32_t> out;
  for (size_t t = 0; t < flat.length(); ++t) {
    for (size_t k : {sem_self, sem_user}) {
      uint32_t s = flat.at(t, k);
      if (s >= 2 && s != schema.streams[k].initial_id) out.push_back(s - 2);
    }
  }
  return out;
}

BestOfNResult best_of_n(const ModelState& state, const align::TimedTranscript& self_tr,
                        const align::TimedTranscript& user_tr, size_t n_frames,
                        const std::vector<uint64_t>& seeds, double temperature,
                        const AsrAdapter& adapter) {
  if (seeds.empty()) throw UsageError("best_of_n: need at least one seed");
  for (size_t i = 0; i < seeds.size(); ++i)
    for (size_t j = i + 1; j < seeds.size(); ++j)
      if (seeds[i] == seeds[j]) throw UsageError("best_of_n: seeds must be distinct");

  // Validate the shared inputs up front: worker threads cannot propagate
  // exceptions, so anything that would fail identically for every candidate
  // must throw here instead.
  SamplerConfig probe;
  probe.temperature = temperature;
  check_sampler(probe);
  size_t sem = stream_index(state.config.schema, StreamRole::semantic_audio, grid::Channel::self);
  if (state.config.schema.streams[sem].delay == 0)
    throw UsageError("best_of_n: model schema has no audio delay gap (not a synthesis schema)");

  align::TimedTranscript merged = align::merge_transcripts(self_tr, user_tr);
  std::vector<uint32_t> reference;
  reference.reserve(merged.tokens.size());
  for (const auto& tok : merged.tokens) reference.push_back(tok.token_id);
  if (reference.empty()) throw UsageError("best_of_n: empty dialogue text");

  AsrAdapter asr = adapter ? adapter : AsrAdapter(&dialogue_pseudo_asr);

  std::vector<std::optional<GenerationResult>> candidates(seeds.size());
  std::vector<double> wers(seeds.size(), std::numeric_limits<double>::infinity());
  parallel_for(seeds.size(), [&](size_t i) {
    SamplerConfig s;
    s.temperature = temperature;
    s.seed = seeds[i];
    s.max_new_frames = n_frames;
    candidates[i] = tts_generate(state, self_tr, user_tr, n_frames, s);
    try {
      wers[i] = wer(asr(candidates[i]->grid), reference);
    } catch (const std::runtime_error&) {
      // adapter failure: candidate stays at infinite WER
    }
  });

  size_t best = 0;
  for (size_t i = 1; i < wers.size(); ++i)
    if (wers[i] < wers[best]) best = i;
  if (!std::isfinite(wers[best])) throw DataError("best_of_n: every candidate failed scoring");

  return BestOfNResult{std::move(*candidates[best]), best, std::move(wers)};
}

}  // namespace jmlab::gen
