#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jmlab/alignment.hpp"
#include "jmlab/rq_model.hpp"
#include "jmlab/token_grid.hpp"

namespace jmlab::gen {

struct SamplerConfig {
  double temperature = 1.0;  // positive; at or below 1e-6 sampling becomes argmax
  uint64_t seed = 0;
  size_t max_new_frames = 250;
};

// One sampled token: which stream produced it at which frame, and the raw
// (pre-temperature) logit of the chosen token. Teacher-forced or delay-filler
// positions are not logged.
struct SampleLogEntry {
  size_t frame = 0;
  size_t stream = 0;
  uint32_t token = 0;
  double logit = 0.0;
};

struct GenerationResult {
  grid::TokenGrid grid;  // delayed; prompt frames + generated frames
  std::vector<SampleLogEntry> log;
  uint64_t seed = 0;
  double temperature = 1.0;
};

// Draws from softmax(logits / temperature). Temperatures at or below 1e-6
// short-circuit to argmax (first maximum wins) and consume no randomness.
uint32_t sample_token(const nn::RowVec& logits, double temperature, Rng& rng);

// Samples the next frame after `context`: z from the temporal stack, text via
// the text head, then the 16 audio tokens in depth order, each conditioned on
// the tokens sampled before it. Streams whose delay has not elapsed at this
// frame emit their initial_id filler instead of a sample.
std::vector<uint32_t> generate_frame(const model::ModelState& state,
                                     const grid::TokenGrid& context,
                                     const SamplerConfig& sampler);

// Teacher-forces the prompt, then samples n_frames new frames on all streams
// of both channels. The prompt region of the result is the prompt, bitwise.
GenerationResult continue_dialogue(const model::ModelState& state, const grid::TokenGrid& prompt,
                                   size_t n_frames, const SamplerConfig& sampler);

// Speech synthesis over a delayed-audio schema: the text stream is teacher-
// forced with the merged two-channel dialogue text and the audio streams are
// sampled. Rejects models whose schema has no audio delay gap.
GenerationResult tts_generate(const model::ModelState& state,
                              const align::TimedTranscript& self_tr,
                              const align::TimedTranscript& user_tr, size_t n_frames,
                              const SamplerConfig& sampler);

// Unit-cost insert/delete/substitute edit distance.
size_t edit_distance(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b);

// edit_distance(hypothesis, reference) / |reference|. Rejects empty references.
double wer(const std::vector<uint32_t>& hypothesis, const std::vector<uint32_t>& reference);

// Mock dialogue ASR: decodes both channels' semantic streams frame by frame
// (self before user within a frame), in time order.
std::vector<uint32_t> dialogue_pseudo_asr(const grid::TokenGrid& delayed_grid);

using AsrAdapter = std::function<std::vector<uint32_t>(const grid::TokenGrid&)>;

struct BestOfNResult {
  GenerationResult best;
  size_t best_index = 0;        // index into the seed list
  std::vector<double> wers;     // one per candidate, seed order; inf = adapter failure
};

// Synthesizes one candidate per seed, scores each against the merged input
// text with the ASR adapter (dialogue_pseudo_asr when empty), and returns the
// lowest-WER candidate; ties break toward the lowest seed index.
BestOfNResult best_of_n(const model::ModelState& state, const align::TimedTranscript& self_tr,
                        const align::TimedTranscript& user_tr, size_t n_frames,
                        const std::vector<uint64_t>& seeds, double temperature,
                        const AsrAdapter& adapter = {});

}  // namespace jmlab::gen
