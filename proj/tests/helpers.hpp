#pragma once

#include <cstdint>
#include <vector>

#include "jmlab/common.hpp"
#include "jmlab/token_grid.hpp"

namespace jmtest {

using jmlab::Rng;
namespace grid = jmlab::grid;

// text stream + one audio stream per requested delay.
inline grid::GridSchema delay_schema(const std::vector<uint16_t>& audio_delays,
                                     uint32_t text_vocab = 16, uint32_t audio_vocab = 32) {
  grid::GridSchema schema;
  grid::StreamSpec text;
  text.role = grid::StreamRole::text;
  text.channel = grid::Channel::self;
  text.vocab_size = text_vocab;
  text.delay = 0;
  text.pad_id = grid::text_pad_id(text_vocab);
  text.initial_id = grid::text_initial_id(text_vocab);
  text.name = "text";
  schema.streams.push_back(text);
  for (size_t i = 0; i < audio_delays.size(); ++i) {
    grid::StreamSpec sp;
    sp.role = grid::StreamRole::acoustic_audio;
    sp.channel = i % 2 == 0 ? grid::Channel::self : grid::Channel::user;
    sp.vocab_size = audio_vocab;
    sp.delay = audio_delays[i];
    sp.pad_id = grid::kNoPadId;
    sp.initial_id = grid::audio_initial_id(audio_vocab);
    sp.name = "a" + std::to_string(i);
    schema.streams.push_back(sp);
  }
  return schema;
}

inline grid::TokenGrid random_grid(const grid::GridSchema& schema, size_t T, Rng& rng,
                                   bool delayed = false) {
  std::vector<uint32_t> toks;
  toks.reserve(T * schema.stream_count());
  for (size_t t = 0; t < T; ++t)
    for (const auto& sp : schema.streams)
      toks.push_back(static_cast<uint32_t>(rng.below(sp.vocab_size)));
  return grid::TokenGrid::from_tokens(schema, std::move(toks), delayed);
}

}  // namespace jmtest
