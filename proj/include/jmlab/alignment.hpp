#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jmlab/token_grid.hpp"

namespace jmlab::align {

struct Interval {
  double start = 0.0;
  double end = 0.0;
  double length() const { return end - start; }
};

struct DiarSegment {
  std::string speaker;
  Interval interval;
};

struct TimedToken {
  uint32_t token_id = 0;
  double start = 0.0;  // seconds
};

struct TimedTranscript {
  grid::Channel channel = grid::Channel::self;
  std::vector<TimedToken> tokens;  // starts non-decreasing
};

struct ActivityTrack {
  grid::Channel channel = grid::Channel::self;
  std::vector<Interval> intervals;  // disjoint, sorted; treated as [start, end)
};

// Picks one speaker uniformly for the self channel; everyone else is user.
std::map<std::string, grid::Channel> assign_channels(const std::vector<DiarSegment>& segments,
                                                     uint64_t seed);

struct TextStreamResult {
  std::vector<uint32_t> tokens;  // length T
  size_t dropped = 0;            // tokens cascaded past frame T-1
};

// Token with start x goes to frame floor(x * 12.5); collisions cascade to the
// next free frame; untouched frames hold PAD.
TextStreamResult text_stream_from_transcript(const TimedTranscript& tr, size_t T,
                                             const grid::StreamSpec& text_spec);

ActivityTrack activity_from_segments(const std::vector<DiarSegment>& segments,
                                     const std::map<std::string, grid::Channel>& channel_map,
                                     grid::Channel channel, size_t T);

// True iff the frame midpoint (t + 0.5) / 12.5 falls inside an interval.
bool frame_active(const ActivityTrack& activity, size_t frame);

// Deterministic stand-in for a neural codec. Semantic token: 0 silent,
// 1 active under PAD text, 2 + text token otherwise. Acoustic layers hash
// (layer, frame, semantic). Rows are [semantic, acoustic 2..8], length T.
std::vector<std::vector<uint32_t>> pseudo_encode(const std::vector<uint32_t>& text_stream,
                                                 const ActivityTrack& activity, grid::Channel channel,
                                                 const grid::GridSchema& schema);

// Mock ASR: emits s - 2 for every semantic token s >= 2, in time order.
std::vector<uint32_t> pseudo_decode(const std::vector<uint32_t>& semantic_tokens);

struct BuildResult {
  grid::TokenGrid grid;  // delayed
  size_t dropped_tokens = 0;
};

// Text stream from the self transcript, pseudo-codec audio for both channels,
// then delays. The user transcript feeds only the user channel's semantics.
BuildResult build_training_grid(const TimedTranscript& self_tr, const TimedTranscript& user_tr,
                                const ActivityTrack& self_act, const ActivityTrack& user_act,
                                const grid::GridSchema& schema, size_t T);

// Both channels' tokens interleaved by start (ties self first).
TimedTranscript merge_transcripts(const TimedTranscript& self_tr, const TimedTranscript& user_tr);

// Same as build_training_grid but the text stream carries the merged dialogue
// text, which is what the speech-synthesis schema teacher-forces.
BuildResult build_tts_grid(const TimedTranscript& self_tr, const TimedTranscript& user_tr,
                           const ActivityTrack& self_act, const ActivityTrack& user_act,
                           const grid::GridSchema& schema, size_t T);

struct ManifestEntry {
  std::string id;
  std::string grid_path;
  double duration_s = 0.0;
  std::string split = "unsplit";
};

struct SplitRatios {
  double train = 94.0;
  double valid = 3.0;
  double test = 3.0;
};

struct SplitResult {
  std::vector<ManifestEntry> train, valid, test;
};

// Seeded shuffle decides membership; each output list keeps input order.
// valid and test receive floor(share * n); the remainder trains.
SplitResult split_manifest(const std::vector<ManifestEntry>& items, const SplitRatios& ratios,
                           uint64_t seed);

// --- text file formats (TSV, one record per line) ---

struct TranscriptRow {
  std::string speaker;
  double start = 0.0;
  uint32_t token = 0;
};

std::vector<TranscriptRow> read_transcript_file(const std::string& path);
std::vector<DiarSegment> read_diarization_file(const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);

// Collects the rows whose speaker maps to the channel, sorted by start.
TimedTranscript transcript_for_channel(const std::vector<TranscriptRow>& rows,
                                       const std::map<std::string, grid::Channel>& channel_map,
                                       grid::Channel channel, uint32_t text_vocab, uint32_t pad_id);

}  // namespace jmlab::align
