#include "jmlab/alignment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace jmlab::align {

std::map<std::string, grid::Channel> assign_channels(const std::vector<DiarSegment>& segments,
                                                     uint64_t seed) {
  if (segments.empty()) throw DataError("assign_channels: no diarization segments");
  std::set<std::string> speakers;
  for (const auto& seg : segments) speakers.insert(seg.speaker);
  std::vector<std::string> ordered(speakers.begin(), speakers.end());
  Rng rng(seed);
  size_t chosen = static_cast<size_t>(rng.below(ordered.size()));
  std::map<std::string, grid::Channel> out;
  for (size_t i = 0; i < ordered.size(); ++i)
    out[ordered[i]] = i == chosen ? grid::Channel::self : grid::Channel::user;
  return out;
}

TextStreamResult text_stream_from_transcript(const TimedTranscript& tr, size_t T,
                                             const grid::StreamSpec& text_spec) {
  if (text_spec.role != grid::StreamRole::text || !text_spec.has_pad())
    throw UsageError("text_stream_from_transcript: stream spec is not a text stream");
  TextStreamResult res;
  res.tokens.assign(T, text_spec.pad_id);
  int64_t next_free = 0;
  double prev_start = -1.0;
  for (const auto& tok : tr.tokens) {
    if (tok.start < prev_start) throw DataError("transcript is not sorted by start time");
    prev_start = tok.start;
    if (tok.start < 0) throw DataError("transcript token start is negative");
    if (tok.token_id >= text_spec.vocab_size || tok.token_id == text_spec.pad_id)
      throw DataError("transcript token id invalid for the text vocabulary");
    int64_t frame = static_cast<int64_t>(std::floor(tok.start * kFrameRateHz));
    if (frame < next_free) frame = next_free;
    if (frame >= static_cast<int64_t>(T)) {
      ++res.dropped;
      continue;
    }
    res.tokens[static_cast<size_t>(frame)] = tok.token_id;
    next_free = frame + 1;
  }
  return res;
}

ActivityTrack activity_from_segments(const std::vector<DiarSegment>& segments,
                                     const std::map<std::string, grid::Channel>& channel_map,
                                     grid::Channel channel, size_t T) {
  double horizon = frames_to_seconds(static_cast<int64_t>(T));
  std::vector<Interval> raw;
  for (const auto& seg : segments) {
    auto it = channel_map.find(seg.speaker);
    if (it == channel_map.end())
      throw DataError("speaker missing from channel map: " + seg.speaker);
    if (it->second != channel) continue;
    double s = std::max(0.0, seg.interval.start);
    double e = std::min(horizon, seg.interval.end);
    if (s < e) raw.push_back({s, e});
  }
  std::sort(raw.begin(), raw.end(), [](const Interval& a, const Interval& b) {
    return a.start < b.start || (a.start == b.start && a.end < b.end);
  });
  ActivityTrack track;
  track.channel = channel;
  for (const auto& iv : raw) {
    if (!track.intervals.empty() && iv.start <= track.intervals.back().end)
      track.intervals.back().end = std::max(track.intervals.back().end, iv.end);
    else
      track.intervals.push_back(iv);
  }
  return track;
}

bool frame_active(const ActivityTrack& activity, size_t frame) {
  double mid = (static_cast<double>(frame) + 0.5) / kFrameRateHz;
  // intervals are sorted; binary search for the last interval starting <= mid
  const auto& ivs = activity.intervals;
  size_t lo = 0, hi = ivs.size();
  while (lo < hi) {
    size_t m = (lo + hi) / 2;
    if (ivs[m].start <= mid)
      lo = m + 1;
    else
      hi = m;
  }
  return lo > 0 && mid < ivs[lo - 1].end;
}

namespace {

// 64-bit mixing hash for the acoustic layers; inputs pack into one word.
uint64_t acoustic_hash(uint8_t layer, size_t frame, uint32_t semantic) {
  uint64_t key = (static_cast<uint64_t>(layer) << 56) |
                 (static_cast<uint64_t>(semantic) << 32) | static_cast<uint64_t>(frame);
  return splitmix64(key);
}

}  // namespace

std::vector<std::vector<uint32_t>> pseudo_encode(const std::vector<uint32_t>& text_stream,
                                                 const ActivityTrack& activity, grid::Channel channel,
                                                 const grid::GridSchema& schema) {
  int text_idx = schema.text_stream();
  if (text_idx < 0) throw UsageError("pseudo_encode: schema has no text stream");
  const grid::StreamSpec& text_spec = schema.streams[static_cast<size_t>(text_idx)];
  std::vector<int> audio = schema.audio_streams(channel);
  if (audio.size() != 8)
    throw UsageError("pseudo_encode: schema lacks the 8 audio streams for the channel");
  const grid::StreamSpec& sem_spec = schema.streams[static_cast<size_t>(audio[0])];
  if (sem_spec.role != grid::StreamRole::semantic_audio)
    throw UsageError("pseudo_encode: first audio stream is not semantic");
  if (sem_spec.vocab_size < text_spec.vocab_size + 2)
    throw DataError("pseudo_encode: semantic vocab too small for the text vocab");

  size_t T = text_stream.size();
  std::vector<std::vector<uint32_t>> rows(8, std::vector<uint32_t>(T, 0));
  for (size_t t = 0; t < T; ++t) {
    uint32_t sem = 0;
    if (frame_active(activity, t)) {
      uint32_t txt = text_stream[t];
      if (txt >= text_spec.vocab_size) throw DataError("pseudo_encode: text token out of vocabulary");
      sem = txt == text_spec.pad_id ? 1 : 2 + txt;
    }
    rows[0][t] = sem;
    for (size_t k = 1; k < 8; ++k) {
      const grid::StreamSpec& sp = schema.streams[static_cast<size_t>(audio[k])];
      rows[k][t] = static_cast<uint32_t>(acoustic_hash(sp.codec_layer, t, sem) % sp.vocab_size);
    }
  }
  return rows;
}

std::vector<uint32_t> pseudo_decode(const std::vector<uint32_t>& semantic_tokens) {
  std::vector<uint32_t> out;
  for (uint32_t s : semantic_tokens)
    if (s >= 2) out.push_back(s - 2);
  return out;
}

namespace {

enum class TextSource { self_only, merged };

BuildResult build_grid_impl(TextSource source, const TimedTranscript& self_tr,
                            const TimedTranscript& user_tr, const ActivityTrack& self_act,
                            const ActivityTrack& user_act, const grid::GridSchema& schema,
                            size_t T) {
  int text_idx = schema.text_stream();
  if (text_idx < 0) throw UsageError("build grid: schema has no text stream");
  const grid::StreamSpec& text_spec = schema.streams[static_cast<size_t>(text_idx)];

  TextStreamResult self_text = text_stream_from_transcript(self_tr, T, text_spec);
  TextStreamResult user_text = text_stream_from_transcript(user_tr, T, text_spec);
  auto self_audio = pseudo_encode(self_text.tokens, self_act, grid::Channel::self, schema);
  auto user_audio = pseudo_encode(user_text.tokens, user_act, grid::Channel::user, schema);

  size_t dropped = self_text.dropped + user_text.dropped;
  const std::vector<uint32_t>* text_tokens = &self_text.tokens;
  TextStreamResult merged_text;
  if (source == TextSource::merged) {
    merged_text = text_stream_from_transcript(merge_transcripts(self_tr, user_tr), T, text_spec);
    dropped += merged_text.dropped;
    text_tokens = &merged_text.tokens;
  }

  grid::TokenGrid g(schema, T, false);
  for (size_t t = 0; t < T; ++t) g.set(t, static_cast<size_t>(text_idx), (*text_tokens)[t]);
  std::vector<int> self_streams = schema.audio_streams(grid::Channel::self);
  std::vector<int> user_streams = schema.audio_streams(grid::Channel::user);
  for (size_t k = 0; k < 8; ++k)
    for (size_t t = 0; t < T; ++t) {
      g.set(t, static_cast<size_t>(self_streams[k]), self_audio[k][t]);
      g.set(t, static_cast<size_t>(user_streams[k]), user_audio[k][t]);
    }
  return BuildResult{grid::apply_delays(g), dropped};
}

}  // namespace

BuildResult build_training_grid(const TimedTranscript& self_tr, const TimedTranscript& user_tr,
                                const ActivityTrack& self_act, const ActivityTrack& user_act,
                                const grid::GridSchema& schema, size_t T) {
  return build_grid_impl(TextSource::self_only, self_tr, user_tr, self_act, user_act, schema, T);
}

TimedTranscript merge_transcripts(const TimedTranscript& self_tr, const TimedTranscript& user_tr) {
  TimedTranscript merged;
  merged.channel = grid::Channel::self;
  size_t i = 0, j = 0;
  while (i < self_tr.tokens.size() || j < user_tr.tokens.size()) {
    bool take_self;
    if (i == self_tr.tokens.size())
      take_self = false;
    else if (j == user_tr.tokens.size())
      take_self = true;
    else
      take_self = self_tr.tokens[i].start <= user_tr.tokens[j].start;
    merged.tokens.push_back(take_self ? self_tr.tokens[i++] : user_tr.tokens[j++]);
  }
  return merged;
}

BuildResult build_tts_grid(const TimedTranscript& self_tr, const TimedTranscript& user_tr,
                           const ActivityTrack& self_act, const ActivityTrack& user_act,
                           const grid::GridSchema& schema, size_t T) {
  return build_grid_impl(TextSource::merged, self_tr, user_tr, self_act, user_act, schema, T);
}

SplitResult split_manifest(const std::vector<ManifestEntry>& items, const SplitRatios& ratios,
                           uint64_t seed) {
  if (items.empty()) throw DataError("split_manifest: empty manifest");
  if (ratios.train <= 0 || ratios.valid <= 0 || ratios.test <= 0)
    throw UsageError("split_manifest: ratios must be positive");
  double total = ratios.train + ratios.valid + ratios.test;
  size_t n = items.size();
  size_t n_valid = static_cast<size_t>(std::floor(static_cast<double>(n) * ratios.valid / total));
  size_t n_test = static_cast<size_t>(std::floor(static_cast<double>(n) * ratios.test / total));

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<int> label(n, 0);  // 0 train, 1 valid, 2 test
  for (size_t i = 0; i < n_valid; ++i) label[order[i]] = 1;
  for (size_t i = n_valid; i < n_valid + n_test; ++i) label[order[i]] = 2;

  SplitResult res;
  for (size_t i = 0; i < n; ++i) {
    ManifestEntry e = items[i];
    e.split = label[i] == 0 ? "train" : label[i] == 1 ? "valid" : "test";
    (label[i] == 0 ? res.train : label[i] == 1 ? res.valid : res.test).push_back(std::move(e));
  }
  return res;
}

namespace {

double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError(where + ": bad number '" + s + "'");
  return v;
}

uint64_t parse_u64(const std::string& s, const std::string& where) {
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError(where + ": bad integer '" + s + "'");
  return v;
}

// Splits file contents into lines, dropping a trailing empty line.
std::vector<std::string> file_lines(const std::string& path) {
  std::string text = read_file(path);
  std::vector<std::string> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (auto& line : lines)
    if (!line.empty() && line.back() == '\r') line.pop_back();
  return lines;
}

std::string loc(const std::string& path, size_t line_no) {
  return path + ":" + std::to_string(line_no);
}

}  // namespace

std::vector<TranscriptRow> read_transcript_file(const std::string& path) {
  std::vector<TranscriptRow> rows;
  std::vector<std::string> lines = file_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f = split(lines[i], '\t');
    if (f.size() != 3)
      throw DataError(loc(path, i + 1) + ": expected 3 tab-separated fields, got " +
                      std::to_string(f.size()));
    TranscriptRow row;
    row.speaker = f[0];
    row.start = parse_double(f[1], loc(path, i + 1));
    row.token = static_cast<uint32_t>(parse_u64(f[2], loc(path, i + 1)));
    if (row.start < 0) throw DataError(loc(path, i + 1) + ": negative start time");
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<DiarSegment> read_diarization_file(const std::string& path) {
  std::vector<DiarSegment> segs;
  std::vector<std::string> lines = file_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f = split(lines[i], '\t');
    if (f.size() != 3)
      throw DataError(loc(path, i + 1) + ": expected 3 tab-separated fields, got " +
                      std::to_string(f.size()));
    DiarSegment seg;
    seg.speaker = f[0];
    seg.interval.start = parse_double(f[1], loc(path, i + 1));
    seg.interval.end = parse_double(f[2], loc(path, i + 1));
    if (seg.interval.start < 0)
      throw DataError(loc(path, i + 1) + ": negative segment start");
    if (!(seg.interval.start < seg.interval.end))
      throw DataError(loc(path, i + 1) + ": segment start must precede end");
    segs.push_back(std::move(seg));
  }
  return segs;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> lines = file_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f = split(lines[i], '\t');
    if (f.size() != 4)
      throw DataError(loc(path, i + 1) + ": expected 4 tab-separated fields, got " +
                      std::to_string(f.size()));
    ManifestEntry e;
    e.id = f[0];
    e.grid_path = f[1];
    e.duration_s = parse_double(f[2], loc(path, i + 1));
    e.split = f[3];
    if (e.split != "train" && e.split != "valid" && e.split != "test" && e.split != "unsplit")
      throw DataError(loc(path, i + 1) + ": unknown split '" + e.split + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ostringstream out;
  for (const auto& e : entries) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", e.duration_s);
    out << e.id << '\t' << e.grid_path << '\t' << buf << '\t' << e.split << '\n';
  }
  write_file(path, out.str());
}

TimedTranscript transcript_for_channel(const std::vector<TranscriptRow>& rows,
                                       const std::map<std::string, grid::Channel>& channel_map,
                                       grid::Channel channel, uint32_t text_vocab, uint32_t pad_id) {
  TimedTranscript tr;
  tr.channel = channel;
  for (const auto& row : rows) {
    auto it = channel_map.find(row.speaker);
    if (it == channel_map.end()) throw DataError("speaker missing from channel map: " + row.speaker);
    if (it->second != channel) continue;
    if (row.token >= text_vocab || row.token == pad_id)
      throw DataError("transcript token " + std::to_string(row.token) +
                      " invalid for text vocab " + std::to_string(text_vocab));
    tr.tokens.push_back(TimedToken{row.token, row.start});
  }
  std::stable_sort(tr.tokens.begin(), tr.tokens.end(),
                   [](const TimedToken& a, const TimedToken& b) { return a.start < b.start; });
  return tr;
}

}  // namespace jmlab::align
