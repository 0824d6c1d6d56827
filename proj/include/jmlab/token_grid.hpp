#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jmlab/common.hpp"

namespace jmlab::grid {

enum class StreamRole : uint8_t { text = 0, semantic_audio = 1, acoustic_audio = 2 };
enum class Channel : uint8_t { self = 0, user = 1 };

const char* role_name(StreamRole role);
const char* channel_name(Channel ch);

// pad_id sentinel for streams that have no PAD token (all audio streams).
inline constexpr uint32_t kNoPadId = 0xFFFFFFFFu;

// Special-token placement. Text streams reserve the top two ids, audio
// streams the top one; content ids grow from 0 so the pseudo-codec's
// low-id scheme never collides with them.
inline uint32_t text_pad_id(uint32_t vocab) { return vocab - 1; }
inline uint32_t text_initial_id(uint32_t vocab) { return vocab - 2; }
inline uint32_t audio_initial_id(uint32_t vocab) { return vocab - 1; }

struct StreamSpec {
  std::string name;  // derived from role/channel/layer, stable across runs
  StreamRole role = StreamRole::text;
  Channel channel = Channel::self;
  uint32_t vocab_size = 0;
  uint16_t delay = 0;       // frames
  uint32_t pad_id = kNoPadId;
  uint32_t initial_id = 0;  // filler for positions a delay has not reached
  uint8_t codec_layer = 0;  // 1 semantic, 2..8 acoustic, 0 text

  bool has_pad() const { return pad_id != kNoPadId; }
  void validate() const;
};

bool operator==(const StreamSpec& a, const StreamSpec& b);

struct GridSchema {
  std::vector<StreamSpec> streams;
  double frame_rate_hz = kFrameRateHz;

  size_t stream_count() const { return streams.size(); }
  int text_stream() const;                           // index, -1 if absent
  int semantic_stream(Channel ch) const;             // index, -1 if absent
  std::vector<int> audio_streams(Channel ch) const;  // semantic then acoustic 2..8
  uint16_t max_delay() const;
  void validate() const;
};

bool operator==(const GridSchema& a, const GridSchema& b);

enum class SchemaKind { dialogue, tts };

// 17 streams: text(self), semantic(self), acoustic(self) x7, semantic(user),
// acoustic(user) x7. Dialogue kind delays acoustic streams by one frame;
// tts kind delays semantic by 25 and acoustic by 27.
GridSchema build_schema(SchemaKind kind, uint32_t text_vocab, uint32_t semantic_vocab,
                        uint32_t acoustic_vocab);

class TokenGrid {
 public:
  TokenGrid(GridSchema schema, size_t length_frames, bool delayed = false);
  static TokenGrid from_tokens(GridSchema schema, std::vector<uint32_t> tokens_time_major,
                               bool delayed);

  const GridSchema& schema() const { return schema_; }
  size_t length() const { return length_; }
  bool delayed() const { return delayed_; }
  double duration_s() const { return frames_to_seconds(static_cast<int64_t>(length_)); }

  uint32_t at(size_t frame, size_t stream) const;
  void set(size_t frame, size_t stream, uint32_t token);
  const std::vector<uint32_t>& tokens() const { return tokens_; }

 private:
  GridSchema schema_;
  size_t length_ = 0;
  bool delayed_ = false;
  std::vector<uint32_t> tokens_;  // time-major: frame 0 streams 0..S-1, frame 1, ...
};

bool operator==(const TokenGrid& a, const TokenGrid& b);

// Shifts each stream right by its delay, filling vacated positions with
// initial_id and dropping the trailing tokens. Length is unchanged.
TokenGrid apply_delays(const TokenGrid& g);

// Inverse shift; the trailing delay positions of each stream, whose source
// tokens were dropped by apply_delays, are filled with initial_id.
TokenGrid remove_delays(const TokenGrid& g);

// Fraction of text-stream frames holding PAD. T=0 gives 0.
double pad_ratio(const TokenGrid& g);

TokenGrid slice(const TokenGrid& g, size_t start_frame, size_t end_frame);
TokenGrid concat(const TokenGrid& a, const TokenGrid& b);

// Wire form of a schema (roles, channels, delays, vocabularies, specials);
// shared by the grid format and model checkpoints. Stream names are derived,
// not stored.
void write_schema(ByteWriter& w, const GridSchema& schema);
GridSchema read_schema(ByteReader& r, const std::string& what);

std::string serialize(const TokenGrid& g);
TokenGrid deserialize(const void* data, size_t size);
TokenGrid deserialize(const std::string& bytes);

void save_grid(const TokenGrid& g, const std::string& path);
TokenGrid load_grid(const std::string& path);

}  // namespace jmlab::grid
