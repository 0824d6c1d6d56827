#include "jmlab/token_grid.hpp"

#include <algorithm>
#include <set>

namespace jmlab::grid {

const char* role_name(StreamRole role) {
  switch (role) {
    case StreamRole::text:
      return "text";
    case StreamRole::semantic_audio:
      return "semantic";
    case StreamRole::acoustic_audio:
      return "acoustic";
  }
  return "?";
}

const char* channel_name(Channel ch) {
  return ch == Channel::self ? "self" : "user";
}

void StreamSpec::validate() const {
  if (vocab_size == 0) throw DataError("stream " + name + ": vocab_size must be positive");
  if (initial_id >= vocab_size)
    throw DataError("stream " + name + ": initial_id out of vocabulary");
  if (role == StreamRole::text) {
    if (channel != Channel::self) throw DataError("text stream must be on the self channel");
    if (!has_pad()) throw DataError("text stream requires a pad_id");
  } else if (has_pad()) {
    throw DataError("stream " + name + ": pad_id is text-only");
  }
  if (has_pad()) {
    if (pad_id >= vocab_size) throw DataError("stream " + name + ": pad_id out of vocabulary");
    if (pad_id == initial_id)
      throw DataError("stream " + name + ": pad_id and initial_id must differ");
  }
}

bool operator==(const StreamSpec& a, const StreamSpec& b) {
  return a.role == b.role && a.channel == b.channel && a.vocab_size == b.vocab_size &&
         a.delay == b.delay && a.pad_id == b.pad_id && a.initial_id == b.initial_id;
}

int GridSchema::text_stream() const {
  for (size_t s = 0; s < streams.size(); ++s)
    if (streams[s].role == StreamRole::text) return static_cast<int>(s);
  return -1;
}

int GridSchema::semantic_stream(Channel ch) const {
  for (size_t s = 0; s < streams.size(); ++s)
    if (streams[s].role == StreamRole::semantic_audio && streams[s].channel == ch)
      return static_cast<int>(s);
  return -1;
}

std::vector<int> GridSchema::audio_streams(Channel ch) const {
  std::vector<int> out;
  for (size_t s = 0; s < streams.size(); ++s) {
    const StreamSpec& sp = streams[s];
    if (sp.channel == ch &&
        (sp.role == StreamRole::semantic_audio || sp.role == StreamRole::acoustic_audio))
      out.push_back(static_cast<int>(s));
  }
  return out;
}

uint16_t GridSchema::max_delay() const {
  uint16_t d = 0;
  for (const auto& sp : streams) d = std::max(d, sp.delay);
  return d;
}

void GridSchema::validate() const {
  if (frame_rate_hz != kFrameRateHz) throw DataError("frame rate is fixed at 12.5 Hz");
  std::set<std::string> names;
  int text_count = 0;
  for (const auto& sp : streams) {
    sp.validate();
    if (!names.insert(sp.name).second) throw DataError("duplicate stream name: " + sp.name);
    if (sp.role == StreamRole::text) ++text_count;
  }
  if (text_count > 1) throw DataError("at most one text stream is supported");
}

namespace {

// Names and codec layers are not stored on disk; they are a pure function
// of the (role, channel) sequence, recomputed here and after deserialize.
void derive_names(GridSchema& schema) {
  int acoustic_seen[2] = {0, 0};
  for (auto& sp : schema.streams) {
    int ci = sp.channel == Channel::self ? 0 : 1;
    switch (sp.role) {
      case StreamRole::text:
        sp.name = "text";
        sp.codec_layer = 0;
        break;
      case StreamRole::semantic_audio:
        sp.name = std::string("semantic_") + channel_name(sp.channel);
        sp.codec_layer = 1;
        break;
      case StreamRole::acoustic_audio: {
        int layer = 2 + acoustic_seen[ci]++;
        sp.name = std::string("acoustic_") + channel_name(sp.channel) + "_" + std::to_string(layer);
        sp.codec_layer = static_cast<uint8_t>(layer);
        break;
      }
    }
  }
}

}  // namespace

GridSchema build_schema(SchemaKind kind, uint32_t text_vocab, uint32_t semantic_vocab,
                        uint32_t acoustic_vocab) {
  if (text_vocab < 4) throw DataError("text vocab cannot host PAD and INITIAL (need >= 4)");
  if (semantic_vocab < 4) throw DataError("semantic vocab too small (need >= 4)");
  if (acoustic_vocab < 4) throw DataError("acoustic vocab too small (need >= 4)");

  uint16_t semantic_delay = kind == SchemaKind::dialogue ? 0 : 25;
  uint16_t acoustic_delay = kind == SchemaKind::dialogue ? 1 : 27;

  GridSchema schema;
  auto add = [&](StreamRole role, Channel ch, uint32_t vocab, uint16_t delay) {
    StreamSpec sp;
    sp.role = role;
    sp.channel = ch;
    sp.vocab_size = vocab;
    sp.delay = delay;
    if (role == StreamRole::text) {
      sp.pad_id = text_pad_id(vocab);
      sp.initial_id = text_initial_id(vocab);
    } else {
      sp.pad_id = kNoPadId;
      sp.initial_id = audio_initial_id(vocab);
    }
    schema.streams.push_back(sp);
  };

  add(StreamRole::text, Channel::self, text_vocab, 0);
  for (Channel ch : {Channel::self, Channel::user}) {
    add(StreamRole::semantic_audio, ch, semantic_vocab, semantic_delay);
    for (int layer = 2; layer <= 8; ++layer)
      add(StreamRole::acoustic_audio, ch, acoustic_vocab, acoustic_delay);
  }
  derive_names(schema);
  schema.validate();
  return schema;
}

TokenGrid::TokenGrid(GridSchema schema, size_t length_frames, bool delayed)
    : schema_(std::move(schema)), length_(length_frames), delayed_(delayed) {
  schema_.validate();
  tokens_.assign(length_ * schema_.stream_count(), 0);
}

TokenGrid TokenGrid::from_tokens(GridSchema schema, std::vector<uint32_t> tokens_time_major,
                                 bool delayed) {
  schema.validate();
  size_t S = schema.stream_count();
  if (S == 0) {
    if (!tokens_time_major.empty()) throw DataError("tokens present but schema has no streams");
    TokenGrid g(std::move(schema), 0, delayed);
    return g;
  }
  if (tokens_time_major.size() % S != 0)
    throw DataError("token count is not a multiple of the stream count");
  size_t T = tokens_time_major.size() / S;
  for (size_t t = 0; t < T; ++t)
    for (size_t s = 0; s < S; ++s)
      if (tokens_time_major[t * S + s] >= schema.streams[s].vocab_size)
        throw DataError("token id out of vocabulary at frame " + std::to_string(t) + ", stream " +
                        schema.streams[s].name);
  TokenGrid g(std::move(schema), 0, delayed);
  g.length_ = T;
  g.tokens_ = std::move(tokens_time_major);
  return g;
}

uint32_t TokenGrid::at(size_t frame, size_t stream) const {
  if (frame >= length_ || stream >= schema_.stream_count())
    throw DataError("grid index out of range");
  return tokens_[frame * schema_.stream_count() + stream];
}

void TokenGrid::set(size_t frame, size_t stream, uint32_t token) {
  if (frame >= length_ || stream >= schema_.stream_count())
    throw DataError("grid index out of range");
  if (token >= schema_.streams[stream].vocab_size)
    throw DataError("token id out of vocabulary for stream " + schema_.streams[stream].name);
  tokens_[frame * schema_.stream_count() + stream] = token;
}

bool operator==(const GridSchema& a, const GridSchema& b) {
  return a.streams == b.streams && a.frame_rate_hz == b.frame_rate_hz;
}

bool operator==(const TokenGrid& a, const TokenGrid& b) {
  return a.schema() == b.schema() && a.length() == b.length() && a.delayed() == b.delayed() &&
         a.tokens() == b.tokens();
}

TokenGrid apply_delays(const TokenGrid& g) {
  if (g.delayed()) throw UsageError("apply_delays: grid is already delayed");
  size_t T = g.length(), S = g.schema().stream_count();
  TokenGrid out(g.schema(), T, true);
  for (size_t s = 0; s < S; ++s) {
    const StreamSpec& sp = g.schema().streams[s];
    for (size_t t = 0; t < T; ++t)
      out.set(t, s, t < sp.delay ? sp.initial_id : g.at(t - sp.delay, s));
  }
  return out;
}

TokenGrid remove_delays(const TokenGrid& g) {
  if (!g.delayed()) throw UsageError("remove_delays: grid is not delayed");
  size_t T = g.length(), S = g.schema().stream_count();
  TokenGrid out(g.schema(), T, false);
  for (size_t s = 0; s < S; ++s) {
    const StreamSpec& sp = g.schema().streams[s];
    for (size_t t = 0; t < T; ++t) {
      size_t src = t + sp.delay;
      out.set(t, s, src < T ? g.at(src, s) : sp.initial_id);
    }
  }
  return out;
}

double pad_ratio(const TokenGrid& g) {
  int ts = g.schema().text_stream();
  if (ts < 0) throw UsageError("pad_ratio: schema has no text stream");
  if (g.length() == 0) return 0.0;
  const StreamSpec& sp = g.schema().streams[static_cast<size_t>(ts)];
  size_t pads = 0;
  for (size_t t = 0; t < g.length(); ++t)
    if (g.at(t, static_cast<size_t>(ts)) == sp.pad_id) ++pads;
  return static_cast<double>(pads) / static_cast<double>(g.length());
}

TokenGrid slice(const TokenGrid& g, size_t start_frame, size_t end_frame) {
  if (start_frame > end_frame || end_frame > g.length())
    throw UsageError("slice: frame range out of bounds");
  size_t S = g.schema().stream_count();
  std::vector<uint32_t> toks(g.tokens().begin() + static_cast<ptrdiff_t>(start_frame * S),
                             g.tokens().begin() + static_cast<ptrdiff_t>(end_frame * S));
  return TokenGrid::from_tokens(g.schema(), std::move(toks), g.delayed());
}

TokenGrid concat(const TokenGrid& a, const TokenGrid& b) {
  if (!(a.schema() == b.schema())) throw UsageError("concat: schema mismatch");
  if (a.delayed() != b.delayed()) throw UsageError("concat: delayed flag mismatch");
  std::vector<uint32_t> toks = a.tokens();
  toks.insert(toks.end(), b.tokens().begin(), b.tokens().end());
  return TokenGrid::from_tokens(a.schema(), std::move(toks), a.delayed());
}

namespace {
constexpr char kMagic[4] = {'J', 'M', 'G', 'R'};
constexpr uint16_t kVersion = 1;
}  // namespace

void write_schema(ByteWriter& w, const GridSchema& schema) {
  w.u16(static_cast<uint16_t>(schema.stream_count()));
  for (const auto& sp : schema.streams) {
    w.u8(static_cast<uint8_t>(sp.role));
    w.u8(static_cast<uint8_t>(sp.channel));
    w.u16(sp.delay);
    w.u32(sp.vocab_size);
    w.u32(sp.pad_id);
    w.u32(sp.initial_id);
  }
}

GridSchema read_schema(ByteReader& r, const std::string& what) {
  uint16_t S = r.u16();
  GridSchema schema;
  for (uint16_t s = 0; s < S; ++s) {
    StreamSpec sp;
    uint8_t role = r.u8();
    if (role > 2) throw DataError(what + ": bad stream role");
    sp.role = static_cast<StreamRole>(role);
    uint8_t ch = r.u8();
    if (ch > 1) throw DataError(what + ": bad stream channel");
    sp.channel = static_cast<Channel>(ch);
    sp.delay = r.u16();
    sp.vocab_size = r.u32();
    sp.pad_id = r.u32();
    sp.initial_id = r.u32();
    schema.streams.push_back(sp);
  }
  derive_names(schema);
  return schema;
}

std::string serialize(const TokenGrid& g) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  write_schema(w, g.schema());
  w.u8(g.delayed() ? 1 : 0);
  w.u64(g.length());
  for (uint32_t tok : g.tokens()) w.u32(tok);
  return w.str();
}

TokenGrid deserialize(const void* data, size_t size) {
  ByteReader r(data, size, "grid");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("grid: bad magic");
  uint16_t version = r.u16();
  if (version != kVersion)
    throw DataError("grid: unsupported version " + std::to_string(version));
  GridSchema schema = read_schema(r, "grid");
  size_t S = schema.stream_count();
  uint8_t delayed = r.u8();
  if (delayed > 1) throw DataError("grid: bad delayed flag");
  uint64_t T = r.u64();
  if (S > 0 && T > r.remaining() / (4 * static_cast<uint64_t>(S)))
    throw DataError("grid: truncated");
  std::vector<uint32_t> toks(static_cast<size_t>(T) * S);
  for (auto& tok : toks) tok = r.u32();
  r.expect_end();
  return TokenGrid::from_tokens(std::move(schema), std::move(toks), delayed == 1);
}

TokenGrid deserialize(const std::string& bytes) {
  return deserialize(bytes.data(), bytes.size());
}

void save_grid(const TokenGrid& g, const std::string& path) {
  write_file(path, serialize(g));
}

TokenGrid load_grid(const std::string& path) {
  try {
    return deserialize(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace jmlab::grid
