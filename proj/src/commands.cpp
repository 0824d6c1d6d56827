#include "jmlab/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "jmlab/common.hpp"

namespace fs = std::filesystem;

namespace jmlab::cmd {

namespace {

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string resolve_relative(const std::string& base_file, const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return p;
  return (fs::path(base_file).parent_path() / path).string();
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

grid::TokenGrid load_delayed(const std::string& path) {
  grid::TokenGrid g = grid::load_grid(path);
  if (!g.delayed()) return grid::apply_delays(g);
  return g;
}

struct ActivityPair {
  align::ActivityTrack self_track;
  align::ActivityTrack user_track;
  double duration_s = 0.0;
};

ActivityPair tracks_from_grid(const grid::TokenGrid& g) {
  grid::TokenGrid und = g.delayed() ? grid::remove_delays(g) : g;
  ActivityPair p;
  p.self_track = turn::activity_from_grid(und, grid::Channel::self);
  p.user_track = turn::activity_from_grid(und, grid::Channel::user);
  p.duration_s = und.duration_s();
  return p;
}

turn::TurnTakingReport report_for(const ActivityPair& p) {
  return turn::report(turn::segments_to_ipus(p.self_track), turn::segments_to_ipus(p.user_track),
                      p.duration_s);
}

std::vector<align::ManifestEntry> filter_split(const std::vector<align::ManifestEntry>& entries,
                                               const std::string& split) {
  if (split == "all") return entries;
  std::vector<align::ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == split) out.push_back(e);
  return out;
}

}  // namespace

double setting_double(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(what + ": not a number: '" + s + "'");
  }
}

uint64_t setting_u64(const std::string& s, const std::string& what) {
  try {
    size_t used = 0;
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(what + ": not a non-negative integer: '" + s + "'");
  }
}

std::map<std::string, std::string> resolve_settings(
    const std::map<std::string, std::string>& defaults, const std::string& config_json_text,
    const std::map<std::string, std::string>& flag_overrides) {
  std::map<std::string, std::string> out = defaults;
  if (!config_json_text.empty()) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(config_json_text);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw UsageError("config file must hold a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (out.find(key) == out.end())
        throw UsageError("unknown config key '" + key + "' for this command");
      out[key] = value.is_string() ? value.get<std::string>() : value.dump();
    }
  }
  for (const auto& [key, value] : flag_overrides) {
    if (out.find(key) == out.end()) throw UsageError("unknown setting '" + key + "'");
    out[key] = value;
  }
  return out;
}

std::string render_settings(const std::map<std::string, std::string>& resolved) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [key, value] : resolved) doc[key] = value;
  return doc.dump(2) + "\n";
}

PrepResult cmd_prep(const PrepArgs& a) {
  if (a.in_dir.empty() || a.out_dir.empty()) throw UsageError("prep: need --in and --out");
  if (!fs::is_directory(a.in_dir)) throw UsageError("prep: not a directory: " + a.in_dir);

  const std::string trans_suffix = ".trans.tsv";
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(a.in_dir)) {
    std::string name = entry.path().filename().string();
    if (name.size() > trans_suffix.size() &&
        name.compare(name.size() - trans_suffix.size(), trans_suffix.size(), trans_suffix) == 0)
      ids.push_back(name.substr(0, name.size() - trans_suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw UsageError("prep: no *.trans.tsv files in " + a.in_dir);

  grid::SchemaKind kind;
  if (a.kind == "dialogue")
    kind = grid::SchemaKind::dialogue;
  else if (a.kind == "tts")
    kind = grid::SchemaKind::tts;
  else
    throw UsageError("prep: kind must be dialogue or tts, got " + a.kind);
  auto schema = grid::build_schema(kind, a.text_vocab, a.semantic_vocab, a.acoustic_vocab);
  const auto& text_spec = schema.streams[0];
  const size_t min_frames = static_cast<size_t>(schema.max_delay()) + 1;

  ensure_dir(join(a.out_dir, "grids"));
  PrepResult res;
  double pad_weighted = 0.0;
  uint64_t frames_total = 0;
  std::ostringstream summary;

  for (const auto& id : ids) {
    std::string diar_path = join(a.in_dir, id + ".diar.tsv");
    if (!fs::exists(diar_path)) throw DataError("prep: missing diarization file " + diar_path);
    auto rows = align::read_transcript_file(join(a.in_dir, id + trans_suffix));
    auto segs = align::read_diarization_file(diar_path);

    auto channels = align::assign_channels(segs, splitmix64(a.seed ^ fnv1a64(id)));
    double cover = 0.0;
    for (const auto& s : segs) cover = std::max(cover, s.interval.end);
    for (const auto& r : rows) cover = std::max(cover, r.start);
    size_t T = static_cast<size_t>(std::ceil(cover * kFrameRateHz));
    if (T < min_frames) T = min_frames;

    auto self_tr = align::transcript_for_channel(rows, channels, grid::Channel::self,
                                                 text_spec.vocab_size, text_spec.pad_id);
    auto user_tr = align::transcript_for_channel(rows, channels, grid::Channel::user,
                                                 text_spec.vocab_size, text_spec.pad_id);
    auto self_act = align::activity_from_segments(segs, channels, grid::Channel::self, T);
    auto user_act = align::activity_from_segments(segs, channels, grid::Channel::user, T);

    auto built = kind == grid::SchemaKind::tts
                     ? align::build_tts_grid(self_tr, user_tr, self_act, user_act, schema, T)
                     : align::build_training_grid(self_tr, user_tr, self_act, user_act, schema, T);
    std::string rel = "grids/" + id + ".jmg";
    grid::save_grid(built.grid, join(a.out_dir, rel));

    double ratio = grid::pad_ratio(built.grid);
    res.manifest.push_back({id, rel, frames_to_seconds(static_cast<int64_t>(T)), "unsplit"});
    res.pad_ratios.push_back(ratio);
    res.dropped_tokens += built.dropped_tokens;
    pad_weighted += ratio * static_cast<double>(T);
    frames_total += T;

    char line[256];
    std::snprintf(line, sizeof line, "%s\t%.6f\t%zu\n", id.c_str(), ratio, built.dropped_tokens);
    summary << line;
  }

  res.corpus_pad_ratio = frames_total == 0 ? 0.0 : pad_weighted / static_cast<double>(frames_total);
  char total_line[128];
  std::snprintf(total_line, sizeof total_line, "corpus\t%.6f\t%zu\n", res.corpus_pad_ratio,
                res.dropped_tokens);
  summary << total_line;

  res.manifest_path = join(a.out_dir, "manifest.tsv");
  align::write_manifest(res.manifest, res.manifest_path);
  write_file(join(a.out_dir, "prep_summary.tsv"), summary.str());
  return res;
}

SplitCounts cmd_split(const SplitArgs& a) {
  if (a.manifest.empty()) throw UsageError("split: need --manifest");
  if (a.valid_pct <= 0 || a.test_pct <= 0 || a.valid_pct + a.test_pct >= 100.0)
    throw UsageError("split: shares must be positive and leave room for training data");
  auto entries = align::read_manifest(a.manifest);

  std::set<std::string> seen;
  for (const auto& e : entries)
    if (!seen.insert(e.id).second) throw DataError("split: duplicate dialogue id " + e.id);

  align::SplitRatios ratios;
  ratios.valid = a.valid_pct;
  ratios.test = a.test_pct;
  ratios.train = 100.0 - a.valid_pct - a.test_pct;
  auto parts = align::split_manifest(entries, ratios, a.seed);

  std::map<std::string, std::string> assignment;
  for (const auto& e : parts.train) assignment[e.id] = "train";
  for (const auto& e : parts.valid) assignment[e.id] = "valid";
  for (const auto& e : parts.test) assignment[e.id] = "test";
  for (auto& e : entries) e.split = assignment.at(e.id);

  align::write_manifest(entries, a.out.empty() ? a.manifest : a.out);
  return {parts.train.size(), parts.valid.size(), parts.test.size()};
}

TrainResult cmd_train(const TrainArgs& a) {
  if (a.manifest.empty() || a.out_dir.empty()) throw UsageError("train: need --manifest and --out");
  auto entries = align::read_manifest(a.manifest);
  auto selected = filter_split(entries, "train");
  if (selected.empty()) selected = filter_split(entries, "unsplit");
  if (selected.empty()) throw UsageError("train: manifest has no train or unsplit entries");

  // Long dialogues train as consecutive windows of the model's frame budget.
  std::vector<grid::TokenGrid> windows;
  for (const auto& e : selected) {
    grid::TokenGrid g = load_delayed(resolve_relative(a.manifest, e.grid_path));
    for (size_t start = 0; start < g.length(); start += static_cast<size_t>(a.max_frames)) {
      size_t end = std::min(start + static_cast<size_t>(a.max_frames), g.length());
      if (end - start >= 2) windows.push_back(grid::slice(g, start, end));
    }
  }
  if (windows.empty()) throw UsageError("train: no trainable windows (all grids too short)");
  for (const auto& w : windows)
    if (!(w.schema() == windows.front().schema()))
      throw DataError("train: manifest mixes grid schemas");

  model::ModelState state = [&] {
    if (!a.resume.empty()) return model::load_checkpoint(a.resume);
    model::ModelConfig mc;
    mc.d_model = a.d_model;
    mc.n_heads = a.n_heads;
    mc.temporal_layers = a.temporal_layers;
    mc.depth_layers = a.depth_layers;
    mc.max_frames = a.max_frames;
    mc.schema = windows.front().schema();
    mc.seed = a.seed;
    return model::init_model(mc);
  }();
  if (!(state.config.schema == windows.front().schema()))
    throw UsageError("train: checkpoint schema does not match the manifest grids");
  if (static_cast<size_t>(state.config.max_frames) <
      std::max_element(windows.begin(), windows.end(),
                       [](const auto& x, const auto& y) { return x.length() < y.length(); })
          ->length())
    throw UsageError("train: a window exceeds the checkpoint's frame budget");

  // Deterministic batching: manifest order, windows packed greedily up to
  // batch_frames; step s always consumes batch s mod B, which is what makes
  // resumed runs retrace the original schedule.
  std::vector<std::vector<const grid::TokenGrid*>> batches;
  {
    std::vector<const grid::TokenGrid*> cur;
    uint64_t cur_frames = 0;
    for (const auto& w : windows) {
      if (!cur.empty() && cur_frames + w.length() > a.tc.batch_frames) {
        batches.push_back(cur);
        cur.clear();
        cur_frames = 0;
      }
      cur.push_back(&w);
      cur_frames += w.length();
    }
    if (!cur.empty()) batches.push_back(cur);
  }
  uint64_t B = batches.size();
  uint64_t target = a.steps > 0 ? a.steps : a.tc.epochs * B;

  ensure_dir(a.out_dir);
  std::ofstream loss_file(join(a.out_dir, "loss.tsv"), std::ios::trunc);
  if (!loss_file) throw UsageError("train: cannot write loss file in " + a.out_dir);
  loss_file << "step\tloss\tlr_temporal\tlr_depth\ttokens\n";

  TrainResult res;
  while (state.step < target) {
    auto metrics = model::train_step(state, batches[state.step % B], a.tc);
    if (!std::isfinite(metrics.breakdown.total))
      throw NumericError("train: non-finite loss at step " + std::to_string(metrics.step));
    char row[192];
    std::snprintf(row, sizeof row, "%llu\t%.17g\t%.17g\t%.17g\t%llu\n",
                  static_cast<unsigned long long>(metrics.step), metrics.breakdown.total,
                  metrics.lr_temporal, metrics.lr_depth,
                  static_cast<unsigned long long>(metrics.breakdown.tokens));
    loss_file << row;
    loss_file.flush();
    res.losses.push_back(metrics.breakdown.total);
    ++res.steps_run;
    if (a.checkpoint_every > 0 && metrics.step % a.checkpoint_every == 0)
      model::save_checkpoint(state, join(a.out_dir, "ckpt_" + std::to_string(metrics.step) + ".jmck"));
  }

  res.final_step = state.step;
  res.final_checkpoint = join(a.out_dir, "ckpt_final.jmck");
  model::save_checkpoint(state, res.final_checkpoint);
  return res;
}

gen::GenerationResult cmd_continue(const ContinueArgs& a) {
  if (a.checkpoint.empty() || a.grid.empty())
    throw UsageError("continue: need --checkpoint and --grid");
  model::ModelState state = model::load_checkpoint(a.checkpoint);
  grid::TokenGrid g = load_delayed(a.grid);
  size_t prompt_frames = a.prompt_frames == 0 ? g.length() : a.prompt_frames;
  if (prompt_frames > g.length())
    throw UsageError("continue: prompt length exceeds the grid (" + std::to_string(g.length()) +
                     " frames)");
  grid::TokenGrid prompt = grid::slice(g, 0, prompt_frames);

  gen::SamplerConfig sampler;
  sampler.temperature = a.tau;
  sampler.seed = a.seed;
  sampler.max_new_frames = a.n_frames;
  auto res = gen::continue_dialogue(state, prompt, a.n_frames, sampler);

  if (!a.out_dir.empty()) {
    ensure_dir(a.out_dir);
    grid::save_grid(res.grid, join(a.out_dir, "continued.jmg"));
    std::ostringstream log;
    log << "frame\tstream\ttoken\tlogit\n";
    for (const auto& e : res.log) {
      char row[128];
      std::snprintf(row, sizeof row, "%zu\t%zu\t%u\t%.17g\n", e.frame, e.stream, e.token, e.logit);
      log << row;
    }
    write_file(join(a.out_dir, "sample_log.tsv"), log.str());
  }
  return res;
}

gen::BestOfNResult cmd_tts(const TtsArgs& a) {
  if (a.checkpoint.empty() || a.transcript.empty() || a.diarization.empty())
    throw UsageError("tts: need --checkpoint, --transcript, and --diar");
  if (a.candidates == 0) throw UsageError("tts: need at least one candidate");
  model::ModelState state = model::load_checkpoint(a.checkpoint);

  auto rows = align::read_transcript_file(a.transcript);
  auto segs = align::read_diarization_file(a.diarization);
  auto channels = align::assign_channels(segs, a.seed);
  const auto& text_spec = state.config.schema.streams[0];
  auto self_tr = align::transcript_for_channel(rows, channels, grid::Channel::self,
                                               text_spec.vocab_size, text_spec.pad_id);
  auto user_tr = align::transcript_for_channel(rows, channels, grid::Channel::user,
                                               text_spec.vocab_size, text_spec.pad_id);

  size_t n = a.n_frames;
  if (n == 0) {
    double cover = 0.0;
    for (const auto& s : segs) cover = std::max(cover, s.interval.end);
    for (const auto& r : rows) cover = std::max(cover, r.start);
    n = static_cast<size_t>(std::ceil(cover * kFrameRateHz));
  }
  if (n == 0) throw UsageError("tts: nothing to synthesize (zero frames)");
  if (n > static_cast<size_t>(state.config.max_frames))
    throw UsageError("tts: " + std::to_string(n) + " frames exceed the model's budget of " +
                     std::to_string(state.config.max_frames));

  std::vector<uint64_t> seeds(a.candidates);
  for (size_t i = 0; i < seeds.size(); ++i) seeds[i] = a.seed + i;
  auto res = gen::best_of_n(state, self_tr, user_tr, n, seeds, a.tau);

  if (!a.out_dir.empty()) {
    ensure_dir(a.out_dir);
    grid::save_grid(res.best.grid, join(a.out_dir, "tts.jmg"));
    std::ostringstream table;
    table << "seed\twer\tchosen\n";
    for (size_t i = 0; i < seeds.size(); ++i) {
      char row[96];
      std::snprintf(row, sizeof row, "%llu\t%.17g\t%d\n",
                    static_cast<unsigned long long>(seeds[i]), res.wers[i],
                    i == res.best_index ? 1 : 0);
      table << row;
    }
    write_file(join(a.out_dir, "candidates.tsv"), table.str());
  }
  return res;
}

namespace {

std::vector<align::Interval> read_interval_file(const std::string& path) {
  std::vector<align::Interval> out;
  auto lines = split(read_file(path), '\n');
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split(lines[i], '\t');
    if (f.size() != 2)
      throw DataError(path + ":" + std::to_string(i + 1) + ": expected 'start<TAB>end'");
    align::Interval iv;
    iv.start = setting_double(f[0], path + ":" + std::to_string(i + 1));
    iv.end = setting_double(f[1], path + ":" + std::to_string(i + 1));
    out.push_back(iv);
  }
  return out;
}

}  // namespace

turn::TurnTakingReport cmd_analyze(const AnalyzeArgs& a) {
  int sources = (!a.grid.empty() ? 1 : 0) + (!a.manifest.empty() ? 1 : 0) +
                (!a.self_activity.empty() || !a.user_activity.empty() ? 1 : 0);
  if (sources != 1)
    throw UsageError("analyze: pick exactly one input (--grid, --manifest, or activity files)");

  turn::TurnTakingReport rep;
  if (!a.grid.empty()) {
    rep = report_for(tracks_from_grid(grid::load_grid(a.grid)));
  } else if (!a.manifest.empty()) {
    auto entries = filter_split(align::read_manifest(a.manifest), a.split);
    if (entries.empty()) throw UsageError("analyze: no manifest entries in split '" + a.split + "'");
    std::vector<turn::TurnTakingReport> parts;
    for (const auto& e : entries)
      parts.push_back(report_for(tracks_from_grid(grid::load_grid(resolve_relative(a.manifest, e.grid_path)))));
    rep = turn::merge_reports(parts);
  } else {
    if (a.self_activity.empty() || a.user_activity.empty())
      throw UsageError("analyze: activity input needs both --self-activity and --user-activity");
    ActivityPair p;
    p.self_track.channel = grid::Channel::self;
    p.self_track.intervals = read_interval_file(a.self_activity);
    p.user_track.channel = grid::Channel::user;
    p.user_track.intervals = read_interval_file(a.user_activity);
    double last = 0.0;
    for (const auto& iv : p.self_track.intervals) last = std::max(last, iv.end);
    for (const auto& iv : p.user_track.intervals) last = std::max(last, iv.end);
    p.duration_s = a.duration_s > 0.0 ? a.duration_s : last;
    rep = report_for(p);
  }

  if (!a.out_dir.empty()) {
    ensure_dir(a.out_dir);
    write_file(join(a.out_dir, "turns.txt"), turn::format_report(rep));
  }
  return rep;
}

eval::ExperimentReport cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() || a.manifest.empty())
    throw UsageError("eval: need --checkpoint and --manifest");
  model::ModelState state = model::load_checkpoint(a.checkpoint);
  auto entries = align::read_manifest(a.manifest);
  auto selected = filter_split(entries, a.split);
  if (selected.empty()) throw UsageError("eval: no manifest entries in split '" + a.split + "'");

  std::vector<grid::TokenGrid> grids;
  for (const auto& e : selected)
    grids.push_back(grid::load_grid(resolve_relative(a.manifest, e.grid_path)));

  // The mock scoring LM trains on the train split's decoded text when the
  // manifest has one, otherwise on the evaluated dialogues themselves.
  auto lm_entries = filter_split(entries, "train");
  std::vector<std::vector<uint32_t>> corpus;
  if (lm_entries.empty()) {
    for (const auto& g : grids) corpus.push_back(gen::dialogue_pseudo_asr(g));
  } else {
    for (const auto& e : lm_entries)
      corpus.push_back(
          gen::dialogue_pseudo_asr(grid::load_grid(resolve_relative(a.manifest, e.grid_path))));
  }
  uint32_t sem_vocab = 0;
  for (const auto& sp : state.config.schema.streams)
    if (sp.role == grid::StreamRole::semantic_audio) sem_vocab = sp.vocab_size;
  if (sem_vocab < 3) throw DataError("eval: model schema has no usable semantic stream");
  auto lm = eval::mock_lm_train(corpus, sem_vocab - 2);

  eval::EvalConfig cfg;
  cfg.temperatures = a.temperatures;
  cfg.seed = a.seed;
  auto chunks = eval::chunk_dialogues(grids, cfg);
  if (chunks.empty())
    throw UsageError("eval: selected dialogues have no full 30 s windows to chunk");

  auto report = eval::run_experiment(state, chunks, cfg, lm);
  if (!a.out_dir.empty()) {
    ensure_dir(a.out_dir);
    write_file(join(a.out_dir, "report.tsv"), report.table);
  }
  return report;
}

std::string cmd_inspect(const std::string& path) {
  if (path.empty()) throw UsageError("inspect: need a file path");
  std::string head = read_file(path).substr(0, 4);
  std::ostringstream out;
  if (head == "JMCK") {
    model::ModelState state = model::load_checkpoint(path);
    const auto& c = state.config;
    out << "checkpoint " << path << "\n";
    out << "d_model " << c.d_model << "\nheads " << c.n_heads << "\ntemporal_layers "
        << c.temporal_layers << "\ndepth_layers " << c.depth_layers << "\nmax_frames "
        << c.max_frames << "\nseed " << c.seed << "\nstep " << state.step << "\nparameters "
        << state.param_elements() << "\n";
    char digest[32];
    std::snprintf(digest, sizeof digest, "%016llx",
                  static_cast<unsigned long long>(c.digest()));
    out << "digest " << digest << "\nstreams " << c.schema.streams.size() << "\n";
    for (const auto& sp : c.schema.streams)
      out << "  " << sp.name << " vocab " << sp.vocab_size << " delay " << sp.delay << "\n";
  } else if (head == "JMGR") {
    grid::TokenGrid g = grid::load_grid(path);
    char dur[32];
    std::snprintf(dur, sizeof dur, "%.2f", g.duration_s());
    out << "grid " << path << "\nframes " << g.length() << "\nduration_s " << dur << "\ndelayed "
        << (g.delayed() ? "yes" : "no") << "\nstreams " << g.schema().streams.size() << "\n";
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.4f", grid::pad_ratio(g));
    out << "text_pad_ratio " << ratio << "\n";
    for (const auto& sp : g.schema().streams)
      out << "  " << sp.name << " vocab " << sp.vocab_size << " delay " << sp.delay << "\n";
  } else {
    throw DataError("inspect: " + path + " is neither a checkpoint nor a grid file");
  }
  return out.str();
}

}  // namespace jmlab::cmd
