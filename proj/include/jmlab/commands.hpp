#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jmlab/alignment.hpp"
#include "jmlab/eval.hpp"
#include "jmlab/generation.hpp"
#include "jmlab/rq_model.hpp"
#include "jmlab/token_grid.hpp"
#include "jmlab/turn_taking.hpp"

// Command implementations behind the CLI binary. Each one is an ordinary
// function so tests can drive it without spawning a process; the binary only
// parses flags, resolves settings, and maps exceptions to exit codes.
namespace jmlab::cmd {

// Layered settings: defaults, then a flat JSON config file, then explicit
// flags. Keys the defaults do not know are rejected.
std::map<std::string, std::string> resolve_settings(
    const std::map<std::string, std::string>& defaults, const std::string& config_json_text,
    const std::map<std::string, std::string>& flag_overrides);

// The resolved settings as a stable JSON document (sorted keys), echoed into
// every run directory.
std::string render_settings(const std::map<std::string, std::string>& resolved);

// Strict numeric parsers for resolved settings; reject trailing junk.
double setting_double(const std::string& s, const std::string& what);
uint64_t setting_u64(const std::string& s, const std::string& what);

struct PrepArgs {
  std::string in_dir;   // <id>.trans.tsv + <id>.diar.tsv pairs
  std::string out_dir;  // receives grids/, manifest.tsv, prep_summary.tsv
  std::string kind = "dialogue";  // or "tts": merged text, synthesis delays
  uint64_t seed = 0;
  uint32_t text_vocab = 64;
  uint32_t semantic_vocab = 128;
  uint32_t acoustic_vocab = 64;
};

struct PrepResult {
  std::vector<align::ManifestEntry> manifest;
  std::vector<double> pad_ratios;  // one per manifest row
  double corpus_pad_ratio = 0.0;   // frame-weighted
  size_t dropped_tokens = 0;
  std::string manifest_path;
};

PrepResult cmd_prep(const PrepArgs& a);

struct SplitArgs {
  std::string manifest;
  std::string out;  // empty: rewrite in place
  double valid_pct = 3.0;
  double test_pct = 3.0;
  uint64_t seed = 0;
};

struct SplitCounts {
  size_t train = 0, valid = 0, test = 0;
};

SplitCounts cmd_split(const SplitArgs& a);

struct TrainArgs {
  std::string manifest;
  std::string out_dir;  // loss.tsv + checkpoints
  std::string resume;   // optional checkpoint to continue from
  int d_model = 64;
  int n_heads = 4;
  int temporal_layers = 2;
  int depth_layers = 1;
  int max_frames = 512;
  uint64_t seed = 0;
  model::TrainConfig tc;
  uint64_t steps = 0;             // absolute target step count; 0 = full epochs
  uint64_t checkpoint_every = 0;  // extra periodic checkpoints; 0 = final only
};

struct TrainResult {
  std::string final_checkpoint;
  std::vector<double> losses;  // one per optimizer step this invocation ran
  uint64_t steps_run = 0;
  uint64_t final_step = 0;  // the model's 1-based global step after training
};

TrainResult cmd_train(const TrainArgs& a);

struct ContinueArgs {
  std::string checkpoint;
  std::string grid;           // delayed dialogue grid file
  size_t prompt_frames = 125;  // 0 = use the whole grid
  size_t n_frames = 250;
  double tau = 1.0;
  uint64_t seed = 0;
  std::string out_dir;  // continued.jmg + sample_log.tsv
};

gen::GenerationResult cmd_continue(const ContinueArgs& a);

struct TtsArgs {
  std::string checkpoint;  // synthesis-schema model
  std::string transcript;
  std::string diarization;
  size_t n_frames = 0;  // 0 = cover the diarization
  double tau = 0.9;
  uint64_t seed = 0;
  size_t candidates = 1;  // best-of-n over seeds seed..seed+n-1
  std::string out_dir;    // tts.jmg + candidates.tsv
};

gen::BestOfNResult cmd_tts(const TtsArgs& a);

struct AnalyzeArgs {
  // exactly one source: a grid file, a manifest, or a pair of interval files
  std::string grid;
  std::string manifest;
  std::string split = "all";  // manifest filter; "all" keeps everything
  std::string self_activity;  // TSV: start \t end
  std::string user_activity;
  double duration_s = 0.0;  // for interval input; 0 = last interval end
  std::string out_dir;      // optional turns.txt
};

turn::TurnTakingReport cmd_analyze(const AnalyzeArgs& a);

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::vector<double> temperatures = {0.8, 0.9, 1.0};
  uint64_t seed = 17;
  std::string out_dir;  // report.tsv
};

eval::ExperimentReport cmd_eval(const EvalArgs& a);

// Human-readable summary of a checkpoint or grid file.
std::string cmd_inspect(const std::string& path);

}  // namespace jmlab::cmd
