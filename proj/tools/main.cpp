#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "jmlab/commands.hpp"
#include "jmlab/common.hpp"

using namespace jmlab;

namespace {

// One subcommand's settings surface: string-typed flags layered over a JSON
// config file over defaults, with explicit flags winning.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& desc)
      : sub_(app.add_subcommand(name, desc)) {
    sub_->add_option("--config", config_path_, "JSON object with settings for this command");
  }

  void opt(const std::string& flag, const std::string& key, const std::string& def,
           const std::string& help) {
    defaults_[key] = def;
    values_[key] = def;
    opts_[key] = sub_->add_option(flag, values_[key], help);
  }

  bool parsed() const { return sub_->parsed(); }

  std::map<std::string, std::string> resolve() const {
    std::string cfg = config_path_.empty() ? std::string() : read_file(config_path_);
    std::map<std::string, std::string> overrides;
    for (const auto& [key, option] : opts_)
      if (option->count() > 0) overrides[key] = values_.at(key);
    return cmd::resolve_settings(defaults_, cfg, overrides);
  }

  void run(std::function<void(const std::map<std::string, std::string>&)> fn) { run_ = std::move(fn); }
  void invoke() const { run_(resolve()); }

 private:
  CLI::App* sub_;
  std::string config_path_;
  std::map<std::string, std::string> defaults_, values_;
  std::map<std::string, CLI::Option*> opts_;
  std::function<void(const std::map<std::string, std::string>&)> run_;
};

using Settings = std::map<std::string, std::string>;

void write_run_config(const std::string& out_dir, const Settings& resolved) {
  if (out_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw UsageError("cannot create directory " + out_dir + ": " + ec.message());
  write_file((std::filesystem::path(out_dir) / "config.json").string(),
             cmd::render_settings(resolved));
}

std::vector<double> parse_tau_list(const std::string& s) {
  std::vector<double> taus;
  for (const auto& piece : split(s, ','))
    if (!piece.empty()) taus.push_back(cmd::setting_double(piece, "tau"));
  if (taus.empty()) throw UsageError("tau: empty temperature list");
  return taus;
}

void run_prep(const Settings& r) {
  cmd::PrepArgs a;
  a.in_dir = r.at("in");
  a.out_dir = r.at("out");
  a.kind = r.at("kind");
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  a.text_vocab = static_cast<uint32_t>(cmd::setting_u64(r.at("text_vocab"), "text_vocab"));
  a.semantic_vocab =
      static_cast<uint32_t>(cmd::setting_u64(r.at("semantic_vocab"), "semantic_vocab"));
  a.acoustic_vocab =
      static_cast<uint32_t>(cmd::setting_u64(r.at("acoustic_vocab"), "acoustic_vocab"));
  write_run_config(a.out_dir, r);
  auto res = cmd::cmd_prep(a);
  std::printf("prepared %zu dialogues -> %s\n", res.manifest.size(), res.manifest_path.c_str());
  std::printf("corpus text pad ratio %.4f, dropped tokens %zu\n", res.corpus_pad_ratio,
              res.dropped_tokens);
}

void run_split(const Settings& r) {
  cmd::SplitArgs a;
  a.manifest = r.at("manifest");
  a.out = r.at("out");
  a.valid_pct = cmd::setting_double(r.at("valid_pct"), "valid_pct");
  a.test_pct = cmd::setting_double(r.at("test_pct"), "test_pct");
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  auto counts = cmd::cmd_split(a);
  std::printf("split: %zu train, %zu valid, %zu test\n", counts.train, counts.valid, counts.test);
}

void run_train(const Settings& r) {
  cmd::TrainArgs a;
  a.manifest = r.at("manifest");
  a.out_dir = r.at("out");
  a.resume = r.at("resume");
  a.d_model = static_cast<int>(cmd::setting_u64(r.at("d_model"), "d_model"));
  a.n_heads = static_cast<int>(cmd::setting_u64(r.at("heads"), "heads"));
  a.temporal_layers = static_cast<int>(cmd::setting_u64(r.at("temporal_layers"), "temporal_layers"));
  a.depth_layers = static_cast<int>(cmd::setting_u64(r.at("depth_layers"), "depth_layers"));
  a.max_frames = static_cast<int>(cmd::setting_u64(r.at("max_frames"), "max_frames"));
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  a.steps = cmd::setting_u64(r.at("steps"), "steps");
  a.checkpoint_every = cmd::setting_u64(r.at("ckpt_every"), "ckpt_every");
  a.tc.lr_max = cmd::setting_double(r.at("lr"), "lr");
  a.tc.warmup_steps = cmd::setting_u64(r.at("warmup"), "warmup");
  a.tc.weight_decay = cmd::setting_double(r.at("weight_decay"), "weight_decay");
  a.tc.batch_frames = cmd::setting_u64(r.at("batch_frames"), "batch_frames");
  a.tc.pad_loss_factor = cmd::setting_double(r.at("pad_loss_factor"), "pad_loss_factor");
  a.tc.w_semantic = cmd::setting_double(r.at("w_semantic"), "w_semantic");
  a.tc.w_acoustic = cmd::setting_double(r.at("w_acoustic"), "w_acoustic");
  a.tc.w_text = cmd::setting_double(r.at("w_text"), "w_text");
  a.tc.temporal_lr = cmd::setting_double(r.at("temporal_lr"), "temporal_lr");
  a.tc.depth_lr = cmd::setting_double(r.at("depth_lr"), "depth_lr");
  a.tc.epochs = cmd::setting_u64(r.at("epochs"), "epochs");
  write_run_config(a.out_dir, r);
  auto res = cmd::cmd_train(a);
  if (res.losses.empty())
    std::printf("train: nothing to do (already at step %llu)\n",
                static_cast<unsigned long long>(res.final_step));
  else
    std::printf("train: %llu steps (now at %llu), loss %.6f -> %.6f\n",
                static_cast<unsigned long long>(res.steps_run),
                static_cast<unsigned long long>(res.final_step), res.losses.front(),
                res.losses.back());
  std::printf("checkpoint %s\n", res.final_checkpoint.c_str());
}

void run_continue(const Settings& r) {
  cmd::ContinueArgs a;
  a.checkpoint = r.at("checkpoint");
  a.grid = r.at("grid");
  a.prompt_frames = cmd::setting_u64(r.at("prompt_frames"), "prompt_frames");
  a.n_frames = cmd::setting_u64(r.at("frames"), "frames");
  a.tau = cmd::setting_double(r.at("tau"), "tau");
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  a.out_dir = r.at("out");
  write_run_config(a.out_dir, r);
  auto res = cmd::cmd_continue(a);
  std::printf("continued to %zu frames (%zu sampled tokens) -> %s\n", res.grid.length(),
              res.log.size(), a.out_dir.empty() ? "(not saved)" : a.out_dir.c_str());
}

void run_tts(const Settings& r) {
  cmd::TtsArgs a;
  a.checkpoint = r.at("checkpoint");
  a.transcript = r.at("transcript");
  a.diarization = r.at("diar");
  a.n_frames = cmd::setting_u64(r.at("frames"), "frames");
  a.tau = cmd::setting_double(r.at("tau"), "tau");
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  a.candidates = cmd::setting_u64(r.at("candidates"), "candidates");
  a.out_dir = r.at("out");
  write_run_config(a.out_dir, r);
  auto res = cmd::cmd_tts(a);
  std::printf("synthesized %zu frames; picked seed %llu (wer %.4f of %zu candidates)\n",
              res.best.grid.length(), static_cast<unsigned long long>(res.best.seed),
              res.wers[res.best_index], res.wers.size());
}

void run_analyze(const Settings& r) {
  cmd::AnalyzeArgs a;
  a.grid = r.at("grid");
  a.manifest = r.at("manifest");
  a.split = r.at("split");
  a.self_activity = r.at("self_activity");
  a.user_activity = r.at("user_activity");
  a.duration_s = cmd::setting_double(r.at("duration"), "duration");
  a.out_dir = r.at("out");
  write_run_config(a.out_dir, r);
  auto rep = cmd::cmd_analyze(a);
  std::fputs(turn::format_report(rep).c_str(), stdout);
}

void run_eval(const Settings& r) {
  cmd::EvalArgs a;
  a.checkpoint = r.at("checkpoint");
  a.manifest = r.at("manifest");
  a.split = r.at("split");
  a.temperatures = parse_tau_list(r.at("tau"));
  a.seed = cmd::setting_u64(r.at("seed"), "seed");
  a.out_dir = r.at("out");
  write_run_config(a.out_dir, r);
  auto rep = cmd::cmd_eval(a);
  std::fputs(rep.table.c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "jmlab: full-duplex dialogue token-grid toolkit\n"
      "(JMLAB_THREADS caps worker parallelism)"};
  app.require_subcommand(1);

  Command prep(app, "prep", "Build training grids and a manifest from transcript/diarization pairs");
  prep.opt("--in", "in", "", "directory of <id>.trans.tsv / <id>.diar.tsv pairs");
  prep.opt("--out", "out", "", "output directory (grids/, manifest.tsv)");
  prep.opt("--kind", "kind", "dialogue", "grid schema: dialogue or tts");
  prep.opt("--seed", "seed", "0", "channel-assignment seed");
  prep.opt("--text-vocab", "text_vocab", "64", "text stream vocabulary size");
  prep.opt("--semantic-vocab", "semantic_vocab", "128", "semantic stream vocabulary size");
  prep.opt("--acoustic-vocab", "acoustic_vocab", "64", "acoustic stream vocabulary size");
  prep.run(run_prep);

  Command split_cmd(app, "split", "Assign train/valid/test splits in a manifest");
  split_cmd.opt("--manifest", "manifest", "", "manifest to split");
  split_cmd.opt("--out", "out", "", "output manifest (default: rewrite in place)");
  split_cmd.opt("--valid-pct", "valid_pct", "3", "validation share, percent");
  split_cmd.opt("--test-pct", "test_pct", "3", "test share, percent");
  split_cmd.opt("--seed", "seed", "0", "shuffle seed");
  split_cmd.run(run_split);

  Command train(app, "train", "Train a model on the manifest's train split");
  train.opt("--manifest", "manifest", "", "grid manifest");
  train.opt("--out", "out", "", "run directory (loss.tsv, checkpoints)");
  train.opt("--resume", "resume", "", "checkpoint to continue from");
  train.opt("--d-model", "d_model", "64", "model width");
  train.opt("--heads", "heads", "4", "attention heads");
  train.opt("--temporal-layers", "temporal_layers", "2", "temporal stack depth");
  train.opt("--depth-layers", "depth_layers", "1", "depth stack depth");
  train.opt("--max-frames", "max_frames", "512", "context length in frames");
  train.opt("--seed", "seed", "0", "init seed");
  train.opt("--steps", "steps", "0", "stop at this global step (0: run all epochs)");
  train.opt("--ckpt-every", "ckpt_every", "0", "periodic checkpoint interval (0: final only)");
  train.opt("--lr", "lr", "3e-05", "peak learning rate");
  train.opt("--warmup", "warmup", "500", "linear warmup steps");
  train.opt("--weight-decay", "weight_decay", "0.1", "decoupled weight decay");
  train.opt("--batch-frames", "batch_frames", "2048", "max frames per optimizer step");
  train.opt("--pad-loss-factor", "pad_loss_factor", "0.5", "text PAD loss weight factor");
  train.opt("--w-semantic", "w_semantic", "100", "semantic stream loss weight");
  train.opt("--w-acoustic", "w_acoustic", "1", "acoustic stream loss weight");
  train.opt("--w-text", "w_text", "100", "text stream loss weight");
  train.opt("--temporal-lr", "temporal_lr", "-1", "temporal group lr override (-1: use --lr)");
  train.opt("--depth-lr", "depth_lr", "-1", "depth group lr override (-1: use --lr)");
  train.opt("--epochs", "epochs", "1", "passes over the training windows");
  train.run(run_train);

  Command cont(app, "continue", "Continue a dialogue grid with sampled frames");
  cont.opt("--checkpoint", "checkpoint", "", "model checkpoint");
  cont.opt("--grid", "grid", "", "dialogue grid file");
  cont.opt("--prompt-frames", "prompt_frames", "125", "prompt length (0: whole grid)");
  cont.opt("--frames", "frames", "250", "frames to generate");
  cont.opt("--tau", "tau", "1.0", "sampling temperature");
  cont.opt("--seed", "seed", "0", "sampling seed");
  cont.opt("--out", "out", "", "run directory (continued.jmg, sample_log.tsv)");
  cont.run(run_continue);

  Command tts(app, "tts", "Synthesize audio streams for a transcript (best-of-n)");
  tts.opt("--checkpoint", "checkpoint", "", "synthesis model checkpoint");
  tts.opt("--transcript", "transcript", "", "transcript TSV (speaker, start, token)");
  tts.opt("--diar", "diar", "", "diarization TSV (speaker, start, end)");
  tts.opt("--frames", "frames", "0", "frames to synthesize (0: cover the input)");
  tts.opt("--tau", "tau", "0.9", "sampling temperature");
  tts.opt("--seed", "seed", "0", "first candidate seed");
  tts.opt("--candidates", "candidates", "1", "number of seeds to try");
  tts.opt("--out", "out", "", "run directory (tts.jmg, candidates.tsv)");
  tts.run(run_tts);

  Command analyze(app, "analyze", "Turn-taking report for grids or activity intervals");
  analyze.opt("--grid", "grid", "", "grid file to analyze");
  analyze.opt("--manifest", "manifest", "", "manifest whose grids to analyze");
  analyze.opt("--split", "split", "all", "manifest split filter (train/valid/test/unsplit/all)");
  analyze.opt("--self-activity", "self_activity", "", "TSV of start/end speech intervals, self");
  analyze.opt("--user-activity", "user_activity", "", "TSV of start/end speech intervals, user");
  analyze.opt("--duration", "duration", "0", "dialogue length in seconds (0: last interval end)");
  analyze.opt("--out", "out", "", "run directory (turns.txt)");
  analyze.run(run_analyze);

  Command eval_cmd(app, "eval", "Prompted-continuation evaluation over a test split");
  eval_cmd.opt("--checkpoint", "checkpoint", "", "model checkpoint");
  eval_cmd.opt("--manifest", "manifest", "", "grid manifest");
  eval_cmd.opt("--split", "split", "test", "manifest split to evaluate");
  eval_cmd.opt("--tau", "tau", "0.8,0.9,1.0", "comma-separated sampling temperatures");
  eval_cmd.opt("--seed", "seed", "17", "base generation seed");
  eval_cmd.opt("--out", "out", "", "run directory (report.tsv)");
  eval_cmd.run(run_eval);

  auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint or grid file");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "file to describe")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (inspect->parsed()) {
      std::fputs(cmd::cmd_inspect(inspect_path).c_str(), stdout);
      return 0;
    }
    for (const Command* c : {&prep, &split_cmd, &train, &cont, &tts, &analyze, &eval_cmd})
      if (c->parsed()) {
        c->invoke();
        return 0;
      }
    std::cerr << app.help() << std::flush;
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
}
