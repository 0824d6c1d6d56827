#pragma once

#include <algorithm>
#include <utility>
#include <vector>

#include "jmlab/alignment.hpp"
#include "jmlab/common.hpp"
#include "jmlab/token_grid.hpp"

// Dense reference for turn-taking measures: re-derives IPUs, overlap, and
// silence classes by brute force on a 1 ms boolean lattice with integer run
// logic. Shares no code with the interval arithmetic it is used to check.
namespace jmtest {

struct MsInstance {
  int duration_ms = 0;
  std::vector<std::pair<int, int>> act[2];  // raw activity runs per channel, ms
};

inline MsInstance random_instance(jmlab::Rng& rng) {
  MsInstance inst;
  inst.duration_ms = 4000 + static_cast<int>(rng.next_u64() % 16000);
  for (int ch = 0; ch < 2; ++ch) {
    if (rng.next_u64() % 50 == 0) continue;  // occasionally fully silent
    int t = static_cast<int>(rng.next_u64() % 1200);
    bool speaking = rng.next_u64() % 2 == 0;
    while (t < inst.duration_ms) {
      int len = 50 + static_cast<int>(rng.next_u64() % 1400);
      int end = std::min(t + len, inst.duration_ms);
      if (speaking && end > t) inst.act[ch].emplace_back(t, end);
      t = end;
      speaking = !speaking;
    }
  }
  return inst;
}

inline jmlab::align::ActivityTrack to_track(const std::vector<std::pair<int, int>>& runs,
                                            jmlab::grid::Channel ch) {
  jmlab::align::ActivityTrack t;
  t.channel = ch;
  for (auto [s, e] : runs) t.intervals.push_back({s / 1000.0, e / 1000.0});
  return t;
}

struct MsOracle {
  std::vector<char> ipu[2];
  std::vector<std::pair<int, int>> ipu_runs[2];
  long overlap_ms = 0;
  int overlap_count = 0;
  long pause_ms = 0, gap_ms = 0, other_ms = 0;
  int pause_count = 0, gap_count = 0;
};

inline MsOracle run_oracle(const MsInstance& inst) {
  MsOracle o;
  int n = inst.duration_ms;
  for (int ch = 0; ch < 2; ++ch) {
    o.ipu[ch].assign(n, 0);
    for (auto [s, e] : inst.act[ch]) std::fill(o.ipu[ch].begin() + s, o.ipu[ch].begin() + e, 1);
    // bridge interior silence runs shorter than 200 ms
    int i = 0;
    while (i < n) {
      if (o.ipu[ch][i]) {
        ++i;
        continue;
      }
      int j = i;
      while (j < n && !o.ipu[ch][j]) ++j;
      if (i > 0 && j < n && j - i < 200) std::fill(o.ipu[ch].begin() + i, o.ipu[ch].begin() + j, 1);
      i = j;
    }
    i = 0;
    while (i < n) {
      if (!o.ipu[ch][i]) {
        ++i;
        continue;
      }
      int j = i;
      while (j < n && o.ipu[ch][j]) ++j;
      o.ipu_runs[ch].emplace_back(i, j);
      i = j;
    }
  }
  bool in_ov = false;
  for (int i = 0; i < n; ++i) {
    bool ov = o.ipu[0][i] && o.ipu[1][i];
    if (ov) ++o.overlap_ms;
    if (ov && !in_ov) ++o.overlap_count;
    in_ov = ov;
  }
  int i = 0;
  while (i < n) {
    if (o.ipu[0][i] || o.ipu[1][i]) {
      ++i;
      continue;
    }
    int j = i;
    while (j < n && !o.ipu[0][j] && !o.ipu[1][j]) ++j;
    if (i == 0 || j == n) {
      o.other_ms += j - i;
    } else {
      bool self_side = o.ipu[0][i - 1] || o.ipu[0][j];
      bool user_side = o.ipu[1][i - 1] || o.ipu[1][j];
      if (self_side != user_side) {
        o.pause_ms += j - i;
        ++o.pause_count;
      } else {
        o.gap_ms += j - i;
        ++o.gap_count;
      }
    }
    i = j;
  }
  return o;
}

}  // namespace jmtest
