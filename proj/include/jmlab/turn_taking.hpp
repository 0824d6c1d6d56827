#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jmlab/alignment.hpp"
#include "jmlab/token_grid.hpp"

namespace jmlab::turn {

// Inter-pausal units: speech intervals of one channel after short silences
// (shorter than min_silence) have been bridged.
struct IpuSet {
  grid::Channel channel = grid::Channel::self;
  std::vector<align::Interval> ipus;  // disjoint, sorted
};

IpuSet segments_to_ipus(const align::ActivityTrack& activity, double min_silence = 0.2);

// Joint silences (neither channel inside an IPU), split by attribution.
// A silence bounded by speech of a single channel on both sides is a pause;
// one bounded by different channels, or tied at either edge across channels,
// is a gap. Silence touching the start or end of the dialogue is neither.
struct SilenceClasses {
  std::vector<align::Interval> pauses;
  std::vector<align::Interval> gaps;
  std::vector<align::Interval> unclassified;  // leading / trailing
};

SilenceClasses classify_silences(const IpuSet& self_ipus, const IpuSet& user_ipus,
                                 double duration_s);

std::vector<align::Interval> overlap_intervals(const IpuSet& self_ipus, const IpuSet& user_ipus);
double overlap_total(const IpuSet& self_ipus, const IpuSet& user_ipus);

struct TurnTakingReport {
  double duration_min = 0.0;
  double ipu_s_per_min = 0.0;  // both channels
  double pause_s_per_min = 0.0;
  double gap_s_per_min = 0.0;
  double overlap_s_per_min = 0.0;
  double unclassified_s_per_min = 0.0;
  size_t ipu_count = 0;
  size_t pause_count = 0;
  size_t gap_count = 0;
  size_t overlap_count = 0;
};

// Seconds-per-minute normalization of every event class over one dialogue.
TurnTakingReport report(const IpuSet& self_ipus, const IpuSet& user_ipus, double duration_s);

// Merge of per-dialogue activity into a corpus-level report: totals are
// duration-weighted, i.e. the corpus behaves like one long concatenation.
TurnTakingReport merge_reports(const std::vector<TurnTakingReport>& parts);

// Speech activity of one channel under the pseudo-codec convention: a frame
// is active iff its semantic token is nonzero. Requires an undelayed grid.
align::ActivityTrack activity_from_grid(const grid::TokenGrid& g, grid::Channel channel);

// Fixed-key, one-decimal rendering mirroring the per-minute table layout.
std::string format_report(const TurnTakingReport& r);

}  // namespace jmlab::turn
