#include "jmlab/turn_taking.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "jmlab/common.hpp"

namespace jmlab::turn {

namespace {

// Tolerance for joining interval endpoints; real events live on a far
// coarser time scale, so anything below this is representation noise.
constexpr double kEps = 1e-9;

void check_intervals(const std::vector<align::Interval>& iv, const char* what) {
  double prev_end = -1e300;
  for (const auto& x : iv) {
    if (!std::isfinite(x.start) || !std::isfinite(x.end) || x.end <= x.start)
      throw UsageError(std::string(what) + ": intervals must be finite with start < end");
    if (x.start < prev_end - kEps)
      throw UsageError(std::string(what) + ": intervals must be sorted and disjoint");
    prev_end = x.end;
  }
}

std::vector<align::Interval> union_intervals(const std::vector<align::Interval>& a,
                                             const std::vector<align::Interval>& b) {
  std::vector<align::Interval> all;
  all.reserve(a.size() + b.size());
  all.insert(all.end(), a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end(),
            [](const align::Interval& x, const align::Interval& y) { return x.start < y.start; });
  std::vector<align::Interval> out;
  for (const auto& x : all) {
    if (!out.empty() && x.start <= out.back().end + kEps)
      out.back().end = std::max(out.back().end, x.end);
    else
      out.push_back(x);
  }
  return out;
}

bool touches_at(const std::vector<align::Interval>& iv, double t, bool at_end) {
  for (const auto& x : iv) {
    double edge = at_end ? x.end : x.start;
    if (std::fabs(edge - t) <= kEps) return true;
  }
  return false;
}

}  // namespace

IpuSet segments_to_ipus(const align::ActivityTrack& activity, double min_silence) {
  if (!std::isfinite(min_silence) || min_silence <= 0.0)
    throw UsageError("segments_to_ipus: min_silence must be positive");
  check_intervals(activity.intervals, "segments_to_ipus");
  IpuSet out;
  out.channel = activity.channel;
  for (const auto& iv : activity.intervals) {
    // A silence of exactly min_silence separates; anything shorter is bridged.
    if (!out.ipus.empty() && iv.start - out.ipus.back().end < min_silence - kEps)
      out.ipus.back().end = std::max(out.ipus.back().end, iv.end);
    else
      out.ipus.push_back(iv);
  }
  return out;
}

SilenceClasses classify_silences(const IpuSet& self_ipus, const IpuSet& user_ipus,
                                 double duration_s) {
  if (!std::isfinite(duration_s) || duration_s <= 0.0)
    throw UsageError("classify_silences: duration must be positive");
  if (self_ipus.channel == user_ipus.channel)
    throw UsageError("classify_silences: the two IPU sets must be opposite channels");
  check_intervals(self_ipus.ipus, "classify_silences");
  check_intervals(user_ipus.ipus, "classify_silences");
  for (const auto* set : {&self_ipus, &user_ipus})
    for (const auto& iv : set->ipus)
      if (iv.start < -kEps || iv.end > duration_s + kEps)
        throw UsageError("classify_silences: IPU outside [0, duration]");

  auto speech = union_intervals(self_ipus.ipus, user_ipus.ipus);
  std::vector<align::Interval> silences;
  double cursor = 0.0;
  for (const auto& iv : speech) {
    if (iv.start - cursor > kEps) silences.push_back({cursor, iv.start});
    cursor = std::max(cursor, iv.end);
  }
  if (duration_s - cursor > kEps) silences.push_back({cursor, duration_s});

  SilenceClasses out;
  for (const auto& s : silences) {
    if (s.start <= kEps || s.end >= duration_s - kEps) {
      out.unclassified.push_back(s);
      continue;
    }
    // A maximal joint silence is flanked by IPU edges at exactly its
    // endpoints. It is a pause only when every flanking IPU, on both sides
    // including ties, belongs to one channel; any mixture makes it a gap.
    bool self_side = touches_at(self_ipus.ipus, s.start, true) ||
                     touches_at(self_ipus.ipus, s.end, false);
    bool user_side = touches_at(user_ipus.ipus, s.start, true) ||
                     touches_at(user_ipus.ipus, s.end, false);
    if (self_side != user_side)
      out.pauses.push_back(s);
    else
      out.gaps.push_back(s);
  }
  return out;
}

std::vector<align::Interval> overlap_intervals(const IpuSet& self_ipus, const IpuSet& user_ipus) {
  check_intervals(self_ipus.ipus, "overlap_intervals");
  check_intervals(user_ipus.ipus, "overlap_intervals");
  std::vector<align::Interval> out;
  size_t i = 0, j = 0;
  const auto& a = self_ipus.ipus;
  const auto& b = user_ipus.ipus;
  while (i < a.size() && j < b.size()) {
    double lo = std::max(a[i].start, b[j].start);
    double hi = std::min(a[i].end, b[j].end);
    if (hi - lo > kEps) out.push_back({lo, hi});
    if (a[i].end < b[j].end)
      ++i;
    else
      ++j;
  }
  return out;
}

double overlap_total(const IpuSet& self_ipus, const IpuSet& user_ipus) {
  double total = 0.0;
  for (const auto& iv : overlap_intervals(self_ipus, user_ipus)) total += iv.length();
  return total;
}

TurnTakingReport report(const IpuSet& self_ipus, const IpuSet& user_ipus, double duration_s) {
  auto cls = classify_silences(self_ipus, user_ipus, duration_s);
  auto ov = overlap_intervals(self_ipus, user_ipus);

  auto measure = [](const std::vector<align::Interval>& iv) {
    double total = 0.0;
    for (const auto& x : iv) total += x.length();
    return total;
  };
  double ipu_total = measure(self_ipus.ipus) + measure(user_ipus.ipus);

  TurnTakingReport r;
  r.duration_min = duration_s / 60.0;
  double per_min = 60.0 / duration_s;
  r.ipu_s_per_min = ipu_total * per_min;
  r.pause_s_per_min = measure(cls.pauses) * per_min;
  r.gap_s_per_min = measure(cls.gaps) * per_min;
  r.overlap_s_per_min = measure(ov) * per_min;
  r.unclassified_s_per_min = measure(cls.unclassified) * per_min;
  r.ipu_count = self_ipus.ipus.size() + user_ipus.ipus.size();
  r.pause_count = cls.pauses.size();
  r.gap_count = cls.gaps.size();
  r.overlap_count = ov.size();
  return r;
}

TurnTakingReport merge_reports(const std::vector<TurnTakingReport>& parts) {
  if (parts.empty()) throw UsageError("merge_reports: no reports");
  TurnTakingReport r;
  // rate * duration_min recovers the event total in seconds per part.
  double ipu_s = 0.0, pause_s = 0.0, gap_s = 0.0, overlap_s = 0.0, other_s = 0.0;
  for (const auto& p : parts) {
    if (!(p.duration_min > 0.0)) throw UsageError("merge_reports: nonpositive duration");
    r.duration_min += p.duration_min;
    ipu_s += p.ipu_s_per_min * p.duration_min;
    pause_s += p.pause_s_per_min * p.duration_min;
    gap_s += p.gap_s_per_min * p.duration_min;
    overlap_s += p.overlap_s_per_min * p.duration_min;
    other_s += p.unclassified_s_per_min * p.duration_min;
    r.ipu_count += p.ipu_count;
    r.pause_count += p.pause_count;
    r.gap_count += p.gap_count;
    r.overlap_count += p.overlap_count;
  }
  r.ipu_s_per_min = ipu_s / r.duration_min;
  r.pause_s_per_min = pause_s / r.duration_min;
  r.gap_s_per_min = gap_s / r.duration_min;
  r.overlap_s_per_min = overlap_s / r.duration_min;
  r.unclassified_s_per_min = other_s / r.duration_min;
  return r;
}

align::ActivityTrack activity_from_grid(const grid::TokenGrid& g, grid::Channel channel) {
  if (g.delayed())
    throw UsageError("activity_from_grid: needs an undelayed grid (delays still applied)");
  size_t sem = g.schema().streams.size();
  for (size_t k = 0; k < g.schema().streams.size(); ++k) {
    const auto& sp = g.schema().streams[k];
    if (sp.role == grid::StreamRole::semantic_audio && sp.channel == channel) {
      sem = k;
      break;
    }
  }
  if (sem == g.schema().streams.size())
    throw UsageError("activity_from_grid: schema has no semantic stream for that channel");

  align::ActivityTrack out;
  out.channel = channel;
  int64_t run_start = -1;
  for (size_t t = 0; t < g.length(); ++t) {
    bool active = g.at(t, sem) != 0;
    if (active && run_start < 0) run_start = static_cast<int64_t>(t);
    if (!active && run_start >= 0) {
      out.intervals.push_back(
          {frames_to_seconds(run_start), frames_to_seconds(static_cast<int64_t>(t))});
      run_start = -1;
    }
  }
  if (run_start >= 0)
    out.intervals.push_back(
        {frames_to_seconds(run_start), frames_to_seconds(static_cast<int64_t>(g.length()))});
  return out;
}

std::string format_report(const TurnTakingReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "duration_min %.1f\n"
                "ipu_s_per_min %.1f\n"
                "pause_s_per_min %.1f\n"
                "gap_s_per_min %.1f\n"
                "overlap_s_per_min %.1f\n"
                "unclassified_s_per_min %.1f\n"
                "ipu_count %zu\n"
                "pause_count %zu\n"
                "gap_count %zu\n"
                "overlap_count %zu\n",
                r.duration_min, r.ipu_s_per_min, r.pause_s_per_min, r.gap_s_per_min,
                r.overlap_s_per_min, r.unclassified_s_per_min, r.ipu_count, r.pause_count,
                r.gap_count, r.overlap_count);
  return std::string(buf);
}

}  // namespace jmlab::turn
