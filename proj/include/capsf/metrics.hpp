#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capsf/error.hpp"

namespace capsf {

/// Fake is the positive class.
struct ConfusionCounts {
  std::size_t tp = 0;  // fake classified fake
  std::size_t tn = 0;  // real classified real
  std::size_t fp = 0;  // real classified fake
  std::size_t fn = 0;  // fake classified real

  std::size_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

enum class ReportLevel { frame, group };

inline const char* report_level_name(ReportLevel l) { return l == ReportLevel::frame ? "frame" : "group"; }

/// Items with y_hat >= threshold are classified fake.
inline bool classified_fake(double y_hat, double threshold) { return y_hat >= threshold; }

struct EvalReport {
  ReportLevel level = ReportLevel::frame;
  ConfusionCounts counts;
  double threshold = 0.5;
  // FRR: real classified fake. FAR: fake classified real. Undefined (empty)
  // when the corresponding class has no items; HTER is then undefined too.
  std::optional<double> frr;
  std::optional<double> far;
  std::optional<double> hter;
  double accuracy = 0.0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;

  /// `key=value` lines. Undefined rates print as "undefined".
  std::string key_values(const std::string& prefix = "") const {
    std::ostringstream o;
    o.precision(17);
    auto rate = [&](const char* k, const std::optional<double>& v) {
      o << prefix << k << '=';
      if (v) o << *v;
      else o << "undefined";
      o << '\n';
    };
    o << prefix << "level=" << report_level_name(level) << '\n';
    o << prefix << "threshold=" << threshold << '\n';
    o << prefix << "items=" << counts.total() << '\n';
    o << prefix << "tp=" << counts.tp << '\n' << prefix << "tn=" << counts.tn << '\n';
    o << prefix << "fp=" << counts.fp << '\n' << prefix << "fn=" << counts.fn << '\n';
    rate("frr", frr);
    rate("far", far);
    rate("hter", hter);
    o << prefix << "accuracy=" << accuracy << '\n';
    return o.str();
  }

  std::string table() const {
    std::ostringstream o;
    auto pct = [](const std::optional<double>& v) {
      if (!v) return std::string("undefined");
      std::ostringstream s;
      s.setf(std::ios::fixed);
      s.precision(2);
      s << *v * 100.0 << '%';
      return s.str();
    };
    o << "level     " << report_level_name(level) << "  (threshold " << threshold << ", " << counts.total()
      << " items)\n";
    o << "           pred real  pred fake\n";
    o << "real       " << pad(counts.tn) << pad(counts.fp) << '\n';
    o << "fake       " << pad(counts.fn) << pad(counts.tp) << '\n';
    o << "FRR       " << pct(frr) << '\n';
    o << "FAR       " << pct(far) << '\n';
    o << "HTER      " << pct(hter) << '\n';
    o << "accuracy  " << pct(accuracy) << '\n';
    return o.str();
  }

 private:
  static std::string pad(std::size_t v) {
    std::string s = std::to_string(v);
    return std::string(s.size() < 11 ? 11 - s.size() : 1, ' ') + s;
  }
};

inline EvalReport make_report(const ConfusionCounts& c, double threshold, ReportLevel level) {
  EvalReport r;
  r.level = level;
  r.counts = c;
  r.threshold = threshold;
  const std::size_t reals = c.tn + c.fp, fakes = c.tp + c.fn;
  if (reals) r.frr = static_cast<double>(c.fp) / static_cast<double>(reals);
  if (fakes) r.far = static_cast<double>(c.fn) / static_cast<double>(fakes);
  if (r.frr && r.far) r.hter = (*r.frr + *r.far) / 2.0;
  if (c.total()) r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return r;
}

/// Scores against labels (0 real, 1 fake).
inline EvalReport evaluate_scores(const std::vector<double>& y_hat, const std::vector<int>& labels, double threshold,
                                  ReportLevel level = ReportLevel::frame) {
  if (y_hat.size() != labels.size()) throw UsageError("score and label counts differ");
  if (y_hat.empty()) throw DataError("nothing to evaluate");
  ConfusionCounts c;
  for (std::size_t i = 0; i < y_hat.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("label must be 0 or 1");
    const bool fake = classified_fake(y_hat[i], threshold);
    if (labels[i] == 1) (fake ? c.tp : c.fn)++;
    else (fake ? c.fp : c.tn)++;
  }
  return make_report(c, threshold, level);
}

struct FrameScore {
  std::string group;
  int label = 0;
  double y_hat = 0.0;
};

struct GroupScore {
  std::string group;
  int label = 0;
  double y_hat = 0.0;
  std::size_t frames_used = 0;
};

/// Mean of the first `max_frames` entries (all when unset).
inline double aggregate_frames(const std::vector<double>& frame_probs, std::optional<std::size_t> max_frames = {}) {
  if (frame_probs.empty()) throw DataError("cannot aggregate an empty group");
  if (max_frames && *max_frames == 0) throw UsageError("max-frames must be at least 1");
  const std::size_t n = max_frames ? std::min(*max_frames, frame_probs.size()) : frame_probs.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += frame_probs[i];
  return sum / static_cast<double>(n);
}

/// Groups frames by id, keeping manifest order within each group and first
/// appearance order across groups.
inline std::vector<GroupScore> aggregate_video(const std::vector<FrameScore>& frames,
                                               std::optional<std::size_t> max_frames = {}) {
  std::vector<GroupScore> groups;
  std::vector<std::vector<double>> probs;
  std::map<std::string, std::size_t> index;
  for (const auto& f : frames) {
    auto [it, inserted] = index.try_emplace(f.group, groups.size());
    if (inserted) {
      groups.push_back({f.group, f.label, 0.0, 0});
      probs.emplace_back();
    } else if (groups[it->second].label != f.label) {
      throw DataError("group " + f.group + " mixes real and fake frames");
    }
    probs[it->second].push_back(f.y_hat);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    groups[g].y_hat = aggregate_frames(probs[g], max_frames);
    groups[g].frames_used = max_frames ? std::min(*max_frames, probs[g].size()) : probs[g].size();
  }
  return groups;
}

inline EvalReport evaluate_groups(const std::vector<GroupScore>& groups, double threshold) {
  std::vector<double> y;
  std::vector<int> labels;
  for (const auto& g : groups) {
    y.push_back(g.y_hat);
    labels.push_back(g.label);
  }
  return evaluate_scores(y, labels, threshold, ReportLevel::group);
}

}  // namespace capsf
