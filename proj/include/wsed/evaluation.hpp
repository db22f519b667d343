#pragma once

#include "wsed/decision.hpp"
#include "wsed/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace wsed {

struct TagConfusion {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};

// Fractions in [0, 1]; 0/0 counts as 0.
struct TagMetrics {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

enum class AverageMode { micro, macro };

TagConfusion tag_confusion(const std::vector<std::vector<std::uint8_t>>& pred,
                           const std::vector<WeakLabelSet>& refs, std::size_t class_id);
TagMetrics tag_metrics(const std::vector<std::vector<std::uint8_t>>& pred,
                       const std::vector<WeakLabelSet>& refs, AverageMode mode);

// Segment-based counts over fixed-length segments (1 s by default): per
// segment S = min(FN, FP), D = FN - S, I = FP - S, with N the number of
// active reference class-segments. ER = (S + D + I) / max(N, 1).
struct SegmentMetrics {
    double error_rate = 0.0;
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::size_t substitutions = 0;
    std::size_t deletions = 0;
    std::size_t insertions = 0;
    std::size_t n_reference = 0;
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
};

SegmentMetrics segment_metrics(const std::map<std::string, EventList>& sys,
                               const std::map<std::string, EventList>& ref,
                               std::size_t n_classes, double clip_duration_sec = 10.0,
                               double segment_sec = 1.0);

// Human-readable report mirroring the tagging and detection result tables.
std::string format_tag_report(const TagMetrics& micro, const TagMetrics& macro);
std::string format_segment_report(const SegmentMetrics& m);
// Machine CSV with the same column names (values as percentages except the
// error rate).
void write_tag_report_csv(const std::string& path, const TagMetrics& micro, const TagMetrics& macro);
void write_segment_report_csv(const std::string& path, const SegmentMetrics& m);

}  // namespace wsed
