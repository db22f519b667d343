#include "wsed/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

double safe_div(double num, double den) {
    return den == 0.0 ? 0.0 : num / den;
}

TagMetrics metrics_from_counts(double tp, double fp, double fn) {
    TagMetrics m;
    m.precision = safe_div(tp, tp + fp);
    m.recall = safe_div(tp, tp + fn);
    m.f1 = safe_div(2.0 * m.precision * m.recall, m.precision + m.recall);
    return m;
}

}  // namespace

TagConfusion tag_confusion(const std::vector<std::vector<std::uint8_t>>& pred,
                           const std::vector<WeakLabelSet>& refs, std::size_t class_id) {
    require(pred.size() == refs.size(), "tag_confusion: " + std::to_string(pred.size()) +
                                            " predictions vs " + std::to_string(refs.size()) +
                                            " references");
    TagConfusion c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i][class_id] != 0;
        const bool r = refs[i].tags[class_id] != 0;
        if (p && r) {
            ++c.tp;
        } else if (p) {
            ++c.fp;
        } else if (r) {
            ++c.fn;
        }
    }
    return c;
}

TagMetrics tag_metrics(const std::vector<std::vector<std::uint8_t>>& pred,
                       const std::vector<WeakLabelSet>& refs, AverageMode mode) {
    require(pred.size() == refs.size(), "tag_metrics: " + std::to_string(pred.size()) +
                                            " predictions vs " + std::to_string(refs.size()) +
                                            " references");
    require(!pred.empty(), "tag_metrics: empty inputs");
    const std::size_t C = refs.front().tags.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
        require(pred[i].size() == C && refs[i].tags.size() == C,
                "tag_metrics: ragged prediction or reference rows");
    }

    if (mode == AverageMode::micro) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const TagConfusion conf = tag_confusion(pred, refs, c);
            tp += conf.tp;
            fp += conf.fp;
            fn += conf.fn;
        }
        return metrics_from_counts(static_cast<double>(tp), static_cast<double>(fp),
                                   static_cast<double>(fn));
    }

    TagMetrics acc;
    for (std::size_t c = 0; c < C; ++c) {
        const TagConfusion conf = tag_confusion(pred, refs, c);
        const TagMetrics m = metrics_from_counts(static_cast<double>(conf.tp),
                                                 static_cast<double>(conf.fp),
                                                 static_cast<double>(conf.fn));
        acc.f1 += m.f1;
        acc.precision += m.precision;
        acc.recall += m.recall;
    }
    acc.f1 /= static_cast<double>(C);
    acc.precision /= static_cast<double>(C);
    acc.recall /= static_cast<double>(C);
    return acc;
}

SegmentMetrics segment_metrics(const std::map<std::string, EventList>& sys,
                               const std::map<std::string, EventList>& ref,
                               std::size_t n_classes, double clip_duration_sec,
                               double segment_sec) {
    require(n_classes >= 1, "segment_metrics: n_classes must be positive");
    require(clip_duration_sec > 0.0 && segment_sec > 0.0,
            "segment_metrics: durations must be positive");

    const std::size_t n_segments =
        static_cast<std::size_t>(std::ceil(clip_duration_sec / segment_sec - 1e-12));

    std::set<std::string> clip_ids;
    for (const auto& [id, events] : sys) {
        clip_ids.insert(id);
    }
    for (const auto& [id, events] : ref) {
        clip_ids.insert(id);
    }

    auto activity_grid = [&](const EventList* events) {
        // [segment][class] activity; an event marks every segment it overlaps
        std::vector<std::vector<std::uint8_t>> grid(n_segments,
                                                    std::vector<std::uint8_t>(n_classes, 0));
        if (events == nullptr) {
            return grid;
        }
        for (const Event& e : *events) {
            require(e.onset_sec >= 0.0 && e.offset_sec >= 0.0,
                    "segment_metrics: negative event time");
            require(e.class_id < n_classes, "segment_metrics: class id out of range");
            if (e.offset_sec <= e.onset_sec) {
                continue;
            }
            const std::size_t first =
                static_cast<std::size_t>(std::floor(e.onset_sec / segment_sec));
            const std::size_t last = static_cast<std::size_t>(
                std::ceil(e.offset_sec / segment_sec - 1e-12));
            for (std::size_t s = first; s < std::min(last, n_segments); ++s) {
                grid[s][e.class_id] = 1;
            }
        }
        return grid;
    };

    SegmentMetrics out;
    for (const std::string& id : clip_ids) {
        auto sit = sys.find(id);
        auto rit = ref.find(id);
        const auto sys_grid = activity_grid(sit == sys.end() ? nullptr : &sit->second);
        const auto ref_grid = activity_grid(rit == ref.end() ? nullptr : &rit->second);
        for (std::size_t s = 0; s < n_segments; ++s) {
            std::size_t seg_tp = 0, seg_fp = 0, seg_fn = 0, seg_n = 0;
            for (std::size_t c = 0; c < n_classes; ++c) {
                const bool p = sys_grid[s][c] != 0;
                const bool r = ref_grid[s][c] != 0;
                if (r) {
                    ++seg_n;
                }
                if (p && r) {
                    ++seg_tp;
                } else if (p) {
                    ++seg_fp;
                } else if (r) {
                    ++seg_fn;
                }
            }
            const std::size_t subs = std::min(seg_fn, seg_fp);
            out.substitutions += subs;
            out.deletions += seg_fn - subs;
            out.insertions += seg_fp - subs;
            out.n_reference += seg_n;
            out.tp += seg_tp;
            out.fp += seg_fp;
            out.fn += seg_fn;
        }
    }

    const double n = static_cast<double>(std::max<std::size_t>(out.n_reference, 1));
    out.error_rate =
        static_cast<double>(out.substitutions + out.deletions + out.insertions) / n;
    const TagMetrics t = metrics_from_counts(static_cast<double>(out.tp),
                                             static_cast<double>(out.fp),
                                             static_cast<double>(out.fn));
    out.f1 = t.f1;
    out.precision = t.precision;
    out.recall = t.recall;
    return out;
}

std::string format_tag_report(const TagMetrics& micro, const TagMetrics& macro) {
    char buf[256];
    std::string out;
    out += "          F1      Precision  Recall\n";
    std::snprintf(buf, sizeof(buf), "micro     %-8.1f%-11.1f%-8.1f\n", micro.f1 * 100.0,
                  micro.precision * 100.0, micro.recall * 100.0);
    out += buf;
    std::snprintf(buf, sizeof(buf), "macro     %-8.1f%-11.1f%-8.1f\n", macro.f1 * 100.0,
                  macro.precision * 100.0, macro.recall * 100.0);
    out += buf;
    return out;
}

std::string format_segment_report(const SegmentMetrics& m) {
    char buf[256];
    std::string out;
    out += "          F1      Error rate\n";
    std::snprintf(buf, sizeof(buf), "segment   %-8.1f%.2f\n", m.f1 * 100.0, m.error_rate);
    out += buf;
    std::snprintf(buf, sizeof(buf), "S=%zu D=%zu I=%zu N=%zu\n", m.substitutions, m.deletions,
                  m.insertions, m.n_reference);
    out += buf;
    return out;
}

void write_tag_report_csv(const std::string& path, const TagMetrics& micro,
                          const TagMetrics& macro) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw std::runtime_error("write_tag_report_csv: cannot open " + path);
    }
    char buf[256];
    f << "average,F1,Precision,Recall\n";
    std::snprintf(buf, sizeof(buf), "micro,%.17g,%.17g,%.17g\n", micro.f1 * 100.0,
                  micro.precision * 100.0, micro.recall * 100.0);
    f << buf;
    std::snprintf(buf, sizeof(buf), "macro,%.17g,%.17g,%.17g\n", macro.f1 * 100.0,
                  macro.precision * 100.0, macro.recall * 100.0);
    f << buf;
}

void write_segment_report_csv(const std::string& path, const SegmentMetrics& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw std::runtime_error("write_segment_report_csv: cannot open " + path);
    }
    char buf[256];
    f << "F1,Error rate\n";
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", m.f1 * 100.0, m.error_rate);
    f << buf;
}

}  // namespace wsed
