#include "wsed/decision.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

double f1_for_threshold(const Tensor& posteriors, const std::vector<WeakLabelSet>& refs,
                        std::size_t class_id, double threshold) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const bool predicted = posteriors(i, class_id) >= threshold;
        const bool actual = refs[i].tags[class_id] != 0;
        if (predicted && actual) {
            ++tp;
        } else if (predicted) {
            ++fp;
        } else if (actual) {
            ++fn;
        }
    }
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

ThresholdVector tune_thresholds(const Tensor& posteriors, const std::vector<WeakLabelSet>& refs,
                                std::vector<std::string>* warnings) {
    require(posteriors.ndim() == 2, "tune_thresholds: posteriors must be [clips, classes]");
    require(posteriors.shape[0] == refs.size(),
            "tune_thresholds: " + std::to_string(posteriors.shape[0]) + " posterior rows vs " +
                std::to_string(refs.size()) + " references");
    const std::size_t C = posteriors.shape[1];
    for (const WeakLabelSet& r : refs) {
        require(r.tags.size() == C, "tune_thresholds: reference width mismatch");
    }

    ThresholdVector out;
    out.values.assign(C, 0.5);
    for (std::size_t c = 0; c < C; ++c) {
        bool has_positive = false;
        for (const WeakLabelSet& r : refs) {
            if (r.tags[c]) {
                has_positive = true;
                break;
            }
        }
        if (!has_positive) {
            if (warnings != nullptr) {
                warnings->push_back("class " + std::to_string(c) +
                                    " has no positive reference; threshold falls back to 0.5");
            }
            continue;
        }
        double best_f1 = -1.0;
        double best_th = 0.5;
        for (int i = 0; i <= 90; ++i) {
            const double th = static_cast<double>(i + 5) / 100.0;
            const double f1 = f1_for_threshold(posteriors, refs, c, th);
            if (f1 > best_f1) {  // strictly better only: ties keep the lowest grid point
                best_f1 = f1;
                best_th = th;
            }
        }
        out.values[c] = best_th;
    }
    return out;
}

std::vector<std::uint8_t> apply_thresholds(const std::vector<double>& clip_posterior,
                                           const ThresholdVector& thresholds) {
    require(clip_posterior.size() == thresholds.values.size(),
            "apply_thresholds: posterior width does not match threshold count");
    std::vector<std::uint8_t> out(clip_posterior.size(), 0);
    for (std::size_t c = 0; c < out.size(); ++c) {
        out[c] = clip_posterior[c] >= thresholds.values[c] ? 1 : 0;
    }
    return out;
}

std::vector<std::vector<std::uint8_t>> apply_thresholds(const Tensor& posteriors,
                                                        const ThresholdVector& thresholds) {
    require(posteriors.ndim() == 2, "apply_thresholds: posteriors must be [clips, classes]");
    const std::size_t N = posteriors.shape[0];
    const std::size_t C = posteriors.shape[1];
    require(C == thresholds.values.size(),
            "apply_thresholds: posterior width does not match threshold count");
    std::vector<std::vector<std::uint8_t>> out(N, std::vector<std::uint8_t>(C, 0));
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t c = 0; c < C; ++c) {
            out[i][c] = posteriors(i, c) >= thresholds.values[c] ? 1 : 0;
        }
    }
    return out;
}

EventList decode_events(const Tensor& frame_posteriors, const ThresholdVector& thresholds,
                        const DecodeConfig& cfg) {
    require(frame_posteriors.ndim() == 2, "decode_events: posteriors must be [frames, classes]");
    require(cfg.median_win % 2 == 1, "decode_events: median window must be odd");
    require(cfg.frame_hop_sec > 0.0, "decode_events: frame hop must be positive");
    const std::size_t T = frame_posteriors.shape[0];
    const std::size_t C = frame_posteriors.shape[1];
    require(C == thresholds.values.size(),
            "decode_events: posterior width does not match threshold count");

    EventList out;
    std::vector<std::uint8_t> track(T), filtered(T);
    const std::size_t half = cfg.median_win / 2;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
            track[t] = frame_posteriors(t, c) >= thresholds.values[c] ? 1 : 0;
        }
        // majority vote over the window; frames outside the track count as 0
        for (std::size_t t = 0; t < T; ++t) {
            std::size_t ones = 0;
            const std::size_t lo = t >= half ? t - half : 0;
            const std::size_t hi = std::min(T - 1, t + half);
            for (std::size_t i = lo; i <= hi; ++i) {
                ones += track[i];
            }
            filtered[t] = (2 * ones > cfg.median_win) ? 1 : 0;
        }

        // run-length extraction: [start, end) frame spans
        std::vector<std::pair<std::size_t, std::size_t>> runs;
        std::size_t t = 0;
        while (t < T) {
            if (!filtered[t]) {
                ++t;
                continue;
            }
            std::size_t end = t;
            while (end < T && filtered[end]) {
                ++end;
            }
            runs.emplace_back(t, end);
            t = end;
        }

        // merge gaps strictly shorter than gap_merge_sec
        std::vector<std::pair<std::size_t, std::size_t>> merged;
        for (const auto& run : runs) {
            if (!merged.empty()) {
                const double gap =
                    static_cast<double>(run.first - merged.back().second) * cfg.frame_hop_sec;
                if (gap < cfg.gap_merge_sec) {
                    merged.back().second = run.second;
                    continue;
                }
            }
            merged.push_back(run);
        }

        for (const auto& run : merged) {
            const double onset = static_cast<double>(run.first) * cfg.frame_hop_sec;
            const double offset = static_cast<double>(run.second) * cfg.frame_hop_sec;
            if (offset - onset < cfg.min_dur_sec) {
                continue;
            }
            out.events.push_back({c, onset, offset});
        }
    }
    return out;
}

Tensor fuse_checkpoints(const std::vector<Tensor>& posterior_sets) {
    return fuse_models(posterior_sets, {});
}

Tensor fuse_models(const std::vector<Tensor>& posterior_sets, const std::vector<double>& weights) {
    require(!posterior_sets.empty(), "fuse: need at least one posterior set");
    const Shape& shape = posterior_sets.front().shape;
    for (const Tensor& t : posterior_sets) {
        require(t.shape == shape, "fuse: posterior sets differ in shape: " +
                                      shape_to_string(shape) + " vs " + shape_to_string(t.shape));
    }
    std::vector<double> w = weights;
    if (w.empty()) {
        w.assign(posterior_sets.size(), 1.0);
    }
    require(w.size() == posterior_sets.size(), "fuse: one weight per posterior set required");
    double wsum = 0.0;
    for (double v : w) {
        require(v >= 0.0, "fuse: weights must be nonnegative");
        wsum += v;
    }
    require(wsum > 0.0, "fuse: weights sum to zero");

    Tensor out(shape);
    for (std::size_t s = 0; s < posterior_sets.size(); ++s) {
        const double scale = w[s] / wsum;
        if (scale == 0.0) {
            continue;
        }
        const Tensor& src = posterior_sets[s];
        for (std::size_t i = 0; i < out.numel(); ++i) {
            out.data[i] += scale * src.data[i];
        }
    }
    return out;
}

}  // namespace wsed
