#pragma once

#include "wsed/tensor.hpp"
#include "wsed/training.hpp"

#include <string>
#include <vector>

namespace wsed {

// One decision threshold per class, each in (0, 1).
struct ThresholdVector {
    std::vector<double> values;
};

struct Event {
    std::size_t class_id = 0;
    double onset_sec = 0.0;
    double offset_sec = 0.0;
};

// Per class: sorted by onset and non-overlapping after decoding.
struct EventList {
    std::vector<Event> events;
};

// Per-class exhaustive scan of the grid 0.05, 0.06, ..., 0.95: the value
// maximizing that class's F1, lowest grid point on ties. Classes with no
// positive reference fall back to 0.5 (reported through `warnings`).
ThresholdVector tune_thresholds(const Tensor& posteriors /*[N,C]*/,
                                const std::vector<WeakLabelSet>& refs,
                                std::vector<std::string>* warnings = nullptr);

// Tagged iff posterior >= threshold.
std::vector<std::uint8_t> apply_thresholds(const std::vector<double>& clip_posterior,
                                           const ThresholdVector& thresholds);
std::vector<std::vector<std::uint8_t>> apply_thresholds(const Tensor& posteriors /*[N,C]*/,
                                                        const ThresholdVector& thresholds);

struct DecodeConfig {
    std::size_t median_win = 9;   // frames, odd
    double min_dur_sec = 0.2;     // events strictly shorter are dropped
    double gap_merge_sec = 0.1;   // gaps strictly shorter are filled
    double frame_hop_sec = 664.0 / 16000.0;
};

// Frame posteriors [T, C] to events: binarize per class, median-filter the
// binary track (window centered, zero-padded at the edges), merge short
// gaps, drop short events, convert frame spans [i, j] to seconds as
// [i * hop, (j + 1) * hop).
EventList decode_events(const Tensor& frame_posteriors, const ThresholdVector& thresholds,
                        const DecodeConfig& cfg);

// Elementwise arithmetic mean over posterior sets of identical shape.
Tensor fuse_checkpoints(const std::vector<Tensor>& posterior_sets);

// Weighted mean; weights nonnegative with positive sum, normalized to one.
// Empty weights mean uniform.
Tensor fuse_models(const std::vector<Tensor>& posterior_sets,
                   const std::vector<double>& weights = {});

}  // namespace wsed
