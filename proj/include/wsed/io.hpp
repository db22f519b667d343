#pragma once

#include "wsed/decision.hpp"
#include "wsed/features.hpp"
#include "wsed/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace wsed {

struct ClassList {
    std::vector<std::string> names;

    std::size_t size() const { return names.size(); }
    std::size_t index_of(const std::string& name) const;  // throws on unknown name

    // The 17 warning/vehicle classes of the target task.
    static ClassList default17();
    static ClassList from_pipe_list(const std::string& pipe_separated);
    std::string to_pipe_list() const;
};

struct ManifestRow {
    std::string clip_id;
    std::string wav_path;
    std::vector<std::string> tags;
};

struct StrongRow {
    std::string clip_id;
    double onset_sec = 0.0;
    double offset_sec = 0.0;
    std::string class_name;
};

// Weak manifest CSV: clip_id,wav_path,tags with '|'-separated tags. Tag names
// must come from the class list; wav paths must exist unless check_paths is
// off.
std::vector<ManifestRow> load_weak_manifest(const std::string& path, const ClassList& classes,
                                            bool check_paths = true);
void save_weak_manifest(const std::string& path, const std::vector<ManifestRow>& rows);

WeakLabelSet to_label_set(const ManifestRow& row, const ClassList& classes);
std::vector<WeakLabelSet> to_label_sets(const std::vector<ManifestRow>& rows,
                                        const ClassList& classes);

// Strong-label CSV: clip_id,onset_sec,offset_sec,class
std::vector<StrongRow> load_strong_labels(const std::string& path, const ClassList& classes);
void save_strong_labels(const std::string& path, const std::vector<StrongRow>& rows);
std::map<std::string, EventList> events_by_clip(const std::vector<StrongRow>& rows,
                                                const ClassList& classes);

// Feature store: one binary file per clip. Header: magic "WSEDFEAT",
// u32 version, u8 kind, u32 rows, u32 cols; then row-major little-endian
// 64-bit floats.
void save_feature(const std::string& path, const FeatureMatrix& m);
FeatureMatrix load_feature(const std::string& path);

// Clip posterior CSV: header clip_id,<class names...>; one row per clip with
// %.17g values, so load/save round-trips byte-identically.
struct PosteriorTable {
    std::vector<std::string> clip_ids;
    std::vector<std::string> class_names;
    Tensor values;  // [N, C]
};

void save_posteriors_csv(const std::string& path, const PosteriorTable& table);
PosteriorTable load_posteriors_csv(const std::string& path);

// Threshold CSV: class_id,threshold
void save_thresholds_csv(const std::string& path, const ThresholdVector& thresholds);
ThresholdVector load_thresholds_csv(const std::string& path);

// Event CSV: clip_id,onset_sec,offset_sec,class_name (comma or tab).
void save_events_csv(const std::string& path, const std::map<std::string, EventList>& events,
                     const ClassList& classes, char delimiter = ',');
std::map<std::string, EventList> load_events_csv(const std::string& path,
                                                 const ClassList& classes);

// Frame posterior CSV for one clip: header frame,<class names...>, one row
// per frame.
void save_frame_posteriors_csv(const std::string& path, const Tensor& frame_posteriors /*[T,C]*/,
                               const ClassList& classes);

// Line-oriented key=value run configuration. '#' starts a comment. Unknown
// keys are rejected; every key has a default, listed in run_config_help().
struct RunConfig {
    FeatureKind feature = FeatureKind::logmel;
    ModelKind model = ModelKind::tagging;
    FeatureConfig features;
    ClassList classes = ClassList::default17();

    std::vector<std::size_t> channels = {16, 32, 64, 64};
    std::size_t blocks_per_unit = 2;
    std::size_t kernel = 3;
    std::size_t pool_t = 2;  // forced to 1 for the sed model
    std::size_t pool_f = 2;
    std::size_t gru_hidden = 64;

    TrainConfig training;

    std::size_t median_win = 9;
    double min_dur_sec = 0.2;
    double gap_merge_sec = 0.1;
    double segment_sec = 1.0;
    double clip_duration_sec = 10.0;

    static RunConfig load(const std::string& path);
    static RunConfig parse(const std::string& text);

    ModelConfig model_config() const;
    DecodeConfig decode_config() const;
    std::size_t feature_bins() const;
};

std::string run_config_help();

}  // namespace wsed
