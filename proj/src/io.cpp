#include "wsed/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, sep)) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == sep) {
        out.push_back("");
    }
    return out;
}

std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return s.substr(b, e - b);
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), "cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(line);
    }
    return lines;
}

double parse_double(const std::string& s, const std::string& context) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        require(used == s.size(), context + ": trailing characters in number '" + s + "'");
        return v;
    } catch (const std::invalid_argument&) {
        throw std::runtime_error(context + ": not a number: '" + s + "'");
    }
}

std::size_t parse_size(const std::string& s, const std::string& context) {
    const double v = parse_double(s, context);
    require(v >= 0.0 && v == std::floor(v), context + ": expected a nonnegative integer, got '" +
                                                s + "'");
    return static_cast<std::size_t>(v);
}

void format_g17(std::string& out, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

}  // namespace

std::size_t ClassList::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) {
            return i;
        }
    }
    throw std::runtime_error("unknown class name '" + name + "'");
}

ClassList ClassList::default17() {
    return ClassList{{
        "train_horn", "air_horn_truck_horn", "car_alarm", "reversing_beeps", "ambulance_siren",
        "police_car_siren", "fire_engine_fire_truck_siren", "civil_defense_siren", "screaming",
        "bicycle", "skateboard", "car", "car_passing_by", "bus", "truck", "motorcycle", "train",
    }};
}

ClassList ClassList::from_pipe_list(const std::string& pipe_separated) {
    ClassList out;
    for (const std::string& name : split(pipe_separated, '|')) {
        const std::string trimmed = strip(name);
        require(!trimmed.empty(), "class list contains an empty name");
        out.names.push_back(trimmed);
    }
    require(!out.names.empty(), "class list is empty");
    return out;
}

std::string ClassList::to_pipe_list() const {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i > 0) {
            out += '|';
        }
        out += names[i];
    }
    return out;
}

std::vector<ManifestRow> load_weak_manifest(const std::string& path, const ClassList& classes,
                                            bool check_paths) {
    std::vector<ManifestRow> rows;
    const std::vector<std::string> lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string line = strip(lines[i]);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (i == 0 && line.rfind("clip_id,", 0) == 0) {
            continue;  // header
        }
        const std::vector<std::string> fields = split(line, ',');
        require(fields.size() == 3, path + ":" + std::to_string(i + 1) +
                                        ": expected clip_id,wav_path,tags");
        ManifestRow row;
        row.clip_id = strip(fields[0]);
        row.wav_path = strip(fields[1]);
        require(!row.clip_id.empty(), path + ": empty clip_id");
        if (!strip(fields[2]).empty()) {
            for (const std::string& tag : split(strip(fields[2]), '|')) {
                const std::string name = strip(tag);
                classes.index_of(name);  // validates
                row.tags.push_back(name);
            }
        }
        if (check_paths) {
            require(std::filesystem::exists(row.wav_path),
                    path + ": wav path does not exist: " + row.wav_path);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_weak_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "cannot open " + path + " for writing");
    f << "clip_id,wav_path,tags\n";
    for (const ManifestRow& row : rows) {
        f << row.clip_id << ',' << row.wav_path << ',';
        for (std::size_t i = 0; i < row.tags.size(); ++i) {
            if (i > 0) {
                f << '|';
            }
            f << row.tags[i];
        }
        f << '\n';
    }
}

WeakLabelSet to_label_set(const ManifestRow& row, const ClassList& classes) {
    WeakLabelSet out;
    out.clip_id = row.clip_id;
    out.tags.assign(classes.size(), 0);
    for (const std::string& tag : row.tags) {
        out.tags[classes.index_of(tag)] = 1;
    }
    return out;
}

std::vector<WeakLabelSet> to_label_sets(const std::vector<ManifestRow>& rows,
                                        const ClassList& classes) {
    std::vector<WeakLabelSet> out;
    out.reserve(rows.size());
    for (const ManifestRow& row : rows) {
        out.push_back(to_label_set(row, classes));
    }
    return out;
}

std::vector<StrongRow> load_strong_labels(const std::string& path, const ClassList& classes) {
    std::vector<StrongRow> rows;
    const std::vector<std::string> lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string line = strip(lines[i]);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        if (i == 0 && line.rfind("clip_id", 0) == 0) {
            continue;
        }
        std::replace(line.begin(), line.end(), '\t', ',');
        const std::vector<std::string> fields = split(line, ',');
        require(fields.size() == 4, path + ":" + std::to_string(i + 1) +
                                        ": expected clip_id,onset_sec,offset_sec,class");
        StrongRow row;
        row.clip_id = strip(fields[0]);
        row.onset_sec = parse_double(strip(fields[1]), path);
        row.offset_sec = parse_double(strip(fields[2]), path);
        row.class_name = strip(fields[3]);
        classes.index_of(row.class_name);
        require(row.onset_sec >= 0.0 && row.offset_sec > row.onset_sec,
                path + ":" + std::to_string(i + 1) + ": need 0 <= onset < offset");
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_strong_labels(const std::string& path, const std::vector<StrongRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "cannot open " + path + " for writing");
    f << "clip_id,onset_sec,offset_sec,class\n";
    for (const StrongRow& row : rows) {
        std::string line = row.clip_id;
        line += ',';
        format_g17(line, row.onset_sec);
        line += ',';
        format_g17(line, row.offset_sec);
        line += ',';
        line += row.class_name;
        f << line << '\n';
    }
}

std::map<std::string, EventList> events_by_clip(const std::vector<StrongRow>& rows,
                                                const ClassList& classes) {
    std::map<std::string, EventList> out;
    for (const StrongRow& row : rows) {
        out[row.clip_id].events.push_back(
            {classes.index_of(row.class_name), row.onset_sec, row.offset_sec});
    }
    return out;
}

namespace {
constexpr char kFeatMagic[8] = {'W', 'S', 'E', 'D', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

std::uint32_t get_u32(const std::string& buf, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    return v;
}
}  // namespace

void save_feature(const std::string& path, const FeatureMatrix& m) {
    std::string out;
    out.append(kFeatMagic, 8);
    put_u32(out, kFeatVersion);
    out.push_back(static_cast<char>(m.kind));
    put_u32(out, static_cast<std::uint32_t>(m.rows));
    put_u32(out, static_cast<std::uint32_t>(m.cols));
    for (double v : m.values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) {
            out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), "save_feature: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    require(static_cast<bool>(f), "save_feature: write failed for " + path);
}

FeatureMatrix load_feature(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), "load_feature: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(buf.size() >= 21 && std::memcmp(buf.data(), kFeatMagic, 8) == 0,
            "load_feature: " + path + " is not a feature file");
    require(get_u32(buf, 8) == kFeatVersion, "load_feature: unsupported version in " + path);
    FeatureMatrix m;
    m.kind = static_cast<FeatureKind>(buf[12]);
    m.rows = get_u32(buf, 13);
    m.cols = get_u32(buf, 17);
    const std::size_t count = m.rows * m.cols;
    require(buf.size() == 21 + count * 8, "load_feature: truncated file " + path);
    m.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int j = 0; j < 8; ++j) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[21 + i * 8 + j]))
                    << (8 * j);
        }
        std::memcpy(&m.values[i], &bits, 8);
    }
    return m;
}

void save_posteriors_csv(const std::string& path, const PosteriorTable& table) {
    require(table.values.ndim() == 2, "save_posteriors_csv: values must be [clips, classes]");
    require(table.values.shape[0] == table.clip_ids.size(),
            "save_posteriors_csv: row count mismatch");
    require(table.values.shape[1] == table.class_names.size(),
            "save_posteriors_csv: class count mismatch");
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "save_posteriors_csv: cannot open " + path);
    std::string header = "clip_id";
    for (const std::string& name : table.class_names) {
        header += ',';
        header += name;
    }
    f << header << '\n';
    const std::size_t C = table.class_names.size();
    for (std::size_t i = 0; i < table.clip_ids.size(); ++i) {
        std::string line = table.clip_ids[i];
        for (std::size_t c = 0; c < C; ++c) {
            line += ',';
            format_g17(line, table.values(i, c));
        }
        f << line << '\n';
    }
}

PosteriorTable load_posteriors_csv(const std::string& path) {
    const std::vector<std::string> lines = read_lines(path);
    require(!lines.empty(), "load_posteriors_csv: empty file " + path);
    const std::vector<std::string> header = split(lines[0], ',');
    require(header.size() >= 2 && header[0] == "clip_id",
            "load_posteriors_csv: malformed header in " + path);
    PosteriorTable table;
    table.class_names.assign(header.begin() + 1, header.end());
    const std::size_t C = table.class_names.size();
    std::vector<double> values;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (strip(lines[i]).empty()) {
            continue;
        }
        const std::vector<std::string> fields = split(lines[i], ',');
        require(fields.size() == C + 1, "load_posteriors_csv: row " + std::to_string(i + 1) +
                                            " has " + std::to_string(fields.size()) +
                                            " fields, expected " + std::to_string(C + 1));
        table.clip_ids.push_back(fields[0]);
        for (std::size_t c = 0; c < C; ++c) {
            values.push_back(parse_double(fields[c + 1], path));
        }
    }
    require(!table.clip_ids.empty(), "load_posteriors_csv: no rows in " + path);
    table.values = Tensor({table.clip_ids.size(), C}, std::move(values));
    return table;
}

void save_thresholds_csv(const std::string& path, const ThresholdVector& thresholds) {
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "save_thresholds_csv: cannot open " + path);
    f << "class_id,threshold\n";
    for (std::size_t c = 0; c < thresholds.values.size(); ++c) {
        std::string line = std::to_string(c);
        line += ',';
        format_g17(line, thresholds.values[c]);
        f << line << '\n';
    }
}

ThresholdVector load_thresholds_csv(const std::string& path) {
    const std::vector<std::string> lines = read_lines(path);
    ThresholdVector out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string line = strip(lines[i]);
        if (line.empty() || line[0] == '#' || line.rfind("class_id", 0) == 0) {
            continue;
        }
        const std::vector<std::string> fields = split(line, ',');
        require(fields.size() == 2, path + ": expected class_id,threshold");
        const std::size_t id = parse_size(fields[0], path);
        require(id == out.values.size(), path + ": class ids must be dense and ordered");
        const double th = parse_double(fields[1], path);
        require(th > 0.0 && th < 1.0, path + ": threshold out of (0,1)");
        out.values.push_back(th);
    }
    require(!out.values.empty(), path + ": no thresholds");
    return out;
}

void save_events_csv(const std::string& path, const std::map<std::string, EventList>& events,
                     const ClassList& classes, char delimiter) {
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "save_events_csv: cannot open " + path);
    std::string header = "clip_id";
    header += delimiter;
    header += "onset_sec";
    header += delimiter;
    header += "offset_sec";
    header += delimiter;
    header += "class_name";
    f << header << '\n';
    for (const auto& [clip_id, list] : events) {
        for (const Event& e : list.events) {
            std::string line = clip_id;
            line += delimiter;
            format_g17(line, e.onset_sec);
            line += delimiter;
            format_g17(line, e.offset_sec);
            line += delimiter;
            line += classes.names.at(e.class_id);
            f << line << '\n';
        }
    }
}

std::map<std::string, EventList> load_events_csv(const std::string& path,
                                                 const ClassList& classes) {
    std::map<std::string, EventList> out;
    const std::vector<std::string> lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string line = strip(lines[i]);
        if (line.empty() || line[0] == '#' || line.rfind("clip_id", 0) == 0) {
            continue;
        }
        std::replace(line.begin(), line.end(), '\t', ',');
        const std::vector<std::string> fields = split(line, ',');
        require(fields.size() == 4, path + ":" + std::to_string(i + 1) +
                                        ": expected clip_id,onset_sec,offset_sec,class_name");
        Event e;
        e.onset_sec = parse_double(strip(fields[1]), path);
        e.offset_sec = parse_double(strip(fields[2]), path);
        e.class_id = classes.index_of(strip(fields[3]));
        out[strip(fields[0])].events.push_back(e);
    }
    return out;
}

void save_frame_posteriors_csv(const std::string& path, const Tensor& frame_posteriors,
                               const ClassList& classes) {
    require(frame_posteriors.ndim() == 2, "save_frame_posteriors_csv: need [frames, classes]");
    require(frame_posteriors.shape[1] == classes.size(),
            "save_frame_posteriors_csv: class count mismatch");
    std::ofstream f(path, std::ios::trunc);
    require(static_cast<bool>(f), "save_frame_posteriors_csv: cannot open " + path);
    std::string header = "frame";
    for (const std::string& name : classes.names) {
        header += ',';
        header += name;
    }
    f << header << '\n';
    for (std::size_t t = 0; t < frame_posteriors.shape[0]; ++t) {
        std::string line = std::to_string(t);
        for (std::size_t c = 0; c < frame_posteriors.shape[1]; ++c) {
            line += ',';
            format_g17(line, frame_posteriors(t, c));
        }
        f << line << '\n';
    }
}

// ---------------------------------------------------------------------------
// RunConfig

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& context) {
    std::vector<std::size_t> out;
    for (const std::string& part : split(s, ',')) {
        out.push_back(parse_size(strip(part), context));
    }
    require(!out.empty(), context + ": empty list");
    return out;
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), "RunConfig: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(text);
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    bool pool_t_set = false;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = strip(raw);
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = strip(line.substr(0, hash));
        }
        if (line.empty()) {
            continue;
        }
        const std::size_t eq = line.find('=');
        require(eq != std::string::npos,
                "RunConfig line " + std::to_string(line_no) + ": expected key=value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        const std::string ctx = "RunConfig key '" + key + "'";

        if (key == "feature") {
            cfg.feature = feature_kind_from_string(value);
        } else if (key == "model") {
            cfg.model = model_kind_from_string(value);
        } else if (key == "sample_rate") {
            cfg.features.sample_rate = parse_double(value, ctx);
        } else if (key == "n_fft") {
            cfg.features.n_fft = parse_size(value, ctx);
        } else if (key == "win_length") {
            cfg.features.win_length = parse_size(value, ctx);
        } else if (key == "hop_length") {
            cfg.features.hop_length = parse_size(value, ctx);
        } else if (key == "n_mels") {
            cfg.features.n_mels = parse_size(value, ctx);
        } else if (key == "n_mfcc") {
            cfg.features.n_mfcc = parse_size(value, ctx);
        } else if (key == "fmin") {
            cfg.features.fmin = parse_double(value, ctx);
        } else if (key == "fmax") {
            cfg.features.fmax = parse_double(value, ctx);
        } else if (key == "frames") {
            cfg.features.frames = parse_size(value, ctx);
        } else if (key == "classes") {
            cfg.classes = ClassList::from_pipe_list(value);
        } else if (key == "channels") {
            cfg.channels = parse_size_list(value, ctx);
        } else if (key == "blocks_per_unit") {
            cfg.blocks_per_unit = parse_size(value, ctx);
        } else if (key == "kernel") {
            cfg.kernel = parse_size(value, ctx);
        } else if (key == "pool_t") {
            cfg.pool_t = parse_size(value, ctx);
            pool_t_set = true;
        } else if (key == "pool_f") {
            cfg.pool_f = parse_size(value, ctx);
        } else if (key == "gru_hidden") {
            cfg.gru_hidden = parse_size(value, ctx);
        } else if (key == "batch_size") {
            cfg.training.batch_size = parse_size(value, ctx);
        } else if (key == "lr") {
            cfg.training.lr = parse_double(value, ctx);
        } else if (key == "optimizer") {
            if (value == "adam") {
                cfg.training.optimizer = OptimizerKind::adam;
            } else if (value == "sgd") {
                cfg.training.optimizer = OptimizerKind::sgd;
            } else {
                throw std::runtime_error(ctx + ": expected adam or sgd");
            }
        } else if (key == "steps") {
            cfg.training.steps = parse_size(value, ctx);
        } else if (key == "checkpoint_every") {
            cfg.training.checkpoint_every = parse_size(value, ctx);
        } else if (key == "seed") {
            cfg.training.seed = static_cast<std::uint64_t>(parse_size(value, ctx));
        } else if (key == "median_win") {
            cfg.median_win = parse_size(value, ctx);
        } else if (key == "min_dur_sec") {
            cfg.min_dur_sec = parse_double(value, ctx);
        } else if (key == "gap_merge_sec") {
            cfg.gap_merge_sec = parse_double(value, ctx);
        } else if (key == "segment_sec") {
            cfg.segment_sec = parse_double(value, ctx);
        } else if (key == "clip_duration_sec") {
            cfg.clip_duration_sec = parse_double(value, ctx);
        } else {
            throw std::runtime_error("RunConfig line " + std::to_string(line_no) +
                                     ": unknown key '" + key + "'");
        }
    }
    if (cfg.model == ModelKind::sed && !pool_t_set) {
        cfg.pool_t = 1;
    }
    return cfg;
}

std::size_t RunConfig::feature_bins() const {
    switch (feature) {
        case FeatureKind::spectrogram:
            return features.n_fft / 2 + 1;
        case FeatureKind::logmel:
            return features.n_mels;
        case FeatureKind::mfcc:
            return features.n_mfcc;
    }
    return features.n_mels;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.kind = model;
    mc.head = model == ModelKind::tagging ? HeadKind::attention_pool : HeadKind::frame_wise;
    mc.n_classes = classes.size();
    mc.units = channels.size();
    mc.blocks_per_unit = blocks_per_unit;
    mc.channels = channels;
    mc.kernel = kernel;
    mc.pool_t = model == ModelKind::sed ? 1 : pool_t;
    mc.pool_f = pool_f;
    mc.gru_hidden = gru_hidden;
    mc.frames = features.frames;
    mc.bins = feature_bins();
    return mc;
}

DecodeConfig RunConfig::decode_config() const {
    DecodeConfig dc;
    dc.median_win = median_win;
    dc.min_dur_sec = min_dur_sec;
    dc.gap_merge_sec = gap_merge_sec;
    dc.frame_hop_sec = features.frame_hop_seconds();
    return dc;
}

std::string run_config_help() {
    return "feature=spectrogram|logmel|mfcc (logmel)\n"
           "model=tagging|sed (tagging)\n"
           "sample_rate (16000), n_fft (1024), win_length (1024), hop_length (664)\n"
           "n_mels (64), n_mfcc (24), fmin (50), fmax (8000), frames (240)\n"
           "classes=<name|name|...> (the 17 default classes)\n"
           "channels=<c1,c2,...> (16,32,64,64), blocks_per_unit (2), kernel (3)\n"
           "pool_t (2; forced 1 for sed), pool_f (2), gru_hidden (64)\n"
           "batch_size (24), lr (0.001), optimizer=adam|sgd (adam)\n"
           "steps (500), checkpoint_every (100), seed (1234)\n"
           "median_win (9), min_dur_sec (0.2), gap_merge_sec (0.1)\n"
           "segment_sec (1.0), clip_duration_sec (10.0)\n";
}

}  // namespace wsed
