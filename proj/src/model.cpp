#include "wsed/model.hpp"

#include "wsed/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

}  // namespace

const char* to_string(ModelKind kind) {
    return kind == ModelKind::tagging ? "tagging" : "sed";
}

ModelKind model_kind_from_string(const std::string& name) {
    if (name == "tagging") {
        return ModelKind::tagging;
    }
    if (name == "sed") {
        return ModelKind::sed;
    }
    throw std::invalid_argument("unknown model kind '" + name + "'");
}

ModelConfig ModelConfig::tagging_defaults(std::size_t bins) {
    ModelConfig cfg;
    cfg.kind = ModelKind::tagging;
    cfg.head = HeadKind::attention_pool;
    cfg.channels = {16, 32, 64, 64};
    cfg.pool_t = 2;
    cfg.pool_f = 2;
    cfg.bins = bins;
    return cfg;
}

ModelConfig ModelConfig::sed_defaults(std::size_t bins) {
    ModelConfig cfg;
    cfg.kind = ModelKind::sed;
    cfg.head = HeadKind::frame_wise;
    cfg.channels = {16, 32, 64, 64};
    cfg.pool_t = 1;  // keep the time axis intact
    cfg.pool_f = 2;
    cfg.bins = bins;
    return cfg;
}

void ModelConfig::validate() const {
    require(n_classes >= 1, "ModelConfig: n_classes must be positive");
    require(units >= 1, "ModelConfig: units must be positive");
    require(blocks_per_unit >= 1, "ModelConfig: blocks_per_unit must be positive");
    require(channels.size() == units, "ModelConfig: need one channel count per unit");
    for (std::size_t c : channels) {
        require(c >= 1, "ModelConfig: zero channel count");
    }
    require(kernel >= 1 && kernel % 2 == 1, "ModelConfig: kernel must be odd");
    require(pool_t >= 1 && pool_f >= 1, "ModelConfig: pool extents must be positive");
    require(frames >= 1 && bins >= 1, "ModelConfig: input extents must be positive");
    require(pooled_frames() >= 1, "ModelConfig: pooling erases the time axis");
    require(pooled_bins() >= 1, "ModelConfig: pooling erases the frequency axis");
    if (kind == ModelKind::tagging) {
        require(units == 4, "ModelConfig: the tagging model uses exactly 4 units");
        require(head == HeadKind::attention_pool, "ModelConfig: tagging model needs the attention head");
    } else {
        require(pool_t == 1, "ModelConfig: the sed model must not pool along time");
        require(head == HeadKind::frame_wise, "ModelConfig: sed model needs the frame-wise head");
        require(gru_hidden >= 1, "ModelConfig: gru_hidden must be positive");
    }
}

std::size_t ModelConfig::pooled_frames() const {
    std::size_t t = frames;
    for (std::size_t u = 0; u < units; ++u) {
        t /= pool_t;
    }
    return t;
}

std::size_t ModelConfig::pooled_bins() const {
    std::size_t f = bins;
    for (std::size_t u = 0; u < units; ++u) {
        f /= pool_f;
    }
    return f;
}

std::vector<double> attention_pool(const Tensor& frame_scores, const Tensor& frame_weights) {
    require(frame_scores.ndim() == 2, "attention_pool: scores must be [frames, classes]");
    require(frame_scores.shape == frame_weights.shape,
            "attention_pool: scores " + shape_to_string(frame_scores.shape) +
                " and weights " + shape_to_string(frame_weights.shape) + " differ");
    const std::size_t T = frame_scores.shape[0];
    const std::size_t C = frame_scores.shape[1];
    require(T >= 1, "attention_pool: no frames");
    for (double w : frame_weights.data) {
        require(w > 0.0, "attention_pool: weights must be positive");
    }
    std::vector<double> out(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double wsum = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            wsum += frame_weights(t, c);
        }
        double acc = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            acc += frame_weights(t, c) / wsum * frame_scores(t, c);
        }
        out[c] = acc;
    }
    return out;
}

Parameter* Network::add_param(const std::string& name, Tensor init) {
    params_.emplace_back(name, std::move(init));
    return &params_.back();
}

Tensor Network::glorot(Shape shape, std::size_t fan_in, std::size_t fan_out) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : t.data) {
        v = init_rng_->uniform(-a, a);
    }
    return t;
}

Network::Network(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    init_rng_ = &rng;

    const std::size_t k = cfg_.kernel;
    std::size_t in_ch = 1;
    for (std::size_t u = 0; u < cfg_.units; ++u) {
        const std::size_t out_ch = cfg_.channels[u];
        for (std::size_t j = 0; j < cfg_.blocks_per_unit; ++j) {
            const std::string base = "unit" + std::to_string(u) + ".block" + std::to_string(j);
            const std::size_t fan_in = in_ch * k * k;
            const std::size_t fan_out = out_ch * k * k;
            Block blk;
            blk.w = add_param(base + ".w", glorot({out_ch, in_ch, k, k}, fan_in, fan_out));
            blk.b = add_param(base + ".b", Tensor::zeros({out_ch}));
            blk.v = add_param(base + ".v", glorot({out_ch, in_ch, k, k}, fan_in, fan_out));
            blk.c = add_param(base + ".c", Tensor::zeros({out_ch}));
            blk.gamma = add_param(base + ".gamma", Tensor::full({out_ch}, 1.0));
            blk.beta = add_param(base + ".beta", Tensor::zeros({out_ch}));
            blk.bn_index = bn_.size();
            bn_.emplace_back(out_ch);
            blocks_.push_back(blk);
            in_ch = out_ch;
        }
    }

    std::size_t head_in = cfg_.channels.back() * cfg_.pooled_bins();
    if (cfg_.kind == ModelKind::sed) {
        const std::size_t feat = head_in;
        const std::size_t h = cfg_.gru_hidden;
        auto make_gru = [&](const std::string& base, GruParams& gp) {
            gp.Wz = add_param(base + ".Wz", glorot({feat, h}, feat, h));
            gp.Uz = add_param(base + ".Uz", glorot({h, h}, h, h));
            gp.bz = add_param(base + ".bz", Tensor::zeros({h}));
            gp.Wr = add_param(base + ".Wr", glorot({feat, h}, feat, h));
            gp.Ur = add_param(base + ".Ur", glorot({h, h}, h, h));
            gp.br = add_param(base + ".br", Tensor::zeros({h}));
            gp.Wh = add_param(base + ".Wh", glorot({feat, h}, feat, h));
            gp.Uh = add_param(base + ".Uh", glorot({h, h}, h, h));
            gp.bh = add_param(base + ".bh", Tensor::zeros({h}));
        };
        make_gru("gru.fwd", gru_fwd_);
        make_gru("gru.bwd", gru_bwd_);
        head_in = 2 * h;
    }

    head_score_w = add_param("head.score.w", glorot({head_in, cfg_.n_classes}, head_in, cfg_.n_classes));
    head_score_b = add_param("head.score.b", Tensor::zeros({cfg_.n_classes}));
    head_weight_w =
        add_param("head.weight.w", glorot({head_in, cfg_.n_classes}, head_in, cfg_.n_classes));
    head_weight_b = add_param("head.weight.b", Tensor::zeros({cfg_.n_classes}));

    init_rng_ = nullptr;
}

NetworkOutput Network::forward(Graph& g, const Tensor& batch, BatchNormMode mode) {
    require(batch.ndim() == 3, "Network::forward: batch must be [B, frames, bins], got " +
                                   shape_to_string(batch.shape));
    require(batch.shape[2] == cfg_.bins, "Network::forward: expected " + std::to_string(cfg_.bins) +
                                             " bins, got " + shape_to_string(batch.shape));
    const std::size_t B = batch.shape[0];
    const std::size_t T = batch.shape[1];

    Var x = g.leaf(batch);
    x = g.reshape(x, {B, 1, T, cfg_.bins});

    std::size_t blk = 0;
    for (std::size_t u = 0; u < cfg_.units; ++u) {
        for (std::size_t j = 0; j < cfg_.blocks_per_unit; ++j, ++blk) {
            Block& b = blocks_[blk];
            Var lin = g.conv2d(x, g.param(*b.w), g.param(*b.b), Padding::same);
            lin = g.batch_norm(lin, g.param(*b.gamma), g.param(*b.beta), bn_[b.bn_index], mode);
            Var gate = g.sigmoid(g.conv2d(x, g.param(*b.v), g.param(*b.c), Padding::same));
            x = g.mul(lin, gate);
        }
        x = g.max_pool2d(x, cfg_.pool_t, cfg_.pool_f);
    }

    const Tensor& feat_val = g.value(x);
    const std::size_t C = feat_val.shape[1];
    const std::size_t Tp = feat_val.shape[2];
    const std::size_t Fp = feat_val.shape[3];

    NetworkOutput out;
    if (cfg_.kind == ModelKind::tagging) {
        // [B,C,T,F] -> [B,T,C*F] -> per-frame score and weight heads
        Var frames = g.reshape(g.permute(x, {0, 2, 1, 3}), {B * Tp, C * Fp});
        Var scores = g.sigmoid(g.linear(frames, g.param(*head_score_w), g.param(*head_score_b)));
        scores = g.reshape(scores, {B, Tp, cfg_.n_classes});
        Var logits = g.linear(frames, g.param(*head_weight_w), g.param(*head_weight_b));
        Var attn = g.softmax(g.reshape(logits, {B, Tp, cfg_.n_classes}), 1);
        out.clip = g.sum_axis(g.mul(attn, scores), 1);
        out.has_frames = false;
    } else {
        // [B,C,T,F] -> [T,B,C*F] -> BiGRU -> frame posteriors + attention clip
        Var seq = g.reshape(g.permute(x, {2, 0, 1, 3}), {Tp, B, C * Fp});
        Var rnn = g.bigru(seq, gru_fwd_, gru_bwd_);
        Var frames = g.reshape(g.permute(rnn, {1, 0, 2}), {B * Tp, 2 * cfg_.gru_hidden});
        Var scores = g.sigmoid(g.linear(frames, g.param(*head_score_w), g.param(*head_score_b)));
        scores = g.reshape(scores, {B, Tp, cfg_.n_classes});
        Var logits = g.linear(frames, g.param(*head_weight_w), g.param(*head_weight_b));
        Var attn = g.softmax(g.reshape(logits, {B, Tp, cfg_.n_classes}), 1);
        out.clip = g.sum_axis(g.mul(attn, scores), 1);
        out.frames = scores;
        out.has_frames = true;
    }
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter& p : params_) {
        n += p.value.numel();
    }
    return n;
}

std::vector<Parameter*> Network::parameters() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (Parameter& p : params_) {
        out.push_back(&p);
    }
    return out;
}

void Network::zero_grads() {
    for (Parameter& p : params_) {
        p.zero_grad();
    }
}

std::vector<std::pair<std::string, const Tensor*>> Network::state_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const Parameter& p : params_) {
        out.emplace_back(p.name, &p.value);
    }
    for (std::size_t i = 0; i < bn_.size(); ++i) {
        out.emplace_back("bn" + std::to_string(i) + ".running_mean", &bn_[i].running_mean);
        out.emplace_back("bn" + std::to_string(i) + ".running_var", &bn_[i].running_var);
    }
    return out;
}

void Network::load_state(const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : tensors) {
        by_name[name] = &tensor;
    }
    auto take = [&](const std::string& name, Tensor& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw std::runtime_error("load_state: missing tensor '" + name + "'");
        }
        if (it->second->shape != dst.shape) {
            throw std::runtime_error("load_state: tensor '" + name + "' has shape " +
                                     shape_to_string(it->second->shape) + ", expected " +
                                     shape_to_string(dst.shape));
        }
        dst = *it->second;
        by_name.erase(it);
    };
    for (Parameter& p : params_) {
        take(p.name, p.value);
    }
    for (std::size_t i = 0; i < bn_.size(); ++i) {
        take("bn" + std::to_string(i) + ".running_mean", bn_[i].running_mean);
        take("bn" + std::to_string(i) + ".running_var", bn_[i].running_var);
    }
    if (!by_name.empty()) {
        throw std::runtime_error("load_state: unexpected tensor '" + by_name.begin()->first + "'");
    }
}

Network build_tagging_model(ModelConfig cfg, std::uint64_t seed) {
    cfg.kind = ModelKind::tagging;
    cfg.head = HeadKind::attention_pool;
    return Network(std::move(cfg), seed);
}

Network build_sed_model(ModelConfig cfg, std::uint64_t seed) {
    cfg.kind = ModelKind::sed;
    cfg.head = HeadKind::frame_wise;
    return Network(std::move(cfg), seed);
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'W', 'S', 'E', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_string(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw std::runtime_error("checkpoint: truncated file");
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

Checkpoint Checkpoint::snapshot(const Network& net, FeatureKind kind,
                                std::vector<std::string> class_names, Standardizer stats,
                                std::uint64_t step) {
    Checkpoint ckpt;
    ckpt.config = net.config();
    ckpt.feature_kind = kind;
    ckpt.class_names = std::move(class_names);
    ckpt.stats = std::move(stats);
    ckpt.step = step;
    for (const auto& [name, tensor] : net.state_tensors()) {
        ckpt.tensors.emplace_back(name, *tensor);
    }
    return ckpt;
}

Network Checkpoint::restore() const {
    Network net(config, 0);
    net.load_state(tensors);
    return net;
}

void Checkpoint::save(const std::string& path) const {
    std::string out;
    out.append(kMagic, 8);
    put_u32(out, kVersion);
    put_u64(out, step);
    out.push_back(static_cast<char>(feature_kind));
    out.push_back(static_cast<char>(config.kind));
    out.push_back(static_cast<char>(config.head));
    put_u64(out, config.n_classes);
    put_u64(out, config.units);
    put_u64(out, config.blocks_per_unit);
    put_u64(out, config.kernel);
    put_u64(out, config.pool_t);
    put_u64(out, config.pool_f);
    put_u64(out, config.gru_hidden);
    put_u64(out, config.frames);
    put_u64(out, config.bins);
    put_u32(out, static_cast<std::uint32_t>(config.channels.size()));
    for (std::size_t c : config.channels) {
        put_u64(out, c);
    }
    put_u32(out, static_cast<std::uint32_t>(class_names.size()));
    for (const std::string& name : class_names) {
        put_string(out, name);
    }
    put_u32(out, static_cast<std::uint32_t>(stats.mean.size()));
    for (double v : stats.mean) {
        put_f64(out, v);
    }
    for (double v : stats.stddev) {
        put_f64(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        put_string(out, name);
        put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
        for (std::size_t e : tensor.shape) {
            put_u64(out, e);
        }
        for (double v : tensor.data) {
            put_f64(out, v);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw std::runtime_error("checkpoint: write failed for " + path);
    }
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path);
    }
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
    }
    Reader r{buf, 8};
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.step = r.u64();
    r.need(3);
    ckpt.feature_kind = static_cast<FeatureKind>(buf[r.pos++]);
    ckpt.config.kind = static_cast<ModelKind>(buf[r.pos++]);
    ckpt.config.head = static_cast<HeadKind>(buf[r.pos++]);
    ckpt.config.n_classes = r.u64();
    ckpt.config.units = r.u64();
    ckpt.config.blocks_per_unit = r.u64();
    ckpt.config.kernel = r.u64();
    ckpt.config.pool_t = r.u64();
    ckpt.config.pool_f = r.u64();
    ckpt.config.gru_hidden = r.u64();
    ckpt.config.frames = r.u64();
    ckpt.config.bins = r.u64();
    ckpt.config.channels.resize(r.u32());
    for (std::size_t& c : ckpt.config.channels) {
        c = r.u64();
    }
    ckpt.class_names.resize(r.u32());
    for (std::string& name : ckpt.class_names) {
        name = r.str();
    }
    const std::uint32_t bins = r.u32();
    ckpt.stats.mean.resize(bins);
    ckpt.stats.stddev.resize(bins);
    for (double& v : ckpt.stats.mean) {
        v = r.f64();
    }
    for (double& v : ckpt.stats.stddev) {
        v = r.f64();
    }
    const std::uint32_t n_tensors = r.u32();
    ckpt.tensors.reserve(n_tensors);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        Shape shape(r.u32());
        for (std::size_t& e : shape) {
            e = r.u64();
        }
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) {
            v = r.f64();
        }
        ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Inference helpers

namespace {

Tensor make_batch(const std::vector<FeatureMatrix>& features, const Standardizer& stats,
                  std::size_t begin, std::size_t end) {
    const std::size_t B = end - begin;
    const std::size_t T = features[begin].rows;
    const std::size_t F = features[begin].cols;
    Tensor batch({B, T, F});
    for (std::size_t i = 0; i < B; ++i) {
        FeatureMatrix m = features[begin + i];
        stats.apply(m);
        std::copy_n(m.values.data(), T * F, batch.data.data() + i * T * F);
    }
    return batch;
}

}  // namespace

Tensor predict_clip_posteriors(Network& net, const std::vector<FeatureMatrix>& features,
                               const Standardizer& stats, std::size_t batch_size) {
    require(!features.empty(), "predict_clip_posteriors: no features");
    const std::size_t N = features.size();
    const std::size_t C = net.config().n_classes;
    Tensor out({N, C});
    for (std::size_t begin = 0; begin < N; begin += batch_size) {
        const std::size_t end = std::min(N, begin + batch_size);
        Graph g;
        NetworkOutput y = net.forward(g, make_batch(features, stats, begin, end),
                                      BatchNormMode::infer);
        const Tensor& clip = g.value(y.clip);
        std::copy_n(clip.data.data(), clip.numel(), out.data.data() + begin * C);
    }
    return out;
}

std::pair<Tensor, Tensor> predict_sed_posteriors(Network& net,
                                                 const std::vector<FeatureMatrix>& features,
                                                 const Standardizer& stats, std::size_t batch_size) {
    require(!features.empty(), "predict_sed_posteriors: no features");
    require(net.config().kind == ModelKind::sed, "predict_sed_posteriors: needs a sed model");
    const std::size_t N = features.size();
    const std::size_t C = net.config().n_classes;
    const std::size_t T = features.front().rows;
    Tensor clips({N, C});
    Tensor frames({N, T, C});
    for (std::size_t begin = 0; begin < N; begin += batch_size) {
        const std::size_t end = std::min(N, begin + batch_size);
        Graph g;
        NetworkOutput y = net.forward(g, make_batch(features, stats, begin, end),
                                      BatchNormMode::infer);
        const Tensor& clip = g.value(y.clip);
        std::copy_n(clip.data.data(), clip.numel(), clips.data.data() + begin * C);
        const Tensor& fp = g.value(y.frames);
        std::copy_n(fp.data.data(), fp.numel(), frames.data.data() + begin * T * C);
    }
    return {std::move(clips), std::move(frames)};
}

}  // namespace wsed
