#pragma once

#include "wsed/features.hpp"
#include "wsed/graph.hpp"

#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

namespace wsed {

enum class ModelKind { tagging, sed };
enum class HeadKind { attention_pool, frame_wise };

const char* to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct ModelConfig {
    ModelKind kind = ModelKind::tagging;
    std::size_t n_classes = 17;
    std::size_t units = 4;
    std::size_t blocks_per_unit = 2;
    std::vector<std::size_t> channels = {16, 32, 64, 64};  // one entry per unit
    std::size_t kernel = 3;
    std::size_t pool_t = 2;  // 1 for the sed model (no pooling along time)
    std::size_t pool_f = 2;
    std::size_t gru_hidden = 64;  // sed only
    HeadKind head = HeadKind::attention_pool;
    std::size_t frames = 240;
    std::size_t bins = 64;

    static ModelConfig tagging_defaults(std::size_t bins);
    static ModelConfig sed_defaults(std::size_t bins);

    void validate() const;  // throws std::invalid_argument on violation

    // Spatial extents after all pooling stages.
    std::size_t pooled_frames() const;
    std::size_t pooled_bins() const;
};

// Pure attention pooling: out[c] = sum_t a[t,c] * p[t,c] with
// a[.,c] = w[.,c] / sum_t w[t,c]. Scores in [0,1], weights positive.
std::vector<double> attention_pool(const Tensor& frame_scores, const Tensor& frame_weights);

struct NetworkOutput {
    Var clip;           // [B, n_classes], each value in [0,1]
    Var frames;         // [B, T, n_classes] for the sed model
    bool has_frames = false;
};

// One conv/batch-norm/gated-multiply block:
//   Y = batch_norm(X * W + b) (*) sigmoid(X * V + c)
// with `same` padding, so only the pooling stages change spatial extents.
class Network {
public:
    Network(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // batch: [B, frames, bins], already standardized.
    NetworkOutput forward(Graph& g, const Tensor& batch, BatchNormMode mode);

    std::size_t parameter_count() const;
    std::vector<Parameter*> parameters();
    void zero_grads();

    // Trainable parameters plus batch-norm running statistics, in a stable
    // order, for serialization.
    std::vector<std::pair<std::string, const Tensor*>> state_tensors() const;
    void load_state(const std::vector<std::pair<std::string, Tensor>>& tensors);

private:
    struct Block {
        Parameter* w = nullptr;
        Parameter* b = nullptr;
        Parameter* v = nullptr;
        Parameter* c = nullptr;
        Parameter* gamma = nullptr;
        Parameter* beta = nullptr;
        std::size_t bn_index = 0;
    };

    Parameter* add_param(const std::string& name, Tensor init);
    Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out);

    ModelConfig cfg_;
    std::deque<Parameter> params_;
    std::vector<BatchNormState> bn_;
    std::vector<Block> blocks_;
    GruParams gru_fwd_;
    GruParams gru_bwd_;
    Parameter* head_score_w = nullptr;
    Parameter* head_score_b = nullptr;
    Parameter* head_weight_w = nullptr;
    Parameter* head_weight_b = nullptr;
    Rng* init_rng_ = nullptr;  // only valid during construction
};

Network build_tagging_model(ModelConfig cfg, std::uint64_t seed);
Network build_sed_model(ModelConfig cfg, std::uint64_t seed);

// Serialized model snapshot: architecture, feature front-end identity,
// class names, standardization statistics, training step and every state
// tensor. Binary little-endian container, magic "WSEDCKPT", version 1.
struct Checkpoint {
    ModelConfig config;
    FeatureKind feature_kind = FeatureKind::logmel;
    std::vector<std::string> class_names;
    Standardizer stats;
    std::uint64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    static Checkpoint snapshot(const Network& net, FeatureKind kind,
                               std::vector<std::string> class_names, Standardizer stats,
                               std::uint64_t step);
    Network restore() const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// Inference helpers. Features are standardized with `stats` before the
// forward pass; outputs use infer-mode batch norm.
Tensor predict_clip_posteriors(Network& net, const std::vector<FeatureMatrix>& features,
                               const Standardizer& stats, std::size_t batch_size = 16);
// first: clip posteriors [N, C]; second: frame posteriors [N, T, C].
std::pair<Tensor, Tensor> predict_sed_posteriors(Network& net,
                                                 const std::vector<FeatureMatrix>& features,
                                                 const Standardizer& stats,
                                                 std::size_t batch_size = 16);

}  // namespace wsed
