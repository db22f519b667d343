#pragma once

#include "wsed/model.hpp"
#include "wsed/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wsed {

// Clip-level multi-hot tags; tags[c] is 0 or 1.
struct WeakLabelSet {
    std::string clip_id;
    std::vector<std::uint8_t> tags;
};

struct BatchPlan {
    std::vector<std::size_t> clip_indices;
};

// Class-balanced batch source. Per-batch quotas follow the class frequency
// of the label set, with every present class raised to at least one slot:
// the expected per-class share of a batch is max(ratio_c, 1/batch_size) up
// to the normalization that keeps the batch size fixed. Fractional quotas
// are realized with randomized rounding, so every batch carries every class
// and the long-run frequencies track the target shares.
class BalancedBatchSampler {
public:
    BalancedBatchSampler(const std::vector<WeakLabelSet>& labels, std::size_t batch_size,
                         std::uint64_t seed);

    BatchPlan next();
    std::vector<BatchPlan> take(std::size_t n_batches);

    // Per-batch fractional quota of each class (zero for absent classes).
    const std::vector<double>& class_quotas() const { return quotas_; }
    std::size_t batch_size() const { return batch_size_; }

private:
    std::size_t batch_size_;
    std::vector<std::vector<std::size_t>> clips_by_class_;  // indices into the label list
    std::vector<std::size_t> present_classes_;
    std::vector<double> quotas_;
    Rng rng_;
};

std::vector<BatchPlan> balanced_batches(const std::vector<WeakLabelSet>& labels,
                                        std::size_t batch_size, std::uint64_t seed,
                                        std::size_t n_batches);

// Mean over batch and classes of -[y log p + (1-y) log(1-p)] with predictions
// clamped to [1e-7, 1 - 1e-7].
double bce_loss(const Tensor& pred, const Tensor& target);
Var bce_loss_node(Graph& g, Var pred, const Tensor& target);

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    double lr = 1e-3;
    std::size_t steps = 500;
    std::size_t checkpoint_every = 100;
    std::uint64_t seed = 1234;
    std::size_t batch_size = 24;
    OptimizerKind optimizer = OptimizerKind::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

// Adam with bias correction; lr 0 leaves parameters bit-identical.
class AdamOptimizer {
public:
    AdamOptimizer(double lr, double beta1, double beta2, double eps);
    void step(const std::vector<Parameter*>& params);

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

class SgdOptimizer {
public:
    explicit SgdOptimizer(double lr) : lr_(lr) {}
    void step(const std::vector<Parameter*>& params);

private:
    double lr_;
};

struct TrainLogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double wallclock_ms = 0.0;
};

struct TrainResult {
    std::vector<Checkpoint> checkpoints;
    std::vector<TrainLogRow> log;
    bool diverged = false;
    std::size_t steps_run = 0;
};

struct TrainingSet {
    std::vector<FeatureMatrix> features;
    std::vector<WeakLabelSet> labels;
    FeatureKind feature_kind = FeatureKind::logmel;
    std::vector<std::string> class_names;
};

// Weakly supervised training on clip posteriors. Standardization statistics
// are fitted on `data` and stored in every checkpoint. A checkpoint is
// emitted every cfg.checkpoint_every steps and at the final step. A
// non-finite loss aborts the run and snapshots the parameters from before
// the failing step.
TrainResult train(Network& net, const TrainingSet& data, const TrainConfig& cfg);

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& log);

}  // namespace wsed
