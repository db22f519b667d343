#include "wsed/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace wsed {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

}  // namespace

BalancedBatchSampler::BalancedBatchSampler(const std::vector<WeakLabelSet>& labels,
                                           std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed) {
    require(!labels.empty(), "BalancedBatchSampler: empty label set");
    const std::size_t n_classes = labels.front().tags.size();
    clips_by_class_.assign(n_classes, {});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i].tags.size() == n_classes, "BalancedBatchSampler: ragged tag vectors");
        for (std::size_t c = 0; c < n_classes; ++c) {
            if (labels[i].tags[c]) {
                clips_by_class_[c].push_back(i);
            }
        }
    }
    std::size_t total_occurrences = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (!clips_by_class_[c].empty()) {
            present_classes_.push_back(c);
            total_occurrences += clips_by_class_[c].size();
        }
    }
    require(!present_classes_.empty(), "BalancedBatchSampler: no labeled clips");
    if (batch_size_ < present_classes_.size()) {
        throw std::invalid_argument(
            "BalancedBatchSampler: batch_size " + std::to_string(batch_size_) + " is below the " +
            std::to_string(present_classes_.size()) +
            " classes present; raise batch_size to at least the class count so every batch can "
            "carry each class");
    }

    // Water-filling: rare classes are pinned to one slot, the rest of the
    // batch is split proportionally to class frequency.
    quotas_.assign(n_classes, 0.0);
    std::vector<std::size_t> proportional = present_classes_;
    std::vector<std::size_t> pinned;
    while (true) {
        double ratio_sum = 0.0;
        for (std::size_t c : proportional) {
            ratio_sum += static_cast<double>(clips_by_class_[c].size()) /
                         static_cast<double>(total_occurrences);
        }
        const double budget = static_cast<double>(batch_size_) - static_cast<double>(pinned.size());
        bool moved = false;
        std::vector<std::size_t> keep;
        for (std::size_t c : proportional) {
            const double ratio = static_cast<double>(clips_by_class_[c].size()) /
                                 static_cast<double>(total_occurrences);
            const double share = budget * ratio / ratio_sum;
            if (share < 1.0) {
                pinned.push_back(c);
                moved = true;
            } else {
                keep.push_back(c);
            }
        }
        proportional.swap(keep);
        if (!moved) {
            for (std::size_t c : pinned) {
                quotas_[c] = 1.0;
            }
            for (std::size_t c : proportional) {
                const double ratio = static_cast<double>(clips_by_class_[c].size()) /
                                     static_cast<double>(total_occurrences);
                quotas_[c] = budget * ratio / ratio_sum;
            }
            break;
        }
        if (proportional.empty()) {
            // every class pinned: spread the whole batch evenly
            for (std::size_t c : pinned) {
                quotas_[c] = static_cast<double>(batch_size_) / static_cast<double>(pinned.size());
            }
            break;
        }
    }
}

BatchPlan BalancedBatchSampler::next() {
    // Integer part of each quota, then randomized rounding on the remainders
    // until the batch is full.
    std::vector<std::size_t> counts(quotas_.size(), 0);
    std::size_t used = 0;
    std::vector<double> remainders(quotas_.size(), 0.0);
    double remainder_sum = 0.0;
    for (std::size_t c : present_classes_) {
        counts[c] = static_cast<std::size_t>(quotas_[c]);
        used += counts[c];
        remainders[c] = quotas_[c] - static_cast<double>(counts[c]);
        remainder_sum += remainders[c];
    }
    while (used < batch_size_) {
        double pick = rng_.uniform01() * remainder_sum;
        std::size_t chosen = present_classes_.back();
        for (std::size_t c : present_classes_) {
            if (remainders[c] <= 0.0) {
                continue;
            }
            if (pick < remainders[c]) {
                chosen = c;
                break;
            }
            pick -= remainders[c];
        }
        counts[chosen] += 1;
        ++used;
    }

    BatchPlan plan;
    plan.clip_indices.reserve(batch_size_);
    for (std::size_t c : present_classes_) {
        const auto& pool = clips_by_class_[c];
        for (std::size_t i = 0; i < counts[c]; ++i) {
            plan.clip_indices.push_back(pool[rng_.uniform_index(pool.size())]);
        }
    }
    // order within the batch should not encode the class
    for (std::size_t i = plan.clip_indices.size(); i > 1; --i) {
        std::swap(plan.clip_indices[i - 1], plan.clip_indices[rng_.uniform_index(i)]);
    }
    return plan;
}

std::vector<BatchPlan> BalancedBatchSampler::take(std::size_t n_batches) {
    std::vector<BatchPlan> out;
    out.reserve(n_batches);
    for (std::size_t i = 0; i < n_batches; ++i) {
        out.push_back(next());
    }
    return out;
}

std::vector<BatchPlan> balanced_batches(const std::vector<WeakLabelSet>& labels,
                                        std::size_t batch_size, std::uint64_t seed,
                                        std::size_t n_batches) {
    BalancedBatchSampler sampler(labels, batch_size, seed);
    return sampler.take(n_batches);
}

Var bce_loss_node(Graph& g, Var pred, const Tensor& target) {
    const Tensor& p = g.value(pred);
    require(p.shape == target.shape, "bce_loss: prediction shape " + shape_to_string(p.shape) +
                                         " does not match target shape " +
                                         shape_to_string(target.shape));
    constexpr double kEps = 1e-7;
    Tensor pos_mask = target;          // y
    Tensor neg_mask = target;          // 1 - y
    for (double& v : neg_mask.data) {
        v = 1.0 - v;
    }
    Var clamped = g.clamp(pred, kEps, 1.0 - kEps);
    Var log_p = g.log(clamped);
    Var log_not_p = g.log(g.affine(clamped, -1.0, 1.0));
    Var pos = g.mul(g.leaf(std::move(pos_mask)), log_p);
    Var neg = g.mul(g.leaf(std::move(neg_mask)), log_not_p);
    return g.affine(g.mean_all(g.add(pos, neg)), -1.0, 0.0);
}

double bce_loss(const Tensor& pred, const Tensor& target) {
    Graph g;
    Var p = g.leaf(pred);
    return g.value(bce_loss_node(g, p, target)).data[0];
}

AdamOptimizer::AdamOptimizer(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(const std::vector<Parameter*>& params) {
    if (m_.empty()) {
        for (const Parameter* p : params) {
            m_.push_back(Tensor::zeros(p->value.shape));
            v_.push_back(Tensor::zeros(p->value.shape));
        }
    }
    require(m_.size() == params.size(), "AdamOptimizer: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            const double gderiv = p.grad.data[j];
            m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * gderiv;
            v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * gderiv * gderiv;
            const double mhat = m_[i].data[j] / bc1;
            const double vhat = v_[i].data[j] / bc2;
            p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void SgdOptimizer::step(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        for (std::size_t j = 0; j < p->value.numel(); ++j) {
            p->value.data[j] -= lr_ * p->grad.data[j];
        }
    }
}

TrainResult train(Network& net, const TrainingSet& data, const TrainConfig& cfg) {
    require(!data.features.empty(), "train: empty dataset");
    require(data.features.size() == data.labels.size(), "train: features/labels length mismatch");
    const std::size_t C = net.config().n_classes;
    for (const WeakLabelSet& l : data.labels) {
        require(l.tags.size() == C, "train: label width does not match model classes");
    }

    const Standardizer stats = Standardizer::fit(data.features);
    std::vector<FeatureMatrix> standardized = data.features;
    for (FeatureMatrix& m : standardized) {
        stats.apply(m);
    }

    BalancedBatchSampler sampler(data.labels, std::min(cfg.batch_size, data.labels.size()),
                                 cfg.seed);
    AdamOptimizer adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    SgdOptimizer sgd(cfg.lr);
    std::vector<Parameter*> params = net.parameters();

    const std::size_t T = standardized.front().rows;
    const std::size_t F = standardized.front().cols;

    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    auto emit_checkpoint = [&](std::uint64_t step) {
        if (!result.checkpoints.empty() && result.checkpoints.back().step == step) {
            return;
        }
        result.checkpoints.push_back(
            Checkpoint::snapshot(net, data.feature_kind, data.class_names, stats, step));
    };

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const BatchPlan plan = sampler.next();
        const std::size_t B = plan.clip_indices.size();
        Tensor batch({B, T, F});
        Tensor target({B, C});
        for (std::size_t i = 0; i < B; ++i) {
            const std::size_t idx = plan.clip_indices[i];
            std::copy_n(standardized[idx].values.data(), T * F, batch.data.data() + i * T * F);
            for (std::size_t c = 0; c < C; ++c) {
                target(i, c) = static_cast<double>(data.labels[idx].tags[c]);
            }
        }

        double loss_value = std::numeric_limits<double>::quiet_NaN();
        bool failed = false;
        try {
            Graph g(/*check_finite=*/false);
            NetworkOutput out = net.forward(g, batch, BatchNormMode::train);
            Var loss = bce_loss_node(g, out.clip, target);
            loss_value = g.value(loss).data[0];
            if (!std::isfinite(loss_value)) {
                failed = true;
            } else {
                net.zero_grads();
                g.backward(loss);
            }
        } catch (const std::exception&) {
            failed = true;
        }

        if (failed) {
            // keep the parameters from before the failing step
            emit_checkpoint(step - 1);
            result.diverged = true;
            break;
        }

        if (cfg.optimizer == OptimizerKind::adam) {
            adam.step(params);
        } else {
            sgd.step(params);
        }

        const auto now = std::chrono::steady_clock::now();
        result.log.push_back(
            {step, loss_value,
             std::chrono::duration<double, std::milli>(now - t0).count()});
        result.steps_run = step;

        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            emit_checkpoint(step);
        }
    }
    if (!result.diverged && cfg.steps > 0) {
        emit_checkpoint(cfg.steps);
    }
    if (result.checkpoints.empty()) {
        emit_checkpoint(0);
    }
    return result;
}

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw std::runtime_error("write_train_log_csv: cannot open " + path);
    }
    f << "step,loss,wallclock_ms\n";
    char buf[128];
    for (const TrainLogRow& row : log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.3f\n", row.step, row.loss, row.wallclock_ms);
        f << buf;
    }
}

}  // namespace wsed
