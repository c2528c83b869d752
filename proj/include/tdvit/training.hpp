#pragma once

// MAE pretraining and classifier fine-tuning.
//
// Each sample in a batch is differentiated on its own tape against a private
// replica of the parameters. Per-sample gradients are summed in batch order,
// so results do not depend on how samples were spread over workers.

#include "augment.hpp"
#include "dataset.hpp"
#include "eval.hpp"
#include "model.hpp"
#include "optim.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tdvit {

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr_base = 3e-4;
    double lr_min = 0.0;
    double warmup_fraction = 0.05;
    double weight_decay = 0.05;
    double clip_norm = 1.0;
    double mask_ratio = 0.75;
    bool augment = true;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    bool verbose = false;
};

struct MetricRow {
    std::size_t step;
    std::size_t epoch;
    std::string split;
    std::string metric;
    double value;
};

/// Rows of `step,epoch,split,metric,value`.
struct MetricLog {
    std::vector<MetricRow> rows;

    void add(std::size_t step, std::size_t epoch, std::string split, std::string metric, double value) {
        rows.push_back({step, epoch, std::move(split), std::move(metric), value});
    }
    void write_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
        out << "step,epoch,split,metric,value\n";
        for (const auto& r : rows) out << r.step << ',' << r.epoch << ',' << r.split << ',' << r.metric << ',' << format_real(r.value) << '\n';
        if (!out) throw std::runtime_error("failed writing '" + path + "'");
    }
};

/// Random stream keyed by (seed, a, b, purpose).
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint32_t purpose) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32), purpose};
    return std::mt19937_64(seq);
}

template <typename T>
struct BatchGradients {
    std::vector<std::vector<T>> grads;  // aligned with named_parameters()
    double mean_loss = 0.0;
};

/// Mean loss and gradient over a batch. `loss_fn(replica, slot)` builds the
/// loss of batch slot `slot` on the given parameter replica.
template <typename T, typename LossFn>
BatchGradients<T> batch_gradients(ModelParams<T>& master, std::size_t batch_size, std::size_t workers, LossFn&& loss_fn) {
    if (batch_size == 0) throw std::invalid_argument("batch_gradients: empty batch");
    const std::size_t count = master.named_parameters().size();
    std::vector<std::vector<std::vector<T>>> per_sample(batch_size);
    std::vector<double> losses(batch_size);
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto work = [&](std::size_t first, std::size_t stride) {
        try {
            ModelParams<T> replica = master.clone();
            auto named = replica.named_parameters();
            for (std::size_t slot = first; slot < batch_size; slot += stride) {
                for (auto& n : named) n.tensor->zero_grad();
                const Tensor<T> loss = loss_fn(replica, slot);
                backward(loss);
                losses[slot] = loss.item();
                per_sample[slot].resize(count);
                for (std::size_t k = 0; k < count; ++k) {
                    const auto g = named[k].tensor->grad();
                    per_sample[slot][k].assign(g.begin(), g.end());
                }
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
    };
    workers = std::max<std::size_t>(1, std::min(workers, batch_size));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    }
    if (failure) std::rethrow_exception(failure);

    BatchGradients<T> out;
    out.grads = std::move(per_sample[0]);
    for (std::size_t slot = 1; slot < batch_size; ++slot)
        for (std::size_t k = 0; k < count; ++k)
            for (std::size_t i = 0; i < out.grads[k].size(); ++i) out.grads[k][i] += per_sample[slot][k][i];
    const T inv = T(1) / static_cast<T>(batch_size);
    for (auto& g : out.grads)
        for (auto& x : g) x *= inv;
    for (double l : losses) out.mean_loss += l;
    out.mean_loss /= static_cast<double>(batch_size);
    return out;
}

namespace detail {

inline ScheduleConfig make_schedule(const TrainConfig& cfg, std::size_t total_steps) {
    ScheduleConfig s;
    s.total_steps = total_steps;
    s.warmup_steps = std::min(total_steps - 1, static_cast<std::size_t>(cfg.warmup_fraction * static_cast<double>(total_steps)));
    s.lr_base = cfg.lr_base;
    s.lr_min = cfg.lr_min;
    return s;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = derived_rng(seed, epoch, 0, 1);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// Drives epochs of shuffled batches through AdamW with a cosine-warmup schedule.
template <typename T, typename SampleLoss, typename EpochHook>
std::vector<double> optimize(ModelParams<T>& params, std::size_t n, const TrainConfig& cfg, const char* tag,
                             MetricLog* log, SampleLoss&& sample_loss, EpochHook&& on_epoch) {
    if (n == 0) throw std::invalid_argument(std::string(tag) + ": empty dataset");
    if (cfg.batch_size == 0 || cfg.epochs == 0) throw std::invalid_argument(std::string(tag) + ": batch size and epochs must be positive");
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const ScheduleConfig sched = make_schedule(cfg, per_epoch * cfg.epochs);
    OptimState<T> state;
    state.weight_decay = cfg.weight_decay;
    std::vector<double> curve;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const auto order = epoch_order(n, cfg.seed, epoch);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t begin = b * cfg.batch_size, size = std::min(cfg.batch_size, n - begin);
            auto batch = batch_gradients(params, size, cfg.workers, [&](ModelParams<T>& replica, std::size_t slot) {
                const std::size_t sample = order[begin + slot];
                auto rng = derived_rng(cfg.seed, step, sample, 2);
                return sample_loss(replica, sample, rng);
            });
            clip_grad_norm(batch.grads, cfg.clip_norm);
            ++step;
            adamw_step(params.named_parameters(), batch.grads, state, lr_at(step, sched));
            curve.push_back(batch.mean_loss);
            epoch_loss += batch.mean_loss * static_cast<double>(size);
            if (log) log->add(step, epoch, "train", "loss", batch.mean_loss);
        }
        epoch_loss /= static_cast<double>(n);
        if (log) log->add(step, epoch, "train", "epoch_loss", epoch_loss);
        on_epoch(epoch, step);
        if (cfg.verbose) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            std::cerr << tag << " epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << epoch_loss << " (" << secs
                      << " s)\n";
        }
    }
    return curve;
}

}  // namespace detail

/// Masked-autoencoder pretraining; returns the per-step loss curve.
/// A fresh mask is drawn for every sample at every step.
template <typename T>
std::vector<double> pretrain_mae(const Dataset& data, ModelParams<T>& params, const TrainConfig& cfg,
                                 MetricLog* log = nullptr) {
    if (data.samples.empty()) throw std::invalid_argument("pretrain_mae: empty dataset");
    if (!params.has_decoder) throw std::invalid_argument("pretrain_mae: model has no decoder");
    const std::size_t per = params.config.patches_per_frame();
    return detail::optimize(
        params, data.size(), cfg, "pretrain", log,
        [&](ModelParams<T>& replica, std::size_t sample, std::mt19937_64& rng) {
            const auto& seq = data.samples[sample];
            const ImageSequence input = cfg.augment ? augment(seq, rng) : seq;
            const MaskPlan plan = sample_mask(seq.length(), per, cfg.mask_ratio, rng);
            return forward_mae(input, replica, plan).loss;
        },
        [](std::size_t, std::size_t) {});
}

/// Copies encoder weights (patch embedding, CLS, blocks, final norm) between
/// models of identical encoder configuration.
template <typename T>
void adopt_encoder(ModelParams<T>& dst, ModelParams<T>& src) {
    if (dst.config != src.config) throw std::invalid_argument("adopt_encoder: model configurations differ");
    auto from = src.named_parameters();
    for (auto& [name, t] : dst.named_parameters()) {
        if (name.starts_with("dec.") || name.starts_with("head.") || name == "mask_token") continue;
        for (auto& [other, s] : from) {
            if (other == name) {
                t->values() = s->values();
                break;
            }
        }
    }
}

struct ClassifierHistory {
    std::vector<double> step_losses;
    std::vector<double> val_auc;  // per epoch; NaN when undefined
};

/// Binary cross-entropy fine-tuning; logs train loss per step/epoch and
/// held-out AUC per epoch when a validation set is given.
template <typename T>
ClassifierHistory train_classifier(const Dataset& data, ModelParams<T>& params, const TrainConfig& cfg,
                                   const Dataset* validation = nullptr, MetricLog* log = nullptr) {
    if (!params.has_classifier) throw std::invalid_argument("train_classifier: model has no classifier head");
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        if (!data.samples[i].label) throw std::invalid_argument("train_classifier: sample " + std::to_string(i) + " has no label");
    }
    ClassifierHistory history;
    history.step_losses = detail::optimize(
        params, data.size(), cfg, "train", log,
        [&](ModelParams<T>& replica, std::size_t sample, std::mt19937_64& rng) {
            const auto& seq = data.samples[sample];
            const ImageSequence input = cfg.augment ? augment(seq, rng) : seq;
            return bce_with_logits(classify_logit(input, replica), static_cast<T>(static_cast<int>(*seq.label)));
        },
        [&](std::size_t epoch, std::size_t step) {
            if (!validation) return;
            const auto report = evaluate(params, *validation);
            if (std::isnan(report.auc)) std::cerr << "warning: validation AUC undefined (single-class labels)\n";
            history.val_auc.push_back(report.auc);
            if (log) log->add(step, epoch, "val", "auc", report.auc);
            if (cfg.verbose) std::cerr << "  val auc " << report.auc << " acc " << report.accuracy << "\n";
        });
    return history;
}

}  // namespace tdvit
