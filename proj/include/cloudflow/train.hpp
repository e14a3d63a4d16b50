#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cloudflow/data.hpp"
#include "cloudflow/model.hpp"
#include "cloudflow/tensor.hpp"

namespace cloudflow {

enum class Precision { f32, f64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct TrainConfig {
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-6;
    std::size_t batch_size = 8;
    std::size_t epochs = 4000;
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;

    /// Throws ConfigError.
    void validate() const;
};

/// Per-sample loss: (1 / 3N) sum_i |pred_i - target_i|^2 over N x 3 arrays.
double sample_mse(std::span<const double> pred, std::span<const double> target);

/// Batch loss on S stacked samples of equal size: the mean of the per-sample losses.
template <typename T>
ad::Tensor<T> batch_mse(ad::Tape<T>& tape, const ad::Tensor<T>& pred, const ad::Tensor<T>& target,
                        std::size_t samples);

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;  // one pair per registry entry; empty for frozen tensors
    std::uint64_t t = 0;

    static AdamState init(const ModelParams<T>& params);
};

/// One bias-corrected Adam update of every trainable tensor from its grad buffer:
/// p -= lr * m_hat / (sqrt(v_hat) + eps). Throws NumericalError naming the first
/// tensor with a non-finite gradient, before anything is modified.
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, const TrainConfig& config);

/// Clouds with their normalised targets, ready to be stacked into batches.
struct SampleSet {
    std::vector<const PointCloud*> clouds;
    std::vector<std::vector<double>> targets;  // N x 3 each, in [0, 1] on the training split

    static SampleSet make(const std::vector<const PointCloud*>& clouds, const NormStats& stats);
    std::size_t size() const { return clouds.size(); }
};

/// Infer-mode loss averaged over samples; NaN for an empty set.
template <typename T>
double evaluate_loss(Model<T>& model, const SampleSet& set, std::size_t batch_size = 8);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
    double seconds = 0.0;  // cumulative wall time
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_loss = 0.0;  // validation loss, or training loss without a validation split
    bool diverged = false;
    std::optional<std::size_t> last_good_epoch;
    double wall_seconds = 0.0;

    /// epoch,train_loss,val_loss,seconds
    void write_csv(const std::filesystem::path& path) const;
};

template <typename T>
struct FitHooks {
    /// Called whenever a new best model is found; typically persists a checkpoint.
    std::function<void(const Model<T>&, const EpochRecord&)> on_best;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Minibatch training. Each epoch shuffles the training samples with a seed derived
/// from (config.seed, epoch), drops a final batch smaller than two, then evaluates
/// the validation split in infer mode. On return `model` holds the best parameters
/// (lowest validation loss, or lowest training loss without validation data). A
/// non-finite loss stops training with report.diverged set.
template <typename T>
TrainingReport fit(Model<T>& model, const SampleSet& train, const SampleSet& val, const TrainConfig& config,
                   const FitHooks<T>& hooks = {});

// ---------------------------------------------------------------------------
// Grid search over global-feature size and batch size.

struct GridCell {
    std::size_t global_feature = 0;
    std::size_t batch_size = 0;
    std::vector<std::size_t> tail_mlp;
    bool feasible = true;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double test_loss = 0.0;
    double seconds = 0.0;
};

struct GridSearchConfig {
    std::vector<std::size_t> global_features;
    std::vector<std::size_t> batch_sizes;
    TrainConfig train;
    /// Model for a given G (the tail is paired with G by the factory).
    std::function<ModelConfig(std::size_t)> model_for;
    std::uint64_t model_seed = 0;
    /// Cells whose estimated training memory exceeds this are recorded as infeasible.
    double memory_budget_bytes = 4.0e9;
    /// Existing results; finished cells are skipped and the file is rewritten after every cell.
    std::optional<std::filesystem::path> results_csv;
};

/// Rough peak bytes for one training step: activations and their gradients for the
/// batch, plus parameters, gradients and two Adam moments.
double estimate_training_memory(const ModelConfig& config, std::size_t batch_size, Precision precision);

std::vector<GridCell> grid_search(const SampleSet& train, const SampleSet& val, const SampleSet& test,
                                  const GridSearchConfig& config,
                                  const std::function<void(const GridCell&)>& progress = {});

/// global_feature,batch_size,tail_mlp,train_loss,val_loss,test_loss,seconds. Infeasible
/// cells carry the cross mark in every metric column.
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& cells);
std::vector<GridCell> read_grid_csv(const std::filesystem::path& path);

inline constexpr const char* kInfeasibleMark = "\xC3\x97";  // U+00D7 multiplication sign

}  // namespace cloudflow
