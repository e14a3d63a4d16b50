#pragma once

// PointNet segmentation regressor: input T-Net, shared MLP (64, 64), feature
// T-Net, shared MLP ending in the global-feature width, max pooling, per-point
// concatenation of local and global features, shared tail MLP and a sigmoid head.
//
// Every hidden layer is affine -> batch norm -> ReLU. The T-Nets are small
// PointNets whose last affine layer starts at zero weight and identity bias, so
// a freshly built model applies identity transforms.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cloudflow/cloud.hpp"
#include "cloudflow/tensor.hpp"

namespace cloudflow {

struct ModelConfig {
    std::size_t n_points = 1024;
    std::size_t input_dim = 3;
    std::size_t n_cfd = 3;
    std::size_t global_feature = 1024;

    std::vector<std::size_t> point_mlp{64, 64};       // last width is the local feature size
    std::vector<std::size_t> feature_mlp{64, 128};    // followed by a layer of global_feature
    std::vector<std::size_t> tnet_point_mlp{64, 128};  // followed by a layer of global_feature
    std::vector<std::size_t> tnet_fc{512, 256};
    std::vector<std::size_t> tail_mlp{512, 256, 128};
    bool input_transform = true;
    bool feature_transform = true;

    /// Published layer widths with the tail paired to G.
    static ModelConfig canonical(std::size_t n_points, std::size_t input_dim, std::size_t global_feature,
                                 std::size_t n_cfd = 3);
    /// Narrow T-Nets and tail for single-core experiments; same topology.
    static ModelConfig desk(std::size_t n_points, std::size_t input_dim, std::size_t global_feature,
                            std::size_t n_cfd = 3);

    std::size_t local_width() const { return point_mlp.back(); }
    std::size_t concat_width() const { return local_width() + global_feature; }

    /// Throws ConfigError.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Tail MLP paired with a global-feature size: (512,256,128) for G >= 1024,
/// (256,256,128) for G in {256, 512}; below that (G, G, G/2).
std::vector<std::size_t> paired_tail(std::size_t global_feature);

/// Smallest and largest supported global-feature sizes (powers of two).
inline constexpr std::size_t kMinGlobalFeature = 16;
inline constexpr std::size_t kMaxGlobalFeature = 2048;

struct LayerCount {
    std::string name;
    std::size_t weights = 0;
    std::size_t biases = 0;
    std::size_t bn_affine = 0;   // gamma + beta
    std::size_t bn_running = 0;  // running mean + variance, not trainable
    std::size_t trainable() const { return weights + biases + bn_affine; }
};

/// Per-layer parameter table in registry order.
std::vector<LayerCount> parameter_breakdown(const ModelConfig& config);
/// Trainable scalars: weights, biases and batch-norm scale/shift. Running statistics excluded.
std::size_t parameter_count(const ModelConfig& config);
std::string format_breakdown(const std::vector<LayerCount>& rows);

template <typename T>
struct ParamEntry {
    std::string name;
    ad::Tensor<T> tensor;
    bool trainable = true;
};

/// Ordered registry of all tensors of a model keyed by layer path.
template <typename T>
class ModelParams {
public:
    void add(std::string name, ad::Tensor<T> tensor, bool trainable);
    ad::Tensor<T>& at(const std::string& name);
    const ad::Tensor<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    std::vector<ParamEntry<T>>& entries() { return entries_; }

    std::size_t trainable_count() const;
    std::size_t total_count() const;
    void zero_grad();
    /// Deep copy with independent storage.
    ModelParams clone() const;
    template <typename U>
    ModelParams<U> cast() const;

private:
    std::vector<ParamEntry<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct Model {
    ModelConfig config;
    ModelParams<T> params;
};

/// Allocates and initialises every layer. Deterministic given the seed.
template <typename T>
Model<T> build(const ModelConfig& config, std::uint64_t seed);

/// Per-cloud byproducts of a forward pass.
struct LatentRecord {
    std::size_t n_points = 0;
    std::vector<double> local_features;   // N x local_width
    std::vector<double> global_feature;   // G
    std::vector<std::size_t> argmax;      // G point indices
    std::vector<std::size_t> critical_set;  // sorted unique argmax
    /// Sorted unique argmax indices of the T-Net pooling layers.
    std::vector<std::size_t> transform_critical;

    /// critical_set united with transform_critical: forwarding only these points
    /// reproduces the global feature exactly in infer mode.
    std::vector<std::size_t> sufficient_set() const;
};

template <typename T>
struct ForwardResult {
    ad::Tensor<T> predictions;           // (S*N) x n_cfd, each value in (0, 1)
    std::vector<LatentRecord> latents;   // one per cloud
};

/// Batched forward over S clouds stacked row-wise in `input` ((S*N) x input_dim).
/// Train mode normalises with the batch statistics of all S*N rows and updates
/// the running statistics.
template <typename T>
ForwardResult<T> forward(Model<T>& model, ad::Tape<T>& tape, const ad::Tensor<T>& input, std::size_t clouds,
                         ad::Mode mode);

/// The K x K transform predicted by a T-Net for each cloud, rows of S x K*K.
template <typename T>
ad::Tensor<T> tnet_forward(Model<T>& model, ad::Tape<T>& tape, const std::string& prefix, const ad::Tensor<T>& x,
                           std::size_t clouds, ad::Mode mode, std::vector<std::size_t>* argmax = nullptr);

/// Stacks cloud coordinates into a network input; 2-D clouds are zero-padded in z
/// when the model expects 3-D input. Throws DimensionError on a wrong point count.
template <typename T>
ad::Tensor<T> make_input(const ModelConfig& config, const std::vector<const PointCloud*>& clouds);

/// Infer-mode prediction for one cloud, N x n_cfd in normalised units.
template <typename T>
ForwardResult<T> predict(Model<T>& model, const PointCloud& cloud);

}  // namespace cloudflow
