#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a handle: copies share storage, clone() makes a deep copy.
// Operations record a vector-Jacobian closure on the Tape passed to them when
// the tape is enabled and at least one operand requires a gradient. Replaying
// the tape backwards (Tape::backward) accumulates into every grad buffer in
// reverse recording order, so gradient sums are reproducible bit-for-bit.
//
// Everything the network uses is two-dimensional: rows are points (or batch
// items times points), columns are channels. "Segmented" ops treat the rows as
// S consecutive blocks of equal length, one block per point cloud.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cloudflow::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

// 64-byte aligned buffers keep the vectorised kernels on one code path
// regardless of where the allocator happens to place a tensor.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
    // Default-initialise on resize(n) so uninitialized() skips the zero fill.
    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    /// Values are unspecified; for kernels that overwrite every element.
    static Tensor uninitialized(Shape shape, bool requires_grad = false);
    static Tensor scalar(T v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t numel() const { return s_ ? s_->value.size() : 0; }
    /// Leading dimension; 1 for scalars.
    std::size_t rows() const;
    /// Product of all trailing dimensions; the length for a vector.
    std::size_t cols() const;

    std::span<const T> values() const { return s_->value; }
    std::span<T> values() { return s_->value; }
    /// Gradient buffers are shared through every handle, including const ones.
    std::span<T> grad() const { return s_->grad; }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    /// Turns gradient tracking on or off; turning it on allocates a zeroed buffer.
    void set_requires_grad(bool on);
    void zero_grad();

    T item() const;
    T at(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }

    Tensor clone() const;
    /// Same storage viewed with a different shape of equal size.
    Tensor reshaped(Shape shape) const;

    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

private:
    struct Storage {
        std::vector<T, AlignedAllocator<T>> value;
        std::vector<T, AlignedAllocator<T>> grad;
        bool requires_grad = false;
    };
    Shape shape_;
    std::shared_ptr<Storage> s_;
};

template <typename T>
class Tape {
public:
    explicit Tape(bool enabled = true) : enabled_(enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool enabled() const { return enabled_; }
    std::size_t size() const { return entries_.size(); }
    const std::string& op_name(std::size_t i) const { return entries_[i].op; }

    void record(std::string op, std::function<void()> vjp);

    /// Seeds d(loss)/d(loss) = 1 and replays every entry once in reverse order.
    /// A tape can be replayed only once.
    void backward(Tensor<T>& loss);

    /// Hash of the piecewise branches taken so far (ReLU signs, pooling argmaxes).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    std::uint64_t branch_signature() const { return signature_; }
    void mix_signature(std::uint64_t v);

private:
    struct Entry {
        std::string op;
        std::function<void()> vjp;
    };
    bool enabled_;
    bool replayed_ = false;
    std::vector<Entry> entries_;
    std::uint64_t signature_ = 1469598103934665603ull;
};

enum class Mode { train, infer };

struct BatchNormOptions {
    double momentum = 0.9;  // weight kept on the old running statistic
    double eps = 1e-5;
};

/// out[r,o] = sum_i W[o,i] x[r,i] + b[o]
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x);

/// Per-channel normalisation over all rows. In train mode the batch statistics
/// are used and the running statistics (plain buffers, never differentiated)
/// are updated in place; infer mode reads the running statistics only.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                     const BatchNormOptions& opt = {});

template <typename T>
struct PoolResult {
    Tensor<T> values;                   // S x F
    std::vector<std::size_t> argmax;   // S x F, row index local to each segment
};

/// Max over the points of each of `segments` equal row blocks. Ties go to the lowest row.
template <typename T>
PoolResult<T> max_pool_points(Tape<T>& tape, const Tensor<T>& x, std::size_t segments = 1);

/// Per-segment right multiplication: rows of block s times the K x K matrix stored
/// row-major in row s of `transforms` (S x K*K).
template <typename T>
Tensor<T> transform_points(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& transforms);

/// Appends the global row of each segment to every point row of that segment.
template <typename T>
Tensor<T> concat_global(Tape<T>& tape, const Tensor<T>& local, const Tensor<T>& global);

/// Mean of squared differences against a constant target.
template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// sum_k w[k] x[k] for a constant weight vector of the same size.
template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, std::span<const T> w);

}  // namespace cloudflow::ad
