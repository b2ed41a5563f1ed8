#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace segkit {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Number of worker threads used inside batched ops (conv2d). Partitioning
/// is by-sample with ordered reductions, so results are bitwise identical
/// for every thread count.
void set_num_threads(int n);
int num_threads();

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  bool interior = false;  // produced by a recorded op (reset each backward)

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

/// Value-semantic handle to a shared tensor node. Dense row-major storage,
/// N×C×H×W layout for image data, 64-bit values throughout so that
/// finite-difference gradient checks stay meaningful.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->values.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Value of a single-element tensor.
  double item() const;

  double at(std::initializer_list<int> idx) const;
  double& at(std::initializer_list<int> idx);

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Reverse-mode tape: an ordered record of executed differentiable ops.
/// Forward/backward on one tape is single-threaded; separate tapes share no
/// mutable state and may run on separate threads.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }
  size_t size() const { return entries_.size(); }
  void clear();

  /// Replays adjoints in reverse order from a scalar. Interior (op-produced)
  /// grads are reset per call; leaf grads accumulate across calls.
  void backward(const Tensor& loss);

  void record(const Tensor& output, std::function<void()> adjoint);

 private:
  struct Entry {
    std::shared_ptr<TensorNode> out;
    std::function<void()> adjoint;
  };
  std::vector<Entry> entries_;
  bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Convolution & friends

struct Conv2dOpts {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation = 1;
};

/// input N×C×H×W, kernel O×C×kh×kw, bias O (or undefined for none).
/// H' = (H + 2·pad − (kh−1)·dilation − 1)/stride + 1, likewise W'.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv2dOpts& opts);
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1);

/// Weights for the large-kernel separable pair: branch A is 1×k then k×1,
/// branch B is k×1 then 1×k; the branches are summed. Biases may be
/// undefined. Symmetric padding (k−1)/2 on the long axis keeps spatial shape.
struct SeparablePairWeights {
  Tensor a_row_w, a_row_b;  // mid×C×1×k
  Tensor a_col_w, a_col_b;  // out×mid×k×1
  Tensor b_col_w, b_col_b;  // mid×C×k×1
  Tensor b_row_w, b_row_b;  // out×mid×1×k
};

Tensor conv_separable_pair(Tape& tape, const Tensor& input, const SeparablePairWeights& w);

/// 2×2 window, stride 2; H and W must be even. Gradient routes to the first
/// (row-major) maximal element of each window.
Tensor max_pool2d(Tape& tape, const Tensor& input);

/// Doubles H and W; half-pixel-center convention (output corners map into
/// the input cell grid rather than onto input corner samples).
Tensor bilinear_upsample2x(Tape& tape, const Tensor& input);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

/// Per-channel normalization, ε = 1e-5. Training mode uses batch statistics
/// and updates `stats` with momentum 0.1; eval mode normalizes with `stats`.
Tensor batch_norm2d(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    BatchNormStats& stats, bool training, double eps = 1e-5,
                    double momentum = 0.1);

// ---------------------------------------------------------------------------
// Pointwise and reductions

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);  // rejects non-positive input
Tensor neg(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);  // b must be nonzero
Tensor add_scalar(Tape& tape, const Tensor& x, double c);
Tensor mul_scalar(Tape& tape, const Tensor& x, double c);
Tensor sub_scalar(Tape& tape, const Tensor& x, double c);   // x − c
Tensor rsub_scalar(Tape& tape, double c, const Tensor& x);  // c − x
Tensor pow_scalar(Tape& tape, const Tensor& x, double e);   // x > 0
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);

Tensor sum(Tape& tape, const Tensor& x);   // -> shape {1}
Tensor mean(Tape& tape, const Tensor& x);  // -> shape {1}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
Tensor slice_batch(Tape& tape, const Tensor& x, int n);  // sample n as batch of 1

}  // namespace segkit
