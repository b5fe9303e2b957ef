#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tele {

using Index = std::int64_t;
using Shape = std::vector<Index>;
using Buffer = Eigen::VectorXd;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixRM = RowMatrix<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One vertex of a reverse-mode graph. Leaves own (or share) their value and
// keep their gradient after backward; interior nodes are released by it.
struct Node {
  Shape shape;
  std::shared_ptr<const Buffer> value;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Buffer&)> backward;

  void accumulate(const Buffer& delta);
  void accumulate(Buffer&& delta);
  Buffer& grad_buffer();
};

}  // namespace detail

class Tensor;

/// Builds an op output. `backward` receives the output gradient and is only
/// kept when some input requires a gradient.
Tensor detail_make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                          std::function<void(const Buffer&)> backward);
/// Adds `delta` into t's gradient when t requires one.
void detail_accumulate(const Tensor& t, const Buffer& delta);
void detail_accumulate(const Tensor& t, Buffer&& delta);

/// Handle to an n-dimensional double array that may take part in a gradient
/// graph. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, Buffer data);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);
  /// Leaf that owns `data`.
  static Tensor leaf(Shape shape, Buffer data, bool requires_grad = true);
  /// Leaf reading from external storage (parameters). The storage must outlive
  /// the graph and must not be written while the graph is alive.
  static Tensor view_of(Shape shape, std::shared_ptr<const Buffer> storage,
                        bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  Index dim(std::size_t axis) const;
  Index numel() const;
  const Buffer& data() const;
  double item() const;
  double at(Index flat) const { return data()[flat]; }
  Eigen::Map<const MatrixRM> matrix() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  const Buffer& grad() const;
  void zero_grad();
  std::uint64_t id() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor detail_make_result(Shape, Buffer, std::vector<Tensor>,
                                   std::function<void(const Buffer&)>);

  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode accumulation from a scalar loss. Gradients are added into the
/// leaves reachable from `loss`; every tensor in `ensure_zero` that is not
/// reached receives a zero gradient. The graph is released afterwards, so a
/// second call on the same loss throws GraphError.
void backward(const Tensor& loss, std::span<const Tensor> ensure_zero = {});

// ---------------------------------------------------------------------------
// Differentiable operations. All are pure functions of their inputs.

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N×k] · wᵀ[k×d] + bias[d]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, Index start, Index length);
/// out.flat[i] = x.flat[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<Index>> indices,
              Shape out_shape);

/// Normalizes over the last axis; gamma/beta (shape = last dim) are optional.
Tensor layer_norm(const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {},
                  double eps = 1e-5);
Tensor softmax(const Tensor& x);

class RngStream;
/// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, RngStream& rng);

/// Causal convolution along the lag axis: input[C×L], kernel[C_out×C×k],
/// k−1 zero columns prepended so the output keeps length L.
Tensor conv_lag(const Tensor& input, const Tensor& kernel);

/// Token sets attended jointly, plus the relative-bias lookup for each pair.
struct AttentionWindow {
  std::vector<Index> tokens;
  Index band = 0;
  /// Row-major n×n offsets into one band's bias table.
  std::vector<Index> relative;
};

struct WindowPartition {
  std::vector<AttentionWindow> windows;
  Index bands = 0;
  Index relative_positions = 0;
};

/// Multi-head softmax attention restricted to each window. q, k, v are
/// [N×C]; bias_table is [bands × relative_positions × heads]. Returns [N×C].
Tensor window_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& bias_table,
                             std::shared_ptr<const WindowPartition> partition, Index heads);

}  // namespace tele
