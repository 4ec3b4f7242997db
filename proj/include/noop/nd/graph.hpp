#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string_view>
#include <utility>
#include <vector>

#include "noop/nd/tensor.hpp"

namespace noop::nd {

enum class OpKind {
  Add,
  Sub,
  Mul,
  Scale,
  Shift,
  MatMul,
  MatMulNT,
  Conv2d,
  Upsample2x,
  Relu,
  Silu,
  BatchNorm,
  Embedding,
  ConcatChannels,
  Sum,
  Mean,
  SqDiffRows,
  LogSumExpRows,
  BiasAdd,
  RepeatRows,
  Reshape,
  SelectCols,
  ZScoreRows,
};

inline constexpr std::size_t kOpKindCount = 23;

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Shift: return "shift";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Upsample2x: return "upsample2x";
    case OpKind::Relu: return "relu";
    case OpKind::Silu: return "silu";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Embedding: return "embedding";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SqDiffRows: return "sqdiff_rows";
    case OpKind::LogSumExpRows: return "logsumexp_rows";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::Reshape: return "reshape";
    case OpKind::SelectCols: return "select_cols";
    case OpKind::ZScoreRows: return "zscore_rows";
  }
  return "unknown";
}

/// Tape of recorded primitive ops. Nodes are appended as ops execute, so the
/// vector order is already topological; backward() walks it in reverse.
template <typename T>
class Graph {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  struct Node {
    std::size_t id;
    OpKind kind;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    std::function<void()> backward;
  };

  static bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    for (const auto* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  /// Marks `out` as a non-leaf gradient carrier and appends the node. Its
  /// gradient buffer stays empty until a contribution arrives.
  void record(OpKind kind, std::vector<ImplPtr> inputs, Tensor<T>& out,
              std::function<void()> backward) {
    if (consumed_) throw GraphError("cannot record into a consumed graph; call reset()");
    out.impl()->requires_grad = true;
    out.impl()->grad.clear();
    out.impl()->leaf = false;
    nodes_.push_back(Node{nodes_.size(), kind, std::move(inputs), out.impl(), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  /// Seeds d(loss)/d(loss) = 1 and runs every node's backward closure once,
  /// newest first. Leaf gradients accumulate additively. A node whose output
  /// received no gradient contributes nothing and is skipped. The tape is
  /// released afterwards and the graph refuses further use until reset().
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw GraphError("graph already consumed by a previous backward()");
    if (loss.size() != 1) throw ShapeError("backward() requires a scalar loss, got " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw GraphError("loss does not depend on any tensor requiring grad");
    auto& seed = loss.impl()->grad;
    if (seed.empty()) seed.assign(1, T(0));
    seed[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output->grad.empty()) it->backward();
    }
    nodes_.clear();
    consumed_ = true;
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
void backward(Graph<T>& graph, const Tensor<T>& loss) {
  graph.backward(loss);
}

/// Adds a whole contribution buffer into `dst.grad` in one pass so that
/// fan-out accumulation is a plain elementwise sum of per-op contributions.
/// The first contribution to an intermediate is copied in, which equals
/// adding it to zeros.
template <typename T>
void accumulate_grad(TensorImpl<T>& dst, std::span<const T> contribution) {
  if (!dst.requires_grad) return;
  if (dst.grad.empty()) {
    dst.grad.assign(contribution.begin(), contribution.end());
    for (auto& v : dst.grad) v += T(0);  // -0 + 0 = +0, as accumulation onto zeros gives
    return;
  }
  for (std::size_t i = 0; i < contribution.size(); ++i) dst.grad[i] += contribution[i];
}

}  // namespace noop::nd
