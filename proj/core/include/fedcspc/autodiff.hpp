#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "fedcspc/tensor.hpp"

// Reverse-mode differentiation over dense tensors.
//
// A Var is a handle to a node in an acyclic computation graph. Leaves created by
// parameter() collect gradients; constant() leaves and any node whose inputs are
// all constant carry no backward closure. Graphs are never shared between
// threads; independent graphs can be evaluated concurrently.
namespace fedcspc::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Writes the adjoint contribution of one op into its parents' adjoint buffers.
// A null entry in `parent_adjoints` means that parent does not need a gradient.
using BackwardFn = std::function<void(const Tensor& out_adjoint, std::span<Tensor*> parent_adjoints)>;

struct Node {
    Tensor value;
    Tensor grad;  // leaves only; empty until the first backward pass
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward;
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    double item() const { return node_->value.item(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Accumulated gradient of a parameter leaf; zeros before any backward pass.
    Tensor grad() const;
    void zero_grad();

    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// d(root)/d(leaf) for every parameter leaf reachable from root.
class Gradients {
public:
    const Tensor& of(const Var& leaf) const;
    bool contains(const Var& leaf) const { return map_.count(leaf.node().get()) != 0; }
    std::size_t size() const { return map_.size(); }

private:
    friend Gradients backward(const Var& root);
    std::unordered_map<const Node*, Tensor> map_;
};

// Propagates d(root)/d(node) through the graph. Each call adds its result into the
// leaves' accumulated grad(), so two calls without zero_grad() give twice the gradient.
Gradients backward(const Var& root);

// Elementwise. Binary ops need equal shapes or a single-element operand.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var shift(const Var& a, double offset);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);

enum class UnaryKind { exp, log, relu, negate, abs, square };
enum class BinaryKind { add, sub, mul, div };
Var elementwise(UnaryKind kind, const Var& a);
Var elementwise(BinaryKind kind, const Var& a, const Var& b);

// Matrix algebra on rank-2 tensors.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row(const Var& a, const Var& row);
Var gather_rows(const Var& a, std::span<const std::size_t> indices);
Var concat_rows(std::span<const Var> parts);

// Reductions. Without an axis the result is a scalar; with an axis the reduced
// dimension is kept with extent 1.
enum class ReduceKind { sum, mean, l2_norm, max };
Var reduce(ReduceKind kind, const Var& a, std::optional<std::size_t> axis = std::nullopt);
inline Var sum(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(ReduceKind::sum, a, axis); }
inline Var mean(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(ReduceKind::mean, a, axis); }
inline Var l2_norm(const Var& a, std::optional<std::size_t> axis = std::nullopt) {
    return reduce(ReduceKind::l2_norm, a, axis);
}
inline Var max(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(ReduceKind::max, a, axis); }

// Row-wise helpers used by the contrastive losses.
Var normalize_rows(const Var& a, double eps = 1e-12);
Var log_softmax_rows(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return shift(a, s); }
inline Var operator-(const Var& a, double s) { return shift(a, -s); }

}  // namespace fedcspc::ad
