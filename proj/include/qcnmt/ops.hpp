#pragma once

#include <functional>
#include <vector>

#include "qcnmt/tensor.hpp"

namespace qcnmt {

// Recorded-graph reverse mode. Each op returns a fresh Tensor; when gradient
// recording is on and an input requires grad, the output carries a Node with
// the backward rule. The graph is rebuilt on every forward pass, so
// data-dependent control flow (routing iterations, decode loops) unrolls
// naturally.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(const Tensor& out)> backward;
};

bool grad_enabled();

// RAII switch: inside the scope no nodes are recorded (inference / numeric
// differentiation). Thread-local, so concurrent inference threads are
// independent.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Runs the backward sweep from a scalar root: zeroes every grad buffer
// reachable from the root, seeds d(root)=1 and accumulates into the leaves.
void backward(const Tensor& root);

// Element-wise, with limited broadcasting: shapes equal, one side scalar, or
// the smaller shape a trailing suffix of the larger (the smaller operand is
// repeated over the leading extents). Anything else is a shape error.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& t, double s);
Tensor add_scalar(const Tensor& t, double s);
Tensor neg(const Tensor& t);

Tensor tanh(const Tensor& t);
Tensor relu(const Tensor& t);
Tensor sqrt(const Tensor& t);

// a: [p,q] or [B,p,q]; b: [q,r] or [B,q,r]. A 3-d a with a 2-d b reuses b
// for every batch entry. Batch extents must match otherwise.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swap the last two axes (copy).
Tensor transpose(const Tensor& t);

Tensor reshape(const Tensor& t, Shape shape);

// Reductions remove `axis`; a rank-0 result becomes shape [1].
Tensor sum(const Tensor& t, int axis);
Tensor sum_all(const Tensor& t);
Tensor mean(const Tensor& t, int axis);
Tensor mean_all(const Tensor& t);

// Insert a new axis of extent `count` at position `axis`, repeating the
// input along it. Backward sums over the axis.
Tensor tile_expand(const Tensor& t, int axis, int count);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& t, int axis, int start, int len);

Tensor softmax(const Tensor& t, int axis);

// Row lookup: out[i] = table[ids[i]]. ids are not differentiated.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

enum class Reduction { Mean, Sum };

// Token-level negative log likelihood from raw logits [T,V] against gold ids
// [T], log-sum-exp stabilized.
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& gold,
                                 Reduction reduction = Reduction::Mean);

// Pearson correlation of each leading row of `a` against the matching row of
// `b`, over the last axis. b's shape must be a trailing suffix of a's (it is
// broadcast over a's extra leading extents). Rows where either centered norm
// falls below 1e-12 yield 0 with zero gradient.
Tensor pccs_rows(const Tensor& a, const Tensor& b);

// Inverted dropout; `keep` draws come from rng in element order. p in [0,1).
Tensor dropout(const Tensor& t, double p, class Rng& rng);

// Composed helpers (built from the primitives above).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor squash(const Tensor& t);

}  // namespace qcnmt
