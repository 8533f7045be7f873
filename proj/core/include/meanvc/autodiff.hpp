#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "meanvc/tensor.hpp"

namespace meanvc {

// Forward-mode pair: value plus directional derivative along one tangent.
struct DualTensor {
  Tensor primal;
  Tensor tangent;
};

struct Var {
  int id = -1;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kAffine,      // a*x + b elementwise
  kMatmul,      // [n,k] x [k,m]
  kMatmulNT,    // [n,k] x [m,k]^T
  kAddRow,      // x[n,d] + v[d] broadcast over rows
  kMulRow,      // x[n,d] * v[d] broadcast over rows
  kScaleRows,   // x[n,d] * m[n] broadcast over cols
  kSliceCols,
  kSliceRows,
  kConcatRows,
  kConcatCols,
  kLayerNorm,   // per-row, no affine, eps 1e-5
  kSilu,
  kAttention,   // fused masked multi-head attention, optional rotary positions
  kTimeEmbed,   // scalar -> [1,dim] sinusoidal embedding
  kSumAll,      // -> [1]
  kStopGrad,
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  Tensor tangent;  // populated when the graph runs in forward mode
  Tensor grad;     // allocated lazily during backward
  double a = 0.0, b = 0.0;
  int i0 = 0, i1 = 0;
  bool rope = false;
  std::vector<std::uint8_t> mask;  // attention permission, empty = full
  std::vector<int> qpos, kpos;     // rotary positions
  std::vector<double> saved;       // op scratch kept for backward/tangent
};

// Dynamic tape. Values (and tangents, in forward mode) are computed eagerly
// at node creation; backward() runs one reverse sweep. Single-threaded per
// graph; distinct graphs are independent.
class Graph {
 public:
  explicit Graph(bool forward_mode = false) : forward_mode_(forward_mode) {}

  bool forward_mode() const { return forward_mode_; }

  Var leaf(Tensor v);
  Var leaf(Tensor v, Tensor tangent);
  Var scalar(double v) { return leaf(Tensor::scalar(v)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine(Var x, double a, double b);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add_row(Var x, Var v);
  Var mul_row(Var x, Var v);
  Var scale_rows(Var x, Var m);
  Var slice_cols(Var x, std::size_t c0, std::size_t c1);
  Var slice_rows(Var x, std::size_t r0, std::size_t r1);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var layer_norm(Var x);
  Var silu(Var x);
  Var attention(Var q, Var k, Var v, int heads,
                std::vector<std::uint8_t> mask, std::vector<int> qpos,
                std::vector<int> kpos, bool rope);
  Var time_embed(Var t, std::size_t dim);
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var sg(Var x);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& tangent(Var v) const { return nodes_[v.id].tangent; }
  const Tensor& grad(Var v) const;

  // Reverse sweep from a size-1 node, seeding its gradient with `seed`.
  // May be called repeatedly; gradients accumulate.
  void backward(Var loss, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Node n);
  void compute_tangent(Node& n);
  void backprop_node(int id);
  Node& at(Var v) { return nodes_[v.id]; }

  std::vector<Node> nodes_;
  bool forward_mode_ = false;
};

// f expressed over graph primitives; returns one output var.
using GraphFn = std::function<Var(Graph&, const std::vector<Var>&)>;
// f as a plain tensor map, for the finite-difference oracle.
using PlainFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Forward-mode directional derivative: (f(x), J_f(x) . tangents). Graph
// leaves other than the listed inputs (captured parameters) carry zero
// tangent, so they act as constants.
DualTensor jvp(const GraphFn& f, const std::vector<Tensor>& inputs,
               const std::vector<Tensor>& tangents);

// Central difference (f(x + h t) - f(x - h t)) / 2h.
Tensor finite_diff_jvp(const PlainFn& f, const std::vector<Tensor>& inputs,
                       const std::vector<Tensor>& tangents, double h);

}  // namespace meanvc
