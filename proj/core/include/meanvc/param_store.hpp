#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "meanvc/autodiff.hpp"
#include "meanvc/tensor.hpp"

namespace meanvc {

// Named parameter tensors with stable iteration order and per-parameter
// gradient accumulators.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  Tensor& add(const std::string& name, Tensor value);
  bool has(const std::string& name) const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  void zero_grads();
  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::size_t index_of(const std::string& name) const;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Lazily binds store parameters into a graph as leaves, so a loss can be
// expressed over Vars and gradients read back per name.
class BoundParams {
 public:
  BoundParams(Graph& g, const ParamStore& store) : graph_(&g), store_(&store) {}

  Var operator[](const std::string& name);

  // Adds scale * d(loss)/d(param) into the store's accumulators for every
  // parameter that was bound; untouched parameters keep their accumulator.
  void accumulate_grads(ParamStore& store, double scale = 1.0) const;

 private:
  Graph* graph_;
  const ParamStore* store_;
  std::unordered_map<std::string, Var> bound_;
};

using LossFn = std::function<Var(Graph&, BoundParams&)>;

// Builds the loss graph, runs backward and fills store gradients (zeroing
// them first; parameters not reachable from the loss get zero). Returns the
// loss value. Throws on a non-scalar or non-finite loss.
double grad(const LossFn& loss_fn, ParamStore& params);

}  // namespace meanvc
