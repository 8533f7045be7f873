#include "meanvc/param_store.hpp"

#include <stdexcept>

namespace meanvc {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) {
    throw std::invalid_argument("ParamStore: duplicate name " + name);
  }
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(value), Tensor{}});
  Entry& e = entries_.back();
  e.grad = Tensor::zeros_like(e.value);
  return e.value;
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::invalid_argument("ParamStore: unknown name " + name);
  }
  return it->second;
}

Tensor& ParamStore::param(const std::string& name) {
  return entries_[index_of(name)].value;
}

const Tensor& ParamStore::param(const std::string& name) const {
  return entries_[index_of(name)].value;
}

Tensor& ParamStore::grad(const std::string& name) {
  return entries_[index_of(name)].grad;
}

const Tensor& ParamStore::grad(const std::string& name) const {
  return entries_[index_of(name)].grad;
}

void ParamStore::zero_grads() {
  for (Entry& e : entries_) e.grad = Tensor::zeros_like(e.value);
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.value.size();
  return n;
}

Var BoundParams::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = graph_->leaf(store_->param(name));
  bound_.emplace(name, v);
  return v;
}

void BoundParams::accumulate_grads(ParamStore& store, double scale) const {
  for (const auto& [name, var] : bound_) {
    const Tensor& g = graph_->grad(var);
    if (g.empty()) continue;
    axpy_inplace(store.grad(name), scale, g);
  }
}

double grad(const LossFn& loss_fn, ParamStore& params) {
  params.zero_grads();
  Graph g;
  BoundParams bound(g, params);
  Var loss = loss_fn(g, bound);
  if (g.value(loss).size() != 1) {
    throw std::invalid_argument("grad: loss must evaluate to a scalar");
  }
  g.backward(loss);
  bound.accumulate_grads(params);
  return g.value(loss)[0];
}

}  // namespace meanvc
