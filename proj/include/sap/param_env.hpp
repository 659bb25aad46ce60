#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "sap/tensor.hpp"

namespace sap {

// Parameter partition per the meta-learning roles: base weights, candidate
// operation parameters, activation-strength logits. Warp layers are base
// weights that stay frozen in the inner loop.
enum class ParamGroup { Theta, ThetaWarp, Phi, Lambda };

// Canonical storage for a network's current parameter values. Values are leaf
// tensors; updates replace the stored tensor rather than mutating it.
class ParamStore {
 public:
  void add(const ParamHandle& h, ParamGroup group) {
    if (values_.count(h.id))
      throw std::runtime_error("ParamStore: duplicate parameter id " + h.id);
    order_.push_back(h.id);
    values_.emplace(h.id, h);
    groups_.emplace(h.id, group);
  }

  bool has(const std::string& id) const { return values_.count(id) > 0; }

  const ParamHandle& handle(const std::string& id) const {
    auto it = values_.find(id);
    if (it == values_.end()) throw std::runtime_error("ParamStore: unknown id " + id);
    return it->second;
  }

  ParamGroup group(const std::string& id) const { return groups_.at(id); }

  void set(const std::string& id, Tensor value) {
    auto it = values_.find(id);
    if (it == values_.end()) throw std::runtime_error("ParamStore: unknown id " + id);
    if (value.shape() != it->second.value.shape())
      throw ShapeError("ParamStore: shape mismatch assigning " + id);
    it->second.value = std::move(value);
  }

  const std::vector<std::string>& ids() const { return order_; }

  std::vector<ParamHandle> handles() const {
    std::vector<ParamHandle> out;
    out.reserve(order_.size());
    for (const auto& id : order_) out.push_back(values_.at(id));
    return out;
  }

  std::vector<ParamHandle> handles(ParamGroup g) const {
    std::vector<ParamHandle> out;
    for (const auto& id : order_)
      if (groups_.at(id) == g) out.push_back(values_.at(id));
    return out;
  }

  std::vector<ParamHandle> trainable() const {
    std::vector<ParamHandle> out;
    for (const auto& id : order_) {
      const auto& h = values_.at(id);
      if (h.trainable) out.push_back(h);
    }
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, ParamHandle> values_;
  std::unordered_map<std::string, ParamGroup> groups_;
};

// Per-task view over a ParamStore: adapted values override stored ones, and a
// handle's own tensor is the last fallback. The store is never mutated during
// adaptation, which keeps theta and lambda bit-identical across the inner loop.
class ParamEnv {
 public:
  ParamEnv() = default;
  explicit ParamEnv(const ParamStore* base) : base_(base) {}

  const Tensor& get(const ParamHandle& h) const {
    auto it = overrides_.find(h.id);
    if (it != overrides_.end()) return it->second;
    if (base_ && base_->has(h.id)) return base_->handle(h.id).value;
    return h.value;
  }

  void set(const std::string& id, Tensor value) { overrides_[id] = std::move(value); }

  bool overridden(const std::string& id) const { return overrides_.count(id) > 0; }

  const std::unordered_map<std::string, Tensor>& overrides() const { return overrides_; }

 private:
  const ParamStore* base_ = nullptr;
  std::unordered_map<std::string, Tensor> overrides_;
};

}  // namespace sap
