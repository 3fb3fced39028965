#pragma once

#include <map>
#include <string>
#include <vector>

#include "confu/error.hpp"
#include "confu/rng.hpp"
#include "confu/tensor.hpp"

namespace confu {

// Named parameter groups. A frozen group never receives gradients or updates.
class ParamStore {
 public:
  struct Group {
    TensorF64 tensor;
    bool trainable = true;
  };

  TensorF64& add(const std::string& name, TensorF64 t, bool trainable = true) {
    if (groups_.count(name)) throw ConfigError("duplicate parameter group: " + name);
    auto& g = groups_[name];
    g.tensor = std::move(t);
    g.trainable = trainable;
    return g.tensor;
  }

  bool has(const std::string& name) const { return groups_.count(name) != 0; }

  Group& group(const std::string& name) {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("unknown parameter group: " + name);
    return it->second;
  }
  const Group& group(const std::string& name) const {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("unknown parameter group: " + name);
    return it->second;
  }

  TensorF64& tensor(const std::string& name) { return group(name).tensor; }
  const TensorF64& tensor(const std::string& name) const { return group(name).tensor; }

  bool trainable(const std::string& name) const { return group(name).trainable; }
  void set_trainable(const std::string& name, bool v) { group(name).trainable = v; }

  // Prefix match, e.g. freeze("target.") after pretraining.
  void set_trainable_prefix(const std::string& prefix, bool v) {
    for (auto& [name, g] : groups_)
      if (name.rfind(prefix, 0) == 0) g.trainable = v;
  }

  void zero_grads() {
    for (auto& [name, g] : groups_) g.tensor.zero_grad();
  }

  void drop_grads() {
    for (auto& [name, g] : groups_) g.tensor.grad.reset();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(groups_.size());
    for (auto& [name, g] : groups_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return groups_.size(); }

  auto begin() { return groups_.begin(); }
  auto end() { return groups_.end(); }
  auto begin() const { return groups_.begin(); }
  auto end() const { return groups_.end(); }

 private:
  std::map<std::string, Group> groups_;  // ordered: deterministic iteration
};

inline TensorF64 gaussian_tensor(std::vector<std::size_t> shape, double stddev, SplitMix& rng) {
  TensorF64 t = TensorF64::zeros(std::move(shape));
  for (double& v : t.data) v = stddev * rng.gaussian();
  return t;
}

}  // namespace confu
