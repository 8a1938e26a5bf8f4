#pragma once

// Named parameter storage shared by encoders, heads, and the optimizer.
// Values live here between steps; bind() wraps them in fresh tape leaves for
// one forward/backward pass.

#include <string>
#include <unordered_map>
#include <vector>

#include "mmfuse/autodiff.hpp"

namespace mmfuse {

class ParamStore {
 public:
  void add(const std::string& name, diff::Tensor value, bool trainable = true);
  bool has(const std::string& name) const;
  const diff::Tensor& get(const std::string& name) const;
  void set(const std::string& name, diff::Tensor value);

  // Insertion order; drives deterministic optimizer iteration.
  const std::vector<std::string>& names() const { return order_; }
  std::vector<std::string> trainable_names() const;
  bool trainable(const std::string& name) const;
  std::size_t total_elements() const;

 private:
  struct Entry {
    diff::Tensor value;
    bool trainable = true;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> entries_;
};

// One tape leaf per parameter, created per training step.
class BoundParams {
 public:
  explicit BoundParams(const ParamStore& store);
  const diff::Tensor& operator[](const std::string& name) const;

 private:
  std::unordered_map<std::string, diff::Tensor> leaves_;
};

}  // namespace mmfuse
