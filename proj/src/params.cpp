#include "mmfuse/params.hpp"

namespace mmfuse {

void ParamStore::add(const std::string& name, diff::Tensor value, bool trainable) {
  if (entries_.count(name))
    throw ContractError(str("ParamStore: duplicate parameter '", name, "'"));
  if (!value.defined())
    throw ContractError(str("ParamStore: undefined tensor for '", name, "'"));
  order_.push_back(name);
  entries_[name] = Entry{std::move(value), trainable};
}

bool ParamStore::has(const std::string& name) const { return entries_.count(name) > 0; }

const diff::Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw ContractError(str("ParamStore: unknown parameter '", name, "'"));
  return it->second.value;
}

void ParamStore::set(const std::string& name, diff::Tensor value) {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw ContractError(str("ParamStore: unknown parameter '", name, "'"));
  if (value.shape() != it->second.value.shape())
    throw ShapeError(str("ParamStore: set '", name, "' changes shape ",
                         diff::shape_str(it->second.value.shape()), " to ",
                         diff::shape_str(value.shape())));
  it->second.value = std::move(value);
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& n : order_)
    if (entries_.at(n).trainable) out.push_back(n);
  return out;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw ContractError(str("ParamStore: unknown parameter '", name, "'"));
  return it->second.trainable;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& name : order_) n += entries_.at(name).value.size();
  return n;
}

BoundParams::BoundParams(const ParamStore& store) {
  for (const auto& name : store.names())
    leaves_.emplace(name, diff::make_leaf(store.get(name)));
}

const diff::Tensor& BoundParams::operator[](const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end())
    throw ContractError(str("BoundParams: unknown parameter '", name, "'"));
  return it->second;
}

}  // namespace mmfuse
