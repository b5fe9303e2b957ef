#include "tele/params.hpp"

#include <stdexcept>

namespace tele {

Parameter& ParameterStore::add(std::string name, Shape shape, Buffer init, std::string group,
                               bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  if (tele::numel(shape) != init.size()) {
    throw DimensionError("parameter " + name + ": shape " + to_string(shape) + " but " +
                         std::to_string(init.size()) + " values");
  }
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->shape = std::move(shape);
  p->value = std::make_shared<Buffer>(std::move(init));
  p->trainable = trainable;
  p->group = std::move(group);
  Parameter& ref = *p;
  index_[ref.name] = &ref;
  params_.push_back(std::move(p));
  return ref;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw std::out_of_range("no parameter named " + name);
  return *p;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

void ParameterStore::set_trainable(bool trainable) {
  for (auto& p : params_) p->trainable = trainable;
}

Tensor Binding::operator()(const Parameter& p) {
  auto it = leaves_.find(&p);
  if (it != leaves_.end()) return it->second;
  Tensor t = Tensor::view_of(p.shape, p.value, track_grad_ && p.trainable);
  leaves_.emplace(&p, t);
  return t;
}

Buffer Binding::grad_of(const Parameter& p) const {
  auto it = leaves_.find(&p);
  if (it == leaves_.end() || !it->second.has_grad()) return Buffer::Zero(p.numel());
  return it->second.grad();
}

std::vector<Tensor> Binding::leaves() const {
  std::vector<Tensor> out;
  for (const auto& [_, t] : leaves_) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

}  // namespace tele
