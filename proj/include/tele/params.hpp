#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tele/optim.hpp"
#include "tele/rng.hpp"
#include "tele/tensor.hpp"

namespace tele {

/// A named model tensor. The value lives in shared storage so forward graphs
/// can read it without copying; the optimizer writes it between graphs.
struct Parameter {
  std::string name;
  Shape shape;
  std::shared_ptr<Buffer> value;
  bool trainable = true;
  std::string group;
  AdamState adam;

  Index numel() const { return value->size(); }
};

/// Owns parameters in registration order (the order used for gradient
/// reduction, optimizer updates and checkpoints).
class ParameterStore {
 public:
  Parameter& add(std::string name, Shape shape, Buffer init, std::string group,
                 bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }

  void set_trainable(bool trainable);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

/// Per-forward view of the parameters: one graph leaf per parameter, created
/// on first use. Leaves require a gradient only when the binding tracks
/// gradients and the parameter is trainable.
class Binding {
 public:
  explicit Binding(bool track_grad = false) : track_grad_(track_grad) {}

  Tensor operator()(const Parameter& p);
  bool tracks_grad() const { return track_grad_; }
  /// Gradient of `p` from the last backward; zeros when `p` was never used.
  Buffer grad_of(const Parameter& p) const;
  std::vector<Tensor> leaves() const;

 private:
  bool track_grad_;
  std::unordered_map<const Parameter*, Tensor> leaves_;
};

struct ForwardContext {
  Binding& bind;
  bool training = false;
  RngStream* rng = nullptr;
};

}  // namespace tele
