#include "tele/lora.hpp"

#include <cmath>

namespace tele {

std::vector<std::string> LoraConfig::default_targets() {
  return {"blocks.*.attn.q", "blocks.*.attn.k",  "blocks.*.attn.v",
          "blocks.*.attn.o", "blocks.*.mlp.fc1", "blocks.*.mlp.fc2"};
}

Tensor LoraLinear::forward(ForwardContext& ctx, const Tensor& x) const {
  Tensor bias = bias_ ? ctx.bind(*bias_) : Tensor();
  Tensor h = linear(x, ctx.bind(*weight_), bias);
  if (!adapted() || merged_) return h;
  Tensor xin = x;
  if (ctx.training && dropout_ > 0.0) {
    if (!ctx.rng) throw std::logic_error("LoRA dropout in training mode needs an RNG");
    xin = tele::dropout(x, dropout_, true, *ctx.rng);
  }
  Tensor ax = linear(xin, ctx.bind(*a_));
  Tensor delta = linear(ax, ctx.bind(*b_));
  return add(h, scale(delta, scaling()));
}

void LoraLinear::attach(ParameterStore& store, Index r, double alpha, double dropout,
                        RngStream& rng) {
  if (adapted()) throw ConfigError("layer " + name_ + " already carries an adapter");
  const Index d = out_features();
  const Index k = in_features();
  if (r < 1 || r >= std::min(d, k)) {
    throw ConfigError("LoRA rank " + std::to_string(r) + " must lie in [1, min(d, k)) for " + name_);
  }
  Buffer a(r * k);
  const double sd = 1.0 / std::sqrt(static_cast<double>(r));
  for (Index i = 0; i < a.size(); ++i) a[i] = sd * rng.normal();
  Parameter* pa = &store.add(name_ + ".lora_A", {r, k}, std::move(a), "lora");
  Parameter* pb = &store.add(name_ + ".lora_B", {d, r}, Buffer::Zero(d * r), "lora");
  weight_->trainable = false;
  if (bias_) bias_->trainable = false;
  attach_existing(pa, pb, alpha, dropout);
}

void LoraLinear::attach_existing(Parameter* a, Parameter* b, double alpha, double dropout) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != in_features() ||
      b->shape[0] != out_features() || a->shape[0] != b->shape[1]) {
    throw DimensionError("adapter shapes " + to_string(a->shape) + ", " + to_string(b->shape) +
                         " do not fit layer " + name_);
  }
  a_ = a;
  b_ = b;
  r_ = a->shape[0];
  alpha_ = alpha;
  dropout_ = dropout;
}

void LoraLinear::merge() {
  if (!adapted()) throw std::logic_error("layer " + name_ + " has no adapter to merge");
  if (merged_) throw std::logic_error("layer " + name_ + " is already merged");
  w0_copy_ = *weight_->value;
  Eigen::Map<MatrixRM> w(weight_->value->data(), out_features(), in_features());
  Eigen::Map<const MatrixRM> a(a_->value->data(), r_, in_features());
  Eigen::Map<const MatrixRM> b(b_->value->data(), out_features(), r_);
  w.noalias() += scaling() * (b * a);
  merged_ = true;
}

void LoraLinear::unmerge() {
  if (!merged_) throw std::logic_error("layer " + name_ + " is not merged");
  *weight_->value = w0_copy_;
  w0_copy_.resize(0);
  merged_ = false;
}

ParamAccount account(const ParameterStore& store) {
  ParamAccount acc;
  for (const Parameter* p : store.all()) {
    const Index n = p->numel();
    acc.total += n;
    auto& g = acc.groups[p->group];
    g.total += n;
    if (p->trainable) {
      acc.trainable += n;
      g.trainable += n;
    }
  }
  return acc;
}

double trainable_fraction(const ParamAccount& acc) {
  if (acc.total == 0) throw std::invalid_argument("parameter account is empty");
  return static_cast<double>(acc.trainable) / static_cast<double>(acc.total);
}

std::map<std::string, double> group_fractions(const ParamAccount& acc) {
  if (acc.total == 0) throw std::invalid_argument("parameter account is empty");
  std::map<std::string, double> out;
  for (const auto& [name, g] : acc.groups) {
    out[name] = static_cast<double>(g.trainable) / static_cast<double>(acc.total);
  }
  return out;
}

bool glob_match(const std::string& pattern, const std::string& name) {
  std::size_t p = 0, n = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (p < pattern.size() && pattern[p] == name[n]) {
      ++p;
      ++n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<LoraLinear*> inject_lora(std::vector<LoraLinear*> layers, ParameterStore& store,
                                     const LoraConfig& cfg, RngStream& rng) {
  std::string unmatched;
  for (const auto& pat : cfg.targets) {
    bool hit = false;
    for (const LoraLinear* l : layers) hit = hit || glob_match(pat, l->name());
    if (!hit) unmatched += (unmatched.empty() ? "" : ", ") + pat;
  }
  if (!unmatched.empty()) {
    std::string names;
    for (const LoraLinear* l : layers) names += (names.empty() ? "" : ", ") + l->name();
    throw ConfigError("LoRA target pattern(s) match no layer: " + unmatched +
                      " (available: " + names + ")");
  }
  std::vector<LoraLinear*> wrapped;
  for (LoraLinear* l : layers) {
    bool hit = false;
    for (const auto& pat : cfg.targets) hit = hit || glob_match(pat, l->name());
    if (!hit) continue;
    l->attach(store, cfg.r, cfg.alpha, cfg.dropout, rng);
    wrapped.push_back(l);
  }
  return wrapped;
}

}  // namespace tele
