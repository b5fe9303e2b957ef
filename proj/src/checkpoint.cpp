#include "tele/checkpoint.hpp"

#include <cstring>
#include <set>

#include "json.hpp"
#include "tele/tns.hpp"

namespace tele {

namespace {

using Json = nlohmann::json;
constexpr char kMagic[] = "TCKPT1";
constexpr std::size_t kMagicLen = 6;

[[noreturn]] void fail(CheckpointError::Kind k, const std::string& msg) { throw CheckpointError(k, msg); }

std::string list(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  Json tensors = Json::array();
  auto append = [&payload](const Shape& shape, const Buffer& data) {
    const std::string blob = encode_tns(shape, data, DType::Float64);
    Json loc = {{"offset", payload.size()}, {"length", blob.size()}};
    payload += blob;
    return loc;
  };
  for (const auto& t : ckpt.tensors) {
    Json e;
    e["name"] = t.name;
    e["dtype"] = "f64";
    e["shape"] = t.shape;
    e["trainable"] = t.trainable;
    e["group"] = t.group;
    Json loc = append(t.shape, t.data);
    e["offset"] = loc["offset"];
    e["length"] = loc["length"];
    if (t.adam.step > 0) {
      e["adam"] = {{"step", t.adam.step}, {"m", append(t.shape, t.adam.m)}, {"v", append(t.shape, t.adam.v)}};
    }
    tensors.push_back(std::move(e));
  }
  Json lora = Json::object();
  for (const auto& [name, m] : ckpt.lora) lora[name] = {{"r", m.r}, {"alpha", m.alpha}};
  Json index = {{"format_version", ckpt.version}, {"tag", ckpt.tag},         {"mode", ckpt.mode},
                {"epoch", ckpt.epoch},            {"config_hash", ckpt.config_hash}, {"lora", lora},
                {"tensors", tensors}};
  const std::string text = index.dump();
  std::string out(kMagic, kMagicLen);
  std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    fail(K::BadMagic, "not a TCKPT1 checkpoint (bad magic)");
  }
  if (bytes.size() < kMagicLen + 8) fail(K::Corrupt, "checkpoint truncated in header");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[kMagicLen + i])) << (8 * i);
  const std::size_t start = kMagicLen + 8;
  if (n > bytes.size() - start) fail(K::Corrupt, "checkpoint index length exceeds file size");
  Json index;
  try {
    index = Json::parse(bytes.substr(start, n));
  } catch (const std::exception& e) {
    fail(K::Corrupt, std::string("checkpoint index is not valid JSON: ") + e.what());
  }
  const std::string_view payload(bytes.data() + start + n, bytes.size() - start - n);

  Checkpoint ck;
  try {
    ck.version = index.at("format_version").get<int>();
    if (ck.version != Checkpoint::kVersion) {
      fail(K::Version, "checkpoint format version " + std::to_string(ck.version) + " is not supported (expected " +
                           std::to_string(Checkpoint::kVersion) + ")");
    }
    ck.tag = index.at("tag").get<std::string>();
    ck.mode = index.at("mode").get<std::string>();
    ck.epoch = index.at("epoch").get<Index>();
    ck.config_hash = index.at("config_hash").get<std::string>();
    for (const auto& [name, m] : index.at("lora").items()) {
      ck.lora[name] = {m.at("r").get<Index>(), m.at("alpha").get<double>()};
    }
    auto read = [&](const Json& loc, const Shape& shape, const std::string& name) {
      const auto off = loc.at("offset").get<std::uint64_t>();
      const auto len = loc.at("length").get<std::uint64_t>();
      if (off > payload.size() || len > payload.size() - off) fail(K::Corrupt, "payload of " + name + " out of range");
      StoredTensor st = decode_tns(payload.substr(off, len));
      if (st.shape != shape) fail(K::Corrupt, "payload shape of " + name + " disagrees with the index");
      return st.data;
    };
    for (const auto& e : index.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f64") fail(K::Corrupt, "unsupported dtype for " + t.name);
      t.shape = e.at("shape").get<Shape>();
      t.trainable = e.at("trainable").get<bool>();
      t.group = e.at("group").get<std::string>();
      t.data = read(e, t.shape, t.name);
      if (e.contains("adam")) {
        const Json& a = e.at("adam");
        t.adam.step = a.at("step").get<Index>();
        t.adam.m = read(a.at("m"), t.shape, t.name + " adam.m");
        t.adam.v = read(a.at("v"), t.shape, t.name + " adam.v");
      }
      ck.tensors.push_back(std::move(t));
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const TnsError& e) {
    fail(K::Corrupt, std::string("checkpoint payload: ") + e.what());
  } catch (const std::exception& e) {
    fail(K::Corrupt, std::string("checkpoint index malformed: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  try {
    write_file(path, encode_checkpoint(ckpt));
  } catch (const TnsError& e) {
    fail(CheckpointError::Kind::Io, e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const TnsError& e) {
    fail(CheckpointError::Kind::Io, e.what());
  }
  return decode_checkpoint(bytes);
}

Checkpoint capture(ForecastModel& model, std::string tag, std::string mode, Index epoch, std::string config_hash) {
  Checkpoint ck;
  ck.tag = std::move(tag);
  ck.mode = std::move(mode);
  ck.epoch = epoch;
  ck.config_hash = std::move(config_hash);
  for (const Parameter* p : model.params().all()) {
    ck.tensors.push_back({p->name, p->shape, *p->value, p->trainable, p->group, p->adam});
  }
  for (const LoraLinear* l : model.adapted_layers()) ck.lora[l->name()] = {l->rank(), l->alpha()};
  return ck;
}

void restore(ForecastModel& model, const Checkpoint& ckpt, RestoreScope scope) {
  using K = CheckpointError::Kind;
  std::vector<std::string> missing, unexpected;
  std::set<std::string> in_ckpt;
  for (const auto& t : ckpt.tensors) {
    in_ckpt.insert(t.name);
    if (!model.params().find(t.name)) unexpected.push_back(t.name);
  }
  for (const Parameter* p : model.params().all()) {
    if (!in_ckpt.count(p->name)) missing.push_back(p->name);
  }
  if (!unexpected.empty()) fail(K::UnexpectedKeys, "checkpoint has tensors the model lacks: " + list(unexpected));
  if (scope == RestoreScope::Strict && !missing.empty()) {
    fail(K::MissingKeys, "checkpoint is missing model tensors: " + list(missing));
  }
  for (const auto& t : ckpt.tensors) {
    const Parameter* p = model.params().find(t.name);
    if (p->shape != t.shape) {
      fail(K::ShapeMismatch, "shape of " + t.name + ": checkpoint " + to_string(t.shape) + ", model " + to_string(p->shape));
    }
  }
  if (scope == RestoreScope::Strict) {
    for (LoraLinear* l : model.adapted_layers()) {
      auto it = ckpt.lora.find(l->name());
      if (it == ckpt.lora.end()) fail(K::MissingKeys, "checkpoint has no adapter metadata for " + l->name());
      if (it->second.r != l->rank()) {
        fail(K::ShapeMismatch, "adapter rank of " + l->name() + ": checkpoint " + std::to_string(it->second.r) +
                                   ", model " + std::to_string(l->rank()));
      }
    }
  }
  for (const auto& t : ckpt.tensors) {
    Parameter& p = model.params().at(t.name);
    *p.value = t.data;
    if (scope == RestoreScope::Strict) {
      p.trainable = t.trainable;
      p.adam = t.adam;
    }
  }
  if (scope == RestoreScope::Strict) {
    for (LoraLinear* l : model.adapted_layers()) {
      l->attach_existing(l->lora_a(), l->lora_b(), ckpt.lora.at(l->name()).alpha, l->dropout());
    }
  }
}

bool check_hash(const Checkpoint& ckpt, const std::string& expected, bool force) {
  if (ckpt.config_hash == expected) return true;
  if (force) return false;
  throw CheckpointError(CheckpointError::Kind::HashMismatch,
                        "checkpoint was written under config hash " + ckpt.config_hash + " but the current config hashes to " +
                            expected + " (pass --force to load anyway)");
}

}  // namespace tele
