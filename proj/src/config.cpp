#include "tele/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "tele/tns.hpp"

namespace tele {

Mode parse_mode(const std::string& s) {
  if (s == "pretrain") return Mode::Pretrain;
  if (s == "frozen") return Mode::Frozen;
  if (s == "lora_oci") return Mode::LoraOci;
  if (s == "lora_no_oci") return Mode::LoraNoOci;
  if (s == "full_finetune") return Mode::FullFinetune;
  throw ConfigError("unknown mode '" + s +
                    "' (expected pretrain, frozen, lora_oci, lora_no_oci or full_finetune)");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Pretrain: return "pretrain";
    case Mode::Frozen: return "frozen";
    case Mode::LoraOci: return "lora_oci";
    case Mode::LoraNoOci: return "lora_no_oci";
    case Mode::FullFinetune: return "full_finetune";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : ",") + s;
  return out;
}

Index parse_index(const std::string& key, const std::string& v) {
  Index out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigParseError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigParseError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigParseError(key + ": expected a number, got '" + v + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

Block parse_block(const std::string& key, const std::string& v) {
  const auto colon = v.find(':');
  if (colon == std::string::npos) throw ConfigParseError(key + ": expected begin:end, got '" + v + "'");
  return {parse_index(key, trim(v.substr(0, colon))), parse_index(key, trim(v.substr(colon + 1)))};
}

std::string fmt_block(const Block& b) { return std::to_string(b.begin) + ":" + std::to_string(b.end); }

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool shapes_parameters = false;
};

#define TELE_INDEX(expr)                                                                      \
  Field {                                                                                     \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_index(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.expr); }                             \
  }
#define TELE_DOUBLE(expr)                                                                      \
  Field {                                                                                      \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = parse_double(k, v); }, \
        [](const RunConfig& c) { return fmt_double(c.expr); }                                  \
  }

Field arch(Field f) {
  f.shapes_parameters = true;
  return f;
}

Field train_mode(TrainConfig RunConfig::*tc) {
  return {[tc](RunConfig& c, const std::string&, const std::string& v) { (c.*tc).mode = parse_mode(v); },
          [tc](const RunConfig& c) { return to_string((c.*tc).mode); }};
}

// Ordered registry: the order of to_text() and of keys().
const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> reg = [] {
    std::vector<std::pair<std::string, Field>> r;
    r.emplace_back("data_dir", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; },
                                     [](const RunConfig& c) { return c.data_dir.string(); }});
    r.emplace_back("out_dir", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                                    [](const RunConfig& c) { return c.out_dir.string(); }});
    r.emplace_back("seed", Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); },
                                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    r.emplace_back("data.seed",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.data_seed = parse_u64(k, v); },
                         [](const RunConfig& c) { return std::to_string(c.data_seed); }});

    r.emplace_back("grid.n_lat", arch(TELE_INDEX(data.grid.n_lat)));
    r.emplace_back("grid.n_lon", arch(TELE_INDEX(data.grid.n_lon)));
    r.emplace_back("grid.levels",
                   arch(Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                c.data.grid.pressure_levels.clear();
                                for (const auto& s : split_list(v)) {
                                  c.data.grid.pressure_levels.push_back(static_cast<int>(parse_index(k, s)));
                                }
                                c.data.grid.n_level = static_cast<Index>(c.data.grid.pressure_levels.size());
                              },
                              [](const RunConfig& c) {
                                std::vector<std::string> s;
                                for (int p : c.data.grid.pressure_levels) s.push_back(std::to_string(p));
                                return join(s);
                              }}));

    r.emplace_back("data.steps", TELE_INDEX(data.steps));
    r.emplace_back("data.horizon", TELE_INDEX(data.horizon));
    r.emplace_back("data.lag_window", arch(TELE_INDEX(data.lag_window)));
    r.emplace_back("data.n_oci", arch(TELE_INDEX(data.n_oci)));
    r.emplace_back("data.active_indices", TELE_INDEX(data.active_indices));
    r.emplace_back("data.season_length", TELE_INDEX(data.season_length));
    r.emplace_back("data.oci_history", TELE_INDEX(data.oci_history));
    r.emplace_back("data.coupling", TELE_DOUBLE(data.coupling));
    r.emplace_back("data.noise", TELE_DOUBLE(data.noise));
    r.emplace_back("data.noise_rho", TELE_DOUBLE(data.noise_rho));
    r.emplace_back("data.seasonal", TELE_DOUBLE(data.seasonal));
    r.emplace_back("data.oscillator_radius", TELE_DOUBLE(data.oscillator_radius));
    r.emplace_back("data.missing_fraction", TELE_DOUBLE(data.missing_fraction));
    r.emplace_back("data.uncoupled",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) {
                           c.data.uncoupled_variables = split_list(v);
                         },
                         [](const RunConfig& c) { return join(c.data.uncoupled_variables); }});
    r.emplace_back("data.train_block",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.data.blocks.train = parse_block(k, v); },
                         [](const RunConfig& c) { return fmt_block(c.data.blocks.train); }});
    r.emplace_back("data.val_block",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.data.blocks.val = parse_block(k, v); },
                         [](const RunConfig& c) { return fmt_block(c.data.blocks.val); }});
    r.emplace_back("data.test_block",
                   Field{[](RunConfig& c, const std::string& k, const std::string& v) { c.data.blocks.test = parse_block(k, v); },
                         [](const RunConfig& c) { return fmt_block(c.data.blocks.test); }});

    r.emplace_back("model.embed_dim", arch(TELE_INDEX(model.backbone.embed_dim)));
    r.emplace_back("model.depth", arch(TELE_INDEX(model.backbone.depth)));
    r.emplace_back("model.heads", arch(TELE_INDEX(model.backbone.heads)));
    r.emplace_back("model.window_lat", arch(TELE_INDEX(model.backbone.window_lat)));
    r.emplace_back("model.window_lon", arch(TELE_INDEX(model.backbone.window_lon)));
    r.emplace_back("model.patch_lat", arch(TELE_INDEX(model.backbone.patch_lat)));
    r.emplace_back("model.patch_lon", arch(TELE_INDEX(model.backbone.patch_lon)));
    r.emplace_back("model.patch_level", arch(TELE_INDEX(model.backbone.patch_z)));
    r.emplace_back("model.mlp_ratio", arch(TELE_INDEX(model.backbone.mlp_ratio)));
    r.emplace_back("model.branch_channels", arch(TELE_INDEX(branch_channels)));
    r.emplace_back("model.pool_lags", arch(TELE_INDEX(model.temporal.pool_lags)));
    r.emplace_back("model.gate_mode",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) { c.model.gate_mode = parse_gate_mode(v); },
                         [](const RunConfig& c) { return to_string(c.model.gate_mode); }});

    r.emplace_back("lora.r", arch(TELE_INDEX(lora.r)));
    r.emplace_back("lora.alpha", TELE_DOUBLE(lora.alpha));
    r.emplace_back("lora.dropout", TELE_DOUBLE(lora.dropout));
    r.emplace_back("lora.targets",
                   arch(Field{[](RunConfig& c, const std::string&, const std::string& v) { c.lora.targets = split_list(v); },
                              [](const RunConfig& c) { return join(c.lora.targets); }}));

    for (auto [prefix, tc] : {std::pair{std::string("train"), &RunConfig::train},
                              std::pair{std::string("pretrain"), &RunConfig::pretrain}}) {
      if (prefix == "train") r.emplace_back("train.mode", train_mode(tc));
      auto idx = [tc](Index TrainConfig::*f) {
        return Field{[tc, f](RunConfig& c, const std::string& k, const std::string& v) { (c.*tc).*f = parse_index(k, v); },
                     [tc, f](const RunConfig& c) { return std::to_string((c.*tc).*f); }};
      };
      auto sched_d = [tc](double SchedulerConfig::*f) {
        return Field{[tc, f](RunConfig& c, const std::string& k, const std::string& v) {
                       (c.*tc).schedule.*f = parse_double(k, v);
                     },
                     [tc, f](const RunConfig& c) { return fmt_double((c.*tc).schedule.*f); }};
      };
      auto sched_i = [tc](Index SchedulerConfig::*f) {
        return Field{[tc, f](RunConfig& c, const std::string& k, const std::string& v) {
                       (c.*tc).schedule.*f = parse_index(k, v);
                     },
                     [tc, f](const RunConfig& c) { return std::to_string((c.*tc).schedule.*f); }};
      };
      auto adam_d = [tc](double AdamConfig::*f) {
        return Field{[tc, f](RunConfig& c, const std::string& k, const std::string& v) { (c.*tc).adam.*f = parse_double(k, v); },
                     [tc, f](const RunConfig& c) { return fmt_double((c.*tc).adam.*f); }};
      };
      r.emplace_back(prefix + ".lr", sched_d(&SchedulerConfig::base_lr));
      r.emplace_back(prefix + ".gamma", sched_d(&SchedulerConfig::gamma));
      r.emplace_back(prefix + ".period", sched_i(&SchedulerConfig::milestone_period));
      r.emplace_back(prefix + ".epochs", sched_i(&SchedulerConfig::total_epochs));
      r.emplace_back(prefix + ".weight_decay", adam_d(&AdamConfig::weight_decay));
      r.emplace_back(prefix + ".beta1", adam_d(&AdamConfig::beta1));
      r.emplace_back(prefix + ".beta2", adam_d(&AdamConfig::beta2));
      r.emplace_back(prefix + ".eps", adam_d(&AdamConfig::eps));
      r.emplace_back(prefix + ".batch_size", idx(&TrainConfig::batch_size));
      r.emplace_back(prefix + ".samples_per_epoch", idx(&TrainConfig::samples_per_epoch));
      r.emplace_back(prefix + ".val_samples", idx(&TrainConfig::val_samples));
    }
    r.emplace_back("pretrain.horizon", TELE_INDEX(pretrain_horizon));

    r.emplace_back("eval.split",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) { c.eval_split = v; },
                         [](const RunConfig& c) { return c.eval_split; }});
    r.emplace_back("eval.heatmap_timestamp", TELE_INDEX(heatmap_timestamp));
    r.emplace_back("eval.heatmap_variables",
                   Field{[](RunConfig& c, const std::string&, const std::string& v) { c.heatmap_variables = split_list(v); },
                         [](const RunConfig& c) { return join(c.heatmap_variables); }});
    return r;
  }();
  return reg;
}

#undef TELE_INDEX
#undef TELE_DOUBLE

const Field& field(const std::string& key) {
  for (const auto& [k, f] : registry()) {
    if (k == key) return f;
  }
  throw ConfigParseError("unknown configuration key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : registry()) out.push_back(name);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::finalize() {
  data.grid.n_level = static_cast<Index>(data.grid.pressure_levels.size());
  data.grid.validate();
  data.validate();
  model.backbone.grid = data.grid;
  model.temporal.n_oci = data.n_oci;
  model.temporal.lag_window = data.lag_window;
  model.temporal.embed_dim = model.backbone.embed_dim;
  model.temporal.branches = TemporalFilterConfig::default_branches(branch_channels);
  model.backbone.validate();
  model.temporal.validate();
  for (const auto& [name, sched] : {std::pair{"train", &train.schedule}, std::pair{"pretrain", &pretrain.schedule}}) {
    try {
      validate(*sched);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  }
  for (const TrainConfig* t : {&train, &pretrain}) {
    if (t->batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (t->samples_per_epoch < 0 || t->val_samples < 0) {
      throw ConfigError("samples_per_epoch and val_samples must be >= 0");
    }
  }
  if (pretrain_horizon < 1) throw ConfigError("pretrain.horizon must be >= 1");
  if (lora.r < 1) throw ConfigError("lora.r must be >= 1");
  if (lora.dropout < 0.0 || lora.dropout >= 1.0) throw ConfigError("lora.dropout must lie in [0, 1)");
  const auto labels = channel_labels(data.grid);
  for (const auto& v : heatmap_variables) {
    if (std::find(labels.begin(), labels.end(), v) == labels.end()) {
      throw ConfigError("eval.heatmap_variables: no channel named " + v);
    }
  }
  if (train.mode == Mode::Pretrain) throw ConfigError("train.mode cannot be pretrain; use the pretrain command");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : registry()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [k, f] : registry()) {
    if (!f.shapes_parameters) continue;
    feed(k);
    feed("=");
    feed(f.get(*this));
    feed("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigParseError("line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      base.set(key, trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw ConfigParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  return parse_config(read_file(path), std::move(base));
}

}  // namespace tele
