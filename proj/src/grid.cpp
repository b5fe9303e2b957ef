#include "tele/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"
#include "tele/tns.hpp"

namespace tele {

std::vector<double> GridSpec::lat_degrees() const {
  std::vector<double> lats(static_cast<std::size_t>(n_lat));
  for (Index i = 0; i < n_lat; ++i) {
    lats[static_cast<std::size_t>(i)] =
        -90.0 + (static_cast<double>(i) + 0.5) * 180.0 / static_cast<double>(n_lat);
  }
  return lats;
}

void GridSpec::validate() const {
  if (n_lat < 1 || n_lon < 1 || n_level < 1) throw DataError("grid dimensions must be positive");
  if (static_cast<Index>(pressure_levels.size()) != n_level) {
    throw DataError("grid has " + std::to_string(n_level) + " levels but " +
                    std::to_string(pressure_levels.size()) + " pressure values");
  }
}

Index channel_count(const GridSpec& grid) { return kSurfaceCount + kUpperCount * grid.n_level; }

Index upper_channel(const GridSpec& grid, Index variable, Index level) {
  return kSurfaceCount + variable * grid.n_level + level;
}

std::vector<std::string> channel_labels(const GridSpec& grid) {
  std::vector<std::string> labels(kSurfaceVariables.begin(), kSurfaceVariables.end());
  for (const char* v : kUpperVariables) {
    for (Index z = 0; z < grid.n_level; ++z) {
      labels.push_back(std::string(v) + std::to_string(grid.pressure_levels[static_cast<std::size_t>(z)]));
    }
  }
  return labels;
}

Index variable_of_channel(const GridSpec& grid, Index channel) {
  if (channel < kSurfaceCount) return channel;
  return kSurfaceCount + (channel - kSurfaceCount) / grid.n_level;
}

std::vector<std::string> variable_names() {
  std::vector<std::string> names(kSurfaceVariables.begin(), kSurfaceVariables.end());
  names.insert(names.end(), kUpperVariables.begin(), kUpperVariables.end());
  return names;
}

MatrixRM zero_fill_oci(const MatrixRM& oci, const MaskMatrix& missing) {
  if (missing.rows() != oci.rows() || missing.cols() != oci.cols()) {
    throw DataError("OCI mask shape does not match the OCI matrix");
  }
  return missing.select(MatrixRM::Zero(oci.rows(), oci.cols()), oci);
}

MatrixRM normalize_oci(const MatrixRM& oci, const MaskMatrix& missing, const Buffer& mean,
                       const Buffer& std) {
  if (mean.size() != oci.rows() || std.size() != oci.rows()) {
    throw DataError("OCI statistics cover " + std::to_string(mean.size()) + " indices, matrix has " +
                    std::to_string(oci.rows()));
  }
  MatrixRM out(oci.rows(), oci.cols());
  for (Index r = 0; r < oci.rows(); ++r) {
    out.row(r) = (oci.row(r).array() - mean[r]) / std[r];
  }
  return zero_fill_oci(out, missing);
}

namespace {

void check_stats(const Buffer& state, const NormStats& stats, const GridSpec& grid) {
  const Index channels = channel_count(grid);
  if (stats.mean.size() != channels || stats.std.size() != channels) {
    throw DataError("normalization statistics have " + std::to_string(stats.mean.size()) +
                    " channels, grid needs " + std::to_string(channels));
  }
  if (state.size() != channels * grid.cells()) {
    throw DataError("state length " + std::to_string(state.size()) + " does not match " +
                    std::to_string(channels) + " channels of the grid");
  }
}

}  // namespace

Buffer normalize_state(const Buffer& state, const NormStats& stats, const GridSpec& grid) {
  check_stats(state, stats, grid);
  const Index cells = grid.cells();
  Buffer out(state.size());
  for (Index c = 0; c < stats.mean.size(); ++c) {
    const double s = std::max(stats.std[c], NormStats::kStdFloor);
    out.segment(c * cells, cells) = (state.segment(c * cells, cells).array() - stats.mean[c]) / s;
  }
  return out;
}

Buffer denormalize_state(const Buffer& state, const NormStats& stats, const GridSpec& grid) {
  check_stats(state, stats, grid);
  const Index cells = grid.cells();
  Buffer out(state.size());
  for (Index c = 0; c < stats.mean.size(); ++c) {
    const double s = std::max(stats.std[c], NormStats::kStdFloor);
    out.segment(c * cells, cells) = state.segment(c * cells, cells).array() * s + stats.mean[c];
  }
  return out;
}

GridSample normalize_sample(const GridSample& sample, const NormStats& stats,
                            const GridSpec& grid) {
  GridSample out;
  out.timestamp = sample.timestamp;
  out.state = normalize_state(sample.state, stats, grid);
  out.oci_missing = sample.oci_missing;
  if (sample.oci.size() != 0) {
    Buffer floored = stats.oci_std.cwiseMax(NormStats::kStdFloor);
    out.oci = normalize_oci(sample.oci, sample.oci_missing, stats.oci_mean, floored);
  }
  return out;
}

GridSample denormalize_sample(const GridSample& sample, const NormStats& stats,
                              const GridSpec& grid) {
  GridSample out = sample;
  out.state = denormalize_state(sample.state, stats, grid);
  return out;
}

Index Climatology::phase_of(Index timestamp) const {
  const Index p = timestamp % season_length;
  return p < 0 ? p + season_length : p;
}

Eigen::Map<const Buffer> Climatology::at(Index timestamp) const {
  return {mean.row(phase_of(timestamp)).data(), mean.cols()};
}

std::vector<Index> DatasetManifest::timestamps() const {
  std::set<Index> ts;
  for (const auto& [a, b] : pairs) {
    ts.insert(a);
    ts.insert(b);
  }
  return {ts.begin(), ts.end()};
}

DatasetManifest with_horizon(const DatasetManifest& m, Index horizon) {
  if (horizon < 0) throw DataError("horizon must be non-negative");
  DatasetManifest out = m;
  out.horizon_steps = horizon;
  out.pairs.clear();
  for (Index t = m.block_begin; t + horizon < m.block_end; ++t) out.pairs.emplace_back(t, t + horizon);
  if (out.pairs.empty()) {
    throw DataError("split '" + m.split + "' has no pairs at horizon " + std::to_string(horizon));
  }
  return out;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["split"] = m.split;
  j["grid"] = {{"n_lat", m.grid.n_lat},
               {"n_lon", m.grid.n_lon},
               {"n_level", m.grid.n_level},
               {"pressure_levels", m.grid.pressure_levels}};
  j["horizon_steps"] = m.horizon_steps;
  j["seed"] = m.seed;
  j["block"] = {m.block_begin, m.block_end};
  j["lag_window"] = m.lag_window;
  j["season_length"] = m.season_length;
  j["oci"] = {{"file", m.oci_file},
              {"mask", m.oci_mask_file},
              {"history", m.oci_history},
              {"n_indices", m.n_oci},
              {"lag_order", "oldest_to_newest"}};
  j["pairs"] = m.pairs;
  nlohmann::ordered_json files = nlohmann::ordered_json::object();
  for (const auto& [t, p] : m.files) files[std::to_string(t)] = p;
  j["files"] = files;
  write_file(path, j.dump(1) + "\n");
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
    DatasetManifest m;
    m.split = j.at("split").get<std::string>();
    const auto& g = j.at("grid");
    m.grid.n_lat = g.at("n_lat").get<Index>();
    m.grid.n_lon = g.at("n_lon").get<Index>();
    m.grid.n_level = g.at("n_level").get<Index>();
    m.grid.pressure_levels = g.at("pressure_levels").get<std::vector<int>>();
    m.grid.validate();
    m.horizon_steps = j.at("horizon_steps").get<Index>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.block_begin = j.at("block").at(0).get<Index>();
    m.block_end = j.at("block").at(1).get<Index>();
    m.lag_window = j.at("lag_window").get<Index>();
    m.season_length = j.at("season_length").get<Index>();
    const auto& o = j.at("oci");
    m.oci_file = o.at("file").get<std::string>();
    m.oci_mask_file = o.at("mask").get<std::string>();
    m.oci_history = o.at("history").get<Index>();
    m.n_oci = o.at("n_indices").get<Index>();
    m.pairs = j.at("pairs").get<std::vector<std::pair<Index, Index>>>();
    for (const auto& [k, v] : j.at("files").items()) m.files[std::stoll(k)] = v.get<std::string>();
    for (const auto& [a, b] : m.pairs) {
      if (b - a != m.horizon_steps) {
        throw DataError("pair (" + std::to_string(a) + ", " + std::to_string(b) +
                        ") does not match horizon " + std::to_string(m.horizon_steps));
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

SplitPairs split_manifest(Index steps, const SplitBlocks& blocks, Index horizon) {
  if (horizon < 0) throw DataError("horizon must be non-negative");
  const std::pair<const char*, Block> named[] = {
      {"train", blocks.train}, {"val", blocks.val}, {"test", blocks.test}};
  for (const auto& [name, b] : named) {
    if (b.begin >= b.end) throw DataError(std::string("empty ") + name + " block");
    if (b.begin < 0 || b.end > steps) {
      throw DataError(std::string(name) + " block outside [0, " + std::to_string(steps) + ")");
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = i + 1; k < 3; ++k) {
      const Block& a = named[i].second;
      const Block& b = named[k].second;
      if (a.begin < b.end && b.begin < a.end) {
        throw DataError(std::string("overlapping blocks: ") + named[i].first + " and " +
                        named[k].first);
      }
    }
  }
  auto pairs_in = [horizon](const Block& b, const char* name) {
    std::vector<std::pair<Index, Index>> out;
    for (Index t = b.begin; t + horizon < b.end; ++t) out.emplace_back(t, t + horizon);
    if (out.empty()) {
      throw DataError(std::string(name) + " block is shorter than the horizon");
    }
    return out;
  };
  return {pairs_in(blocks.train, "train"), pairs_in(blocks.val, "val"),
          pairs_in(blocks.test, "test")};
}

}  // namespace tele
