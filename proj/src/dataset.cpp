#include "tele/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "tele/tns.hpp"

namespace tele {

Dataset::Dataset(std::map<std::string, DatasetManifest> manifests, std::vector<Buffer> states,
                 MatrixRM oci_series, MaskMatrix oci_missing)
    : manifests_(std::move(manifests)),
      states_(std::move(states)),
      oci_series_(std::move(oci_series)),
      oci_missing_(std::move(oci_missing)) {
  if (manifests_.empty()) throw DataError("dataset without manifests");
  if (oci_missing_.rows() != oci_series_.rows() || oci_missing_.cols() != oci_series_.cols()) {
    throw DataError("OCI mask shape does not match the OCI series");
  }
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  std::map<std::string, DatasetManifest> manifests;
  for (const char* split : {"train", "val", "test"}) {
    const auto path = dir / (std::string("manifest_") + split + ".json");
    if (std::filesystem::exists(path)) manifests.emplace(split, load_manifest(path));
  }
  if (manifests.empty()) throw DataError("no manifests found in " + dir.string());
  const DatasetManifest& first = manifests.begin()->second;
  const Index cells = first.grid.cells();
  const Index state_len = channel_count(first.grid) * cells;

  Index max_t = -1;
  for (const auto& [_, m] : manifests) {
    if (!(m.grid == first.grid)) throw DataError("manifests disagree on the grid");
    for (const auto& [t, _p] : m.files) max_t = std::max(max_t, t);
  }
  std::vector<Buffer> states(static_cast<std::size_t>(max_t + 1));
  for (const auto& [_, m] : manifests) {
    for (const auto& [t, rel] : m.files) {
      auto& slot = states[static_cast<std::size_t>(t)];
      if (slot.size() != 0) continue;
      const auto path = dir / rel;
      if (!std::filesystem::exists(path)) {
        throw DataError("manifest " + m.split + " references missing file " + path.string());
      }
      StoredTensor st = load_tensor(path);
      if (st.data.size() != state_len) {
        throw DataError("file " + path.string() + " has shape " + to_string(st.shape) +
                        ", expected " + std::to_string(state_len) + " values");
      }
      slot = std::move(st.data);
    }
    for (const auto& [a, b] : m.pairs) {
      if (!m.files.count(a) || !m.files.count(b)) {
        throw DataError("manifest " + m.split + " pair references a timestamp without a file");
      }
    }
  }
  StoredTensor oci = load_tensor(dir / first.oci_file);
  StoredTensor mask = load_tensor(dir / first.oci_mask_file);
  if (oci.shape.size() != 2 || mask.shape != oci.shape) {
    throw DataError("OCI series must be a 2-D tensor with a matching mask");
  }
  MatrixRM series = Eigen::Map<const MatrixRM>(oci.data.data(), oci.shape[0], oci.shape[1]);
  MaskMatrix missing =
      Eigen::Map<const MatrixRM>(mask.data.data(), mask.shape[0], mask.shape[1]).array() != 0.0;
  return Dataset(std::move(manifests), std::move(states), std::move(series), std::move(missing));
}

const DatasetManifest& Dataset::any_manifest() const { return manifests_.begin()->second; }

const DatasetManifest& Dataset::manifest(const std::string& split) const {
  auto it = manifests_.find(split);
  if (it == manifests_.end()) throw DataError("dataset has no '" + split + "' split");
  return it->second;
}

bool Dataset::has_state(Index t) const {
  return t >= 0 && t < static_cast<Index>(states_.size()) &&
         states_[static_cast<std::size_t>(t)].size() != 0;
}

const Buffer& Dataset::state(Index t) const {
  if (!has_state(t)) throw DataError("no state loaded for timestamp " + std::to_string(t));
  return states_[static_cast<std::size_t>(t)];
}

GridSample Dataset::raw_sample(Index t) const {
  GridSample s;
  s.timestamp = t;
  s.state = state(t);
  const Index lags = lag_window();
  const Index first = t + oci_history() - lags;
  if (first < 0 || first + lags > oci_series_.cols()) {
    throw DataError("OCI record does not cover the lag window of timestamp " + std::to_string(t));
  }
  s.oci = oci_series_.middleCols(first, lags);
  s.oci_missing = oci_missing_.middleCols(first, lags);
  return s;
}

NormStats compute_norm_stats(const Dataset& ds, const DatasetManifest& train) {
  const GridSpec& grid = ds.grid();
  const Index channels = channel_count(grid);
  const Index cells = grid.cells();
  const std::vector<Index> ts = train.timestamps();
  if (ts.empty()) throw DataError("training split is empty");

  NormStats stats;
  stats.mean = Buffer::Zero(channels);
  stats.std = Buffer::Zero(channels);
  for (Index t : ts) {
    const Buffer& s = ds.state(t);
    for (Index c = 0; c < channels; ++c) stats.mean[c] += s.segment(c * cells, cells).sum();
  }
  const double n = static_cast<double>(ts.size()) * static_cast<double>(cells);
  stats.mean /= n;
  for (Index t : ts) {
    const Buffer& s = ds.state(t);
    for (Index c = 0; c < channels; ++c) {
      stats.std[c] += (s.segment(c * cells, cells).array() - stats.mean[c]).square().sum();
    }
  }
  stats.std = (stats.std / n).cwiseSqrt().cwiseMax(NormStats::kStdFloor);

  // OCI columns visible to any training sample: times [first − L, last − 1].
  const MatrixRM& series = ds.oci_series();
  const MaskMatrix& missing = ds.oci_missing();
  const Index c0 = std::max<Index>(0, ts.front() + ds.oci_history() - ds.lag_window());
  const Index c1 = std::min<Index>(series.cols(), ts.back() + ds.oci_history());
  stats.oci_mean = Buffer::Zero(series.rows());
  stats.oci_std = Buffer::Constant(series.rows(), 1.0);
  for (Index r = 0; r < series.rows(); ++r) {
    double sum = 0.0;
    double count = 0.0;
    for (Index c = c0; c < c1; ++c) {
      if (!missing(r, c)) {
        sum += series(r, c);
        count += 1.0;
      }
    }
    if (count == 0.0) continue;
    const double mu = sum / count;
    double ss = 0.0;
    for (Index c = c0; c < c1; ++c) {
      if (!missing(r, c)) ss += (series(r, c) - mu) * (series(r, c) - mu);
    }
    stats.oci_mean[r] = mu;
    stats.oci_std[r] = std::max(std::sqrt(ss / count), NormStats::kStdFloor);
  }
  return stats;
}

Climatology compute_climatology(std::span<const Index> timestamps,
                                const std::function<const Buffer&(Index)>& state_of,
                                const GridSpec& grid, Index season_length) {
  if (season_length < 1) throw DataError("season length must be positive");
  Climatology clim;
  clim.grid = grid;
  clim.season_length = season_length;
  const Index width = channel_count(grid) * grid.cells();
  clim.mean = MatrixRM::Zero(season_length, width);
  std::vector<Index> counts(static_cast<std::size_t>(season_length), 0);
  for (Index t : timestamps) {
    const Index p = clim.phase_of(t);
    clim.mean.row(p) += state_of(t).transpose();
    ++counts[static_cast<std::size_t>(p)];
  }
  std::string empty;
  for (Index p = 0; p < season_length; ++p) {
    const Index n = counts[static_cast<std::size_t>(p)];
    if (n == 0) {
      empty += (empty.empty() ? "" : ", ") + std::to_string(p);
    } else {
      clim.mean.row(p) /= static_cast<double>(n);
    }
  }
  if (!empty.empty()) throw DataError("climatology: no training samples for phase(s) " + empty);
  return clim;
}

Climatology compute_climatology(const Dataset& ds, const DatasetManifest& train) {
  const std::vector<Index> ts = train.timestamps();
  return compute_climatology(
      ts, [&ds](Index t) -> const Buffer& { return ds.state(t); }, ds.grid(), ds.season_length());
}

}  // namespace tele
