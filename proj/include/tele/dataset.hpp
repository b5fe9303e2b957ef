#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tele/grid.hpp"

namespace tele {

/// Physical-unit states and the observed OCI record of one dataset, with the
/// train/val/test manifests that index it.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::map<std::string, DatasetManifest> manifests, std::vector<Buffer> states,
          MatrixRM oci_series, MaskMatrix oci_missing);

  /// Reads manifest_{train,val,test}.json and every file they reference.
  static Dataset load(const std::filesystem::path& dir);

  const GridSpec& grid() const { return any_manifest().grid; }
  const DatasetManifest& manifest(const std::string& split) const;
  bool has_split(const std::string& split) const { return manifests_.count(split) != 0; }
  Index lag_window() const { return any_manifest().lag_window; }
  Index season_length() const { return any_manifest().season_length; }
  Index n_oci() const { return oci_series_.rows(); }
  Index oci_history() const { return any_manifest().oci_history; }

  bool has_state(Index t) const;
  const Buffer& state(Index t) const;
  /// Physical state at t with the L OCI columns for times t−L .. t−1.
  GridSample raw_sample(Index t) const;

  const MatrixRM& oci_series() const { return oci_series_; }
  const MaskMatrix& oci_missing() const { return oci_missing_; }

 private:
  const DatasetManifest& any_manifest() const;

  std::map<std::string, DatasetManifest> manifests_;
  std::vector<Buffer> states_;
  MatrixRM oci_series_;
  MaskMatrix oci_missing_;
};

/// Field statistics over the training timestamps and OCI statistics over
/// the present entries visible to training samples.
NormStats compute_norm_stats(const Dataset& ds, const DatasetManifest& train);

Climatology compute_climatology(std::span<const Index> timestamps,
                                const std::function<const Buffer&(Index)>& state_of,
                                const GridSpec& grid, Index season_length);
Climatology compute_climatology(const Dataset& ds, const DatasetManifest& train);

}  // namespace tele
