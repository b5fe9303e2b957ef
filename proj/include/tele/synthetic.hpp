#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tele/dataset.hpp"
#include "tele/grid.hpp"

namespace tele {

struct SyntheticConfig {
  GridSpec grid;
  Index steps = 2000;
  Index horizon = 28;
  Index lag_window = 22;
  Index n_oci = 16;
  Index active_indices = 5;
  Index season_length = 48;
  Index oci_history = 64;
  /// Global multiplier on every teleconnection pattern (a).
  double coupling = 2.0;
  /// Stationary std of the per-cell AR(1) noise, in units of the channel scale.
  double noise = 0.3;
  double noise_rho = 0.9;
  double seasonal = 1.0;
  /// Damping radius of the AR(2) index oscillators.
  double oscillator_radius = 0.995;
  double missing_fraction = 0.02;
  std::vector<std::string> uncoupled_variables{"Q"};
  /// Oscillator periods in steps, one per index (cycled if shorter).
  std::vector<double> periods{12.4, 16.0, 22.4, 37.3, 10.2, 8.6, 14.0, 19.0,
                              26.0, 30.0, 45.0, 70.0, 9.0,  11.0, 28.0, 50.0};
  SplitBlocks blocks;

  void validate() const;
};

/// Generator ground truth, kept for oracle checks.
struct SyntheticTruth {
  std::vector<Index> active;         // index id per pattern
  std::vector<Index> lags;           // steps, in [1, L-1]
  std::vector<double> center_lat;    // pattern centers, grid coordinates
  std::vector<double> center_lon;
  std::vector<double> source_lon;    // nominal source longitude (equator)
  MatrixRM patterns;                 // n_active × cells, peak 1
  MatrixRM couplings;                // n_active × channels
  MatrixRM oci_unit;                 // n_oci × (history + steps), unit std
  Buffer offset;                     // per channel physical offset
  Buffer scale;                      // per channel physical scale
  MatrixRM climatology_unit;         // season_length × (channels · cells)
};

struct SyntheticDataset {
  SyntheticConfig config;
  std::uint64_t seed = 0;
  std::vector<Buffer> states;  // physical units, unrounded
  MatrixRM oci_raw;            // n_oci × (history + steps); missing entries 0
  MaskMatrix oci_missing;
  SyntheticTruth truth;
  SplitPairs pairs;

  Buffer climatology(Index t) const;
  /// Σ_k a·c_k·x_k(t − lag_k)·P_k in physical units.
  Buffer teleconnection_anomaly(Index t) const;
  std::vector<DatasetManifest> manifests() const;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// Writes fields/t%06d.tns (float32), oci.tns, oci_mask.tns, the three
/// manifests and the truth sidecar.
void write_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir);

/// The same content Dataset::load would return for write_dataset's output,
/// without touching disk (fields rounded to float32).
Dataset to_dataset(const SyntheticDataset& ds);

}  // namespace tele
