#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tele/tensor.hpp"

namespace tele {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Regular lat/lon grid with cell-centered latitudes, poles excluded.
struct GridSpec {
  Index n_lat = 16;
  Index n_lon = 32;
  Index n_level = 3;
  std::vector<int> pressure_levels{500, 850, 1000};

  Index cells() const { return n_lat * n_lon; }
  /// φ_i = −90 + (i + 0.5)·180 / n_lat, strictly increasing.
  std::vector<double> lat_degrees() const;
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

inline constexpr std::array<const char*, 4> kSurfaceVariables{"T2M", "U10", "V10", "MSL"};
inline constexpr std::array<const char*, 5> kUpperVariables{"Z", "Q", "T", "U", "V"};
inline constexpr Index kSurfaceCount = 4;
inline constexpr Index kUpperCount = 5;

// A full atmospheric state is stored as one stacked array of
// channels × n_lat × n_lon: the surface variables first, then each upper-air
// variable with its levels contiguous (Z500, Z850, ..., Q500, ...).
Index channel_count(const GridSpec& grid);
Index upper_channel(const GridSpec& grid, Index variable, Index level);
std::vector<std::string> channel_labels(const GridSpec& grid);
/// Variable index in [0, 9) that owns a channel.
Index variable_of_channel(const GridSpec& grid, Index channel);
std::vector<std::string> variable_names();

using MaskMatrix = RowMatrix<bool>;

/// One timestamped state plus the ocean-climate-index lag matrix that
/// precedes it. OCI columns run oldest → newest.
struct GridSample {
  Index timestamp = 0;
  Buffer state;
  MatrixRM oci;
  MaskMatrix oci_missing;

  Eigen::Map<const Buffer> surface(const GridSpec& grid) const {
    return {state.data(), kSurfaceCount * grid.cells()};
  }
  Eigen::Map<const Buffer> upper(const GridSpec& grid) const {
    return {state.data() + kSurfaceCount * grid.cells(), kUpperCount * grid.n_level * grid.cells()};
  }
};

/// Per-channel field statistics and per-index OCI statistics from the
/// training period. Standard deviations are floored at kStdFloor.
struct NormStats {
  static constexpr double kStdFloor = 1e-8;
  Buffer mean;
  Buffer std;
  Buffer oci_mean;
  Buffer oci_std;
};

/// Missing entries set to exactly zero, present entries untouched.
MatrixRM zero_fill_oci(const MatrixRM& oci, const MaskMatrix& missing);
/// Normalizes present entries per row, then zero-fills the gaps (zero is the
/// climatological mean in normalized space).
MatrixRM normalize_oci(const MatrixRM& oci, const MaskMatrix& missing, const Buffer& mean,
                       const Buffer& std);

GridSample normalize_sample(const GridSample& sample, const NormStats& stats,
                            const GridSpec& grid);
/// Inverse of normalize_sample on the field state; OCI rows are returned as
/// stored (normalized, zero-filled).
GridSample denormalize_sample(const GridSample& sample, const NormStats& stats,
                              const GridSpec& grid);
Buffer normalize_state(const Buffer& state, const NormStats& stats, const GridSpec& grid);
Buffer denormalize_state(const Buffer& state, const NormStats& stats, const GridSpec& grid);

/// Mean field per calendar phase (timestamp mod season_length).
struct Climatology {
  GridSpec grid;
  Index season_length = 1;
  MatrixRM mean;  // season_length × (channels · cells)

  Index phase_of(Index timestamp) const;
  Eigen::Map<const Buffer> at(Index timestamp) const;
};

struct DatasetManifest {
  std::string split;
  GridSpec grid;
  Index horizon_steps = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<Index, Index>> pairs;
  std::map<Index, std::string> files;

  /// Contiguous timestamp range the split owns.
  Index block_begin = 0;
  Index block_end = 0;
  Index lag_window = 22;
  Index season_length = 48;
  Index oci_history = 0;
  Index n_oci = 16;
  std::string oci_file = "oci.tns";
  std::string oci_mask_file = "oci_mask.tns";

  /// Timestamps referenced by any pair, ascending.
  std::vector<Index> timestamps() const;
};

/// Same split and files, pairs rebuilt for another horizon inside the block.
DatasetManifest with_horizon(const DatasetManifest& m, Index horizon);

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Block {
  Index begin = 0;
  Index end = 0;
};

struct SplitBlocks {
  Block train{0, 1200};
  Block val{1600, 2000};
  Block test{1200, 1600};
};

struct SplitPairs {
  std::vector<std::pair<Index, Index>> train;
  std::vector<std::pair<Index, Index>> val;
  std::vector<std::pair<Index, Index>> test;
};

/// (t, t + horizon) pairs lying wholly inside each block. Blocks must be
/// disjoint, inside [0, steps) and yield at least one pair each.
SplitPairs split_manifest(Index steps, const SplitBlocks& blocks, Index horizon);

}  // namespace tele
