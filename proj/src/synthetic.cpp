#include "tele/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "json.hpp"
#include "tele/rng.hpp"
#include "tele/tns.hpp"

namespace tele {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

enum Stream : std::uint64_t { kOci = 1, kPatterns, kCouplings, kClimate, kNoise, kMissing, kOciUnits };

double uniform(RngStream& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

void physical_scale(const GridSpec& grid, Buffer& offset, Buffer& scale) {
  const Index channels = channel_count(grid);
  offset.resize(channels);
  scale.resize(channels);
  const double surface_offset[] = {288.0, 0.0, 0.0, 101325.0};
  const double surface_scale[] = {8.0, 5.0, 4.0, 800.0};
  for (Index c = 0; c < kSurfaceCount; ++c) {
    offset[c] = surface_offset[c];
    scale[c] = surface_scale[c];
  }
  for (Index v = 0; v < kUpperCount; ++v) {
    for (Index z = 0; z < grid.n_level; ++z) {
      const double p = grid.pressure_levels[static_cast<std::size_t>(z)];
      const double sigma = p / 1000.0;
      const Index c = upper_channel(grid, v, z);
      switch (v) {
        case 0:  // Z
          offset[c] = 9.80665 * 7400.0 * std::log(1013.25 / p);
          scale[c] = 300.0 + (1000.0 - p);
          break;
        case 1:  // Q
          offset[c] = 0.01 * sigma * sigma * sigma;
          scale[c] = 0.4 * offset[c] + 1e-4;
          break;
        case 2:  // T
          offset[c] = 288.0 * std::pow(p / 1013.25, 0.19);
          scale[c] = 6.0;
          break;
        case 3:  // U
          offset[c] = 2.0 + 15.0 * (1.0 - sigma);
          scale[c] = 6.0 + 10.0 * (1.0 - sigma);
          break;
        default:  // V
          offset[c] = 0.0;
          scale[c] = 5.0;
      }
    }
  }
}

std::string field_path(Index t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fields/t%06lld.tns", static_cast<long long>(t));
  return buf;
}

}  // namespace

void SyntheticConfig::validate() const {
  grid.validate();
  if (lag_window < 2) throw DataError("lag window must be at least 2");
  if (horizon < 0) throw DataError("horizon must be non-negative");
  if (steps < lag_window + horizon) {
    throw DataError("insufficient history: " + std::to_string(steps) + " steps < lag window " +
                    std::to_string(lag_window) + " + horizon " + std::to_string(horizon));
  }
  if (oci_history < lag_window) throw DataError("OCI history must cover the lag window");
  if (n_oci < 1 || active_indices < 0 || active_indices > n_oci) {
    throw DataError("active indices must lie in [0, n_oci]");
  }
  if (season_length < 1) throw DataError("season length must be positive");
  if (periods.empty()) throw DataError("no oscillator periods given");
  if (noise < 0.0 || noise_rho < 0.0 || noise_rho >= 1.0) throw DataError("bad noise parameters");
  if (oscillator_radius <= 0.0 || oscillator_radius >= 1.0) {
    throw DataError("oscillator radius must lie in (0, 1)");
  }
  if (missing_fraction < 0.0 || missing_fraction >= 1.0) throw DataError("bad missing fraction");
  const auto names = variable_names();
  for (const auto& v : uncoupled_variables) {
    if (std::find(names.begin(), names.end(), v) == names.end()) {
      throw DataError("unknown variable '" + v + "' in uncoupled_variables");
    }
  }
}

SyntheticDataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  config.validate();
  const GridSpec& grid = config.grid;
  const Index channels = channel_count(grid);
  const Index cells = grid.cells();
  const Index cols = config.oci_history + config.steps;
  const Index n_active = config.active_indices;
  const RngStream root(seed);

  SyntheticDataset ds;
  ds.config = config;
  ds.seed = seed;
  ds.pairs = split_manifest(config.steps, config.blocks, config.horizon);
  SyntheticTruth& truth = ds.truth;
  physical_scale(grid, truth.offset, truth.scale);

  // Index oscillators: x_t = 2ρcos(ω)x_{t-1} − ρ²x_{t-2} + ε, rescaled to unit std.
  truth.oci_unit.resize(config.n_oci, cols);
  {
    RngStream rng = root.split(kOci);
    const double rho = config.oscillator_radius;
    constexpr Index burn_in = 500;
    for (Index k = 0; k < config.n_oci; ++k) {
      const double period = config.periods[static_cast<std::size_t>(k) % config.periods.size()];
      const double a1 = 2.0 * rho * std::cos(kTwoPi / period);
      const double a2 = -rho * rho;
      double x1 = 0.0;
      double x2 = 0.0;
      for (Index t = -burn_in; t < cols; ++t) {
        const double x = a1 * x1 + a2 * x2 + rng.normal();
        x2 = x1;
        x1 = x;
        if (t >= 0) truth.oci_unit(k, t) = x;
      }
      auto row = truth.oci_unit.row(k).array();
      const double mu = row.mean();
      const double sd = std::sqrt((row - mu).square().mean());
      row = (row - mu) / sd;
    }
  }

  // Localized patterns far from a nominal equatorial source.
  truth.patterns = MatrixRM::Zero(n_active, cells);
  {
    RngStream rng = root.split(kPatterns);
    const double s_lat = std::max(1.0, 2.0 * static_cast<double>(grid.n_lat) / 16.0);
    const double s_lon = std::max(1.0, 3.5 * static_cast<double>(grid.n_lon) / 32.0);
    const double n_lat = static_cast<double>(grid.n_lat);
    const double n_lon = static_cast<double>(grid.n_lon);
    for (Index k = 0; k < n_active; ++k) {
      truth.active.push_back(k);
      truth.lags.push_back(1 + static_cast<Index>(rng.uniform() *
                                                  static_cast<double>(config.lag_window - 1)));
      const bool north = rng.uniform() < 0.5;
      const double lat = n_lat * (north ? uniform(rng, 0.65, 0.85) : uniform(rng, 0.15, 0.35)) - 0.5;
      const double src = uniform(rng, 0.0, n_lon);
      const double lon = std::fmod(src + 0.5 * n_lon + uniform(rng, -0.125, 0.125) * n_lon, n_lon);
      truth.center_lat.push_back(lat);
      truth.center_lon.push_back(lon);
      truth.source_lon.push_back(src);
      for (Index i = 0; i < grid.n_lat; ++i) {
        for (Index j = 0; j < grid.n_lon; ++j) {
          double dlon = std::abs(static_cast<double>(j) - lon);
          dlon = std::min(dlon, n_lon - dlon);
          const double di = static_cast<double>(i) - lat;
          truth.patterns(k, i * grid.n_lon + j) =
              std::exp(-0.5 * (di * di / (s_lat * s_lat) + dlon * dlon / (s_lon * s_lon)));
        }
      }
    }
  }

  truth.couplings = MatrixRM::Zero(n_active, channels);
  {
    RngStream rng = root.split(kCouplings);
    const auto names = variable_names();
    for (Index k = 0; k < n_active; ++k) {
      for (Index c = 0; c < channels; ++c) {
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double mag = uniform(rng, 0.6, 1.0);
        const std::string& var = names[static_cast<std::size_t>(variable_of_channel(grid, c))];
        const bool uncoupled = std::find(config.uncoupled_variables.begin(),
                                         config.uncoupled_variables.end(),
                                         var) != config.uncoupled_variables.end();
        truth.couplings(k, c) = uncoupled ? 0.0 : sign * mag;
      }
    }
  }

  // Unit-space climatology: zonal structure, a wave-1 pattern and a seasonal cycle.
  truth.climatology_unit.resize(config.season_length, channels * cells);
  {
    RngStream rng = root.split(kClimate);
    const auto lats = grid.lat_degrees();
    for (Index c = 0; c < channels; ++c) {
      const double beta = uniform(rng, 0.5, 1.5);
      const double gamma = uniform(rng, 0.2, 0.8);
      const double psi = uniform(rng, 0.0, kTwoPi);
      const double theta = uniform(rng, 0.0, kTwoPi);
      for (Index p = 0; p < config.season_length; ++p) {
        const double season = std::cos(kTwoPi * static_cast<double>(p) /
                                           static_cast<double>(config.season_length) +
                                       theta);
        for (Index i = 0; i < grid.n_lat; ++i) {
          const double phi = lats[static_cast<std::size_t>(i)] * std::numbers::pi / 180.0;
          for (Index j = 0; j < grid.n_lon; ++j) {
            const double wave = std::cos(kTwoPi * static_cast<double>(j) /
                                             static_cast<double>(grid.n_lon) +
                                         psi);
            truth.climatology_unit(p, c * cells + i * grid.n_lon + j) =
                beta * std::cos(2.0 * phi) + gamma * wave * std::cos(phi) +
                config.seasonal * std::sin(phi) * season;
          }
        }
      }
    }
  }

  // Observed record: per-index affine units, then the missing mask.
  ds.oci_raw.resize(config.n_oci, cols);
  ds.oci_missing = MaskMatrix::Constant(config.n_oci, cols, false);
  {
    RngStream units = root.split(kOciUnits);
    RngStream miss = root.split(kMissing);
    for (Index k = 0; k < config.n_oci; ++k) {
      const double mu = uniform(units, -1.0, 1.0);
      const double sd = uniform(units, 0.5, 2.0);
      for (Index t = 0; t < cols; ++t) {
        const bool gone = miss.uniform() < config.missing_fraction;
        ds.oci_missing(k, t) = gone;
        ds.oci_raw(k, t) = gone ? 0.0 : mu + sd * truth.oci_unit(k, t);
      }
    }
  }

  RngStream noise_rng = root.split(kNoise);
  const double innovation = config.noise * std::sqrt(1.0 - config.noise_rho * config.noise_rho);
  Buffer red(channels * cells);
  for (Index n = 0; n < red.size(); ++n) red[n] = config.noise * noise_rng.normal();
  ds.states.reserve(static_cast<std::size_t>(config.steps));
  for (Index t = 0; t < config.steps; ++t) {
    if (t > 0) {
      for (Index n = 0; n < red.size(); ++n) {
        red[n] = config.noise_rho * red[n] + innovation * noise_rng.normal();
      }
    }
    Buffer unit = truth.climatology_unit.row(t % config.season_length).transpose() + red;
    for (Index k = 0; k < n_active; ++k) {
      const double x = truth.oci_unit(truth.active[static_cast<std::size_t>(k)],
                                      t + config.oci_history - truth.lags[static_cast<std::size_t>(k)]);
      for (Index c = 0; c < channels; ++c) {
        const double w = config.coupling * truth.couplings(k, c) * x;
        if (w != 0.0) unit.segment(c * cells, cells) += w * truth.patterns.row(k).transpose();
      }
    }
    Buffer phys(unit.size());
    for (Index c = 0; c < channels; ++c) {
      phys.segment(c * cells, cells) =
          truth.offset[c] + truth.scale[c] * unit.segment(c * cells, cells).array();
    }
    ds.states.push_back(std::move(phys));
  }
  return ds;
}

Buffer SyntheticDataset::climatology(Index t) const {
  const Index cells = config.grid.cells();
  const Index phase = ((t % config.season_length) + config.season_length) % config.season_length;
  Buffer out(truth.climatology_unit.cols());
  for (Index c = 0; c < truth.offset.size(); ++c) {
    out.segment(c * cells, cells) =
        truth.offset[c] +
        truth.scale[c] * truth.climatology_unit.row(phase).segment(c * cells, cells).array();
  }
  return out;
}

Buffer SyntheticDataset::teleconnection_anomaly(Index t) const {
  const Index cells = config.grid.cells();
  Buffer out = Buffer::Zero(truth.climatology_unit.cols());
  for (Index k = 0; k < truth.patterns.rows(); ++k) {
    const double x = truth.oci_unit(truth.active[static_cast<std::size_t>(k)],
                                    t + config.oci_history - truth.lags[static_cast<std::size_t>(k)]);
    for (Index c = 0; c < truth.offset.size(); ++c) {
      out.segment(c * cells, cells) +=
          (truth.scale[c] * config.coupling * truth.couplings(k, c) * x) *
          truth.patterns.row(k).transpose();
    }
  }
  return out;
}

std::vector<DatasetManifest> SyntheticDataset::manifests() const {
  const std::pair<const char*, std::pair<const Block*, const std::vector<std::pair<Index, Index>>*>>
      splits[] = {{"train", {&config.blocks.train, &pairs.train}},
                  {"val", {&config.blocks.val, &pairs.val}},
                  {"test", {&config.blocks.test, &pairs.test}}};
  std::vector<DatasetManifest> out;
  for (const auto& [name, bp] : splits) {
    DatasetManifest m;
    m.split = name;
    m.grid = config.grid;
    m.horizon_steps = config.horizon;
    m.seed = seed;
    m.pairs = *bp.second;
    m.block_begin = bp.first->begin;
    m.block_end = bp.first->end;
    m.lag_window = config.lag_window;
    m.season_length = config.season_length;
    m.oci_history = config.oci_history;
    m.n_oci = config.n_oci;
    for (Index t = m.block_begin; t < m.block_end; ++t) m.files[t] = field_path(t);
    out.push_back(std::move(m));
  }
  return out;
}

void write_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  const GridSpec& grid = ds.config.grid;
  const Index channels = channel_count(grid);
  std::filesystem::create_directories(dir / "fields");
  const auto manifests = ds.manifests();
  for (const auto& m : manifests) {
    for (const auto& [t, rel] : m.files) {
      save_tensor(dir / rel, {channels, grid.n_lat, grid.n_lon}, ds.states[static_cast<std::size_t>(t)],
                  DType::Float32);
    }
    save_manifest(dir / ("manifest_" + m.split + ".json"), m);
  }
  const Shape oci_shape{ds.oci_raw.rows(), ds.oci_raw.cols()};
  save_tensor(dir / "oci.tns", oci_shape, Eigen::Map<const Buffer>(ds.oci_raw.data(), ds.oci_raw.size()),
              DType::Float64);
  const MatrixRM mask = ds.oci_missing.cast<double>();
  save_tensor(dir / "oci_mask.tns", oci_shape, Eigen::Map<const Buffer>(mask.data(), mask.size()),
              DType::Float32);

  const SyntheticTruth& tr = ds.truth;
  save_tensor(dir / "truth_patterns.tns", {tr.patterns.rows(), grid.n_lat, grid.n_lon},
              Eigen::Map<const Buffer>(tr.patterns.data(), tr.patterns.size()));
  Buffer clim(tr.climatology_unit.size());
  for (Index p = 0; p < ds.config.season_length; ++p) {
    clim.segment(p * tr.climatology_unit.cols(), tr.climatology_unit.cols()) = ds.climatology(p);
  }
  save_tensor(dir / "truth_climatology.tns", {ds.config.season_length, channels, grid.n_lat, grid.n_lon},
              clim);
  save_tensor(dir / "truth_oci.tns", oci_shape,
              Eigen::Map<const Buffer>(tr.oci_unit.data(), tr.oci_unit.size()));

  nlohmann::ordered_json j;
  j["seed"] = ds.seed;
  j["steps"] = ds.config.steps;
  j["coupling"] = ds.config.coupling;
  j["noise"] = ds.config.noise;
  j["noise_rho"] = ds.config.noise_rho;
  j["seasonal"] = ds.config.seasonal;
  j["oscillator_radius"] = ds.config.oscillator_radius;
  j["missing_fraction"] = ds.config.missing_fraction;
  j["uncoupled_variables"] = ds.config.uncoupled_variables;
  std::vector<double> periods;
  for (Index k = 0; k < ds.config.n_oci; ++k) {
    periods.push_back(ds.config.periods[static_cast<std::size_t>(k) % ds.config.periods.size()]);
  }
  j["periods"] = periods;
  j["active_indices"] = tr.active;
  j["lags"] = tr.lags;
  j["center_lat"] = tr.center_lat;
  j["center_lon"] = tr.center_lon;
  j["source_lon"] = tr.source_lon;
  std::vector<std::vector<double>> couplings;
  for (Index k = 0; k < tr.couplings.rows(); ++k) {
    couplings.emplace_back(tr.couplings.row(k).begin(), tr.couplings.row(k).end());
  }
  j["couplings"] = couplings;
  j["channel_offset"] = std::vector<double>(tr.offset.begin(), tr.offset.end());
  j["channel_scale"] = std::vector<double>(tr.scale.begin(), tr.scale.end());
  j["patterns_file"] = "truth_patterns.tns";
  j["climatology_file"] = "truth_climatology.tns";
  j["oci_unit_file"] = "truth_oci.tns";
  write_file(dir / "truth.json", j.dump(1) + "\n");
}

Dataset to_dataset(const SyntheticDataset& ds) {
  std::map<std::string, DatasetManifest> manifests;
  for (auto& m : ds.manifests()) manifests.emplace(m.split, std::move(m));
  std::vector<Buffer> states;
  states.reserve(ds.states.size());
  for (const Buffer& s : ds.states) states.push_back(s.cast<float>().cast<double>());
  return Dataset(std::move(manifests), std::move(states), ds.oci_raw, ds.oci_missing);
}

}  // namespace tele
