#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tele/grid.hpp"

namespace tele {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
using LatWeights = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// L(i) = n_lat · cos φ_i / Σ_j cos φ_j, so the weights average to one.
template <typename Scalar = double>
LatWeights<Scalar> lat_weights(const std::vector<double>& lat_degrees) {
  const Index n = static_cast<Index>(lat_degrees.size());
  if (n == 0) throw MetricError("lat_weights: no latitudes");
  LatWeights<Scalar> w(n);
  for (Index i = 0; i < n; ++i) {
    const double phi = lat_degrees[static_cast<std::size_t>(i)];
    const double c = std::cos(phi * M_PI / 180.0);
    // cos(±90°) rounds to a tiny positive number, so test the latitude too.
    if (!(std::abs(phi) < 90.0) || !(c > 0.0)) {
      throw MetricError("lat_weights: latitude " + std::to_string(phi) + " is at or beyond a pole");
    }
    w[i] = static_cast<Scalar>(c);
  }
  return w * (static_cast<Scalar>(n) / w.sum());
}

template <typename Scalar = double>
LatWeights<Scalar> lat_weights(const GridSpec& grid) {
  return lat_weights<Scalar>(grid.lat_degrees());
}

namespace detail {

template <typename A, typename B, typename W>
void check_field_shapes(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b,
                        const Eigen::DenseBase<W>& w, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != w.size()) {
    throw MetricError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()) + ", " + std::to_string(w.size()) + " weights)");
  }
}

template <typename A>
void check_finite(const Eigen::DenseBase<A>& a, const char* what) {
  if (!a.derived().allFinite()) throw MetricError(std::string(what) + ": non-finite input");
}

}  // namespace detail

/// Latitude-weighted RMSE of one n_lat × n_lon field.
template <typename P, typename T, typename W>
typename P::Scalar wrmse(const Eigen::DenseBase<P>& pred, const Eigen::DenseBase<T>& target,
                         const Eigen::DenseBase<W>& weights) {
  using Scalar = typename P::Scalar;
  detail::check_field_shapes(pred, target, weights, "wrmse");
  detail::check_finite(pred, "wrmse");
  detail::check_finite(target, "wrmse");
  const auto err = (pred.derived() - target.derived()).array().square();
  const Scalar total = (err.colwise() * weights.derived().array()).sum();
  return std::sqrt(total / static_cast<Scalar>(pred.size()));
}

template <typename Scalar>
struct AccResult {
  Scalar value = 0;
  bool defined = false;
};

/// Latitude-weighted uncentered anomaly correlation. Undefined when either
/// anomaly has zero weighted norm.
template <typename P, typename T, typename C, typename W>
AccResult<typename P::Scalar> wacc(const Eigen::DenseBase<P>& pred, const Eigen::DenseBase<T>& target,
                                   const Eigen::DenseBase<C>& climatology,
                                   const Eigen::DenseBase<W>& weights) {
  using Scalar = typename P::Scalar;
  detail::check_field_shapes(pred, target, weights, "wacc");
  detail::check_field_shapes(pred, climatology, weights, "wacc");
  detail::check_finite(pred, "wacc");
  detail::check_finite(target, "wacc");
  detail::check_finite(climatology, "wacc");
  const auto pa = (pred.derived() - climatology.derived()).array();
  const auto ta = (target.derived() - climatology.derived()).array();
  const auto w = weights.derived().array();
  const Scalar num = ((pa * ta).colwise() * w).sum();
  const Scalar pp = (pa.square().colwise() * w).sum();
  const Scalar tt = (ta.square().colwise() * w).sum();
  if (pp == Scalar(0) || tt == Scalar(0)) return {};
  Scalar acc = num / std::sqrt(pp * tt);
  if (std::abs(acc) > Scalar(1)) {
    if (std::abs(acc) - Scalar(1) > Scalar(1e-12)) throw MetricError("wacc: correlation outside [-1, 1]");
    acc = acc > 0 ? Scalar(1) : Scalar(-1);
  }
  return {acc, true};
}

/// The "forecast" that copies the input state unchanged.
inline Buffer persistence(const Buffer& input_state) { return input_state; }

struct MetricRow {
  std::string model;
  std::string variable;
  Index horizon_steps = 0;
  double wrmse = 0.0;
  double wacc = 0.0;
  bool acc_defined = false;
  Index n_samples = 0;
};

struct MetricReport {
  std::string split;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<MetricRow> rows;

  const MetricRow& row(const std::string& model, const std::string& variable) const;
  /// Columns: model, variable, horizon_steps, wrmse, wacc, acc_defined, n_samples.
  void write_csv(std::ostream& os) const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Physical-unit forecast for the target of the pair starting at input
/// timestamp t.
using Forecaster = std::function<Buffer(Index input_timestamp)>;

struct NamedForecaster {
  std::string name;
  Forecaster predict;
};

/// Scores every forecaster, preceded by persistence, on every (input, target)
/// pair of the manifest. One row per (model, channel) in channel order; per
/// sample wrmse and defined wacc values are averaged in pair order. A row's
/// ACC counts as defined only when every sample's ACC is.
MetricReport evaluate(const std::vector<NamedForecaster>& models, const DatasetManifest& manifest,
                      const std::function<const Buffer&(Index)>& state_of,
                      const Climatology& climatology);

}  // namespace tele
