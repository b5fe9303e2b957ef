#include "tele/evaluation.hpp"

#include <cstdio>
#include <fstream>

namespace tele {

const MetricRow& MetricReport::row(const std::string& model, const std::string& variable) const {
  for (const auto& r : rows) {
    if (r.model == model && r.variable == variable) return r;
  }
  throw MetricError("no metric row for " + model + "/" + variable);
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void MetricReport::write_csv(std::ostream& os) const {
  os << "model,variable,horizon_steps,wrmse,wacc,acc_defined,n_samples\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.variable << ',' << r.horizon_steps << ',' << fmt(r.wrmse) << ','
       << (r.acc_defined ? fmt(r.wacc) : std::string()) << ',' << (r.acc_defined ? 1 : 0) << ','
       << r.n_samples << '\n';
  }
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_csv(os);
}

MetricReport evaluate(const std::vector<NamedForecaster>& models, const DatasetManifest& manifest,
                      const std::function<const Buffer&(Index)>& state_of,
                      const Climatology& climatology) {
  if (manifest.pairs.empty()) throw MetricError("evaluate: manifest " + manifest.split + " has no pairs");
  const GridSpec& grid = manifest.grid;
  if (!(climatology.grid == grid)) throw MetricError("evaluate: climatology grid differs from manifest");
  const Index channels = channel_count(grid);
  const Index cells = grid.cells();
  const LatWeights<double> w = lat_weights(grid);
  const auto labels = channel_labels(grid);

  std::vector<NamedForecaster> all;
  all.push_back({"persistence", [&](Index t) { return persistence(state_of(t)); }});
  all.insert(all.end(), models.begin(), models.end());

  MetricReport report;
  report.split = manifest.split;
  report.seed = manifest.seed;
  for (const auto& m : all) {
    std::vector<double> rmse_sum(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> acc_sum(static_cast<std::size_t>(channels), 0.0);
    std::vector<Index> acc_count(static_cast<std::size_t>(channels), 0);
    for (const auto& [t_in, t_out] : manifest.pairs) {
      const Buffer pred = m.predict(t_in);
      const Buffer& target = state_of(t_out);
      if (pred.size() != channels * cells || target.size() != channels * cells) {
        throw MetricError("evaluate: model " + m.name + " returned " + std::to_string(pred.size()) +
                          " values, expected " + std::to_string(channels * cells));
      }
      const auto clim = climatology.at(t_out);
      for (Index c = 0; c < channels; ++c) {
        using Field = Eigen::Map<const MatrixRM>;
        Field p(pred.data() + c * cells, grid.n_lat, grid.n_lon);
        Field y(target.data() + c * cells, grid.n_lat, grid.n_lon);
        Field k(clim.data() + c * cells, grid.n_lat, grid.n_lon);
        const auto ci = static_cast<std::size_t>(c);
        rmse_sum[ci] += wrmse(p, y, w);
        const auto acc = wacc(p, y, k, w);
        if (acc.defined) {
          acc_sum[ci] += acc.value;
          ++acc_count[ci];
        }
      }
    }
    const Index n = static_cast<Index>(manifest.pairs.size());
    for (Index c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      MetricRow r;
      r.model = m.name;
      r.variable = labels[ci];
      r.horizon_steps = manifest.horizon_steps;
      r.wrmse = rmse_sum[ci] / static_cast<double>(n);
      r.acc_defined = acc_count[ci] == n;
      r.wacc = acc_count[ci] > 0 ? acc_sum[ci] / static_cast<double>(acc_count[ci]) : 0.0;
      r.n_samples = n;
      report.rows.push_back(std::move(r));
    }
  }
  return report;
}

}  // namespace tele
