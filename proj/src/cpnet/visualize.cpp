#include "cpnet/visualize.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "cpnet/errors.hpp"

namespace cpnet {

VisualizeSummary write_visualization(std::ostream& out, ToyModel& model, const ToySample& sample) {
  require(model.kind() == ModelKind::CPNet, "visualize needs a model with a CP module");
  const std::vector<ToySample> one{sample};
  CpTrace trace;
  {
    Tape tape;
    model.forward(tape, make_batch(one), Mode::Eval, false, &trace);
  }
  const FrameDims& d = trace.dims;
  const std::size_t P = d.points(), k = trace.topk.k, C = trace.before.dim(1);
  const Tensor heat = feature_change_heatmap(trace.before, trace.after, d);

  VisualizeSummary summary;
  for (std::size_t i = 0; i < P; ++i) {
    const std::vector<std::int32_t> active = activation_set(trace.provenance, i);
    nlohmann::json rec;
    rec["kind"] = "anchor";
    rec["module"] = 0;
    rec["t"] = i / d.plane();
    rec["h"] = (i % d.plane()) / d.w;
    rec["w"] = i % d.w;
    auto& nbrs = rec["neighbors"] = nlohmann::json::array();
    auto& zeta = rec["zeta"] = nlohmann::json::array();
    for (std::size_t j = 0; j < k; ++j) {
      const auto r = static_cast<std::size_t>(trace.topk.values[i * k + j]);
      const bool on = std::find(active.begin(), active.end(), static_cast<std::int32_t>(j)) != active.end();
      nbrs.push_back({{"t", r / d.plane()}, {"h", (r % d.plane()) / d.w}, {"w", r % d.w}, {"active", on}});
      const float* z = trace.zeta.ptr() + (i * k + j) * C;
      zeta.push_back(std::vector<float>(z, z + C));
    }
    rec["heat"] = heat[i];
    const float* g = trace.output.ptr() + i * C;
    rec["g"] = std::vector<float>(g, g + C);
    out << rec.dump() << '\n';
    ++summary.anchors;
  }
  for (std::size_t t = 0; t < d.t; ++t) {
    nlohmann::json grid = nlohmann::json::array();
    for (std::size_t h = 0; h < d.h; ++h) {
      const float* row = heat.ptr() + (t * d.h + h) * d.w;
      grid.push_back(std::vector<float>(row, row + d.w));
    }
    out << nlohmann::json{{"kind", "heatmap"}, {"module", 0}, {"t", t}, {"heat", std::move(grid)}}.dump() << '\n';
    ++summary.heatmaps;
  }
  return summary;
}

void write_visualization(const std::string& path, ToyModel& model, const ToySample& sample) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open visualization output: " + path);
  write_visualization(out, model, sample);
  if (!out.flush()) throw IoError("write failed: " + path);
}

}  // namespace cpnet
