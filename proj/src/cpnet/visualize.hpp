#pragma once

#include <iosfwd>
#include <string>

#include "cpnet/model.hpp"
#include "cpnet/toy_data.hpp"

namespace cpnet {

struct VisualizeSummary {
  std::size_t anchors = 0;   // anchor records written
  std::size_t heatmaps = 0;  // heatmap records written (one per frame)
};

/// Runs one eval-mode forward pass of a CPNet on `sample` and writes JSONL:
///
///   {"kind":"anchor","module":0,"t":..,"h":..,"w":..,
///    "neighbors":[{"t":..,"h":..,"w":..,"active":bool}, ...],   // k entries, best first
///    "heat":float, "zeta":[[C floats] x k], "g":[C floats]}
///   {"kind":"heatmap","module":0,"t":..,"heat":[[W floats] x H]}
///
/// `active` marks slots that win at least one channel of the max; zeta holds
/// the per-slot MLP outputs so the sets can be recomputed offline.
VisualizeSummary write_visualization(std::ostream& out, ToyModel& model, const ToySample& sample);

void write_visualization(const std::string& path, ToyModel& model, const ToySample& sample);

}  // namespace cpnet
