#pragma once

#include <array>
#include <string>

#include "cbench/metrics.hpp"

namespace cbench {

// Rendering recipe for one odds grid: regions across, layers down (layer 0
// on top), cell fill linearly interpolated from white at `lo` to dark blue
// at `hi`.
struct HeatmapSpec {
  OddsGrid grid;
  double lo = 0.0;
  double hi = 1.0;
  std::string title;
};

// Linear white-to-dark ramp, clamped, rounded to 8-bit channels. A
// degenerate scale (hi == lo) maps v >= hi to the dark end and everything
// else to white.
std::array<int, 3> heatmap_color(double v, double lo, double hi);

std::string render_heatmap_svg(const HeatmapSpec& spec);

void emit_heatmap(const HeatmapSpec& spec, const std::string& path);

}  // namespace cbench
