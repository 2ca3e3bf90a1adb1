#include "cbench/heatmap.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace cbench {

namespace {

constexpr std::array<int, 3> kDark = {8, 48, 107};
constexpr std::array<int, 3> kWhite = {255, 255, 255};

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::array<int, 3> heatmap_color(double v, double lo, double hi) {
  double t;
  if (!std::isfinite(v)) {
    t = 0.0;
  } else if (hi == lo) {
    t = v >= hi ? 1.0 : 0.0;
  } else {
    t = (v - lo) / (hi - lo);
    t = std::min(1.0, std::max(0.0, t));
  }
  std::array<int, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    rgb[c] = static_cast<int>(
        std::lround(kWhite[c] + (kDark[c] - kWhite[c]) * t));
  }
  return rgb;
}

std::string render_heatmap_svg(const HeatmapSpec& spec) {
  const int L = static_cast<int>(spec.grid.values.rows());
  const int R = static_cast<int>(spec.grid.values.cols());
  if (L == 0 || R == 0) {
    throw MetricsError("render_heatmap_svg: empty grid");
  }
  const int cell = 48;
  const int left = 64;
  const int top = 40;
  const int bottom = 72;
  const int width = left + R * cell + 16;
  const int height = top + L * cell + bottom;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" "
         "width=\""
      << width << "\" height=\"" << height << "\">\n";
  if (!spec.title.empty()) {
    svg << "  <text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\""
        << " font-size=\"14\">" << xml_escape(spec.title) << "</text>\n";
  }
  for (int l = 0; l < L; ++l) {
    for (int r = 0; r < R; ++r) {
      const auto rgb = heatmap_color(spec.grid.values(l, r), spec.lo,
                                     spec.hi);
      svg << "  <rect x=\"" << left + r * cell << "\" y=\""
          << top + l * cell << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"rgb(" << rgb[0] << "," << rgb[1] << ","
          << rgb[2] << ")\" stroke=\"#888888\" stroke-width=\"1\"/>\n";
    }
    svg << "  <text x=\"" << left - 8 << "\" y=\""
        << top + l * cell + cell / 2 + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\" "
           "text-anchor=\"end\">layer "
        << l << "</text>\n";
  }
  for (int r = 0; r < R; ++r) {
    const std::string label =
        r < static_cast<int>(spec.grid.region_labels.size())
            ? spec.grid.region_labels[r]
            : ("region " + std::to_string(r));
    svg << "  <text x=\"" << left + r * cell + cell / 2 << "\" y=\""
        << top + L * cell + 16
        << "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"middle\">"
        << xml_escape(label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_heatmap(const HeatmapSpec& spec, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MetricsError("cannot write " + path);
  out << render_heatmap_svg(spec);
  if (!out) throw MetricsError("write failed: " + path);
}

}  // namespace cbench
