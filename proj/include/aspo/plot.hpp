// SPDX-License-Identifier: Apache-2.0
#pragma once

// Static SVG heatmap of a weight surface: pi_old on x, pi_theta on y
// (increasing upwards), colour by weight, hard-masked cells hatched.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "aspo/error.hpp"
#include "aspo/objectives.hpp"

namespace aspo {

struct Rgb {
  int r, g, b;
};

/// Piecewise-linear dark-blue -> teal -> yellow ramp, t in [0, 1].
inline Rgb ramp(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops = {{
      {68, 1, 84},
      {59, 82, 139},
      {33, 145, 140},
      {94, 201, 98},
      {253, 231, 37},
  }};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double x = t * static_cast<double>(stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(x), stops.size() - 2);
  const double f = x - static_cast<double>(i);
  auto mix = [&](std::size_t c) { return static_cast<int>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c]))); };
  return {mix(0), mix(1), mix(2)};
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct HeatmapStyle {
  int cell = 5;  // pixels per grid cell
  int margin_left = 70;
  int margin_bottom = 60;
  int margin_top = 40;
  int colorbar = 90;  // room on the right
};

/// Renders a resolution x resolution surface (pi_old major, as produced by
/// surface_grid) to SVG text.
inline std::string surface_svg(std::span<const SurfacePoint> points, std::size_t resolution, const std::string& title,
                               const HeatmapStyle& st = {}) {
  if (points.size() != resolution * resolution) throw Error(ErrorCode::shape_mismatch, "surface is not square");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& p : points) {
    if (p.result.hard_masked) continue;
    lo = std::min(lo, p.result.weight);
    hi = std::max(hi, p.result.weight);
  }
  if (!(hi > lo)) {
    lo = std::isfinite(lo) ? lo - 0.5 : 0.0;
    hi = lo + 1.0;
  }
  const int n = static_cast<int>(resolution);
  const int side = n * st.cell;
  const int width = st.margin_left + side + st.colorbar;
  const int height = st.margin_top + side + st.margin_bottom;
  const int x0 = st.margin_left, y0 = st.margin_top;

  std::string out;
  char buf[512];
  auto emit = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out += buf;
  };

  emit("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\" "
       "font-family=\"sans-serif\" font-size=\"12\">\n",
       width, height, width, height);
  out += "<defs><pattern id=\"hatch\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" "
         "patternTransform=\"rotate(45)\"><rect width=\"6\" height=\"6\" fill=\"#d9d9d9\"/>"
         "<line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" stroke=\"#555555\" stroke-width=\"2\"/></pattern></defs>\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  emit("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" font-size=\"14\">%s</text>\n", x0 + side / 2, y0 - 15,
       xml_escape(title).c_str());

  // Cells: column = pi_old index, row from the top = highest pi_theta first.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const auto& p = points[static_cast<std::size_t>(i) * resolution + static_cast<std::size_t>(j)];
      const int x = x0 + i * st.cell;
      const int y = y0 + (n - 1 - j) * st.cell;
      if (p.result.hard_masked) {
        emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"url(#hatch)\"/>\n", x, y, st.cell, st.cell);
      } else {
        const Rgb c = ramp((p.result.weight - lo) / (hi - lo));
        emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#%02x%02x%02x\"/>\n", x, y, st.cell, st.cell,
             c.r, c.g, c.b);
      }
    }
  }
  emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" stroke=\"black\"/>\n", x0, y0, side, side);

  // Axes: ticks at 0.2 steps.
  for (int k = 0; k <= 5; ++k) {
    const double v = 0.2 * k;
    const int px = x0 + static_cast<int>(std::lround(v * side));
    const int py = y0 + side - static_cast<int>(std::lround(v * side));
    emit("<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", px, y0 + side, px, y0 + side + 5);
    emit("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%.1f</text>\n", px, y0 + side + 18, v);
    emit("<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", x0 - 5, py, x0, py);
    emit("<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%.1f</text>\n", x0 - 8, py + 4, v);
  }
  emit("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">pi_old</text>\n", x0 + side / 2, y0 + side + 40);
  emit("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" transform=\"rotate(-90 %d %d)\">pi_theta</text>\n", x0 - 45,
       y0 + side / 2, x0 - 45, y0 + side / 2);

  // Colour bar.
  const int bx = x0 + side + 20, bw = 16, steps = 50;
  for (int s = 0; s < steps; ++s) {
    const Rgb c = ramp((s + 0.5) / steps);
    const int by = y0 + side - (s + 1) * side / steps;
    emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#%02x%02x%02x\"/>\n", bx, by, bw,
         side / steps + 1, c.r, c.g, c.b);
  }
  emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" stroke=\"black\"/>\n", bx, y0, bw, side);
  emit("<text x=\"%d\" y=\"%d\">%.3f</text>\n", bx + bw + 4, y0 + 10, hi);
  emit("<text x=\"%d\" y=\"%d\">%.3f</text>\n", bx + bw + 4, y0 + side, lo);
  emit("<text x=\"%d\" y=\"%d\">weight</text>\n", bx - 4, y0 - 6);
  emit("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"url(#hatch)\" stroke=\"black\"/>\n", bx,
       y0 + side + 20, bw, bw);
  emit("<text x=\"%d\" y=\"%d\">masked</text>\n", bx + bw + 4, y0 + side + 32);
  out += "</svg>\n";
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  os << text;
  if (!os) throw Error(ErrorCode::io_error, "failed writing " + path);
}

}  // namespace aspo
