#include "mdenet/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "mdenet/errors.hpp"

namespace mdenet {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"};

// Blue-to-yellow ramp.
std::string ramp(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(68 + t * (253 - 68));
  const int g = static_cast<int>(1 + t * (231 - 1));
  const int b = static_cast<int>(84 + t * (37 - 84));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace

std::string loss_curve_svg(const TrainHistory& history) {
  const double w = 640, h = 360, pad = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << pad << "\" y=\"20\" font-size=\"14\">loss per step (each curve min-max scaled)</text>\n";
  const char* names[] = {"cls", "disc", "excl", "total"};
  const auto n = history.steps.size();
  for (int c = 0; c < 4; ++c) {
    std::vector<double> ys;
    for (const auto& s : history.steps) ys.push_back(c == 0 ? s.cls : c == 1 ? s.disc : c == 2 ? s.excl : s.total);
    svg << "<text x=\"" << w - 110 << "\" y=\"" << 40 + 16 * c << "\" font-size=\"12\" fill=\"" << kColors[c]
        << "\">" << names[c] << "</text>\n";
    if (ys.empty()) continue;
    const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
    const double span = *hi - *lo > 0 ? *hi - *lo : 1.0;
    svg << "<polyline fill=\"none\" stroke=\"" << kColors[c] << "\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pad + (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0) * (w - 2 * pad - 80);
      const double y = h - pad - (ys[i] - *lo) / span * (h - 2 * pad);
      svg << num(x) << ',' << num(y) << ' ';
    }
    svg << "\"/>\n";
  }
  svg << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad - 80 << "\" y2=\"" << h - pad
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << pad << "\" y=\"" << h - 12 << "\" font-size=\"12\">step 0 .. " << (n ? n - 1 : 0)
      << "</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::string loss_curve_svg(const std::string& loss_csv_text) {
  TrainHistory history;
  std::istringstream in(loss_csv_text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,step,cls,disc,excl,total", 0) != 0) throw ParseError("loss.csv: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepRecord r;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf,%lf,%lf", &r.epoch, &r.step, &r.cls, &r.disc,
                    &r.excl, &r.total, &r.rho, &r.sub_norm) != 8) {
      throw ParseError("loss.csv: malformed row: " + line);
    }
    history.steps.push_back(r);
  }
  return loss_curve_svg(history);
}

std::string grid_heatmap_svg(const nlohmann::json& panels) {
  const double cell = 32, pad = 40, gap = 30;
  const double panel = 8 * cell;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 3 * panel + 2 * gap + 2 * pad << "\" height=\""
      << panel + 2 * pad + 20 << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const char* keys[] = {"cls_acc", "det_acc", "mean"};
  try {
    for (int p = 0; p < 3; ++p) {
      const double x0 = pad + p * (panel + gap);
      svg << "<text x=\"" << x0 << "\" y=\"" << pad - 10 << "\" font-size=\"14\">" << keys[p]
          << " (row alpha, col beta)</text>\n";
      const auto& m = panels.at(keys[p]);
      for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
          const auto& v = m.at(r).at(c);
          const double x = x0 + static_cast<double>(c) * cell, y = pad + static_cast<double>(r) * cell;
          if (v.is_null()) {
            svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
                << "\" fill=\"#eeeeee\"/>\n";
            continue;
          }
          const double val = v.get<double>();
          svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
              << "\" fill=\"" << ramp(val) << "\"/>\n<text x=\"" << x + 3 << "\" y=\"" << y + 20
              << "\" font-size=\"9\">" << num(val) << "</text>\n";
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("grid panels: ") + e.what());
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace mdenet
