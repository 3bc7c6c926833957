#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "mdenet/train.hpp"

namespace mdenet {

// Per-step loss curves (cls, disc, excl, total), each normalized to its own range.
std::string loss_curve_svg(const TrainHistory& history);
std::string loss_curve_svg(const std::string& loss_csv_text);

// Three 8x8 heatmaps from GridResult::panels(); blank cells are inadmissible.
std::string grid_heatmap_svg(const nlohmann::json& panels);

}  // namespace mdenet
