#pragma once

// Single-file model archive: "MDENETCK", a little-endian u64 manifest length,
// the JSON manifest, then every tensor as raw little-endian doubles.

#include <string>

#include "mdenet/train.hpp"

namespace mdenet {

inline constexpr const char* kCheckpointFormat = "mdenet-checkpoint-1";

void save_checkpoint(const TrainedModel& trained, const std::string& path);
TrainedModel load_checkpoint(const std::string& path);

}  // namespace mdenet
