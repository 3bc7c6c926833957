#pragma once

#include <cstdint>
#include <random>

namespace mdenet {

// All randomness flows through explicitly passed engines; nothing is global.
using Rng = std::mt19937_64;

}  // namespace mdenet
