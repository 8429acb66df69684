// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace covt {

/// Derives an independent seed for a named consumer ("init", "shuffle",
/// "mixup", "synth", ...) of one root seed. `index` separates repeated uses
/// of a stream, e.g. one shuffle per epoch.
std::uint64_t stream_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

inline std::mt19937_64 make_stream(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
  return std::mt19937_64(stream_seed(root, stream, index));
}

}  // namespace covt
