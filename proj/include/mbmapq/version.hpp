#pragma once

namespace mbmapq {
inline constexpr const char* kVersion = "0.1.0";
}
