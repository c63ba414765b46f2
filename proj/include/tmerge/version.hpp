#pragma once

namespace tmerge {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace tmerge
