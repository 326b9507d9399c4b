#pragma once

namespace vidit {
inline constexpr const char* kToolVersion = "0.1.0";
}
