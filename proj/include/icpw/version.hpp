#pragma once

namespace icpw {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace icpw
