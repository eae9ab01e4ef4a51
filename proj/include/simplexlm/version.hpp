#pragma once

namespace simplexlm {

inline constexpr const char* kVersionTag = "simplexlm 0.1.0";

} // namespace simplexlm
