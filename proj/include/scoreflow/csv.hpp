#pragma once

#include <cstdio>
#include <string>

namespace scoreflow {

// 17 significant digits: round-trips every double.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace scoreflow
