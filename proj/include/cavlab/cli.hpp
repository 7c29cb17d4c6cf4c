#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime or I/O error,
// 2 usage error, 3 no result (e.g. fetch outside the geofence).

#include <iosfwd>
#include <string>
#include <vector>

namespace cavlab {

inline constexpr const char* kToolVersion = "0.1.0";

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cavlab
