#pragma once

// Command-line front end. The executable only forwards argv here so the
// commands can be driven from tests.

#include <iosfwd>
#include <string>
#include <vector>

#include "nspexit/error.hpp"

namespace nspexit {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

int exit_code_for(ErrorKind kind);

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "0.1,0.5,2" or "lin:<start>:<stop>:<count>" (inclusive endpoints).
std::vector<double> parse_grid(const std::string& text);

}  // namespace nspexit
