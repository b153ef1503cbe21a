// Command-line front end: extract, vectorize, stats, train, predict,
// evaluate, layout.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ember::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace ember::cli
