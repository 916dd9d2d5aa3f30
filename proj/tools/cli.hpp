#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace popk::cli {

inline constexpr int kExitSuccess = 0;
inline constexpr int kExitAnalysisFailure = 1;
inline constexpr int kExitUsage = 2;

// Runs one command line (without the program name). Messages go to `out` and
// `err`; artifacts go to the output directory.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace popk::cli
