#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace normgame::cli {

/// Runs the `normgame` command line. Returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace normgame::cli
