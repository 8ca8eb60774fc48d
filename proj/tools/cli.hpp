#pragma once

#include <string>
#include <vector>

namespace preroute::cli {

/// Runs one `preroute` command line (args[0] is the program name) and
/// returns the process exit code: 0 on success, 1 on a failed command, 2 on
/// a usage error.
int run(const std::vector<std::string>& args);

std::string version();

}  // namespace preroute::cli
