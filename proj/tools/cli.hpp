#pragma once

#include <string>
#include <vector>

namespace malfuse::cli {

// Runs one subcommand. Returns 0 on success, 2 on a usage error and 1 on a
// runtime failure. Logs go to standard error.
int run(const std::vector<std::string>& args);

}  // namespace malfuse::cli
