#pragma once

#include <string>
#include <vector>

namespace rapforge {

// Entry point shared by the binary and the tests. Returns the process exit
// code: 0 iff the requested artifact was fully written.
int run_cli(const std::vector<std::string>& args);

}  // namespace rapforge
