#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace orbitseg {

// Entry point of the `orbitseg` tool. args excludes the program name.
// Returns 0 on success; on failure prints a one-line diagnostic to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace orbitseg
