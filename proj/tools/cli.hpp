#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gatenorm::cli {

/// Exit codes of the command-line tool.
enum ExitCode : int {
    kSuccess = 0,
    kInternal = 1,
    kUsage = 2,
    kInputFormat = 3,
    kContract = 4,
};

inline constexpr const char* kToolVersion = "0.1.0";

/// Run one command line (args[0] is the program name). Normal output goes
/// to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gatenorm::cli
