#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ice {

/// Process exit codes of the `ice` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,        // unexpected runtime failure
  kExitBadConfig = 2,      // invalid flags, config file or parameter values
  kExitBadBundle = 3,      // bundle missing, unreadable or failing validation
  kExitIdOutOfRange = 4,   // predict: sample id outside [0, N)
};

/// Runs the command line `args` (args[0] is the program name). Human-readable
/// output goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ice
