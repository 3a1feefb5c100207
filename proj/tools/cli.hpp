#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace jstts::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitRuntime = 3,
  kExitAcceptance = 4,
};

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace jstts::cli
