#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace perft {

// Exit codes of the perft_lab tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitIo = 3;

// Runs one command line (arguments after the program name) and returns the
// exit code. Results go to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace perft
