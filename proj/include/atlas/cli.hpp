#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace atlas::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUnknownCommand = 2;
inline constexpr int kExitConfig = 3;

/// Runs one subcommand; `args` excludes the program name. Summaries go to
/// `out`, diagnostics ("error: <category>: <message>") to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace atlas::cli
