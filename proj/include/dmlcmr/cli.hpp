#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dmlcmr::cli {

/// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Runs one subcommand (gen, fit, bench, ortho-check, rate, nu). `args`
/// excludes the program name. Machine-readable status goes to `out` on
/// success and to `err` as a JSON object on failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dmlcmr::cli
