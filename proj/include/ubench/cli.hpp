#pragma once

// `ubench` command line: partition, sweep, train, evaluate, report, selftest.

#include <atomic>

namespace ubench::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPartial = 1;
inline constexpr int kExitConfig = 2;

/// Parses argv and runs the subcommand. Logs go to stderr.
int run(int argc, const char* const* argv);

/// Set by SIGINT/SIGTERM once install_signal_handlers has run; no new runs
/// start after it is set.
std::atomic<bool>& stop_flag();
void install_signal_handlers();

}  // namespace ubench::cli
