#pragma once

#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "adaptime/error.hpp"

namespace adaptime {

inline constexpr std::string_view kToolVersion = "adaptime 0.1.0";

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitIo = 5;

int exit_code(ErrorKind kind);

// Runs one command line; `args` excludes the program name. Never throws.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace adaptime
