#pragma once

// Command-line front end for the whole pipeline. Exit codes: 0 success,
// 1 usage error, 2 data error (missing or malformed input), 3 internal error.

#include <string>
#include <vector>

namespace stldp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

/// `args` excludes the program name.
int run(const std::vector<std::string>& args);

/// Git-style blob hash (SHA-1 of "blob <size>\0" + content), lowercase hex.
std::string content_hash(const std::string& bytes);

}  // namespace stldp::cli
