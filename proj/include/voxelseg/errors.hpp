#pragma once
#include <stdexcept>
#include <string>

namespace voxelseg {

// Exit codes shared by the CLI and library error types.
enum ExitCode : int {
    exit_ok = 0,
    exit_usage = 2,
    exit_data = 3,
    exit_numeric = 4,
};

/// Malformed or inconsistent input data (bad files, dimension mismatches,
/// non-finite voxels, violated preconditions on user-supplied data).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure during computation (non-finite loss, degenerate fits).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad command-line or config usage.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace voxelseg
