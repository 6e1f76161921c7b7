#pragma once

#include <stdexcept>
#include <string>

namespace cal3 {

// Error taxonomy used across the library. All are runtime_errors so callers
// that do not care about the category can catch one type; the CLI maps each
// category to a stable exit code.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated API contract (bad argument combination, empty batch, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint or vocabulary incompatible with the requested configuration.
struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss or gradient.
struct DivergedError : std::runtime_error {
    explicit DivergedError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cal3
