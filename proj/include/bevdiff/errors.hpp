#pragma once

#include <stdexcept>
#include <string>

namespace bevdiff {

// Error hierarchy. Every failure mode the library reports maps onto one of
// these so callers (and the CLI) can translate them into exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/size disagreement between tensors or between a tensor and an op.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value (bad range, inconsistent fields, unknown key).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// An argument outside its mathematical domain (e.g. timestep out of range).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& msg) : Error(msg) {}
};

// A non-finite value appeared where finite math was required, or an
// iterative numeric routine failed to converge.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

// Training-loop contract violations (missing gradient, divergence).
class TrainingError : public Error {
public:
    explicit TrainingError(const std::string& msg) : Error(msg) {}
};

// Using a component before it is ready (untrained codec, uninitialized state).
class StateError : public Error {
public:
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// Corrupt, truncated, or wrong-version files.
class IntegrityError : public Error {
public:
    explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

// Scenario generation could not satisfy its constraints.
class GenerationError : public Error {
public:
    explicit GenerationError(const std::string& msg) : Error(msg) {}
};

// Filesystem failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace bevdiff
