#pragma once

#include <stdexcept>
#include <string>

namespace atc {

// Base for everything thrown by this library. Subtypes map to the CLI's
// exit-code policy: usage problems are caught by the parser, everything
// below exits with code 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shapes do not line up (caller bug).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (bad dims, non-integral conv output, ...).
struct ConfigError : Error {
    using Error::Error;
};

// An API precondition was violated (non-scalar loss, k out of range, ...).
struct ContractError : Error {
    using Error::Error;
};

// Training diverged or produced non-finite values.
struct TrainError : Error {
    using Error::Error;
};

// A frozen component was mutated, or gradients reached it.
struct IntegrityError : Error {
    using Error::Error;
};

// Malformed input file (CSV, checkpoint, episode container).
struct ParseError : Error {
    using Error::Error;
};

}  // namespace atc
