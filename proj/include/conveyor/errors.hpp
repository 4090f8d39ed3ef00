#pragma once

#include <stdexcept>
#include <string>

namespace conveyor {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user input: malformed config, missing keys, invalid parameters.
struct ConfigError : Error {
    using Error::Error;
};

struct DomainError : Error {
    using Error::Error;
};

struct SingularEvaluation : Error {
    using Error::Error;
};

struct BoundsError : Error {
    using Error::Error;
};

struct NoZeroFound : Error {
    using Error::Error;
};

struct DegenerateConfiguration : Error {
    using Error::Error;
};

struct SolverError : Error {
    using Error::Error;
};

struct ContinuityError : Error {
    ContinuityError(const std::string& what, double s) : Error(what), position(s) {}
    double position;
};

struct SlewError : Error {
    SlewError(const std::string& what, double t) : Error(what), time(t) {}
    double time;
};

struct IntegrationError : Error {
    using Error::Error;
};

struct StepSizeError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

}  // namespace conveyor
