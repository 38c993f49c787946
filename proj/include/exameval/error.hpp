#pragma once

#include <stdexcept>
#include <string>

namespace exameval {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    ok = 0,
    validation_failure = 1,
    transport_failure = 2,
    config_error = 3,
};

/// Base of every error the library throws. `kind()` is the machine-readable
/// tag written to stderr by the CLI; `exit_code()` maps onto `ExitCode`.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
    virtual ExitCode exit_code() const noexcept { return ExitCode::validation_failure; }
};

/// Malformed or out-of-contract input data.
class InputError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "input_error"; }
};

/// Benchmark file could not be loaded; message names the JSON path.
class LoadError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "load_error"; }
};

class ValidationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "validation_error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config_error"; }
    ExitCode exit_code() const noexcept override { return ExitCode::config_error; }
};

/// Endpoint unreachable or retries exhausted. Carries the last HTTP status
/// (0 when the failure happened below HTTP).
class TransportError : public Error {
public:
    TransportError(const std::string& what, int last_status)
        : Error(what), last_status_(last_status) {}
    int last_status() const noexcept { return last_status_; }
    const char* kind() const noexcept override { return "transport_error"; }
    ExitCode exit_code() const noexcept override { return ExitCode::transport_failure; }

private:
    int last_status_;
};

/// The endpoint answered, but not in the chat-completions shape.
class ProtocolError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "protocol_error"; }
    ExitCode exit_code() const noexcept override { return ExitCode::transport_failure; }
};

/// Evaluator output could not be turned into a grade.
class GradeParseError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "grade_parse_error"; }
};

/// A GradeBook lacks an entry that an aggregation needs.
class IncompleteError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "incomplete_error"; }
};

/// Statistical procedure cannot produce a value for this input.
class StatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "stat_error"; }
};

}  // namespace exameval
