#pragma once

#include <stdexcept>
#include <string>

namespace cloudflow {

/// Coarse failure classes. The CLI maps them onto process exit codes.
enum class ErrorClass { config = 2, data = 3, numerical = 4 };

inline const char* to_string(ErrorClass c) {
    switch (c) {
        case ErrorClass::config: return "config";
        case ErrorClass::data: return "data";
        case ErrorClass::numerical: return "numerical";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), cls_(cls) {}
    ErrorClass error_class() const noexcept { return cls_; }

private:
    ErrorClass cls_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorClass::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorClass::data, what) {}
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public DataError {
public:
    ParseError(const std::string& what, std::size_t line)
        : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DomainError : public DataError {
public:
    explicit DomainError(const std::string& what) : DataError(what) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& what) : Error(ErrorClass::numerical, what) {}
};

/// Tensor shape disagreement.
class DimensionError : public NumericalError {
public:
    explicit DimensionError(const std::string& what) : NumericalError(what) {}
};

/// A caller broke an operation's precondition (e.g. train-mode statistics where frozen ones are required).
class ContractError : public NumericalError {
public:
    explicit ContractError(const std::string& what) : NumericalError(what) {}
};

}  // namespace cloudflow
