#pragma once

#include <stdexcept>
#include <string>

namespace panelwald {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SyntaxError : public Error {
public:
    SyntaxError(int line, int col, const std::string& message)
        : Error("line " + std::to_string(line) + ", col " + std::to_string(col) + ": " + message),
          line_(line), col_(col), message_(message) {}

    int line() const noexcept { return line_; }
    int col() const noexcept { return col_; }
    const std::string& message() const noexcept { return message_; }

private:
    int line_;
    int col_;
    std::string message_;
};

class DuplicateParameter : public Error {
public:
    explicit DuplicateParameter(const std::string& key)
        : Error("duplicate parameter with conflicting status: " + key), key_(key) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class SingularSystem : public Error {
public:
    SingularSystem() : Error("(I - A) is not invertible") {}
};

class NonFiniteParameter : public Error {
public:
    explicit NonFiniteParameter(std::size_t index)
        : Error("non-finite value in parameter vector at index " + std::to_string(index)) {}
};

class UnstableProcess : public Error {
public:
    explicit UnstableProcess(double radius)
        : Error("spectral radius of the transition matrix is " + std::to_string(radius) + " (must be < 1)") {}
};

class NotPositiveDefinite : public Error {
public:
    explicit NotPositiveDefinite(const std::string& which) : Error(which + " is not positive definite"), which_(which) {}
    const std::string& which() const noexcept { return which_; }

private:
    std::string which_;
};

class StartValueFailure : public Error {
public:
    StartValueFailure() : Error("implied covariance not positive definite at start values after jitter retries") {}
};

class LabelMismatch : public Error {
public:
    explicit LabelMismatch(const std::string& key) : Error("parameter missing from one of the compared fits: " + key) {}
};

class UnknownScenario : public Error {
public:
    explicit UnknownScenario(const std::string& name) : Error("unknown scenario: " + name) {}
};

class MissingColumn : public Error {
public:
    explicit MissingColumn(const std::string& name) : Error("data has no column named '" + name + "'") {}
};

class NonPdSampleCovariance : public Error {
public:
    NonPdSampleCovariance() : Error("sample covariance matrix is not positive definite") {}
};

}  // namespace panelwald
