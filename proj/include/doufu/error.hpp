#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace doufu {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or divergence during training.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class MissingArtifactError : public Error {
public:
    using Error::Error;
};

class UnmatchedPointError : public Error {
public:
    explicit UnmatchedPointError(std::size_t index)
        : Error("no road segment within snap radius of point " + std::to_string(index)),
          index_(index) {}
    std::size_t point_index() const { return index_; }

private:
    std::size_t index_;
};

} // namespace doufu
