#pragma once

#include <stdexcept>
#include <string>

namespace tilewise {

/// Base class for every error raised by the library. `category()` is a short
/// machine-parsable tag used by the CLI when reporting failures.
class error : public std::runtime_error {
public:
    explicit error(const std::string& what) : std::runtime_error(what) {}
    [[nodiscard]] virtual const char* category() const noexcept { return "error"; }
};

class shape_error : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "shape"; }
};

class numeric_error : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "numeric"; }
};

class invalid_argument : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "argument"; }
};

class config_error : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "config"; }
};

class io_error : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "io"; }
};

/// Raised when stain normalization cannot estimate a stain basis.
class normalization_error : public error {
public:
    using error::error;
    [[nodiscard]] const char* category() const noexcept override { return "normalization"; }
};

}  // namespace tilewise
