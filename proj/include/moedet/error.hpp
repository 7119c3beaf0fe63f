#pragma once

#include <stdexcept>
#include <string>

namespace moedet {

// Shape/contract violations raised by tensor ops and model code.
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset / checkpoint / report file problems.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite math is required.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration values (image size, expert mismatch, ...).
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace moedet
