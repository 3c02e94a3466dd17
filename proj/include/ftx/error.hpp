#pragma once

#include <stdexcept>
#include <string>

namespace ftx {

// Base class for everything thrown by this library.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension / shape disagreement between operands.
class shape_error : public error {
public:
    explicit shape_error(const std::string& msg) : error(msg) {}
};

// A precondition of an operation was violated (bad argument, consumed tape,
// out-of-range token ID, ...).
class contract_error : public error {
public:
    explicit contract_error(const std::string& msg) : error(msg) {}
};

// A primitive produced NaN/Inf, or an input was numerically degenerate
// (e.g. a fully masked score column).
class numeric_error : public error {
public:
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

// File could not be read or written.
class io_error : public error {
public:
    explicit io_error(const std::string& msg) : error(msg) {}
};

// A persisted artifact (checkpoint, vocabulary, token dump) is malformed.
class parse_error : public error {
public:
    enum class kind {
        bad_magic,
        bad_version,
        bad_crc,
        missing_tensor,
        unknown_tensor,
        truncated,
        malformed,
    };

    parse_error(kind k, const std::string& msg) : error(msg), kind_(k) {}
    kind which() const noexcept { return kind_; }

private:
    kind kind_;
};

}  // namespace ftx
