#pragma once

#include <stdexcept>
#include <string>

namespace rswm {

/// Precondition violation on caller-supplied data.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Configuration file or flag violates the documented schema.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A training stage was started from a checkpoint with the wrong stage tag.
class StageOrderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Network or service failure talking to an external client. Retrying may succeed.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// External service replied, but the reply does not follow the expected format.
class MalformedResponse : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A persisted artifact failed its format or content-hash check.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw InvalidInput(message);
    }
}

} // namespace rswm
