#ifndef HSAE_ERRORS_HPP
#define HSAE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace hsae {

// Invalid arguments are reported with std::invalid_argument; the types below
// cover the remaining failure classes.

/// Input is well-formed but mathematically unusable (zero vector, zero column).
class DegenerateInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A non-finite value appeared in a gradient or intermediate.
class NumericFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// On-disk file does not match the expected format (magic, version, shape).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File is truncated or its payload disagrees with its header.
class CorruptionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A metric is undefined for the given inputs.
class UndefinedMetric : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hsae

#endif  // HSAE_ERRORS_HPP
