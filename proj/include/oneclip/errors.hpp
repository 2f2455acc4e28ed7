#pragma once

#include <stdexcept>
#include <string>

namespace oneclip {

// Error taxonomy shared across the library. Everything derives from Error so
// callers can catch the whole family at once.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RangeError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ArgumentError : Error { using Error::Error; };
struct BoundsError : Error { using Error::Error; };
struct KeyError : Error { using Error::Error; };
struct LengthMismatchError : Error { using Error::Error; };
struct BackendError : Error { using Error::Error; };
struct UnsupportedError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct VersionError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };

}  // namespace oneclip
