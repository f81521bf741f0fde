#pragma once

#include <stdexcept>
#include <string>

namespace kvp {

// Base for all library errors. Subtypes map to CLI exit codes:
// ConfigError -> 2, InvariantError -> 3, TrainingError -> 4, others -> 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class StateError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class NotFoundError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class ContiguityError : public Error { public: using Error::Error; };
class CompositionError : public Error { public: using Error::Error; };
class InvalidCacheError : public Error { public: using Error::Error; };
class TrainingError : public Error { public: using Error::Error; };
class InvariantError : public Error { public: using Error::Error; };

} // namespace kvp
