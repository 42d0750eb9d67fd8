#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spem {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// p0 = p1 = 0 makes the mixing weight undefined.
class DegenerateCoefficientError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

}  // namespace spem
