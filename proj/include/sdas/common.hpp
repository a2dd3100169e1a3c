// Shared basics: shapes, errors, deterministic seeding helpers.
#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdas {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/axis violations in primitives; message names the primitive and axes.
struct ShapeError : Error {
    using Error::Error;
};

// Malformed files, bad config keys, schema violations.
struct ParseError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Non-finite loss during optimization; carries the snapshot location if one was written.
struct DivergenceError : Error {
    using Error::Error;
};

inline index_t numel(const Shape& shape) {
    index_t n = 1;
    for (index_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

// "same" padding output rule: out = ceil(in / stride).
inline index_t same_out_extent(index_t in, index_t stride) {
    return (in + stride - 1) / stride;
}

// splitmix64; used to derive per-component seeds from one master seed.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return mix64(master ^ mix64(stream));
}

}  // namespace sdas
