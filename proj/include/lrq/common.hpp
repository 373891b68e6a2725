#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lrq {

// Error hierarchy. Everything user-facing derives from Error so the CLI can
// map exception classes onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents or operand shapes do not line up.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (bit-width out of bounds, bad range, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or missing external data (dataset files, checkpoints).
struct DataError : Error {
    using Error::Error;
};

// Numerical failure: NaN/Inf reached a loss or parameter.
struct NumericError : Error {
    using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e < 0) throw ShapeError("negative extent in shape");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline void check_shape_valid(const Shape& shape) {
    for (int64_t e : shape) {
        if (e <= 0) throw ShapeError("degenerate tensor extent in shape " + shape_str(shape));
    }
}

// Single deterministic RNG. Every random decision in a run flows from one
// seeded engine (or a child split off it), so reruns reproduce bit-identical
// results.
class RandomEngine {
public:
    explicit RandomEngine(uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(gen_);
    }

    /// Deterministically derive an independent child seed.
    uint64_t split() {
        return gen_();
    }

    std::mt19937_64& raw() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace lrq
