#pragma once

#include <stdexcept>
#include <string>

namespace attnvat {

// File, format, or checkpoint problems. Messages carry the offending
// path and, where known, the line number or record index.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a training run produces a non-finite loss.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, int epoch, int step)
        : std::runtime_error(what), epoch(epoch), step(step) {}

    int epoch;
    int step;
};

}  // namespace attnvat
