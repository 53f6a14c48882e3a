#pragma once

#include <stdexcept>
#include <string>

namespace photodoodle {

struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// bad shapes / dimension mismatches between tensors
struct shape_error : error {
    explicit shape_error(const std::string& msg) : error(msg) {}
};

// invalid configuration or contract violation (bad hyperparameters, bad CLI config)
struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

// broken files, missing corpora, failed IO, format violations
struct data_error : error {
    explicit data_error(const std::string& msg) : error(msg) {}
};

// non-finite values, failed numeric invariants
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

}  // namespace photodoodle
