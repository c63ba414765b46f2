#pragma once

#include <stdexcept>
#include <string>

namespace tmerge {

// Raised for bad inputs: malformed files, invalid recipes, missing
// checkpoints, out-of-range parameters. The CLI maps these to exit code 1;
// anything else escaping to main is an internal error (exit code 2).
class user_error : public std::runtime_error {
public:
    explicit user_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tmerge
