#pragma once

// Fast invariant suite behind `rswm verify`.

#include <string>
#include <vector>

namespace rswm::cli {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

std::vector<CheckResult> run_invariant_suite();

} // namespace rswm::cli
