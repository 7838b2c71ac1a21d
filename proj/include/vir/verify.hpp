#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace vir::verify {

struct PropertyResult {
    std::string name;
    double max_dev = 0.0;
    double tolerance = 0.0;
    bool pass = true;
    std::vector<std::string> failures;  // worst offending cases with their seeds
};

struct Report {
    double tolerance = 1e-9;
    std::uint64_t seed = 42;
    std::vector<PropertyResult> properties;

    bool all_pass() const {
        for (const auto& p : properties)
            if (!p.pass) return false;
        return true;
    }
};

// Runs every equivalence and structure property from the 1D, 2D, and encoder
// modules. Mode-equivalence deviations are judged against `tolerance`;
// structural properties (mask exactness, causality, determinism) are exact.
Report run_equivalence_suite(double tolerance, std::uint64_t seed);

void print_report(const Report& report, std::ostream& out);

struct GradCheckResult {
    double max_rel_err = 0.0;
    double tolerance = 1e-6;
    bool pass = false;
};

// Analytic gradients of parallel retention vs central finite differences
// (h = 1e-5) on a random linear readout; N=6, Dk=Dv=4, gamma in {0.5, 0.9},
// three seeds derived from `seed`.
GradCheckResult run_gradient_check(std::uint64_t seed);

}  // namespace vir::verify
